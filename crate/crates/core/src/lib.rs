//! Proxy-based topological pre-processing for decentralized learning.
//!
//! Three stages share this crate:
//!
//! * [`bftm`] morphs a sparse peer graph round by round until every pair of
//!   peers has a proxy similarity ([`proxy`]).
//! * [`selection`] clusters the similarity rows and builds a ring of cliques
//!   whose neighborhoods span clusters, plus the single-cluster baseline.
//! * [`learn`] trains softmax-regression peers on the final [`graph`] with
//!   neighborhood averaging.

pub mod bftm;
pub mod error;
pub mod graph;
pub mod learn;
pub mod matrix;
pub mod proxy;
pub mod rng;
pub mod selection;

pub use error::{Error, Result};
