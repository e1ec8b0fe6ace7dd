//! Peer selection: cluster nodes by their similarity rows, then arrange them
//! into a ring of cliques.
//!
//! The heterogeneous plan puts one sampled node from every cluster into each
//! clique. The homogeneous baseline uses the same clique sizes but fills each
//! clique from a single cluster.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bftm::SimilarityMatrix;
use crate::error::{Error, Result};
use crate::graph::{ring_of_cliques, BridgeRule, Clique, NodeId, Topology};
use crate::rng::stream_rng;

pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub k: usize,
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after each Lloyd iteration.
    pub inertia_history: Vec<f64>,
}

impl ClusterAssignment {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }

    /// Members of each cluster in ascending id order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (v, &c) in self.labels.iter().enumerate() {
            out[c].push(v);
        }
        out
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seeds<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            while d2[chosen] == 0.0 {
                chosen -= 1;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd's k-means over arbitrary points with k-means++ seeding.
///
/// Empty clusters are repaired by moving the point farthest from its centroid
/// (taken from a cluster with at least two members) into them.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterAssignment> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::InvalidK { k, n });
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(crate::error::shape_err(dim, "ragged rows"));
    }
    let mut rng = stream_rng(seed, 0x6b6d);
    let mut centroids = plus_plus_seeds(points, k, &mut rng);
    let mut labels = vec![0usize; n];
    let mut inertia_history = Vec::new();
    for _ in 0..KMEANS_MAX_ITERS {
        let mut dist = vec![0.0; n];
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            labels[i] = c;
            dist[i] = d;
        }
        repair_empty(&mut labels, &mut dist, &centroids, points, k);

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&labels) {
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let mean: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&mean, &centroids[c]).sqrt());
            centroids[c] = mean;
        }
        let inertia: f64 = points
            .iter()
            .zip(&labels)
            .map(|(p, &c)| sq_dist(p, &centroids[c]))
            .sum();
        inertia_history.push(inertia);
        if shift < KMEANS_TOLERANCE {
            break;
        }
    }
    Ok(ClusterAssignment {
        k,
        labels,
        centroids,
        inertia_history,
    })
}

fn repair_empty(
    labels: &mut [usize],
    dist: &mut [f64],
    centroids: &[Vec<f64>],
    points: &[Vec<f64>],
    k: usize,
) {
    loop {
        let mut counts = vec![0usize; k];
        for &c in labels.iter() {
            counts[c] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let donor = (0..labels.len())
            .filter(|&i| counts[labels[i]] >= 2)
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if dist[b] >= dist[i] => Some(b),
                _ => Some(i),
            })
            .expect("k <= n leaves a cluster with two members");
        labels[donor] = empty;
        dist[donor] = sq_dist(&points[donor], &centroids[empty]);
    }
}

/// k-means over the matrix rows (zero diagonal, unknown entries imputed).
pub fn kmeans_rows(matrix: &SimilarityMatrix, k: usize, seed: u64) -> Result<ClusterAssignment> {
    if k == 0 || k > matrix.n() {
        return Err(Error::InvalidK { k, n: matrix.n() });
    }
    kmeans(&matrix.dense_rows(), k, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanMode {
    Hetero,
    Homo,
}

/// Cliques chosen for training plus the nodes left out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CliquePlan {
    pub k: usize,
    pub labels: Vec<usize>,
    pub cliques: Vec<Clique>,
    pub excluded: Vec<NodeId>,
    pub mode: PlanMode,
    /// Indices of cliques that had to mix clusters (homogeneous plans only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mixed: Vec<usize>,
}

impl CliquePlan {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn participants(&self) -> BTreeSet<NodeId> {
        self.cliques
            .iter()
            .flat_map(|c| c.members.iter().copied())
            .collect()
    }

    pub fn participant_count(&self) -> usize {
        self.cliques.iter().map(Clique::len).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<CliquePlan> {
        serde_json::from_str(text).map_err(|e| Error::Decode(e.to_string()))
    }

    pub fn topology(&self) -> Result<Topology> {
        ring_of_cliques(self.n(), &self.cliques, BridgeRule::Staggered)
    }

    fn with_cliques(
        assignment: &ClusterAssignment,
        cliques: Vec<Clique>,
        mode: PlanMode,
        mixed: Vec<usize>,
    ) -> Self {
        let used: BTreeSet<usize> = cliques
            .iter()
            .flat_map(|c| c.members.iter().map(|m| m.0))
            .collect();
        CliquePlan {
            k: assignment.k,
            labels: assignment.labels.clone(),
            excluded: (0..assignment.n())
                .filter(|v| !used.contains(v))
                .map(NodeId)
                .collect(),
            cliques,
            mode,
            mixed,
        }
    }
}

fn validate_assignment(a: &ClusterAssignment) -> Result<()> {
    if a.k == 0 || a.labels.iter().any(|&l| l >= a.k) {
        return Err(Error::InvalidInput("cluster labels out of range".into()));
    }
    Ok(())
}

/// Cross-cluster cliquing.
///
/// Draws up to `samples_per_cluster` nodes uniformly from each cluster; clique
/// `j` takes the `j`-th draw of every cluster that still has one, so no clique
/// holds two nodes of the same cluster. The cliques are chained into a ring.
pub fn ccc_heterogeneous(
    assignment: &ClusterAssignment,
    samples_per_cluster: usize,
    seed: u64,
) -> Result<(CliquePlan, Topology)> {
    validate_assignment(assignment)?;
    if samples_per_cluster == 0 {
        return Err(Error::InvalidInput(
            "samples_per_cluster must be at least 1".into(),
        ));
    }
    let mut rng = stream_rng(seed, 0xccc);
    let draws: Vec<Vec<usize>> = assignment
        .members()
        .into_iter()
        .map(|mut members| {
            members.shuffle(&mut rng);
            members.truncate(samples_per_cluster);
            members
        })
        .collect();
    let depth = draws.iter().map(Vec::len).max().unwrap_or(0);
    if depth < 2 {
        return Err(Error::CannotBuild(format!(
            "sampling yields {depth} clique(s); a ring needs at least 2"
        )));
    }
    let cliques: Vec<Clique> = (0..depth)
        .map(|j| Clique::new(draws.iter().filter_map(|d| d.get(j).copied())))
        .collect();
    let plan = CliquePlan::with_cliques(assignment, cliques, PlanMode::Hetero, Vec::new());
    let topology = plan.topology()?;
    Ok((plan, topology))
}

/// Single-cluster baseline with the same clique sizes as `plan`.
///
/// Clusters are consumed in id order: each clique is taken from the current
/// cluster if it still holds enough nodes, otherwise from the next cluster that
/// does. Within a cluster, nodes already participating in `plan` come first (in
/// plan order) so the baseline mostly rearranges the same peers. When no single
/// cluster can fill a clique it is filled from the largest remainders and
/// recorded in `mixed`.
pub fn homogeneous_baseline(
    assignment: &ClusterAssignment,
    plan: &CliquePlan,
    seed: u64,
) -> Result<(CliquePlan, Topology)> {
    validate_assignment(assignment)?;
    if plan.cliques.len() < 2 {
        return Err(Error::CannotBuild(
            "reference plan has fewer than 2 cliques".into(),
        ));
    }
    let mut rng = stream_rng(seed, 0x40e0);
    let members = assignment.members();
    let in_plan: Vec<usize> = plan
        .cliques
        .iter()
        .flat_map(|c| c.members.iter().map(|m| m.0))
        .collect();
    let mut pools: Vec<Vec<usize>> = members
        .iter()
        .enumerate()
        .map(|(c, all)| {
            let mut front: Vec<usize> = in_plan
                .iter()
                .copied()
                .filter(|&v| assignment.labels[v] == c)
                .collect();
            let mut rest: Vec<usize> = all.iter().copied().filter(|v| !front.contains(v)).collect();
            rest.shuffle(&mut rng);
            front.extend(rest);
            front.reverse();
            front
        })
        .collect();

    let k = assignment.k;
    let mut current = 0usize;
    let mut cliques = Vec::with_capacity(plan.cliques.len());
    let mut mixed = Vec::new();
    for (j, reference) in plan.cliques.iter().enumerate() {
        let size = reference.len();
        let source = (0..k)
            .map(|o| (current + o) % k)
            .find(|&c| pools[c].len() >= size);
        let clique = match source {
            Some(c) => {
                current = c;
                let at = pools[c].len() - size;
                let mut taken = pools[c].split_off(at);
                taken.reverse();
                taken
            }
            None => {
                let mut taken = Vec::with_capacity(size);
                while taken.len() < size {
                    let Some(c) = (0..k)
                        .filter(|&c| !pools[c].is_empty())
                        .max_by_key(|&c| (pools[c].len(), std::cmp::Reverse(c)))
                    else {
                        break;
                    };
                    taken.push(pools[c].pop().expect("non-empty pool"));
                }
                if taken.is_empty() {
                    break;
                }
                mixed.push(j);
                taken
            }
        };
        cliques.push(Clique::new(clique));
    }
    if cliques.len() < 2 {
        return Err(Error::CannotBuild("baseline ran out of nodes".into()));
    }
    let plan = CliquePlan::with_cliques(assignment, cliques, PlanMode::Homo, mixed);
    let topology = plan.topology()?;
    Ok((plan, topology))
}

/// Sum over participants `v` of `(1/deg v) * sum_{u ~ v} theta(v,u)` plus the
/// total pairwise divergence among `v`'s neighbors. Higher means more diverse
/// neighborhoods. Only a scorer: nothing searches over it.
pub fn objective_score(plan: &CliquePlan, t: &Topology, matrix: &SimilarityMatrix) -> Result<f64> {
    let theta = |a: usize, b: usize| -> Result<f64> {
        matrix
            .get(a, b)
            .map(|v| v.get())
            .ok_or(Error::IncompleteMatrix(a.min(b), a.max(b)))
    };
    let mut total = 0.0;
    for v in plan.participants() {
        let v = v.0;
        if v >= t.n() || v >= matrix.n() {
            return Err(Error::InvalidNode {
                node: v,
                n: t.n().min(matrix.n()),
            });
        }
        let nbrs: Vec<usize> = t.neighbor_indices(v).collect();
        if nbrs.is_empty() {
            continue;
        }
        let mut direct = 0.0;
        for &u in &nbrs {
            direct += theta(v, u)?;
        }
        let mut among = 0.0;
        for (i, &a) in nbrs.iter().enumerate() {
            for &b in &nbrs[i + 1..] {
                among += theta(a, b)?;
            }
        }
        total += direct / nbrs.len() as f64 + among;
    }
    Ok(total)
}
