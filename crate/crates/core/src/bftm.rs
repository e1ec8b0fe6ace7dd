//! Breadth-first topology morphing.
//!
//! Every round the peers rebuild a fresh sparse graph by a
//! breadth-first sweep: the lowest-id unfinished node picks up to `M` peers it
//! has no similarity with yet, each picked peer is queued and does the same.
//! Every new edge costs two proxy downloads (one per endpoint). With a new
//! proxy in hand, a node pairs it against itself and every proxy it has ever
//! cached, so similarities also appear between peers that never exchanged
//! proxies. Newly computed tuples are broadcast and absorbed by every node at
//! the end of the round. The loop ends when the matrix is complete.

use std::collections::VecDeque;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NodeId, Topology};
use crate::proxy::{pair_similarity, Proxy, SimilarityValue};
use crate::rng::stream_rng;

/// Wire size of one similarity tuple: two 8-byte ids and one 8-byte float.
pub const DEFAULT_TUPLE_BYTES: u64 = 24;

const DUMP_MAGIC: &[u8; 4] = b"BFTM";
const DUMP_VERSION: u32 = 1;

/// Per-round degree `M = ceil(log2 n)`, at least 1.
pub fn default_degree(n: usize) -> usize {
    if n <= 2 {
        1
    } else {
        (usize::BITS - (n - 1).leading_zeros()) as usize
    }
}

/// Idealized number of rounds `ceil(sqrt(n) / log2 n)`.
pub fn expected_rounds(n: usize) -> usize {
    assert!(n >= 2, "expected_rounds needs n >= 2");
    let nf = n as f64;
    (nf.sqrt() / nf.log2()).ceil() as usize
}

/// One broadcast similarity, canonical `x < y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTuple {
    pub x: NodeId,
    pub y: NodeId,
    pub theta: SimilarityValue,
}

impl SimilarityTuple {
    pub fn new(a: usize, b: usize, theta: SimilarityValue) -> Self {
        let (x, y) = if a < b { (a, b) } else { (b, a) };
        SimilarityTuple {
            x: NodeId(x),
            y: NodeId(y),
            theta,
        }
    }
}

/// Symmetric pairwise similarity table with fill tracking.
///
/// Known pairs live in a bitset over the upper triangle. In counting mode no
/// values are stored and every known entry reads as 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    known: Vec<u64>,
    values: Option<Vec<f64>>,
    row_fill: Vec<u32>,
    filled: usize,
}

impl SimilarityMatrix {
    pub fn new(n: usize) -> Self {
        let mut m = SimilarityMatrix::counting(n);
        m.values = Some(vec![0.0; m.total_pairs()]);
        m
    }

    /// Matrix that only tracks which pairs are known.
    pub fn counting(n: usize) -> Self {
        let pairs = n * n.saturating_sub(1) / 2;
        SimilarityMatrix {
            n,
            known: vec![0; pairs.div_ceil(64)],
            values: None,
            row_fill: vec![0; n],
            filled: 0,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_counting(&self) -> bool {
        self.values.is_none()
    }

    pub fn total_pairs(&self) -> usize {
        self.n * self.n.saturating_sub(1) / 2
    }

    pub fn fill(&self) -> usize {
        self.filled
    }

    pub fn row_fill(&self, v: usize) -> usize {
        self.row_fill[v] as usize
    }

    pub fn is_row_complete(&self, v: usize) -> bool {
        self.row_fill[v] as usize + 1 == self.n
    }

    pub fn is_complete(&self) -> bool {
        self.filled == self.total_pairs()
    }

    #[inline]
    fn index(&self, a: usize, b: usize) -> usize {
        let (x, y) = if a < b { (a, b) } else { (b, a) };
        x * (2 * self.n - x - 1) / 2 + (y - x - 1)
    }

    #[inline]
    pub fn contains(&self, a: usize, b: usize) -> bool {
        if a == b {
            return false;
        }
        let i = self.index(a, b);
        self.known[i >> 6] & (1 << (i & 63)) != 0
    }

    pub fn get(&self, a: usize, b: usize) -> Option<SimilarityValue> {
        if !self.contains(a, b) {
            return None;
        }
        let v = match &self.values {
            Some(vals) => vals[self.index(a, b)],
            None => 0.0,
        };
        Some(SimilarityValue::new(v).expect("stored values are valid"))
    }

    /// Records a pair; returns false when it was already known.
    pub fn insert(&mut self, a: usize, b: usize, theta: SimilarityValue) -> Result<bool> {
        if a == b || a >= self.n || b >= self.n {
            return Err(Error::InvalidNode {
                node: a.max(b),
                n: self.n,
            });
        }
        let i = self.index(a, b);
        let (word, bit) = (i >> 6, 1u64 << (i & 63));
        if self.known[word] & bit != 0 {
            return Ok(false);
        }
        self.known[word] |= bit;
        if let Some(vals) = &mut self.values {
            vals[i] = theta.get();
        }
        self.row_fill[a] += 1;
        self.row_fill[b] += 1;
        self.filled += 1;
        Ok(true)
    }

    pub fn absorb(&mut self, tuples: &[SimilarityTuple]) -> Result<usize> {
        let mut added = 0;
        for t in tuples {
            added += usize::from(self.insert(t.x.0, t.y.0, t.theta)?);
        }
        Ok(added)
    }

    /// Mean of all known values, `None` if nothing is known.
    pub fn known_mean(&self) -> Option<f64> {
        if self.filled == 0 {
            return None;
        }
        let mut sum = 0.0;
        for x in 0..self.n {
            for y in x + 1..self.n {
                if let Some(v) = self.get(x, y) {
                    sum += v.get();
                }
            }
        }
        Some(sum / self.filled as f64)
    }

    /// Dense `n x n` rows with a zero diagonal; unknown entries take the mean of known ones.
    pub fn dense_rows(&self) -> Vec<Vec<f64>> {
        let fallback = if self.is_complete() {
            0.0
        } else {
            self.known_mean().unwrap_or(0.0)
        };
        (0..self.n)
            .map(|x| {
                (0..self.n)
                    .map(|y| {
                        if x == y {
                            0.0
                        } else {
                            self.get(x, y).map_or(fallback, SimilarityValue::get)
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Binary dump: `"BFTM"`, `u32` version, `u64` n, then one `f64` per pair in
    /// canonical `(x < y)` order, NaN where unknown. All little-endian.
    pub fn write_dump<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&DUMP_VERSION.to_le_bytes())?;
        w.write_all(&(self.n as u64).to_le_bytes())?;
        for x in 0..self.n {
            for y in x + 1..self.n {
                let v = self.get(x, y).map_or(f64::NAN, SimilarityValue::get);
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_dump<R: Read>(r: &mut R) -> Result<SimilarityMatrix> {
        let decode = |e: std::io::Error| Error::Decode(e.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(decode)?;
        if &magic != DUMP_MAGIC {
            return Err(Error::Decode("bad matrix magic".into()));
        }
        let mut word4 = [0u8; 4];
        r.read_exact(&mut word4).map_err(decode)?;
        let version = u32::from_le_bytes(word4);
        if version != DUMP_VERSION {
            return Err(Error::Decode(format!(
                "unsupported matrix dump version {version}"
            )));
        }
        let mut word8 = [0u8; 8];
        r.read_exact(&mut word8).map_err(decode)?;
        let n = u64::from_le_bytes(word8) as usize;
        let mut m = SimilarityMatrix::new(n);
        for x in 0..n {
            for y in x + 1..n {
                r.read_exact(&mut word8).map_err(decode)?;
                let v = f64::from_le_bytes(word8);
                if !v.is_nan() {
                    m.insert(x, y, SimilarityValue::new(v)?)?;
                }
            }
        }
        Ok(m)
    }
}

/// Computes the similarity of a pair of nodes on demand.
pub trait PairEvaluator {
    /// Called with `x < y`.
    fn evaluate(&self, x: usize, y: usize) -> Result<SimilarityValue>;
}

/// Evaluates pairs from the nodes' proxies with [`pair_similarity`].
pub struct ProxyEvaluator<'a> {
    pub proxies: &'a [Proxy],
}

impl PairEvaluator for ProxyEvaluator<'_> {
    fn evaluate(&self, x: usize, y: usize) -> Result<SimilarityValue> {
        pair_similarity(&self.proxies[x], &self.proxies[y])
    }
}

/// Stand-in for accounting runs: every pair is worth 0.
pub struct ZeroEvaluator;

impl PairEvaluator for ZeroEvaluator {
    fn evaluate(&self, _x: usize, _y: usize) -> Result<SimilarityValue> {
        Ok(SimilarityValue::default())
    }
}

impl<F> PairEvaluator for F
where
    F: Fn(usize, usize) -> Result<SimilarityValue>,
{
    fn evaluate(&self, x: usize, y: usize) -> Result<SimilarityValue> {
        self(x, y)
    }
}

/// A peer's morphing state. The proxy itself lives in the shared proxy store
/// indexed by `id`; `cache` lists every peer whose proxy this node holds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MorphNodeState {
    pub id: NodeId,
    cache: Vec<NodeId>,
}

impl MorphNodeState {
    pub fn new(id: NodeId) -> Self {
        MorphNodeState {
            id,
            cache: Vec::new(),
        }
    }

    pub fn cache(&self) -> &[NodeId] {
        &self.cache
    }

    /// Peers whose similarity with this node is not yet in `matrix`, ascending.
    pub fn missing(&self, matrix: &SimilarityMatrix) -> Vec<NodeId> {
        (0..matrix.n())
            .filter(|&u| u != self.id.0 && !matrix.contains(self.id.0, u))
            .map(NodeId)
            .collect()
    }
}

pub fn initial_states(n: usize) -> Vec<MorphNodeState> {
    (0..n).map(|i| MorphNodeState::new(NodeId(i))).collect()
}

/// Communication counters for one round (or a sum of rounds).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: usize,
    pub proxy_downloads: u64,
    pub proxy_bytes: u64,
    pub broadcast_tuples: u64,
    pub broadcast_bytes: u64,
    /// Known pairs after the round.
    pub matrix_fill: u64,
}

impl RoundStats {
    pub const CSV_HEADER: &'static str =
        "round,proxy_downloads,proxy_bytes,broadcast_tuples,broadcast_bytes,matrix_fill";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.round,
            self.proxy_downloads,
            self.proxy_bytes,
            self.broadcast_tuples,
            self.broadcast_bytes,
            self.matrix_fill
        )
    }

    /// Sums counters; `round` becomes the number of rounds and `matrix_fill` the last fill.
    pub fn total(rounds: &[RoundStats]) -> RoundStats {
        let mut t = RoundStats::default();
        for r in rounds {
            t.round += 1;
            t.proxy_downloads += r.proxy_downloads;
            t.proxy_bytes += r.proxy_bytes;
            t.broadcast_tuples += r.broadcast_tuples;
            t.broadcast_bytes += r.broadcast_bytes;
            t.matrix_fill = r.matrix_fill;
        }
        t
    }
}

pub fn stats_csv(rounds: &[RoundStats]) -> String {
    let mut out = String::from(RoundStats::CSV_HEADER);
    out.push('\n');
    for r in rounds {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Parameters of a single round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundParams {
    /// 1-based index of the round being run.
    pub round: usize,
    pub degree: usize,
    pub proxy_bytes: u64,
    pub tuple_bytes: u64,
    /// Keep the round's tuples in the outcome. Accounting runs at large `n` skip this.
    pub record_tuples: bool,
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    /// Morph graph built this round.
    pub topology: Topology,
    /// Newly computed tuples in computation order (empty when not recorded).
    pub tuples: Vec<SimilarityTuple>,
    /// Of those, the ones computed without a download between the two peers.
    pub indirect: usize,
    pub stats: RoundStats,
}

struct RoundWork<'a, E: PairEvaluator> {
    matrix: &'a mut SimilarityMatrix,
    states: &'a mut [MorphNodeState],
    evaluator: &'a E,
    tuples: Vec<SimilarityTuple>,
    record: bool,
    computed: u64,
    indirect: usize,
}

impl<E: PairEvaluator> RoundWork<'_, E> {
    fn compute(&mut self, a: usize, b: usize, direct: bool) -> Result<()> {
        if a == b || self.matrix.contains(a, b) {
            return Ok(());
        }
        let (x, y) = if a < b { (a, b) } else { (b, a) };
        let theta = self.evaluator.evaluate(x, y)?;
        self.matrix.insert(x, y, theta)?;
        self.computed += 1;
        if !direct {
            self.indirect += 1;
        }
        if self.record {
            self.tuples.push(SimilarityTuple::new(x, y, theta));
        }
        Ok(())
    }

    /// `v` and `u` exchange proxies; both pair the newcomer against everything they hold.
    fn connect(&mut self, v: usize, u: usize) -> Result<()> {
        self.compute(v, u, true)?;
        for i in 0..self.states[v].cache.len() {
            let c = self.states[v].cache[i].0;
            self.compute(c, u, false)?;
        }
        for i in 0..self.states[u].cache.len() {
            let c = self.states[u].cache[i].0;
            self.compute(c, v, false)?;
        }
        self.states[v].cache.push(NodeId(u));
        self.states[u].cache.push(NodeId(v));
        Ok(())
    }
}

const REJECTION_TRIES: usize = 32;

/// Draws the next neighbor for `v`: a uniformly random peer whose pair with `v`
/// is unknown and whose degree this round is below the cap.
fn draw_candidate<R: Rng>(
    v: usize,
    matrix: &SimilarityMatrix,
    degree: &[usize],
    cap: usize,
    fallback: &mut Option<Vec<usize>>,
    rng: &mut R,
) -> Option<usize> {
    let n = matrix.n();
    let eligible = |u: usize| u != v && degree[u] < cap && !matrix.contains(v, u);
    if fallback.is_none() {
        for _ in 0..REJECTION_TRIES {
            let u = rng.random_range(0..n);
            if eligible(u) {
                return Some(u);
            }
        }
        let mut pool: Vec<usize> = (0..n).filter(|&u| eligible(u)).collect();
        pool.shuffle(rng);
        *fallback = Some(pool);
    }
    let pool = fallback.as_mut().expect("fallback pool initialized");
    while let Some(u) = pool.pop() {
        if eligible(u) {
            return Some(u);
        }
    }
    None
}

/// Runs one morphing round over the shared `matrix`.
///
/// Nodes are processed in breadth-first order starting from the lowest-id node
/// whose row is incomplete; when the queue drains, the sweep restarts from the
/// next such node that has not been processed this round. Each processed node
/// tops its degree in the new graph up to `params.degree`, skipping candidates
/// that already reached the cap.
pub fn bftm_round<E: PairEvaluator>(
    states: &mut [MorphNodeState],
    matrix: &mut SimilarityMatrix,
    evaluator: &E,
    params: &RoundParams,
    seed: u64,
) -> Result<RoundOutcome> {
    let n = matrix.n();
    if states.len() != n {
        return Err(crate::error::shape_err(n, states.len()));
    }
    if matrix.is_complete() {
        return Err(Error::AlreadyComplete);
    }
    let cap = params.degree.max(1);
    let mut rng = stream_rng(seed, params.round as u64);
    let mut topology = Topology::empty(n);
    let mut degree = vec![0usize; n];
    let mut processed = vec![false; n];
    let mut queue = VecDeque::new();
    let mut cursor = 0usize;
    let mut work = RoundWork {
        matrix,
        states,
        evaluator,
        tuples: Vec::new(),
        record: params.record_tuples,
        computed: 0,
        indirect: 0,
    };
    loop {
        let v = match queue.pop_front() {
            Some(v) => v,
            None => {
                while cursor < n && (processed[cursor] || work.matrix.is_row_complete(cursor)) {
                    cursor += 1;
                }
                if cursor == n {
                    break;
                }
                cursor
            }
        };
        if processed[v] {
            continue;
        }
        processed[v] = true;
        if work.matrix.is_row_complete(v) {
            continue;
        }
        let mut fallback = None;
        while degree[v] < cap {
            let Some(u) = draw_candidate(v, work.matrix, &degree, cap, &mut fallback, &mut rng)
            else {
                break;
            };
            topology.add_edge(v, u);
            degree[v] += 1;
            degree[u] += 1;
            work.connect(v, u)?;
            queue.push_back(u);
        }
    }
    let downloads = 2 * topology.edge_count() as u64;
    let stats = RoundStats {
        round: params.round,
        proxy_downloads: downloads,
        proxy_bytes: downloads * params.proxy_bytes,
        broadcast_tuples: work.computed,
        broadcast_bytes: work.computed * params.tuple_bytes,
        matrix_fill: work.matrix.fill() as u64,
    };
    Ok(RoundOutcome {
        topology,
        tuples: work.tuples,
        indirect: work.indirect,
        stats,
    })
}

/// Morphing run configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MorphConfig {
    /// Per-round degree; `None` means `ceil(log2 n)`.
    pub degree: Option<usize>,
    pub max_rounds: usize,
    pub proxy_bytes: u64,
    pub tuple_bytes: u64,
    pub seed: u64,
}

impl MorphConfig {
    pub fn new(seed: u64) -> Self {
        MorphConfig {
            degree: None,
            max_rounds: 1000,
            proxy_bytes: 0,
            tuple_bytes: DEFAULT_TUPLE_BYTES,
            seed,
        }
    }

    pub fn degree_for(&self, n: usize) -> usize {
        self.degree.unwrap_or_else(|| default_degree(n))
    }
}

/// Per-round statistics plus each node's row fill after every round.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MorphHistory {
    pub n: usize,
    pub stats: Vec<RoundStats>,
    pub row_fill: Vec<Vec<u32>>,
}

impl MorphHistory {
    pub fn rounds(&self) -> usize {
        self.stats.len()
    }

    pub fn totals(&self) -> RoundStats {
        RoundStats::total(&self.stats)
    }
}

/// Number of peers paired with `node` at the end of each recorded round.
pub fn encounter_counts(history: &MorphHistory, node: NodeId) -> Result<Vec<usize>> {
    if history.row_fill.is_empty() {
        return Err(Error::InvalidInput("empty morphing history".into()));
    }
    if node.0 >= history.n {
        return Err(Error::InvalidNode {
            node: node.0,
            n: history.n,
        });
    }
    Ok(history
        .row_fill
        .iter()
        .map(|r| r[node.0] as usize)
        .collect())
}

/// Drives rounds until the matrix is complete or `max_rounds` is reached.
pub fn run_rounds<E: PairEvaluator>(
    matrix: &mut SimilarityMatrix,
    evaluator: &E,
    config: &MorphConfig,
    mut on_round: impl FnMut(&RoundOutcome),
) -> Result<MorphHistory> {
    let n = matrix.n();
    let mut states = initial_states(n);
    let mut history = MorphHistory {
        n,
        ..Default::default()
    };
    let degree = config.degree_for(n);
    while !matrix.is_complete() && history.stats.len() < config.max_rounds {
        let params = RoundParams {
            round: history.stats.len() + 1,
            degree,
            proxy_bytes: config.proxy_bytes,
            tuple_bytes: config.tuple_bytes,
            record_tuples: !matrix.is_counting(),
        };
        let outcome = bftm_round(&mut states, matrix, evaluator, &params, config.seed)?;
        log::debug!(
            "round {}: {} edges, {} tuples, fill {}/{}",
            params.round,
            outcome.topology.edge_count(),
            outcome.stats.broadcast_tuples,
            matrix.fill(),
            matrix.total_pairs()
        );
        on_round(&outcome);
        history.stats.push(outcome.stats);
        history
            .row_fill
            .push((0..n).map(|v| matrix.row_fill(v) as u32).collect());
    }
    Ok(history)
}

/// Phase I over real proxies. Returns the (possibly partial) matrix and history.
pub fn run_morphing(
    proxies: &[Proxy],
    config: &MorphConfig,
) -> Result<(SimilarityMatrix, MorphHistory)> {
    if proxies.is_empty() {
        return Err(Error::InvalidInput(
            "morphing needs at least one node".into(),
        ));
    }
    if config.max_rounds == 0 {
        return Err(Error::Config("max_rounds must be at least 1".into()));
    }
    let mut matrix = SimilarityMatrix::new(proxies.len());
    let evaluator = ProxyEvaluator { proxies };
    let history = run_rounds(&mut matrix, &evaluator, config, |_| {})?;
    Ok((matrix, history))
}

/// Result of a counting-only run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountingReport {
    pub n: usize,
    pub degree: usize,
    pub rounds: usize,
    pub totals: RoundStats,
    pub per_round: Vec<RoundStats>,
}

impl AccountingReport {
    pub fn per_node_proxy_bytes(&self) -> f64 {
        self.totals.proxy_bytes as f64 / self.n as f64
    }
}

/// Full protocol with zero-cost proxies: only counts and bytes are tracked.
pub fn accounting_run(
    n: usize,
    degree: usize,
    proxy_bytes: u64,
    tuple_bytes: u64,
    seed: u64,
) -> Result<AccountingReport> {
    if n < 2 {
        return Err(Error::InvalidInput("accounting needs n >= 2".into()));
    }
    let config = MorphConfig {
        degree: Some(degree),
        max_rounds: usize::MAX,
        proxy_bytes,
        tuple_bytes,
        seed,
    };
    let mut matrix = SimilarityMatrix::counting(n);
    let history = run_rounds(&mut matrix, &ZeroEvaluator, &config, |_| {})?;
    Ok(AccountingReport {
        n,
        degree,
        rounds: history.rounds(),
        totals: history.totals(),
        per_round: history.stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;

    fn brute_force(proxies: &[Proxy]) -> SimilarityMatrix {
        let mut m = SimilarityMatrix::new(proxies.len());
        for x in 0..proxies.len() {
            for y in x + 1..proxies.len() {
                m.insert(x, y, pair_similarity(&proxies[x], &proxies[y]).unwrap())
                    .unwrap();
            }
        }
        m
    }

    fn toy_proxies(n: usize) -> Vec<Proxy> {
        (0..n)
            .map(|i| {
                let rows: Vec<Vec<f64>> = (0..3)
                    .map(|r| vec![(i * 7 + r) as f64 % 5.0, (i * 3 + 2 * r) as f64 % 4.0, 0.5])
                    .collect();
                Proxy::new(Matrix::from_rows(&rows).unwrap()).unwrap()
            })
            .collect()
    }

    #[test]
    fn degree_and_expected_rounds() {
        assert_eq!(default_degree(2), 1);
        assert_eq!(default_degree(3), 2);
        assert_eq!(default_degree(64), 6);
        assert_eq!(default_degree(65), 7);
        assert_eq!(default_degree(10_000), 14);
        assert_eq!(expected_rounds(1 << 16), 16);
        assert_eq!(expected_rounds(4), 1);
        assert_eq!(expected_rounds(10_000), 8);
    }

    #[test]
    fn triangular_indexing_covers_every_pair_once() {
        let n = 9;
        let m = SimilarityMatrix::new(n);
        let mut seen = vec![false; m.total_pairs()];
        for x in 0..n {
            for y in x + 1..n {
                let i = m.index(x, y);
                assert_eq!(i, m.index(y, x));
                assert!(!seen[i]);
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn three_nodes_finish_in_one_round() {
        let proxies = toy_proxies(3);
        let mut matrix = SimilarityMatrix::new(3);
        let mut states = initial_states(3);
        let params = RoundParams {
            round: 1,
            degree: 2,
            proxy_bytes: 10,
            tuple_bytes: 24,
            record_tuples: true,
        };
        let evaluator = ProxyEvaluator { proxies: &proxies };
        let out = bftm_round(&mut states, &mut matrix, &evaluator, &params, 0).unwrap();
        assert!(matrix.is_complete());
        let edges: Vec<(usize, usize)> = out
            .topology
            .edges()
            .iter()
            .map(|(a, b)| (a.0, b.0))
            .collect();
        assert_eq!(edges, vec![(0, 1), (0, 2)]);
        assert_eq!(out.tuples.len(), 3);
        assert_eq!(out.indirect, 1);
        assert!(!out.topology.has_edge(1, 2));
        assert_eq!(out.stats.proxy_downloads, 4);
        assert_eq!(out.stats.broadcast_bytes, 72);
        assert_eq!(matrix, brute_force(&proxies));
        assert_eq!(
            bftm_round(&mut states, &mut matrix, &evaluator, &params, 0).unwrap_err(),
            Error::AlreadyComplete
        );
    }

    #[test]
    fn single_node_is_trivially_complete() {
        let proxies = toy_proxies(1);
        let (m, h) = run_morphing(&proxies, &MorphConfig::new(3)).unwrap();
        assert!(m.is_complete());
        assert_eq!(h.rounds(), 0);
    }

    #[test]
    fn two_nodes_one_round() {
        let r = accounting_run(2, 1, 100, 24, 0).unwrap();
        assert_eq!(r.rounds, 1);
        assert_eq!(r.totals.proxy_downloads, 2);
        assert_eq!(r.totals.broadcast_tuples, 1);
        assert_eq!(r.totals.proxy_bytes, 200);
    }

    #[test]
    fn dump_round_trip_keeps_partial_entries() {
        let mut m = SimilarityMatrix::new(4);
        m.insert(0, 3, SimilarityValue::new(0.25).unwrap()).unwrap();
        m.insert(2, 1, SimilarityValue::new(1.5).unwrap()).unwrap();
        let mut bytes = Vec::new();
        m.write_dump(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"BFTM");
        assert_eq!(bytes.len(), 4 + 4 + 8 + 8 * 6);
        let back = SimilarityMatrix::read_dump(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, m);
        bytes[0] = b'X';
        assert!(SimilarityMatrix::read_dump(&mut bytes.as_slice()).is_err());
    }

    #[test]
    fn imputation_uses_known_mean() {
        let mut m = SimilarityMatrix::new(3);
        m.insert(0, 1, SimilarityValue::new(1.0).unwrap()).unwrap();
        m.insert(0, 2, SimilarityValue::new(3.0).unwrap()).unwrap();
        let rows = m.dense_rows();
        assert_eq!(rows[1][2], 2.0);
        assert_eq!(rows[2][1], 2.0);
        assert_eq!(rows[0], vec![0.0, 1.0, 3.0]);
    }

    #[test]
    fn encounter_counts_rejects_bad_input() {
        let h = MorphHistory::default();
        assert!(encounter_counts(&h, NodeId(0)).is_err());
        let r = run_morphing(&toy_proxies(5), &MorphConfig::new(1))
            .unwrap()
            .1;
        assert!(matches!(
            encounter_counts(&r, NodeId(9)),
            Err(Error::InvalidNode { .. })
        ));
        let last = *encounter_counts(&r, NodeId(2)).unwrap().last().unwrap();
        assert_eq!(last, 4);
    }
}
