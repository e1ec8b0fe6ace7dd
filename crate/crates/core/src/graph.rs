//! Undirected peer graphs: the random sparse graph, the ring of cliques used for
//! training, and the partition splitter that cuts a ring into independent chains.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense peer index in `[0, n)`, stable across all phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<usize> for NodeId {
    fn from(i: usize) -> Self {
        NodeId(i)
    }
}

/// An ordered group of distinct peers that end up pairwise connected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Clique {
    pub members: Vec<NodeId>,
}

impl Clique {
    pub fn new(members: impl IntoIterator<Item = usize>) -> Self {
        Clique {
            members: members.into_iter().map(NodeId).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Undirected simple graph over `n` nodes.
///
/// Edges are stored as symmetric adjacency sets so `neighbors(a)` contains `b`
/// iff `neighbors(b)` contains `a`. Self-loops and duplicate edges are rejected
/// at insertion. When the graph was built from cliques they are kept alongside
/// for serialization and partition splitting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    n: usize,
    adj: Vec<BTreeSet<usize>>,
    cliques: Vec<Clique>,
}

#[derive(Serialize, Deserialize)]
struct TopologyDoc {
    n: usize,
    edges: Vec<[usize; 2]>,
    cliques: Vec<Vec<usize>>,
}

impl Topology {
    /// Graph with `n` nodes and no edges.
    pub fn empty(n: usize) -> Self {
        Topology {
            n,
            adj: vec![BTreeSet::new(); n],
            cliques: Vec::new(),
        }
    }

    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut t = Topology::empty(n);
        for (a, b) in edges {
            t.check(a)?;
            t.check(b)?;
            if a == b {
                return Err(Error::InvalidInput(format!("self-loop on node {a}")));
            }
            t.add_edge(a, b);
        }
        Ok(t)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn cliques(&self) -> &[Clique] {
        &self.cliques
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(BTreeSet::len).sum::<usize>() / 2
    }

    /// Edges as `(a, b)` with `a < b`, sorted lexicographically.
    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        let mut out = Vec::with_capacity(self.edge_count());
        for (a, nbrs) in self.adj.iter().enumerate() {
            for &b in nbrs.range(a + 1..) {
                out.push((NodeId(a), NodeId(b)));
            }
        }
        out
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        a < self.n && self.adj[a].contains(&b)
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adj.get(v).map_or(0, BTreeSet::len)
    }

    /// Adjacency of `v`.
    pub fn neighbors(&self, v: NodeId) -> Result<BTreeSet<NodeId>> {
        self.check(v.0)?;
        Ok(self.adj[v.0].iter().copied().map(NodeId).collect())
    }

    /// Borrowing iterator over the adjacency of `v` in ascending order. Panics if `v >= n`.
    pub fn neighbor_indices(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.adj[v].iter().copied()
    }

    /// Inserts an undirected edge; returns false for self-loops and existing edges.
    pub(crate) fn add_edge(&mut self, a: usize, b: usize) -> bool {
        if a == b || self.adj[a].contains(&b) {
            return false;
        }
        self.adj[a].insert(b);
        self.adj[b].insert(a);
        true
    }

    fn remove_edge(&mut self, a: usize, b: usize) -> bool {
        let removed = self.adj[a].remove(&b);
        self.adj[b].remove(&a);
        removed
    }

    fn check(&self, v: usize) -> Result<()> {
        if v >= self.n {
            Err(Error::InvalidNode { node: v, n: self.n })
        } else {
            Ok(())
        }
    }

    /// Whether a breadth-first search from the first of `nodes` reaches every node in `nodes`.
    /// An empty set counts as connected.
    pub fn is_connected_over(&self, nodes: &[NodeId]) -> bool {
        let Some(start) = nodes.first() else {
            return true;
        };
        let reached = self.bfs(start.0);
        nodes.iter().all(|v| reached[v.0])
    }

    fn bfs(&self, start: usize) -> Vec<bool> {
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(v) = queue.pop_front() {
            for &u in &self.adj[v] {
                if !seen[u] {
                    seen[u] = true;
                    queue.push_back(u);
                }
            }
        }
        seen
    }

    /// Connected components restricted to nodes with at least one edge, each sorted.
    pub fn components(&self) -> Vec<Vec<NodeId>> {
        let mut seen = vec![false; self.n];
        let mut out = Vec::new();
        for v in 0..self.n {
            if seen[v] || self.adj[v].is_empty() {
                continue;
            }
            let reached = self.bfs(v);
            let comp: Vec<NodeId> = (0..self.n).filter(|&u| reached[u]).map(NodeId).collect();
            for u in &comp {
                seen[u.0] = true;
            }
            out.push(comp);
        }
        out
    }

    /// Union of several graphs over the same node set. Cliques are concatenated.
    pub fn union(parts: &[Topology]) -> Result<Topology> {
        let n = parts
            .first()
            .map(Topology::n)
            .ok_or_else(|| Error::InvalidInput("union of zero topologies".into()))?;
        let mut out = Topology::empty(n);
        for part in parts {
            if part.n != n {
                return Err(crate::error::shape_err(n, part.n));
            }
            for (a, b) in part.edges() {
                out.add_edge(a.0, b.0);
            }
            out.cliques.extend(part.cliques.iter().cloned());
        }
        Ok(out)
    }

    /// Byte-stable JSON document `{"n", "edges", "cliques"}` with sorted edges.
    pub fn to_json(&self) -> String {
        let doc = TopologyDoc {
            n: self.n,
            edges: self.edges().into_iter().map(|(a, b)| [a.0, b.0]).collect(),
            cliques: self
                .cliques
                .iter()
                .map(|c| c.members.iter().map(|m| m.0).collect())
                .collect(),
        };
        serde_json::to_string(&doc).expect("topology serializes")
    }

    pub fn from_json(text: &str) -> Result<Topology> {
        let doc: TopologyDoc =
            serde_json::from_str(text).map_err(|e| Error::Decode(e.to_string()))?;
        let mut t = Topology::from_edges(doc.n, doc.edges.into_iter().map(|[a, b]| (a, b)))?;
        t.cliques = doc.cliques.into_iter().map(Clique::new).collect();
        for c in &t.cliques {
            for m in &c.members {
                t.check(m.0)?;
            }
        }
        Ok(t)
    }
}

/// Sparse random graph where every node has degree at most `m`.
///
/// Nodes are visited in id order; each samples the neighbors it still needs
/// uniformly without replacement among nodes below the degree cap. A node left
/// isolated at the end (every other node already capped) is spliced into a
/// random existing edge, or for `m == 1` attached to a random node, which then
/// exceeds the cap by one.
pub fn random_regular_like(n: usize, m: usize, seed: u64) -> Result<Topology> {
    if m == 0 || m >= n {
        return Err(Error::InvalidDegree { n, degree: m });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Topology::empty(n);
    for v in 0..n {
        let need = m.saturating_sub(t.degree(v));
        if need == 0 {
            continue;
        }
        let candidates: Vec<usize> = (0..n)
            .filter(|&u| u != v && t.degree(u) < m && !t.has_edge(v, u))
            .collect();
        for &u in candidates.choose_multiple(&mut rng, need) {
            t.add_edge(v, u);
        }
    }
    for v in 0..n {
        if t.degree(v) > 0 {
            continue;
        }
        let edges: Vec<(usize, usize)> = t.edges().into_iter().map(|(a, b)| (a.0, b.0)).collect();
        if m >= 2 {
            if let Some(&(a, b)) = edges.choose(&mut rng) {
                t.remove_edge(a, b);
                t.add_edge(v, a);
                t.add_edge(v, b);
                continue;
            }
        }
        let others: Vec<usize> = (0..n).filter(|&u| u != v).collect();
        let &u = others.choose(&mut rng).expect("n >= 2");
        t.add_edge(v, u);
    }
    Ok(t)
}

/// Which member of each clique carries the bridge to the next clique.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeRule {
    /// Clique `j` links its member at `j mod len_j` to clique `j+1`'s member at
    /// `(j+1) mod len_{j+1}`, spreading bridge load across members.
    #[default]
    Staggered,
    /// Always the first member of each clique.
    FirstMember,
}

impl BridgeRule {
    fn endpoints(self, cliques: &[Clique], j: usize) -> (usize, usize) {
        let k = cliques.len();
        let next = (j + 1) % k;
        let (from, to) = match self {
            BridgeRule::Staggered => (j % cliques[j].len(), (j + 1) % cliques[next].len()),
            BridgeRule::FirstMember => (0, 0),
        };
        (cliques[j].members[from].0, cliques[next].members[to].0)
    }
}

fn validate_cliques(n: usize, cliques: &[Clique]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for (j, c) in cliques.iter().enumerate() {
        if c.is_empty() {
            return Err(Error::InvalidPlan(format!("clique {j} is empty")));
        }
        for m in &c.members {
            if m.0 >= n {
                return Err(Error::InvalidNode { node: m.0, n });
            }
            if !seen.insert(m.0) {
                return Err(Error::InvalidPlan(format!(
                    "node {} appears in more than one clique slot",
                    m.0
                )));
            }
        }
    }
    Ok(())
}

/// Completes every clique internally and chains clique `j` to clique `(j+1) mod K`
/// with one bridge edge. Node ids keep their meaning in a graph of `n` nodes;
/// nodes outside every clique stay isolated.
pub fn ring_of_cliques(n: usize, cliques: &[Clique], rule: BridgeRule) -> Result<Topology> {
    if cliques.len() < 2 {
        return Err(Error::InvalidPlan(format!(
            "a ring needs at least 2 cliques, got {}",
            cliques.len()
        )));
    }
    validate_cliques(n, cliques)?;
    let mut t = Topology::empty(n);
    for c in cliques {
        for (i, a) in c.members.iter().enumerate() {
            for b in &c.members[i + 1..] {
                t.add_edge(a.0, b.0);
            }
        }
    }
    for j in 0..cliques.len() {
        let (a, b) = rule.endpoints(cliques, j);
        t.add_edge(a, b);
    }
    t.cliques = cliques.to_vec();
    Ok(t)
}

/// Cuts a ring of `cliques` into `p` chains of consecutive cliques whose clique
/// counts differ by at most one (longer chains first).
///
/// Every edge whose endpoints land in different chains is dropped; for a ring
/// built by [`ring_of_cliques`] those are exactly the `p` boundary bridges.
pub fn split_partitions(t: &Topology, cliques: &[Clique], p: usize) -> Result<Vec<Topology>> {
    let k = cliques.len();
    if p < 2 || p > k {
        return Err(Error::InvalidPartition { p, cliques: k });
    }
    validate_cliques(t.n, cliques)?;
    let mut owner = vec![usize::MAX; t.n];
    let mut chains: Vec<Vec<Clique>> = Vec::with_capacity(p);
    let mut next = 0;
    for part in 0..p {
        let len = k / p + usize::from(part < k % p);
        let chain = cliques[next..next + len].to_vec();
        for c in &chain {
            for m in &c.members {
                owner[m.0] = part;
            }
        }
        chains.push(chain);
        next += len;
    }
    let mut parts: Vec<Topology> = chains
        .into_iter()
        .map(|chain| Topology {
            n: t.n,
            adj: vec![BTreeSet::new(); t.n],
            cliques: chain,
        })
        .collect();
    for (a, b) in t.edges() {
        let (oa, ob) = (owner[a.0], owner[b.0]);
        if oa == ob && oa != usize::MAX {
            parts[oa].add_edge(a.0, b.0);
        }
    }
    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn degree_counts(t: &Topology) -> Vec<usize> {
        let mut deg = vec![0; t.n()];
        for (a, b) in t.edges() {
            deg[a.0] += 1;
            deg[b.0] += 1;
        }
        deg
    }

    #[test]
    fn two_nodes_degree_one_is_single_edge() {
        let t = random_regular_like(2, 1, 0).unwrap();
        assert_eq!(t.edges(), vec![(NodeId(0), NodeId(1))]);
    }

    #[test]
    fn random_graph_respects_degree_cap() {
        for (n, m, seed) in [(8, 3, 42), (1024, 10, 7), (33, 4, 1), (50, 2, 9)] {
            let t = random_regular_like(n, m, seed).unwrap();
            let deg = degree_counts(&t);
            assert!(
                deg.iter().all(|&d| (1..=m).contains(&d)),
                "n={n} m={m}: {deg:?}"
            );
            assert!(t.edge_count() <= n * m / 2);
        }
    }

    #[test]
    fn random_graph_is_seed_deterministic() {
        let a = random_regular_like(8, 3, 42).unwrap();
        let b = random_regular_like(8, 3, 42).unwrap();
        assert_eq!(a, b);
        let c = random_regular_like(64, 3, 43).unwrap();
        assert_ne!(random_regular_like(64, 3, 42).unwrap(), c);
    }

    #[test]
    fn random_graph_rejects_bad_degree() {
        assert_eq!(
            random_regular_like(4, 4, 0),
            Err(Error::InvalidDegree { n: 4, degree: 4 })
        );
        assert!(random_regular_like(4, 0, 0).is_err());
    }

    #[test]
    fn odd_matching_attaches_leftover() {
        let t = random_regular_like(3, 1, 5).unwrap();
        assert!(degree_counts(&t).iter().all(|&d| d >= 1));
    }

    fn ring_edge_oracle(sizes: &[usize]) -> usize {
        sizes.iter().map(|s| s * (s - 1) / 2).sum::<usize>() + sizes.len()
    }

    fn cliques_of(sizes: &[usize]) -> Vec<Clique> {
        let mut next = 0;
        sizes
            .iter()
            .map(|&s| {
                let c = Clique::new(next..next + s);
                next += s;
                c
            })
            .collect()
    }

    #[test]
    fn ring_of_singletons_collapses() {
        let t = ring_of_cliques(2, &cliques_of(&[1, 1]), BridgeRule::Staggered).unwrap();
        assert_eq!(t.edge_count(), 1);
    }

    #[test]
    fn ring_edge_counts_match_formula() {
        for sizes in [&[3, 3, 3, 3][..], &[3, 3, 2], &[4, 1, 5, 2, 2]] {
            let total: usize = sizes.iter().sum();
            let t = ring_of_cliques(total, &cliques_of(sizes), BridgeRule::Staggered).unwrap();
            assert_eq!(t.edge_count(), ring_edge_oracle(sizes), "{sizes:?}");
            let members: Vec<NodeId> = (0..total).map(NodeId).collect();
            assert!(t.is_connected_over(&members));
        }
        assert_eq!(ring_edge_oracle(&[3, 3, 3, 3]), 16);
        assert_eq!(ring_edge_oracle(&[3, 3, 2]), 10);
    }

    #[test]
    fn ring_rejects_overlap_and_short_rings() {
        let overlapping = vec![Clique::new([0, 1]), Clique::new([1, 2])];
        assert!(matches!(
            ring_of_cliques(3, &overlapping, BridgeRule::Staggered),
            Err(Error::InvalidPlan(_))
        ));
        assert!(ring_of_cliques(3, &[Clique::new([0, 1, 2])], BridgeRule::Staggered).is_err());
    }

    #[test]
    fn bridge_node_sees_clique_plus_bridge() {
        let cliques = cliques_of(&[3, 3, 2]);
        let t = ring_of_cliques(8, &cliques, BridgeRule::Staggered).unwrap();
        // clique 0 bridges from its member 0 (node 0) to clique 1's member 1 (node 4);
        // clique 2 bridges from member 0 (node 6) back to clique 0's member 0 (node 0).
        let nbrs = t.neighbors(NodeId(0)).unwrap();
        let expected: BTreeSet<NodeId> = [1, 2, 4, 6].into_iter().map(NodeId).collect();
        assert_eq!(nbrs, expected);
        let plain = t.neighbors(NodeId(1)).unwrap();
        assert_eq!(plain, [0, 2].into_iter().map(NodeId).collect());
    }

    #[test]
    fn neighbors_edge_cases() {
        let t = Topology::from_edges(2, [(0, 1)]).unwrap();
        assert_eq!(t.neighbors(NodeId(0)).unwrap(), BTreeSet::from([NodeId(1)]));
        let e = Topology::empty(1);
        assert!(e.neighbors(NodeId(0)).unwrap().is_empty());
        assert_eq!(
            e.neighbors(NodeId(3)),
            Err(Error::InvalidNode { node: 3, n: 1 })
        );
    }

    #[test]
    fn split_ring_of_four() {
        let cliques = cliques_of(&[3, 3, 3, 3]);
        let t = ring_of_cliques(12, &cliques, BridgeRule::Staggered).unwrap();
        let halves = split_partitions(&t, &cliques, 2).unwrap();
        assert_eq!(halves.len(), 2);
        for h in &halves {
            assert_eq!(h.cliques().len(), 2);
            assert_eq!(h.edge_count(), 3 + 3 + 1);
        }
        let quarters = split_partitions(&t, &cliques, 4).unwrap();
        assert!(quarters.iter().all(|q| q.edge_count() == 3));
        assert_eq!(
            split_partitions(&t, &cliques, 5),
            Err(Error::InvalidPartition { p: 5, cliques: 4 })
        );
    }

    #[test]
    fn split_ring_of_seven_is_balanced() {
        let cliques = cliques_of(&[2; 7]);
        let t = ring_of_cliques(14, &cliques, BridgeRule::Staggered).unwrap();
        let parts = split_partitions(&t, &cliques, 3).unwrap();
        let counts: Vec<usize> = parts.iter().map(|p| p.cliques().len()).collect();
        assert_eq!(counts, vec![3, 2, 2]);
        let kept: usize = parts.iter().map(Topology::edge_count).sum();
        assert_eq!(t.edge_count() - kept, 3);
    }

    #[test]
    fn json_is_sorted_and_round_trips() {
        let t = ring_of_cliques(5, &cliques_of(&[2, 3]), BridgeRule::Staggered).unwrap();
        let text = t.to_json();
        assert!(text.starts_with(r#"{"n":5,"edges":[[0,1],"#));
        let back = Topology::from_json(&text).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_json(), text);
    }
}
