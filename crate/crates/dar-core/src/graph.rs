//! Synthetic flow-network generation and dataset serialization.
//!
//! Two graph families are supported:
//!
//! - **two-community**: two equal Erdős–Rényi blocks with dense intra-block
//!   edges (p = 0.75) and sparse inter-block edges (p = 0.05). Capacities are
//!   drawn as integers from {0,…,10} and min-max normalised into [0, 1];
//!   edges whose capacity normalises to zero are removed.
//! - **bipartite**: two equal sides with left→right candidate edges kept with
//!   probability 1/2 (capacity 1), plus a super-source feeding every left
//!   node and a super-sink drained by every right node (capacity 1). Maximum
//!   flow on these instances equals maximum bipartite matching.
//!
//! Generation is a pure function of `(n, seed)`: repeated calls produce
//! byte-identical networks. Instances without a source→sink path are
//! rejected and resampled from a derived substream, capped at
//! [`MAX_GENERATION_ATTEMPTS`].

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algo::{self, Trajectory};
use crate::seed::mix;

/// Node index within a [`FlowNetwork`].
pub type NodeId = usize;

/// Intra-community directed edge probability for the two-community family.
pub const P_INTRA: f64 = 0.75;
/// Inter-community directed edge probability for the two-community family.
pub const P_INTER: f64 = 0.05;
/// Probability that a left→right candidate edge of a bipartite instance
/// survives capacity sampling.
pub const P_BIPARTITE_EDGE: f64 = 0.5;
/// Largest raw integer capacity drawn for two-community instances.
pub const MAX_RAW_CAPACITY: i64 = 10;
/// How many resampling attempts a generator makes before giving up on
/// producing a connected instance.
pub const MAX_GENERATION_ATTEMPTS: usize = 1000;

/// Graph family tag carried by every instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "two_community")]
    TwoCommunity,
    #[serde(rename = "bipartite")]
    Bipartite,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Family::TwoCommunity => write!(f, "two_community"),
            Family::Bipartite => write!(f, "bipartite"),
        }
    }
}

impl std::str::FromStr for Family {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, GraphError> {
        match s {
            "two_community" => Ok(Family::TwoCommunity),
            "bipartite" => Ok(Family::Bipartite),
            other => Err(GraphError::UnknownFamily(other.to_string())),
        }
    }
}

/// Errors produced by generation and dataset i/o.
#[derive(Debug, Error)]
pub enum GraphError {
    #[error("graph size must be an even number of at least 4 nodes, got {0}")]
    InvalidSize(usize),
    #[error("unknown graph family {0:?}")]
    UnknownFamily(String),
    #[error("capacity sampling degenerate: every edge drew raw value {0}")]
    DegenerateCapacities(i64),
    #[error("no positive-capacity edges left after sampling")]
    NoEdges,
    #[error("no source/sink pair with a connecting path exists")]
    NoSourceSinkPair,
    #[error("failed to generate a connected instance after {0} attempts")]
    GenerationFailure(usize),
    #[error("dataset item {index}: {reason}")]
    InvalidItem { index: usize, reason: String },
    #[error("dataset i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset parse: {0}")]
    Parse(#[from] serde_json::Error),
}

/// A directed flow network with dense capacity and path-weight matrices.
///
/// Capacities satisfy `cap[i][j] > 0` exactly for pairs in `edges`; the
/// weight matrix `w` stores the Bellman-Ford path-selection weight of each
/// edge (and is zero off-edge). Matrices are row-major `n × n`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowNetwork {
    pub n: usize,
    pub s: NodeId,
    pub t: NodeId,
    pub family: Family,
    /// Directed edges, sorted lexicographically.
    pub edges: Vec<(NodeId, NodeId)>,
    /// Dense capacity matrix, row-major.
    pub cap: Vec<f64>,
    /// Dense path-weight matrix, row-major.
    pub w: Vec<f64>,
}

impl FlowNetwork {
    /// Builds a network from an explicit edge list `(i, j, capacity, weight)`.
    ///
    /// Intended for tests and hand-written instances; generated graphs come
    /// from [`generate_network`].
    pub fn from_edges(
        n: usize,
        family: Family,
        s: NodeId,
        t: NodeId,
        edges: &[(NodeId, NodeId, f64, f64)],
    ) -> Self {
        let mut net = FlowNetwork::empty(n, family);
        net.s = s;
        net.t = t;
        for &(i, j, c, w) in edges {
            net.cap[i * n + j] = c;
            net.w[i * n + j] = w;
        }
        net.rebuild_edge_list();
        net
    }

    fn empty(n: usize, family: Family) -> Self {
        FlowNetwork {
            n,
            s: 0,
            t: n.saturating_sub(1),
            family,
            edges: Vec::new(),
            cap: vec![0.0; n * n],
            w: vec![0.0; n * n],
        }
    }

    #[inline]
    pub fn cap(&self, i: NodeId, j: NodeId) -> f64 {
        self.cap[i * self.n + j]
    }

    #[inline]
    pub fn weight(&self, i: NodeId, j: NodeId) -> f64 {
        self.w[i * self.n + j]
    }

    #[inline]
    pub fn is_edge(&self, i: NodeId, j: NodeId) -> bool {
        self.cap[i * self.n + j] > 0.0
    }

    /// Nodes reachable from `from` along positive-capacity edges.
    pub fn reachable(&self, from: NodeId) -> Vec<bool> {
        let mut seen = vec![false; self.n];
        let mut queue = std::collections::VecDeque::new();
        seen[from] = true;
        queue.push_back(from);
        while let Some(u) = queue.pop_front() {
            for v in 0..self.n {
                if !seen[v] && self.is_edge(u, v) {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen
    }

    /// Community of a node in a two-community instance (0 or 1).
    ///
    /// Nodes `0..n/2` form community 0, the rest community 1.
    pub fn community_of(&self, i: NodeId) -> usize {
        if i < self.n / 2 {
            0
        } else {
            1
        }
    }

    fn rebuild_edge_list(&mut self) {
        self.edges.clear();
        for i in 0..self.n {
            for j in 0..self.n {
                if self.cap[i * self.n + j] > 0.0 {
                    self.edges.push((i, j));
                }
            }
        }
    }
}

/// Samples the directed structure of a two-community instance.
///
/// Every ordered pair inside a community becomes an edge with probability
/// [`P_INTRA`], every ordered cross-community pair with probability
/// [`P_INTER`]. Placeholder capacities are 1.0 (replaced by
/// [`sample_capacities`]); path weights are drawn uniformly from [0, 1).
/// Structures in which no community-0 node reaches community 1 are
/// resampled from derived substreams.
pub fn gen_two_community(n: usize, seed: u64) -> Result<FlowNetwork, GraphError> {
    if n < 4 || n % 2 != 0 {
        return Err(GraphError::InvalidSize(n));
    }
    for attempt in 0..MAX_GENERATION_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, attempt as u64));
        let mut net = FlowNetwork::empty(n, Family::TwoCommunity);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let p = if same_community(n, i, j) { P_INTRA } else { P_INTER };
                if rng.gen::<f64>() < p {
                    net.cap[i * n + j] = 1.0;
                    net.w[i * n + j] = rng.gen::<f64>();
                }
            }
        }
        net.rebuild_edge_list();
        if cross_community_path_exists(&net) {
            return Ok(net);
        }
    }
    Err(GraphError::GenerationFailure(MAX_GENERATION_ATTEMPTS))
}

fn same_community(n: usize, i: NodeId, j: NodeId) -> bool {
    (i < n / 2) == (j < n / 2)
}

fn cross_community_path_exists(net: &FlowNetwork) -> bool {
    let half = net.n / 2;
    (0..half).any(|s| {
        let seen = net.reachable(s);
        (half..net.n).any(|t| seen[t])
    })
}

/// Samples the structure of a bipartite matching instance.
///
/// The `n` requested nodes split into a left and a right side of `n/2` each;
/// on top of those, a super-source `s` (feeding every left node) and a
/// super-sink `t` (drained by every right node) are appended, so the
/// returned network has `n + 2` nodes with `s = n` and `t = n + 1`. All
/// left→right pairs are emitted as candidate edges; [`sample_capacities`]
/// later keeps each with probability [`P_BIPARTITE_EDGE`]. The two sides
/// themselves contain no edges.
pub fn gen_bipartite(n: usize, seed: u64) -> Result<FlowNetwork, GraphError> {
    if n < 4 || n % 2 != 0 {
        return Err(GraphError::InvalidSize(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0));
    let half = n / 2;
    let total = n + 2;
    let mut net = FlowNetwork::empty(total, Family::Bipartite);
    net.s = n;
    net.t = n + 1;
    for l in 0..half {
        net.cap[net.s * total + l] = 1.0;
        net.w[net.s * total + l] = rng.gen::<f64>();
    }
    for l in 0..half {
        for r in half..n {
            net.cap[l * total + r] = 1.0;
            net.w[l * total + r] = rng.gen::<f64>();
        }
    }
    for r in half..n {
        net.cap[r * total + net.t] = 1.0;
        net.w[r * total + net.t] = rng.gen::<f64>();
    }
    net.rebuild_edge_list();
    Ok(net)
}

/// Min-max normalises raw integer capacities into [0, 1].
///
/// Returns `None` when all raw values are equal (the denominator would be
/// zero), which callers treat as a resampling signal.
pub(crate) fn min_max_normalize(raw: &[i64]) -> Option<Vec<f64>> {
    let lo = *raw.iter().min()?;
    let hi = *raw.iter().max()?;
    if lo == hi {
        return None;
    }
    let span = (hi - lo) as f64;
    Some(raw.iter().map(|&r| (r - lo) as f64 / span).collect())
}

/// Draws capacities for a generated structure.
///
/// Two-community: each edge draws an integer from {0,…,10}; capacities are
/// min-max normalised per graph and edges that normalise to exactly zero are
/// removed (for the usual case where some edge drew 0, this removes exactly
/// the zero draws). Bipartite: each left→right candidate edge keeps capacity
/// 1 with probability [`P_BIPARTITE_EDGE`] and is removed otherwise;
/// super-source and super-sink edges always keep capacity 1.
///
/// Errors signal that the caller should resample the structure: every raw
/// draw equal (degenerate min-max) or no surviving edge.
pub fn sample_capacities(net: &FlowNetwork, seed: u64) -> Result<FlowNetwork, GraphError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 1));
    let mut out = net.clone();
    match net.family {
        Family::TwoCommunity => {
            let raw: Vec<i64> = net
                .edges
                .iter()
                .map(|_| rng.gen_range(0..=MAX_RAW_CAPACITY))
                .collect();
            let normalized =
                min_max_normalize(&raw).ok_or(GraphError::DegenerateCapacities(raw[0]))?;
            for (&(i, j), &c) in net.edges.iter().zip(normalized.iter()) {
                out.cap[i * net.n + j] = c;
                if c == 0.0 {
                    out.w[i * net.n + j] = 0.0;
                }
            }
        }
        Family::Bipartite => {
            for &(i, j) in &net.edges {
                if i == net.s || j == net.t {
                    continue;
                }
                if rng.gen::<f64>() >= P_BIPARTITE_EDGE {
                    out.cap[i * net.n + j] = 0.0;
                    out.w[i * net.n + j] = 0.0;
                }
            }
        }
    }
    out.rebuild_edge_list();
    if out.edges.is_empty() {
        return Err(GraphError::NoEdges);
    }
    Ok(out)
}

/// Chooses a source and sink for a sampled network.
///
/// Two-community: the source is drawn uniformly from community-0 nodes that
/// reach community 1, the sink uniformly from community-1 nodes reachable
/// from that source. Bipartite: the super-source and super-sink are fixed by
/// construction and only checked for connectivity.
pub fn select_source_sink(net: &FlowNetwork, seed: u64) -> Result<(NodeId, NodeId), GraphError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 2));
    match net.family {
        Family::TwoCommunity => {
            let half = net.n / 2;
            let candidates: Vec<(NodeId, Vec<NodeId>)> = (0..half)
                .filter_map(|s| {
                    let seen = net.reachable(s);
                    let sinks: Vec<NodeId> = (half..net.n).filter(|&t| seen[t]).collect();
                    if sinks.is_empty() {
                        None
                    } else {
                        Some((s, sinks))
                    }
                })
                .collect();
            if candidates.is_empty() {
                return Err(GraphError::NoSourceSinkPair);
            }
            let (s, sinks) = &candidates[rng.gen_range(0..candidates.len())];
            let t = sinks[rng.gen_range(0..sinks.len())];
            Ok((*s, t))
        }
        Family::Bipartite => {
            let seen = net.reachable(net.s);
            if !seen[net.t] {
                return Err(GraphError::NoSourceSinkPair);
            }
            Ok((net.s, net.t))
        }
    }
}

/// Generates one fully-specified instance: structure, capacities, source and
/// sink, retrying from derived substreams until connected (capped at
/// [`MAX_GENERATION_ATTEMPTS`]).
pub fn generate_network(family: Family, n: usize, seed: u64) -> Result<FlowNetwork, GraphError> {
    for attempt in 0..MAX_GENERATION_ATTEMPTS {
        let attempt_seed = mix(seed, 0x10_0000 + attempt as u64);
        let structure = match family {
            Family::TwoCommunity => gen_two_community(n, attempt_seed)?,
            Family::Bipartite => gen_bipartite(n, attempt_seed)?,
        };
        let sampled = match sample_capacities(&structure, attempt_seed) {
            Ok(net) => net,
            Err(GraphError::DegenerateCapacities(_)) | Err(GraphError::NoEdges) => continue,
            Err(e) => return Err(e),
        };
        match select_source_sink(&sampled, attempt_seed) {
            Ok((s, t)) => {
                let mut net = sampled;
                net.s = s;
                net.t = t;
                return Ok(net);
            }
            Err(GraphError::NoSourceSinkPair) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(GraphError::GenerationFailure(MAX_GENERATION_ATTEMPTS))
}

/// One dataset entry: a network plus the ground-truth execution trajectory
/// of the exact solver on it.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetItem {
    pub network: FlowNetwork,
    pub trajectory: Trajectory,
}

/// A named split of generated instances.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: String,
    pub seed: u64,
    pub items: Vec<DatasetItem>,
}

/// Generates `count` instances with trajectories for one split.
pub fn gen_dataset(
    family: Family,
    n: usize,
    count: usize,
    split: &str,
    seed: u64,
) -> Result<Dataset, GraphError> {
    let mut items = Vec::with_capacity(count);
    for k in 0..count {
        let network = generate_network(family, n, mix(seed, k as u64))?;
        let solved = algo::ford_fulkerson(&network).map_err(|e| GraphError::InvalidItem {
            index: k,
            reason: format!("exact solver failed on generated instance: {e}"),
        })?;
        items.push(DatasetItem {
            network,
            trajectory: solved.trajectory,
        });
    }
    Ok(Dataset {
        split: split.to_string(),
        seed,
        items,
    })
}

// --- JSON schema -----------------------------------------------------------
//
// Dataset files are a single JSON object:
//   { "split": str, "seed": int, "items": [item, ...] }
// with each item
//   { "n": int, "family": str, "s": int, "t": int,
//     "edges": [[i, j, cap, w], ...], "trajectory": {...} }
// and each trajectory
//   { "T": int, "steps": [{"pred": [int], "flow": [[f64]]}, ...],
//     "final_flow": [[f64]], "cut": [int] }.

#[derive(Serialize, Deserialize)]
struct DatasetRepr {
    split: String,
    seed: u64,
    items: Vec<ItemRepr>,
}

#[derive(Serialize, Deserialize)]
struct ItemRepr {
    n: usize,
    family: Family,
    s: usize,
    t: usize,
    edges: Vec<(usize, usize, f64, f64)>,
    trajectory: TrajectoryRepr,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRepr {
    #[serde(rename = "T")]
    t_len: usize,
    steps: Vec<StepRepr>,
    final_flow: Vec<Vec<f64>>,
    cut: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct StepRepr {
    pred: Vec<usize>,
    flow: Vec<Vec<f64>>,
}

fn matrix_to_rows(n: usize, m: &[f64]) -> Vec<Vec<f64>> {
    (0..n).map(|i| m[i * n..(i + 1) * n].to_vec()).collect()
}

fn rows_to_matrix(index: usize, n: usize, rows: &[Vec<f64>]) -> Result<Vec<f64>, GraphError> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(GraphError::InvalidItem {
            index,
            reason: format!("flow matrix is not {n}x{n}"),
        });
    }
    Ok(rows.iter().flatten().copied().collect())
}

impl Dataset {
    fn to_repr(&self) -> DatasetRepr {
        DatasetRepr {
            split: self.split.clone(),
            seed: self.seed,
            items: self
                .items
                .iter()
                .map(|item| {
                    let net = &item.network;
                    ItemRepr {
                        n: net.n,
                        family: net.family,
                        s: net.s,
                        t: net.t,
                        edges: net
                            .edges
                            .iter()
                            .map(|&(i, j)| (i, j, net.cap(i, j), net.weight(i, j)))
                            .collect(),
                        trajectory: TrajectoryRepr {
                            t_len: item.trajectory.len(),
                            steps: item
                                .trajectory
                                .steps
                                .iter()
                                .map(|st| StepRepr {
                                    pred: st.pred.clone(),
                                    flow: matrix_to_rows(net.n, &st.flow),
                                })
                                .collect(),
                            final_flow: matrix_to_rows(net.n, &item.trajectory.final_flow),
                            cut: item.trajectory.cut.clone(),
                        },
                    }
                })
                .collect(),
        }
    }

    fn from_repr(repr: DatasetRepr) -> Result<Self, GraphError> {
        let mut items = Vec::with_capacity(repr.items.len());
        for (index, ir) in repr.items.into_iter().enumerate() {
            let invalid = |reason: String| GraphError::InvalidItem { index, reason };
            if ir.s >= ir.n || ir.t >= ir.n || ir.s == ir.t {
                return Err(invalid(format!(
                    "source/sink out of range: s={}, t={}, n={}",
                    ir.s, ir.t, ir.n
                )));
            }
            let mut net = FlowNetwork::empty(ir.n, ir.family);
            net.s = ir.s;
            net.t = ir.t;
            for &(i, j, c, w) in &ir.edges {
                if i >= ir.n || j >= ir.n {
                    return Err(invalid(format!("edge ({i}, {j}) out of range for n={}", ir.n)));
                }
                if !(c > 0.0 && c.is_finite()) {
                    return Err(invalid(format!(
                        "edge ({i}, {j}) has non-positive capacity {c}"
                    )));
                }
                net.cap[i * ir.n + j] = c;
                net.w[i * ir.n + j] = w;
            }
            net.rebuild_edge_list();
            if ir.trajectory.steps.len() != ir.trajectory.t_len {
                return Err(invalid(format!(
                    "trajectory length field {} disagrees with {} recorded steps",
                    ir.trajectory.t_len,
                    ir.trajectory.steps.len()
                )));
            }
            if ir.trajectory.cut.len() != ir.n {
                return Err(invalid("cut label vector length != n".to_string()));
            }
            let mut steps = Vec::with_capacity(ir.trajectory.steps.len());
            for st in &ir.trajectory.steps {
                if st.pred.len() != ir.n {
                    return Err(invalid("predecessor vector length != n".to_string()));
                }
                steps.push(crate::algo::TrajectoryStep {
                    pred: st.pred.clone(),
                    flow: rows_to_matrix(index, ir.n, &st.flow)?,
                });
            }
            items.push(DatasetItem {
                network: net,
                trajectory: Trajectory {
                    steps,
                    final_flow: rows_to_matrix(index, ir.n, &ir.trajectory.final_flow)?,
                    cut: ir.trajectory.cut,
                },
            });
        }
        Ok(Dataset {
            split: repr.split,
            seed: repr.seed,
            items,
        })
    }

    pub fn to_json(&self) -> Result<String, GraphError> {
        Ok(serde_json::to_string(&self.to_repr())?)
    }

    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        Self::from_repr(serde_json::from_str(text)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<(), GraphError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self, GraphError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_or_odd_sizes() {
        assert!(matches!(gen_two_community(2, 0), Err(GraphError::InvalidSize(2))));
        assert!(matches!(gen_two_community(7, 0), Err(GraphError::InvalidSize(7))));
        assert!(matches!(gen_bipartite(3, 0), Err(GraphError::InvalidSize(3))));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_two_community(16, 7).unwrap();
        let b = gen_two_community(16, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_network(Family::TwoCommunity, 16, 7).unwrap();
        let d = generate_network(Family::TwoCommunity, 16, 7).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn different_seeds_differ() {
        let a = gen_two_community(16, 0).unwrap();
        let b = gen_two_community(16, 1).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn two_community_structure_is_valid() {
        let net = gen_two_community(16, 3).unwrap();
        assert_eq!(net.n, 16);
        for &(i, j) in &net.edges {
            assert_ne!(i, j, "self loop at {i}");
            assert!(net.is_edge(i, j));
        }
        // Capacity matrix and edge list agree.
        for i in 0..net.n {
            for j in 0..net.n {
                assert_eq!(net.cap(i, j) > 0.0, net.edges.contains(&(i, j)));
            }
        }
    }

    /// Monte-Carlo check of the intra-community edge density: over many
    /// seeds the mean directed density inside a block must sit near the
    /// sampling probability 0.75.
    #[test]
    fn intra_density_matches_sampling_probability() {
        let n = 16;
        let half = n / 2;
        let pairs_per_graph = 2 * half * (half - 1);
        let mut total_edges = 0usize;
        let seeds = 1000;
        for seed in 0..seeds {
            let net = gen_two_community(n, seed).unwrap();
            total_edges += net
                .edges
                .iter()
                .filter(|&&(i, j)| same_community(n, i, j))
                .count();
        }
        let density = total_edges as f64 / (seeds as f64 * pairs_per_graph as f64);
        assert!(
            (0.70..=0.80).contains(&density),
            "intra density {density} outside [0.70, 0.80]"
        );
    }

    #[test]
    fn min_max_normalization_example() {
        assert_eq!(
            min_max_normalize(&[2, 10, 6]).unwrap(),
            vec![0.0, 1.0, 0.5]
        );
        // All-equal draws cannot be normalised and signal a resample.
        assert_eq!(min_max_normalize(&[7, 7, 7]), None);
    }

    #[test]
    fn sampled_capacities_stay_in_unit_range_and_match_edges() {
        for seed in 0..20 {
            let net = generate_network(Family::TwoCommunity, 16, seed).unwrap();
            assert!(!net.edges.is_empty());
            for i in 0..net.n {
                for j in 0..net.n {
                    let c = net.cap(i, j);
                    assert!((0.0..=1.0).contains(&c), "capacity {c} out of range");
                    assert_eq!(c > 0.0, net.edges.contains(&(i, j)));
                }
            }
        }
    }

    #[test]
    fn bipartite_structure_is_two_sided() {
        let net = gen_bipartite(4, 1).unwrap();
        // 4 requested nodes split 2/2, plus super-source and super-sink.
        assert_eq!(net.n, 6);
        assert_eq!((net.s, net.t), (4, 5));
        for &(i, j) in &net.edges {
            let left = |v: NodeId| v < 2;
            let right = |v: NodeId| (2..4).contains(&v);
            let ok = (i == net.s && left(j))
                || (left(i) && right(j))
                || (right(i) && j == net.t);
            assert!(ok, "edge ({i}, {j}) violates the bipartite layout");
        }
    }

    #[test]
    fn bipartite_capacities_are_unit() {
        let net = generate_network(Family::Bipartite, 8, 5).unwrap();
        for &(i, j) in &net.edges {
            assert_eq!(net.cap(i, j), 1.0);
        }
        // Terminal edges always survive sampling.
        for l in 0..4 {
            assert!(net.is_edge(net.s, l));
        }
        for r in 4..8 {
            assert!(net.is_edge(r, net.t));
        }
    }

    #[test]
    fn selected_terminals_are_connected_and_in_their_communities() {
        for seed in 0..20 {
            let net = generate_network(Family::TwoCommunity, 16, seed).unwrap();
            assert_eq!(net.community_of(net.s), 0);
            assert_eq!(net.community_of(net.t), 1);
            assert!(net.reachable(net.s)[net.t]);
        }
    }

    #[test]
    fn source_sink_selection_fails_without_paths() {
        // Two isolated communities: no valid pair exists.
        let mut net = FlowNetwork::empty(4, Family::TwoCommunity);
        net.cap[1] = 1.0; // 0 -> 1, both community 0
        net.rebuild_edge_list();
        assert!(matches!(
            select_source_sink(&net, 0),
            Err(GraphError::NoSourceSinkPair)
        ));
    }

    #[test]
    fn dataset_roundtrips_through_json() {
        let ds = gen_dataset(Family::TwoCommunity, 8, 3, "train", 11).unwrap();
        let text = ds.to_json().unwrap();
        let back = Dataset::from_json(&text).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn dataset_rejects_out_of_range_edges() {
        let ds = gen_dataset(Family::TwoCommunity, 8, 1, "train", 11).unwrap();
        let mut repr: serde_json::Value = serde_json::from_str(&ds.to_json().unwrap()).unwrap();
        repr["items"][0]["edges"][0][0] = serde_json::json!(99);
        let err = Dataset::from_json(&repr.to_string()).unwrap_err();
        assert!(matches!(err, GraphError::InvalidItem { index: 0, .. }));
    }

    #[test]
    fn generated_items_have_consistent_trajectories() {
        let ds = gen_dataset(Family::TwoCommunity, 16, 4, "train", 2).unwrap();
        for item in &ds.items {
            let replay = crate::algo::ford_fulkerson(&item.network).unwrap();
            assert_eq!(replay.trajectory, item.trajectory, "replay diverged");
            assert!(replay.value > 0.0);
        }
    }
}
