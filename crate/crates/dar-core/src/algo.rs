//! Exact max-flow with step trajectories, min-cut labelling, and a
//! brute-force oracle.
//!
//! The solver is Ford-Fulkerson with augmenting paths chosen by Bellman-Ford
//! over the network's path-weight matrix, which makes every run fully
//! deterministic (ties break towards the smaller predecessor index). Each
//! augmentation is recorded as one trajectory step: the predecessor vector
//! describing the augmenting path, and the updated antisymmetric flow
//! matrix.
//!
//! Flow arithmetic runs on integer capacity units whenever the capacity
//! matrix is a rational grid (which holds for all generated instances:
//! min-max normalised integers or unit capacities). That keeps intermediate
//! flows exact — conservation holds by construction and termination is a
//! counting argument, with no floating-point drift. Capacities that do not
//! lift to a small common denominator fall back to floating-point residuals
//! with an explicit progress threshold.

use thiserror::Error;

use crate::graph::{FlowNetwork, NodeId};

/// Largest common denominator probed when lifting capacities to integers.
const LIFT_MAX_DENOM: i64 = 1 << 20;
/// Progress threshold for the floating-point fallback path.
const RESIDUAL_EPS: f64 = 1e-12;
/// Residual threshold used when classifying min-cut reachability.
const CUT_EPS: f64 = 1e-9;
/// Iteration cap for the floating-point fallback path.
const MAX_AUGMENTATIONS: usize = 1_000_000;
/// Size cap for the exponential cut-enumeration oracle.
const BRUTE_FORCE_MAX_NODES: usize = 8;

#[derive(Debug, Error)]
pub enum AlgoError {
    #[error("instance has {n} nodes; the cut-enumeration oracle accepts at most {max}")]
    InstanceTooLarge { n: usize, max: usize },
    #[error("flow is not maximal: {0}")]
    InvalidFlow(String),
    #[error("no progress after {0} augmentations; capacities may be ill-conditioned")]
    NoProgress(usize),
}

/// One recorded augmentation step.
///
/// `pred` encodes the augmenting path: nodes on the path point to their
/// predecessor, the source and every off-path node point to themselves.
/// `flow` is the dense antisymmetric flow matrix after applying the step.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStep {
    pub pred: Vec<NodeId>,
    pub flow: Vec<f64>,
}

/// Full execution trace of the solver on one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    /// Flow matrix after the last augmentation (all zeros when no path
    /// exists).
    pub final_flow: Vec<f64>,
    /// Min-cut side per node: 0 = source side, 1 = sink side.
    pub cut: Vec<u8>,
}

impl Trajectory {
    /// Number of augmentation steps.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Result of running the exact solver.
#[derive(Clone, Debug, PartialEq)]
pub struct MaxFlowResult {
    /// Dense antisymmetric flow matrix; flow out of the source is positive.
    pub flow: Vec<f64>,
    /// Total flow value (net out-flow of the source).
    pub value: f64,
    pub trajectory: Trajectory,
}

/// Net out-flow of node `s` under a dense antisymmetric flow matrix.
pub fn flow_value(flow: &[f64], n: usize, s: NodeId) -> f64 {
    flow[s * n..(s + 1) * n].iter().sum()
}

// --- Bellman-Ford ------------------------------------------------------------

/// Shortest-path predecessor tree over an arbitrary arc predicate.
///
/// Distances are computed by synchronous relaxation rounds (order
/// independent, hence deterministic); predecessors are then derived from the
/// converged distances, picking the smallest predecessor index on ties. The
/// weight of arc `(u, v)` is the edge's own weight when `(u, v)` is an edge
/// and the forward weight `w[v][u]` when the arc traverses an edge backwards
/// through the residual graph.
///
/// Nodes the tree does not reach (including the root) point to themselves.
fn bellman_ford_tree(
    net: &FlowNetwork,
    s: NodeId,
    has_arc: impl Fn(NodeId, NodeId) -> bool,
) -> Vec<NodeId> {
    let n = net.n;
    let arc_weight = |u: NodeId, v: NodeId| -> f64 {
        if net.is_edge(u, v) {
            net.weight(u, v)
        } else {
            net.weight(v, u)
        }
    };
    let mut dist = vec![f64::INFINITY; n];
    dist[s] = 0.0;
    for _ in 0..n.saturating_sub(1) {
        let mut next = dist.clone();
        let mut changed = false;
        for v in 0..n {
            for u in 0..n {
                if u == v || dist[u] == f64::INFINITY || !has_arc(u, v) {
                    continue;
                }
                let cand = dist[u] + arc_weight(u, v);
                if cand < next[v] {
                    next[v] = cand;
                    changed = true;
                }
            }
        }
        dist = next;
        if !changed {
            break;
        }
    }
    let mut pred: Vec<NodeId> = (0..n).collect();
    for v in 0..n {
        if v == s || dist[v] == f64::INFINITY {
            continue;
        }
        for u in 0..n {
            if u != v && dist[u] != f64::INFINITY && has_arc(u, v) && dist[u] + arc_weight(u, v) == dist[v]
            {
                pred[v] = u;
                break;
            }
        }
    }
    pred
}

/// Shortest-path predecessor tree from `s` over the residual graph of
/// `flow`, using the network's path weights. An arc `(u, v)` exists when its
/// residual capacity `cap[u][v] - flow[u][v]` is positive.
pub fn bellman_ford_path(net: &FlowNetwork, flow: &[f64], s: NodeId) -> Vec<NodeId> {
    let n = net.n;
    bellman_ford_tree(net, s, |u, v| net.cap[u * n + v] - flow[u * n + v] > RESIDUAL_EPS)
}

// --- Capacity lifting ---------------------------------------------------------

/// Finds the smallest denominator `d` such that every capacity is an integer
/// multiple of `1/d` (within 1e-9). Generated capacities are min-max
/// normalised integers, so small denominators always exist for them.
fn lift_denominator(net: &FlowNetwork) -> Option<i64> {
    let caps: Vec<f64> = net.edges.iter().map(|&(i, j)| net.cap(i, j)).collect();
    let mut d = 1i64;
    while d <= LIFT_MAX_DENOM {
        let fits = caps.iter().all(|&c| {
            let scaled = c * d as f64;
            (scaled - scaled.round()).abs() <= 1e-9 && scaled.round() >= 1.0
        });
        if fits {
            return Some(d);
        }
        d += 1;
    }
    None
}

// --- Ford-Fulkerson -----------------------------------------------------------

/// Runs Ford-Fulkerson to optimality, recording one trajectory step per
/// augmentation and labelling the resulting min cut.
pub fn ford_fulkerson(net: &FlowNetwork) -> Result<MaxFlowResult, AlgoError> {
    let result = match lift_denominator(net) {
        Some(denom) => run_on_units(net, denom),
        None => run_on_floats(net)?,
    };
    Ok(result)
}

/// Exact integer-unit execution: capacities and flows are multiples of
/// `1/denom`, stored as `i64` internally and materialised to f64 only when a
/// step is recorded.
fn run_on_units(net: &FlowNetwork, denom: i64) -> MaxFlowResult {
    let n = net.n;
    let scale = denom as f64;
    let cap_u: Vec<i64> = net.cap.iter().map(|&c| (c * scale).round() as i64).collect();
    let mut flow_u = vec![0i64; n * n];
    let mut steps = Vec::new();
    loop {
        let pred = bellman_ford_tree(net, net.s, |u, v| cap_u[u * n + v] - flow_u[u * n + v] > 0);
        let Some(path) = extract_path(&pred, net.s, net.t) else {
            break;
        };
        let df = path
            .windows(2)
            .map(|uv| cap_u[uv[0] * n + uv[1]] - flow_u[uv[0] * n + uv[1]])
            .min()
            .expect("augmenting path has at least one arc");
        debug_assert!(df > 0);
        for uv in path.windows(2) {
            let (u, v) = (uv[0], uv[1]);
            flow_u[u * n + v] += df;
            flow_u[v * n + u] -= df;
        }
        steps.push(TrajectoryStep {
            pred: path_pred(&pred, &path, n),
            flow: flow_u.iter().map(|&u| u as f64 / scale).collect(),
        });
    }
    finish(net, steps, flow_u.iter().map(|&u| u as f64 / scale).collect())
}

/// Floating-point fallback for capacities that do not lift to a common
/// denominator; augments only along residuals above [`RESIDUAL_EPS`].
fn run_on_floats(net: &FlowNetwork) -> Result<MaxFlowResult, AlgoError> {
    let n = net.n;
    let mut flow = vec![0.0f64; n * n];
    let mut steps = Vec::new();
    for _ in 0..MAX_AUGMENTATIONS {
        let pred = bellman_ford_tree(net, net.s, |u, v| {
            net.cap[u * n + v] - flow[u * n + v] > RESIDUAL_EPS
        });
        let Some(path) = extract_path(&pred, net.s, net.t) else {
            return Ok(finish(net, steps, flow));
        };
        let df = path
            .windows(2)
            .map(|uv| net.cap[uv[0] * n + uv[1]] - flow[uv[0] * n + uv[1]])
            .fold(f64::INFINITY, f64::min);
        for uv in path.windows(2) {
            let (u, v) = (uv[0], uv[1]);
            flow[u * n + v] += df;
            flow[v * n + u] -= df;
        }
        steps.push(TrajectoryStep {
            pred: path_pred_from_list(&path, n),
            flow: flow.clone(),
        });
    }
    Err(AlgoError::NoProgress(MAX_AUGMENTATIONS))
}

fn finish(net: &FlowNetwork, steps: Vec<TrajectoryStep>, flow: Vec<f64>) -> MaxFlowResult {
    let value = flow_value(&flow, net.n, net.s);
    let cut = residual_cut_labels(net, &flow);
    MaxFlowResult {
        value,
        trajectory: Trajectory {
            steps,
            final_flow: flow.clone(),
            cut,
        },
        flow,
    }
}

/// Walks the predecessor tree from sink to source; `None` when the sink is
/// unreached.
fn extract_path(pred: &[NodeId], s: NodeId, t: NodeId) -> Option<Vec<NodeId>> {
    if t == s || pred[t] == t {
        return None;
    }
    let mut path = vec![t];
    let mut v = t;
    while v != s {
        v = pred[v];
        path.push(v);
        if path.len() > pred.len() {
            // Cycle in the tree would be a bug in Bellman-Ford.
            unreachable!("predecessor walk exceeded node count");
        }
    }
    path.reverse();
    Some(path)
}

/// Restricts a predecessor tree to one augmenting path: on-path nodes keep
/// their tree predecessor, everything else (source included) points to
/// itself.
fn path_pred(pred: &[NodeId], path: &[NodeId], n: usize) -> Vec<NodeId> {
    let mut p: Vec<NodeId> = (0..n).collect();
    for uv in path.windows(2) {
        debug_assert_eq!(pred[uv[1]], uv[0]);
        p[uv[1]] = uv[0];
    }
    p
}

fn path_pred_from_list(path: &[NodeId], n: usize) -> Vec<NodeId> {
    let mut p: Vec<NodeId> = (0..n).collect();
    for uv in path.windows(2) {
        p[uv[1]] = uv[0];
    }
    p
}

// --- Min cut ------------------------------------------------------------------

fn residual_cut_labels(net: &FlowNetwork, flow: &[f64]) -> Vec<u8> {
    let n = net.n;
    let mut seen = vec![false; n];
    let mut queue = std::collections::VecDeque::new();
    seen[net.s] = true;
    queue.push_back(net.s);
    while let Some(u) = queue.pop_front() {
        for v in 0..n {
            if !seen[v] && net.cap[u * n + v] - flow[u * n + v] > CUT_EPS {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    seen.iter().map(|&r| if r { 0 } else { 1 }).collect()
}

/// Labels each node with its min-cut side under a maximal flow: 0 for nodes
/// the source still reaches in the residual graph, 1 otherwise.
///
/// Errors when the sink is residual-reachable, i.e. the flow is not maximal.
pub fn min_cut_labels(net: &FlowNetwork, flow: &[f64]) -> Result<Vec<u8>, AlgoError> {
    let labels = residual_cut_labels(net, flow);
    if labels[net.t] == 0 {
        return Err(AlgoError::InvalidFlow(
            "sink is reachable in the residual graph".to_string(),
        ));
    }
    Ok(labels)
}

/// Total capacity crossing a labelled cut (source side → sink side).
pub fn cut_capacity(net: &FlowNetwork, labels: &[u8]) -> f64 {
    net.edges
        .iter()
        .filter(|&&(i, j)| labels[i] == 0 && labels[j] == 1)
        .map(|&(i, j)| net.cap(i, j))
        .sum()
}

// --- Brute-force oracle ---------------------------------------------------------

/// Maximum flow by exhaustive minimum-cut enumeration.
///
/// Independent of the augmenting-path solver: it scans all `2^(n-2)`
/// source-side subsets and returns the cheapest cut capacity, which equals
/// the max-flow value by strong duality. Restricted to tiny instances.
pub fn brute_force_max_flow(net: &FlowNetwork) -> Result<f64, AlgoError> {
    let n = net.n;
    if n > BRUTE_FORCE_MAX_NODES {
        return Err(AlgoError::InstanceTooLarge {
            n,
            max: BRUTE_FORCE_MAX_NODES,
        });
    }
    let internal: Vec<NodeId> = (0..n).filter(|&v| v != net.s && v != net.t).collect();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << internal.len()) {
        let mut source_side = vec![false; n];
        source_side[net.s] = true;
        for (bit, &v) in internal.iter().enumerate() {
            source_side[v] = mask & (1 << bit) != 0;
        }
        let crossing: f64 = net
            .edges
            .iter()
            .filter(|&&(i, j)| source_side[i] && !source_side[j])
            .map(|&(i, j)| net.cap(i, j))
            .sum();
        best = best.min(crossing);
    }
    Ok(best)
}
