//! Graph network that imitates augmenting-path max-flow step by step.
//!
//! The architecture is encode-process-decode, run once per algorithm step:
//! linear encoders embed node and edge inputs; a first message-passing
//! processor updates latent node states and a pointer head decodes each
//! node's predecessor in the shortest-path tree; a second processor,
//! conditioned on those pointers, feeds a flow head (and optionally a cut
//! head). The decoded flow is antisymmetrized and squashed into the
//! capacity envelope, and both the predicted flow and the pointers are fed
//! back as inputs to the next step, with a single latent stream `H`
//! carried through every processor application.
//!
//! Variants:
//! - `primal`: pointers + flow only.
//! - `dual`: adds a per-node cut head; the sigmoid of the previous step's
//!   cut logits is fed back as an extra input channel.
//! - `pipeline`: a separate preprocessor predicts the cut first (`n`
//!   message rounds); its sigmoid output becomes an extra node feature of
//!   the main network, detached so the main loss never trains the
//!   preprocessor.
//! - `no_algo`: no step supervision at all — a fixed number of message
//!   rounds followed by the flow head.
//!
//! Processors: `pgn` passes messages along capacity edges (both
//! orientations) plus the current predecessor links; `mpnn_dense` uses all
//! ordered node pairs. Both share one code path — the mask is the only
//! difference — which [`run_episode_with_pgn_mask`] exposes for
//! verification.
//!
//! Optional input channels (the dual cut feedback, the pipeline cut
//! feature) are always appended after the shared channels, and weight
//! rows are drawn from a per-parameter named stream with the scale based
//! on the shared fan-in. Two variants with the same seed therefore draw
//! bit-identical values for every shared weight.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algo::Trajectory;
use crate::graph::FlowNetwork;
use crate::seed::fnv1a64;
use crate::tensor::{Agg, ParamStore, Tape, TensorError, Tid};

/// Message rounds used by the `no_algo` variant (it has no trajectory to
/// pace it) and multiplier-free default depth for direct prediction.
pub const NO_ALGO_ROUNDS: usize = 4;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("missing parameter {0:?} (store does not match the model config)")]
    MissingParam(String),
    #[error("teacher trajectory has {have} steps, episode needs {need}")]
    TeacherTooShort { have: usize, need: usize },
    #[error("config invalid: {0}")]
    BadConfig(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint encoding: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "primal")]
    Primal,
    #[serde(rename = "dual")]
    Dual,
    #[serde(rename = "pipeline")]
    Pipeline,
    #[serde(rename = "no_algo")]
    NoAlgo,
}

impl Variant {
    /// Whether the variant carries a cut prediction.
    pub fn has_cut_head(&self) -> bool {
        matches!(self, Variant::Dual | Variant::Pipeline)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::Primal => "primal",
            Variant::Dual => "dual",
            Variant::Pipeline => "pipeline",
            Variant::NoAlgo => "no_algo",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "primal" => Ok(Variant::Primal),
            "dual" => Ok(Variant::Dual),
            "pipeline" => Ok(Variant::Pipeline),
            "no_algo" => Ok(Variant::NoAlgo),
            other => Err(format!("unknown variant {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Processor {
    #[serde(rename = "pgn")]
    Pgn,
    #[serde(rename = "mpnn_dense")]
    MpnnDense,
}

impl std::fmt::Display for Processor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Processor::Pgn => write!(f, "pgn"),
            Processor::MpnnDense => write!(f, "mpnn_dense"),
        }
    }
}

impl std::str::FromStr for Processor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pgn" => Ok(Processor::Pgn),
            "mpnn_dense" => Ok(Processor::MpnnDense),
            other => Err(format!("unknown processor {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub processor: Processor,
    pub aggregation: Agg,
    pub hidden_dim: usize,
}

impl ModelConfig {
    pub fn new(variant: Variant, processor: Processor, aggregation: Agg, hidden_dim: usize) -> Self {
        ModelConfig {
            variant,
            processor,
            aggregation,
            hidden_dim,
        }
    }
}

/// One step of model output, as plain values.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepOutputs {
    /// n×n row-major; row i scores every candidate predecessor j of node i.
    /// Always finite; candidate masking is applied at loss/argmax time.
    pub pointer_logits: Vec<f64>,
    /// Pointers actually fed forward this step (argmax, or teacher labels).
    pub pred: Vec<usize>,
    /// n×n row-major pre-rescale flow scores.
    pub raw_flow: Vec<f64>,
    /// n×n row-major flow after antisymmetrization and capacity squashing.
    pub flow: Vec<f64>,
    /// Per-node cut logits (variants with a cut head).
    pub cut_logits: Option<Vec<f64>>,
    /// n×hidden latent node states after this step.
    pub h: Vec<f64>,
}

/// One step of model output, as tape nodes (training view).
pub struct StepTids {
    pub pointer_logits: Tid,
    /// Flattened n×n candidate mask; `None` means every candidate allowed.
    pub pointer_allowed: Option<Vec<bool>>,
    pub pred_used: Vec<usize>,
    pub raw_flow: Tid,
    /// n²×1 flattened rescaled flow.
    pub flow: Tid,
    pub cut_logits: Option<Tid>,
    pub h: Tid,
}

/// Which encoder parameters an episode reads, and whether edge inputs
/// include the capacity channel. The capacity-free spec exists for
/// encoder-retraining experiments where capacity must stay hidden from
/// the inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderSpec {
    pub prefix: &'static str,
    pub with_capacity: bool,
}

pub const STANDARD_ENCODERS: EncoderSpec = EncoderSpec {
    prefix: "enc",
    with_capacity: true,
};

pub const CAPACITY_FREE_ENCODERS: EncoderSpec = EncoderSpec {
    prefix: "enc2",
    with_capacity: false,
};

/// Message-mask policy. The processors share every line of compute; the
/// mask (and the pointer-candidate mask) is the only thing this chooses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskRules {
    /// Capacity edges in both orientations plus current predecessor links
    /// (both orientations); pointer candidates restricted to self and
    /// capacity-adjacent nodes.
    Pgn,
    /// All ordered node pairs; no pointer-candidate restriction.
    Dense,
}

impl From<Processor> for MaskRules {
    fn from(p: Processor) -> Self {
        match p {
            Processor::Pgn => MaskRules::Pgn,
            Processor::MpnnDense => MaskRules::Dense,
        }
    }
}

impl MaskRules {
    /// Ordered message pairs (source, destination), sorted by
    /// (destination, source) so that aggregation order is well defined.
    pub fn message_pairs(
        &self,
        net: &FlowNetwork,
        pred: Option<&[usize]>,
    ) -> (Vec<usize>, Vec<usize>) {
        let n = net.n;
        let mut keys: BTreeSet<(usize, usize)> = BTreeSet::new();
        match self {
            MaskRules::Dense => {
                for v in 0..n {
                    for u in 0..n {
                        keys.insert((v, u));
                    }
                }
            }
            MaskRules::Pgn => {
                for &(u, v) in &net.edges {
                    keys.insert((v, u));
                    keys.insert((u, v));
                }
                if let Some(pred) = pred {
                    for (i, &p) in pred.iter().enumerate() {
                        keys.insert((i, p));
                        keys.insert((p, i));
                    }
                }
            }
        }
        let mut src = Vec::with_capacity(keys.len());
        let mut dst = Vec::with_capacity(keys.len());
        for (v, u) in keys {
            src.push(u);
            dst.push(v);
        }
        (src, dst)
    }

    /// Pointer-candidate mask (flattened n×n, row = node, col = candidate);
    /// `None` means all candidates are allowed.
    pub fn pointer_allowed(&self, net: &FlowNetwork) -> Option<Vec<bool>> {
        match self {
            MaskRules::Dense => None,
            MaskRules::Pgn => {
                let n = net.n;
                let mut allowed = vec![false; n * n];
                for i in 0..n {
                    allowed[i * n + i] = true;
                }
                for &(u, v) in &net.edges {
                    allowed[u * n + v] = true;
                    allowed[v * n + u] = true;
                }
                Some(allowed)
            }
        }
    }
}

// --- support pairs and the capacity envelope ------------------------------------

/// Ordered pairs (i, j) with capacity in either direction — the only
/// entries where a rescaled flow can be nonzero.
pub fn support_pairs(net: &FlowNetwork) -> Vec<(usize, usize)> {
    let mut keys = BTreeSet::new();
    for &(u, v) in &net.edges {
        keys.insert((u, v));
        keys.insert((v, u));
    }
    keys.into_iter().collect()
}

/// Flattened n×n symmetric capacity envelope: entry (i, j) is
/// max(C[i][j], C[j][i]). A tanh-antisymmetrized score multiplied by this
/// symmetric matrix is antisymmetric by construction and never exceeds
/// the larger of the two directed capacities.
pub fn symmetric_envelope(net: &FlowNetwork) -> Vec<f64> {
    let n = net.n;
    let mut env = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            env[i * n + j] = net.cap(i, j).max(net.cap(j, i));
        }
    }
    env
}

/// Value-level flow rescaling: antisymmetrize the raw scores and squash
/// them into the capacity envelope. `raw` is n×n row-major.
pub fn rescale_flow(raw: &[f64], net: &FlowNetwork) -> Vec<f64> {
    let n = net.n;
    assert_eq!(raw.len(), n * n, "raw flow must be dense n x n");
    let env = symmetric_envelope(net);
    let mut flow = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let a = raw[i * n + j] - raw[j * n + i];
            flow[i * n + j] = a.tanh() * env[i * n + j];
        }
    }
    flow
}

/// Row-wise argmax over allowed candidates, ties to the lowest index.
pub fn argmax_pointers(logits: &[f64], n: usize, allowed: Option<&[bool]>) -> Vec<usize> {
    let mut pred = vec![0usize; n];
    for i in 0..n {
        let mut best: Option<(f64, usize)> = None;
        for j in 0..n {
            if let Some(mask) = allowed {
                if !mask[i * n + j] {
                    continue;
                }
            }
            let v = logits[i * n + j];
            let better = match best {
                None => true,
                Some((bv, _)) => v > bv,
            };
            if better {
                best = Some((v, j));
            }
        }
        pred[i] = best.map(|(_, j)| j).unwrap_or(i);
    }
    pred
}

// --- parameter layout and initialization ------------------------------------------

struct ParamSpec {
    name: &'static str,
    rows: usize,
    cols: usize,
    /// Fan-in of the variant-minimal layer; optional input channels do not
    /// change the scale, so shared rows are drawn identically across
    /// variants.
    fan_base: usize,
}

fn mlp2_specs(
    prefix: &'static str,
    in_dim: usize,
    in_base: usize,
    hidden: usize,
    out: usize,
    specs: &mut Vec<ParamSpec>,
) {
    let names: [&'static str; 4] = match prefix {
        "bf_phi" => ["bf_phi_w1", "bf_phi_b1", "bf_phi_w2", "bf_phi_b2"],
        "bf_psi" => ["bf_psi_w1", "bf_psi_b1", "bf_psi_w2", "bf_psi_b2"],
        "pf_phi" => ["pf_phi_w1", "pf_phi_b1", "pf_phi_w2", "pf_phi_b2"],
        "pf_psi" => ["pf_psi_w1", "pf_psi_b1", "pf_psi_w2", "pf_psi_b2"],
        "pc_phi" => ["pc_phi_w1", "pc_phi_b1", "pc_phi_w2", "pc_phi_b2"],
        "pc_psi" => ["pc_psi_w1", "pc_psi_b1", "pc_psi_w2", "pc_psi_b2"],
        "ptr" => ["ptr_w1", "ptr_b1", "ptr_w2", "ptr_b2"],
        "flow" => ["flow_w1", "flow_b1", "flow_w2", "flow_b2"],
        other => unreachable!("unknown mlp prefix {other}"),
    };
    specs.push(ParamSpec {
        name: names[0],
        rows: in_dim,
        cols: hidden,
        fan_base: in_base,
    });
    specs.push(ParamSpec {
        name: names[1],
        rows: 1,
        cols: hidden,
        fan_base: in_base,
    });
    specs.push(ParamSpec {
        name: names[2],
        rows: hidden,
        cols: out,
        fan_base: hidden,
    });
    specs.push(ParamSpec {
        name: names[3],
        rows: 1,
        cols: out,
        fan_base: hidden,
    });
}

fn param_layout(config: &ModelConfig) -> Vec<ParamSpec> {
    let h = config.hidden_dim;
    let mut specs = Vec::new();
    // Node inputs: [is_source, is_sink, prev-flow row sum, prev-flow col
    // sum]; the pipeline variant appends the predicted cut probability.
    let node_feats = if config.variant == Variant::Pipeline { 5 } else { 4 };
    specs.push(ParamSpec {
        name: "enc_v_w",
        rows: node_feats,
        cols: h,
        fan_base: 4,
    });
    specs.push(ParamSpec {
        name: "enc_v_b",
        rows: 1,
        cols: h,
        fan_base: 4,
    });
    // Edge inputs: [capacity, path weight, prev-flow entry].
    specs.push(ParamSpec {
        name: "enc_e_w",
        rows: 3,
        cols: h,
        fan_base: 3,
    });
    specs.push(ParamSpec {
        name: "enc_e_b",
        rows: 1,
        cols: h,
        fan_base: 3,
    });
    // First processor: message phi on [z_u, h_u, z_v, h_v, z_uv], state
    // update psi on [z_i, h_i, m_i].
    mlp2_specs("bf_phi", 5 * h, 5 * h, h, h, &mut specs);
    mlp2_specs("bf_psi", 3 * h, 3 * h, h, h, &mut specs);
    if config.variant != Variant::NoAlgo {
        // Pointer head on [z_i, h_i, z_j, h_j].
        mlp2_specs("ptr", 4 * h, 4 * h, h, 1, &mut specs);
        // Second processor: phi additionally sees [self_u, self_v,
        // pred(v)==u] and, for dual, the cut feedback of both endpoints;
        // psi additionally sees [self_i] and, for dual, the cut feedback.
        let dual = config.variant == Variant::Dual;
        let phi_in = 5 * h + 3 + if dual { 2 } else { 0 };
        let psi_in = 3 * h + 1 + if dual { 1 } else { 0 };
        mlp2_specs("pf_phi", phi_in, 5 * h + 3, h, h, &mut specs);
        mlp2_specs("pf_psi", psi_in, 3 * h + 1, h, h, &mut specs);
    }
    // Flow head on [h_i, h_j, z_ij].
    mlp2_specs("flow", 3 * h, 3 * h, h, 1, &mut specs);
    if config.variant == Variant::Dual {
        specs.push(ParamSpec {
            name: "cut_w",
            rows: h,
            cols: 1,
            fan_base: h,
        });
        specs.push(ParamSpec {
            name: "cut_b",
            rows: 1,
            cols: 1,
            fan_base: h,
        });
    }
    if config.variant == Variant::Pipeline {
        specs.push(ParamSpec {
            name: "pc_enc_v_w",
            rows: 4,
            cols: h,
            fan_base: 4,
        });
        specs.push(ParamSpec {
            name: "pc_enc_v_b",
            rows: 1,
            cols: h,
            fan_base: 4,
        });
        specs.push(ParamSpec {
            name: "pc_enc_e_w",
            rows: 3,
            cols: h,
            fan_base: 3,
        });
        specs.push(ParamSpec {
            name: "pc_enc_e_b",
            rows: 1,
            cols: h,
            fan_base: 3,
        });
        mlp2_specs("pc_phi", 5 * h, 5 * h, h, h, &mut specs);
        mlp2_specs("pc_psi", 3 * h, 3 * h, h, h, &mut specs);
        specs.push(ParamSpec {
            name: "pc_cut_w",
            rows: h,
            cols: 1,
            fan_base: h,
        });
        specs.push(ParamSpec {
            name: "pc_cut_b",
            rows: 1,
            cols: 1,
            fan_base: h,
        });
    }
    specs
}

fn fill_param(store: &mut ParamStore, seed: u64, name: &str, rows: usize, cols: usize, fan: usize) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(name));
    let scale = 1.0 / (fan as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.gen_range(-scale..scale))
        .collect();
    store.insert(name, rows, cols, data);
}

/// Fresh parameters for a config. Each tensor is filled row-major from its
/// own named random stream, so growing a layer's input (extra trailing
/// channels in another variant) leaves all shared leading rows identical.
pub fn init_params(config: &ModelConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    for spec in param_layout(config) {
        fill_param(&mut store, seed, spec.name, spec.rows, spec.cols, spec.fan_base);
    }
    store
}

/// Adds freshly initialized capacity-free encoder parameters
/// (`enc2_v_*` on the 4 node inputs, `enc2_e_*` on [weight, prev-flow])
/// to an existing store. Used by encoder retraining.
pub fn append_capacity_free_encoders(store: &mut ParamStore, hidden: usize, seed: u64) {
    fill_param(store, seed, "enc2_v_w", 4, hidden, 4);
    fill_param(store, seed, "enc2_v_b", 1, hidden, 4);
    fill_param(store, seed, "enc2_e_w", 2, hidden, 2);
    fill_param(store, seed, "enc2_e_b", 1, hidden, 2);
}

// --- checkpoints ----------------------------------------------------------------------

/// Model config plus parameters, serialized as
/// `{ "config": {...}, "params": { name: { "shape": [r, c], "data": [...] } } }`.
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ParamStore) -> Self {
        Checkpoint { config, params }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "config": self.config,
            "params": self.params.to_json_value(),
        })
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self, ModelError> {
        let config: ModelConfig = serde_json::from_value(
            value
                .get("config")
                .cloned()
                .unwrap_or(serde_json::Value::Null),
        )?;
        let params = ParamStore::from_json_value(
            value
                .get("params")
                .unwrap_or(&serde_json::Value::Null),
        )?;
        Ok(Checkpoint { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let text = serde_json::to_string(&self.to_json())?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        Checkpoint::from_json(&value)
    }
}

// --- episode construction ---------------------------------------------------------------

struct EpisodeCtx<'a> {
    net: &'a FlowNetwork,
    config: &'a ModelConfig,
    ids: &'a BTreeMap<String, Tid>,
    enc: EncoderSpec,
    rules: MaskRules,
    n: usize,
    /// flat n² index -> row index.
    row_of: Vec<usize>,
    /// flat n² index -> column index.
    col_of: Vec<usize>,
    /// flat n² permutation mapping (i, j) to (j, i).
    transpose_perm: Vec<usize>,
    support: Vec<(usize, usize)>,
    /// Pointer-candidate pairs (owner nodes, candidate nodes, flat n²
    /// positions) when the mask rules restrict candidates; `None` scores
    /// every ordered pair.
    ptr_candidates: Option<(Vec<usize>, Vec<usize>, Vec<usize>)>,
}

impl<'a> EpisodeCtx<'a> {
    fn new(
        net: &'a FlowNetwork,
        config: &'a ModelConfig,
        ids: &'a BTreeMap<String, Tid>,
        enc: EncoderSpec,
        rules: MaskRules,
    ) -> Self {
        let n = net.n;
        let mut row_of = vec![0usize; n * n];
        let mut col_of = vec![0usize; n * n];
        let mut transpose_perm = vec![0usize; n * n];
        for i in 0..n {
            for j in 0..n {
                row_of[i * n + j] = i;
                col_of[i * n + j] = j;
                transpose_perm[i * n + j] = j * n + i;
            }
        }
        let ptr_candidates = rules.pointer_allowed(net).map(|allowed| {
            let mut src = Vec::new();
            let mut dst = Vec::new();
            let mut flat = Vec::new();
            for (idx, &ok) in allowed.iter().enumerate() {
                if ok {
                    src.push(idx / n);
                    dst.push(idx % n);
                    flat.push(idx);
                }
            }
            (src, dst, flat)
        });
        EpisodeCtx {
            net,
            config,
            ids,
            enc,
            rules,
            n,
            row_of,
            col_of,
            transpose_perm,
            support: support_pairs(net),
            ptr_candidates,
        }
    }

    fn param(&self, name: &str) -> Result<Tid, ModelError> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    fn linear(&self, tape: &mut Tape, prefix: &str, x: Tid) -> Result<Tid, ModelError> {
        let w = self.param(&format!("{prefix}_w"))?;
        let b = self.param(&format!("{prefix}_b"))?;
        let y = tape.matmul(x, w)?;
        Ok(tape.add_row(y, b)?)
    }

    fn mlp2(&self, tape: &mut Tape, prefix: &str, x: Tid) -> Result<Tid, ModelError> {
        let w1 = self.param(&format!("{prefix}_w1"))?;
        let b1 = self.param(&format!("{prefix}_b1"))?;
        let w2 = self.param(&format!("{prefix}_w2"))?;
        let b2 = self.param(&format!("{prefix}_b2"))?;
        let y = tape.matmul(x, w1)?;
        let y = tape.add_row(y, b1)?;
        let y = tape.relu(y);
        let y = tape.matmul(y, w2)?;
        Ok(tape.add_row(y, b2)?)
    }

    /// Same two-layer MLP as [`Self::mlp2`] applied to pair inputs
    /// `[nodes[src] | nodes[dst] | extra]`, with the first layer evaluated
    /// through the fused pair projection so the wide per-pair input never
    /// materializes.
    fn pair_mlp2(
        &self,
        tape: &mut Tape,
        prefix: &str,
        nodes: Tid,
        src: &[usize],
        dst: &[usize],
        extra: Option<Tid>,
    ) -> Result<Tid, ModelError> {
        let w1 = self.param(&format!("{prefix}_w1"))?;
        let b1 = self.param(&format!("{prefix}_b1"))?;
        let w2 = self.param(&format!("{prefix}_w2"))?;
        let b2 = self.param(&format!("{prefix}_b2"))?;
        let y = tape.pair_linear(nodes, src, dst, extra, w1)?;
        let y = tape.add_row(y, b1)?;
        let y = tape.relu(y);
        let y = tape.matmul(y, w2)?;
        Ok(tape.add_row(y, b2)?)
    }

    /// Node embeddings from [is_source, is_sink, row sum of prev flow,
    /// col sum of prev flow] (+ optional trailing cut feature).
    fn encode_nodes(
        &self,
        tape: &mut Tape,
        v_prefix: &str,
        f_prev: Tid,
        cut_feature: Option<Tid>,
    ) -> Result<Tid, ModelError> {
        let n = self.n;
        let mut st = vec![0.0; n * 2];
        st[self.net.s * 2] = 1.0;
        st[self.net.t * 2 + 1] = 1.0;
        let st = tape.constant(n, 2, st)?;
        let row_sum = tape.segment_agg(f_prev, &self.row_of, n, Agg::Sum)?;
        let col_sum = tape.segment_agg(f_prev, &self.col_of, n, Agg::Sum)?;
        let mut parts = vec![st, row_sum, col_sum];
        if let Some(cut) = cut_feature {
            parts.push(cut);
        }
        let feats = tape.concat_cols(&parts)?;
        self.linear(tape, v_prefix, feats)
    }

    /// Per-pair edge embeddings from [capacity, path weight, prev-flow
    /// entry] (capacity column dropped for capacity-free encoders).
    fn encode_pairs(
        &self,
        tape: &mut Tape,
        e_prefix: &str,
        f_prev: Tid,
        src: &[usize],
        dst: &[usize],
    ) -> Result<Tid, ModelError> {
        let m = src.len();
        let flat: Vec<usize> = src
            .iter()
            .zip(dst)
            .map(|(&u, &v)| u * self.n + v)
            .collect();
        let f_entries = tape.gather_rows(f_prev, &flat)?;
        let feats = if self.enc.with_capacity {
            let mut cw = vec![0.0; m * 2];
            for (k, (&u, &v)) in src.iter().zip(dst).enumerate() {
                cw[k * 2] = self.net.cap(u, v);
                cw[k * 2 + 1] = self.net.weight(u, v);
            }
            let cw = tape.constant(m, 2, cw)?;
            tape.concat_cols(&[cw, f_entries])?
        } else {
            let mut w = vec![0.0; m];
            for (k, (&u, &v)) in src.iter().zip(dst).enumerate() {
                w[k] = self.net.weight(u, v);
            }
            let w = tape.constant(m, 1, w)?;
            tape.concat_cols(&[w, f_entries])?
        };
        self.linear(tape, e_prefix, feats)
    }

    /// One message round: phi over [z_u, h_u, z_v, h_v, edge_feats],
    /// aggregation into destination nodes, psi over [z_i, h_i, m_i,
    /// node_extra].
    #[allow(clippy::too_many_arguments)]
    fn processor_round(
        &self,
        tape: &mut Tape,
        prefix: &str,
        z: Tid,
        h: Tid,
        src: &[usize],
        dst: &[usize],
        edge_feats: Tid,
        node_extra: Option<Tid>,
    ) -> Result<Tid, ModelError> {
        let zh = tape.concat_cols(&[z, h])?;
        let messages =
            self.pair_mlp2(tape, &format!("{prefix}_phi"), zh, src, dst, Some(edge_feats))?;
        let agg = tape.segment_agg(messages, dst, self.n, self.config.aggregation)?;
        let mut parts = vec![z, h, agg];
        if let Some(extra) = node_extra {
            parts.push(extra);
        }
        let psi_in = tape.concat_cols(&parts)?;
        self.mlp2(tape, &format!("{prefix}_psi"), psi_in)
    }

    /// Pairwise pointer scores, n x n. With restricted candidate masks the
    /// head runs only on candidate pairs and the rest of the matrix holds
    /// structural zeros — those positions are excluded from both the loss
    /// softmax and the argmax, so the observable outputs are unchanged.
    fn decode_pointers(&self, tape: &mut Tape, z: Tid, h: Tid) -> Result<Tid, ModelError> {
        let zh = tape.concat_cols(&[z, h])?;
        match &self.ptr_candidates {
            None => {
                let scores = self.pair_mlp2(tape, "ptr", zh, &self.row_of, &self.col_of, None)?;
                Ok(tape.reshape(scores, self.n, self.n)?)
            }
            Some((src, dst, flat)) => {
                let scores = self.pair_mlp2(tape, "ptr", zh, src, dst, None)?;
                let dense = tape.segment_agg(scores, flat, self.n * self.n, Agg::Sum)?;
                Ok(tape.reshape(dense, self.n, self.n)?)
            }
        }
    }

    /// Flow head on support pairs, scattered dense, antisymmetrized and
    /// squashed into the symmetric capacity envelope.
    fn decode_flow(
        &self,
        tape: &mut Tape,
        h: Tid,
        f_prev: Tid,
    ) -> Result<(Tid, Tid), ModelError> {
        let n = self.n;
        let (src, dst): (Vec<usize>, Vec<usize>) = self.support.iter().copied().unzip();
        let z_e = self.encode_pairs(tape, &format!("{}_e", self.enc.prefix), f_prev, &src, &dst)?;
        let scores = self.pair_mlp2(tape, "flow", h, &src, &dst, Some(z_e))?;
        let flat_targets: Vec<usize> = self.support.iter().map(|&(i, j)| i * n + j).collect();
        let raw = tape.segment_agg(scores, &flat_targets, n * n, Agg::Sum)?;
        let raw_t = tape.gather_rows(raw, &self.transpose_perm)?;
        let anti = tape.sub(raw, raw_t)?;
        let squashed = tape.tanh(anti);
        let env = tape.constant(n * n, 1, symmetric_envelope(self.net))?;
        let flow = tape.mul(squashed, env)?;
        Ok((raw, flow))
    }
}

/// Builds an episode on the caller's tape; the returned tape nodes feed
/// loss assembly during training. `t_steps` is the trajectory length;
/// `teacher` supplies ground-truth pointers/flows to feed forward instead
/// of the model's own predictions (losses are unaffected).
#[allow(clippy::too_many_arguments)]
pub fn build_episode(
    tape: &mut Tape,
    ids: &BTreeMap<String, Tid>,
    net: &FlowNetwork,
    config: &ModelConfig,
    t_steps: usize,
    teacher: Option<&Trajectory>,
    enc: EncoderSpec,
    rules: MaskRules,
) -> Result<Vec<StepTids>, ModelError> {
    let ctx = EpisodeCtx::new(net, config, ids, enc, rules);
    let n = net.n;
    let h_dim = config.hidden_dim;

    if config.variant == Variant::NoAlgo {
        return build_no_algo(tape, &ctx, n, h_dim);
    }
    if let Some(traj) = teacher {
        if traj.steps.len() < t_steps {
            return Err(ModelError::TeacherTooShort {
                have: traj.steps.len(),
                need: t_steps,
            });
        }
    }

    // Pipeline pre-phase: predict the cut with a separate processor, then
    // detach its sigmoid as a node feature for the main network.
    let mut pipeline_logits: Option<Tid> = None;
    let mut pipeline_feature: Option<Vec<f64>> = None;
    if config.variant == Variant::Pipeline {
        let f_zero = tape.zeros(n * n, 1);
        let z_v = ctx.encode_nodes(tape, "pc_enc_v", f_zero, None)?;
        let (src, dst) = rules.message_pairs(net, None);
        let z_e = ctx.encode_pairs(tape, "pc_enc_e", f_zero, &src, &dst)?;
        let mut h = tape.zeros(n, h_dim);
        for _ in 0..n {
            h = ctx.processor_round(tape, "pc", z_v, h, &src, &dst, z_e, None)?;
        }
        let logits = ctx.linear(tape, "pc_cut", h)?;
        let probs: Vec<f64> = tape
            .value(logits)
            .iter()
            .map(|&z| 1.0 / (1.0 + (-z).exp()))
            .collect();
        pipeline_logits = Some(logits);
        pipeline_feature = Some(probs);
    }

    let mut steps = Vec::with_capacity(t_steps);
    let mut h_prev = tape.zeros(n, h_dim);
    let mut f_prev = tape.zeros(n * n, 1);
    let mut pred_state: Vec<usize> = (0..n).collect();
    let mut cut_prev: Option<Tid> = None;
    let v_prefix = format!("{}_v", enc.prefix);
    let e_prefix = format!("{}_e", enc.prefix);

    for k in 0..t_steps {
        let cut_feat = match &pipeline_feature {
            Some(probs) => Some(tape.constant(n, 1, probs.clone())?),
            None => None,
        };
        let z_v = ctx.encode_nodes(tape, &v_prefix, f_prev, cut_feat)?;

        // First processor: tree relaxation. Mask uses the pointer state
        // carried in from the previous step.
        let (bsrc, bdst) = rules.message_pairs(net, Some(&pred_state));
        let e_bf = ctx.encode_pairs(tape, &e_prefix, f_prev, &bsrc, &bdst)?;
        let h_bf = ctx.processor_round(tape, "bf", z_v, h_prev, &bsrc, &bdst, e_bf, None)?;

        // Pointer head; teacher labels or row argmax feed forward.
        let pointer_logits = ctx.decode_pointers(tape, z_v, h_bf)?;
        let pointer_allowed = rules.pointer_allowed(net);
        let pred_used = match teacher {
            Some(traj) => traj.steps[k].pred.clone(),
            None => argmax_pointers(tape.value(pointer_logits), n, pointer_allowed.as_deref()),
        };

        // Second processor: augmentation. Mask and inputs use the fresh
        // pointers; dual adds the previous step's cut sigmoid (zeros at
        // the first step).
        let dual = config.variant == Variant::Dual;
        let cut_fb: Option<Tid> = if dual {
            Some(match cut_prev {
                Some(logits) => tape.sigmoid(logits),
                None => tape.zeros(n, 1),
            })
        } else {
            None
        };
        let (fsrc, fdst) = rules.message_pairs(net, Some(&pred_used));
        let e_f = ctx.encode_pairs(tape, &e_prefix, f_prev, &fsrc, &fdst)?;
        let m = fsrc.len();
        let self_flags: Vec<f64> = (0..n).map(|i| (pred_used[i] == i) as u8 as f64).collect();
        let mut pair_scalars = vec![0.0; m * 3];
        for k2 in 0..m {
            pair_scalars[k2 * 3] = self_flags[fsrc[k2]];
            pair_scalars[k2 * 3 + 1] = self_flags[fdst[k2]];
            pair_scalars[k2 * 3 + 2] = (pred_used[fdst[k2]] == fsrc[k2]) as u8 as f64;
        }
        let pair_scalars = tape.constant(m, 3, pair_scalars)?;
        let mut edge_parts = vec![e_f, pair_scalars];
        let self_col = tape.constant(n, 1, self_flags)?;
        let mut node_parts = vec![self_col];
        if let Some(cfb) = cut_fb {
            let cut_u = tape.gather_rows(cfb, &fsrc)?;
            let cut_v = tape.gather_rows(cfb, &fdst)?;
            edge_parts.push(cut_u);
            edge_parts.push(cut_v);
            node_parts.push(cfb);
        }
        let edge_feats = tape.concat_cols(&edge_parts)?;
        let node_extra = tape.concat_cols(&node_parts)?;
        let h_f = ctx.processor_round(
            tape,
            "pf",
            z_v,
            h_bf,
            &fsrc,
            &fdst,
            edge_feats,
            Some(node_extra),
        )?;

        let (raw_flow, flow) = ctx.decode_flow(tape, h_f, f_prev)?;
        let cut_logits = if dual {
            Some(ctx.linear(tape, "cut", h_f)?)
        } else {
            pipeline_logits
        };

        // Next-step inputs: either ground truth (teacher forcing) or the
        // model's own outputs. The predicted-flow path keeps its gradient;
        // pointers are discrete and never carry gradient.
        h_prev = h_f;
        pred_state = pred_used.clone();
        f_prev = match teacher {
            Some(traj) => tape.constant(n * n, 1, traj.steps[k].flow.clone())?,
            None => flow,
        };
        if dual {
            cut_prev = cut_logits;
        }

        steps.push(StepTids {
            pointer_logits,
            pointer_allowed,
            pred_used,
            raw_flow,
            flow,
            cut_logits,
            h: h_f,
        });
    }
    Ok(steps)
}

/// Direct prediction without step alignment: a fixed number of message
/// rounds, then the flow head.
fn build_no_algo(
    tape: &mut Tape,
    ctx: &EpisodeCtx,
    n: usize,
    h_dim: usize,
) -> Result<Vec<StepTids>, ModelError> {
    let f_zero = tape.zeros(n * n, 1);
    let v_prefix = format!("{}_v", ctx.enc.prefix);
    let e_prefix = format!("{}_e", ctx.enc.prefix);
    let z_v = ctx.encode_nodes(tape, &v_prefix, f_zero, None)?;
    let (src, dst) = ctx.rules.message_pairs(ctx.net, None);
    let z_e = ctx.encode_pairs(tape, &e_prefix, f_zero, &src, &dst)?;
    let mut h = tape.zeros(n, h_dim);
    for _ in 0..NO_ALGO_ROUNDS {
        h = ctx.processor_round(tape, "bf", z_v, h, &src, &dst, z_e, None)?;
    }
    let (raw_flow, flow) = ctx.decode_flow(tape, h, f_zero)?;
    let pointer_logits = tape.zeros(n, n);
    Ok(vec![StepTids {
        pointer_logits,
        pointer_allowed: None,
        pred_used: (0..n).collect(),
        raw_flow,
        flow,
        cut_logits: None,
        h,
    }])
}

/// Extracts plain values from tape-level step outputs.
pub fn extract_outputs(tape: &Tape, steps: &[StepTids]) -> Vec<StepOutputs> {
    steps
        .iter()
        .map(|s| StepOutputs {
            pointer_logits: tape.value(s.pointer_logits).to_vec(),
            pred: s.pred_used.clone(),
            raw_flow: tape.value(s.raw_flow).to_vec(),
            flow: tape.value(s.flow).to_vec(),
            cut_logits: s.cut_logits.map(|c| tape.value(c).to_vec()),
            h: tape.value(s.h).to_vec(),
        })
        .collect()
}

/// Runs an episode without gradient tracking and returns plain values.
pub fn run_episode(
    net: &FlowNetwork,
    params: &ParamStore,
    config: &ModelConfig,
    t_steps: usize,
    teacher: Option<&Trajectory>,
) -> Result<Vec<StepOutputs>, ModelError> {
    let mut tape = Tape::new();
    let ids = params.register(&mut tape, false)?;
    let steps = build_episode(
        &mut tape,
        &ids,
        net,
        config,
        t_steps,
        teacher,
        STANDARD_ENCODERS,
        MaskRules::from(config.processor),
    )?;
    Ok(extract_outputs(&tape, &steps))
}

/// Runs a dense-processor model with the message and candidate masks of
/// the edge-restricted policy. Exists to verify that the two processors
/// share one code path: with identical parameters this must reproduce the
/// edge-masked model's outputs bit for bit.
pub fn run_episode_with_pgn_mask(
    net: &FlowNetwork,
    params: &ParamStore,
    config: &ModelConfig,
    t_steps: usize,
    teacher: Option<&Trajectory>,
) -> Result<Vec<StepOutputs>, ModelError> {
    if config.processor != Processor::MpnnDense {
        return Err(ModelError::BadConfig(
            "mask-override run expects a dense-processor config".to_string(),
        ));
    }
    let mut tape = Tape::new();
    let ids = params.register(&mut tape, false)?;
    let steps = build_episode(
        &mut tape,
        &ids,
        net,
        config,
        t_steps,
        teacher,
        STANDARD_ENCODERS,
        MaskRules::Pgn,
    )?;
    Ok(extract_outputs(&tape, &steps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algo::ford_fulkerson;
    use crate::graph::{generate_network, Family};

    fn cfg(variant: Variant, processor: Processor) -> ModelConfig {
        ModelConfig::new(variant, processor, Agg::Max, 6)
    }

    fn sample_net(seed: u64) -> FlowNetwork {
        generate_network(Family::TwoCommunity, 8, seed).expect("generation")
    }

    #[test]
    fn init_is_deterministic_and_shapes_match_layout() {
        let config = cfg(Variant::Dual, Processor::Pgn);
        let a = init_params(&config, 7);
        let b = init_params(&config, 7);
        assert_eq!(a, b);
        let c = init_params(&config, 8);
        assert_ne!(a, c);
        let w = a.get("pf_phi_w1").unwrap();
        assert_eq!(w.shape, (5 * 6 + 3 + 2, 6));
        let w = a.get("pf_psi_w1").unwrap();
        assert_eq!(w.shape, (3 * 6 + 1 + 1, 6));
    }

    #[test]
    fn shared_parameters_are_bit_identical_across_variants() {
        let primal = init_params(&cfg(Variant::Primal, Processor::Pgn), 42);
        let dual = init_params(&cfg(Variant::Dual, Processor::Pgn), 42);
        let extra: Vec<&str> = dual
            .names()
            .filter(|n| primal.get(n).is_none())
            .collect();
        assert_eq!(extra, vec!["cut_b", "cut_w"]);
        for name in primal.names() {
            let p = primal.get(name).unwrap();
            let d = dual.get(name).unwrap();
            assert_eq!(p.shape.1, d.shape.1, "{name}: column count must match");
            assert!(d.shape.0 >= p.shape.0, "{name}: dual layer cannot shrink");
            // Optional channels append rows, so the primal tensor is a
            // row-major prefix of the dual one.
            assert_eq!(
                p.data,
                d.data[..p.data.len()],
                "{name}: shared rows must be bit-identical"
            );
        }
        // The pipeline's extra node feature likewise only appends rows to
        // the node encoder.
        let pipeline = init_params(&cfg(Variant::Pipeline, Processor::Pgn), 42);
        let p = primal.get("enc_v_w").unwrap();
        let q = pipeline.get("enc_v_w").unwrap();
        assert_eq!(q.shape, (5, 6));
        assert_eq!(p.data, q.data[..p.data.len()]);
    }

    #[test]
    fn zero_parameters_give_zero_embeddings_and_zero_flow() {
        let config = cfg(Variant::Primal, Processor::Pgn);
        let mut params = init_params(&config, 1);
        let names: Vec<String> = params.names().map(String::from).collect();
        for name in names {
            let shape = params.get(&name).unwrap().shape;
            params.insert(&name, shape.0, shape.1, vec![0.0; shape.0 * shape.1]);
        }
        let net = sample_net(3);
        let steps = run_episode(&net, &params, &config, 2, None).unwrap();
        for step in &steps {
            assert!(step.flow.iter().all(|&v| v == 0.0));
            assert!(step.raw_flow.iter().all(|&v| v == 0.0));
            assert!(step.h.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rescaled_flow_is_feasible_and_antisymmetric() {
        for seed in 0..5u64 {
            let net = sample_net(seed);
            let n = net.n;
            let config = cfg(Variant::Dual, Processor::Pgn);
            let params = init_params(&config, seed.wrapping_mul(31).wrapping_add(5));
            let steps = run_episode(&net, &params, &config, 3, None).unwrap();
            let env = symmetric_envelope(&net);
            for step in &steps {
                for i in 0..n {
                    for j in 0..n {
                        let f = step.flow[i * n + j];
                        assert!(f.abs() <= env[i * n + j], "envelope violated at ({i},{j})");
                        assert!(
                            (f + step.flow[j * n + i]).abs() <= 1e-12,
                            "antisymmetry violated at ({i},{j})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn tape_rescale_matches_value_rescale() {
        let net = sample_net(11);
        let config = cfg(Variant::Primal, Processor::Pgn);
        let params = init_params(&config, 2);
        let steps = run_episode(&net, &params, &config, 1, None).unwrap();
        let plain = rescale_flow(&steps[0].raw_flow, &net);
        assert_eq!(steps[0].flow, plain);
    }

    #[test]
    fn teacher_forcing_feeds_ground_truth_pointers() {
        let net = sample_net(4);
        let result = ford_fulkerson(&net).unwrap();
        let t = result.trajectory.len();
        assert!(t > 0);
        let config = cfg(Variant::Dual, Processor::Pgn);
        let params = init_params(&config, 9);
        let steps = run_episode(&net, &params, &config, t, Some(&result.trajectory)).unwrap();
        for (k, step) in steps.iter().enumerate() {
            assert_eq!(step.pred, result.trajectory.steps[k].pred);
        }
    }

    #[test]
    fn zero_steps_give_empty_episode() {
        let net = sample_net(5);
        let config = cfg(Variant::Primal, Processor::Pgn);
        let params = init_params(&config, 0);
        let steps = run_episode(&net, &params, &config, 0, None).unwrap();
        assert!(steps.is_empty());
    }

    #[test]
    fn no_algo_is_a_single_pass() {
        let net = sample_net(6);
        let config = cfg(Variant::NoAlgo, Processor::Pgn);
        let params = init_params(&config, 3);
        assert!(params.get("ptr_w1").is_none());
        assert!(params.get("cut_w").is_none());
        let steps = run_episode(&net, &params, &config, 7, None).unwrap();
        assert_eq!(steps.len(), 1);
        assert!(steps[0].cut_logits.is_none());
    }

    #[test]
    fn pipeline_emits_constant_cut_logits_across_steps() {
        let net = sample_net(7);
        let config = cfg(Variant::Pipeline, Processor::Pgn);
        let params = init_params(&config, 3);
        let steps = run_episode(&net, &params, &config, 3, None).unwrap();
        let first = steps[0].cut_logits.clone().unwrap();
        for step in &steps {
            assert_eq!(step.cut_logits.as_ref().unwrap(), &first);
        }
    }

    #[test]
    fn dense_with_restricted_mask_matches_pgn_bitwise() {
        for seed in [0u64, 1, 2] {
            let net = sample_net(20 + seed);
            let pgn_cfg = cfg(Variant::Dual, Processor::Pgn);
            let dense_cfg = cfg(Variant::Dual, Processor::MpnnDense);
            let params = init_params(&pgn_cfg, 100 + seed);
            let a = run_episode(&net, &params, &pgn_cfg, 3, None).unwrap();
            let b = run_episode_with_pgn_mask(&net, &params, &dense_cfg, 3, None).unwrap();
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.pointer_logits, y.pointer_logits);
                assert_eq!(x.pred, y.pred);
                assert_eq!(x.raw_flow, y.raw_flow);
                assert_eq!(x.flow, y.flow);
                assert_eq!(x.cut_logits, y.cut_logits);
                assert_eq!(x.h, y.h);
            }
        }
    }

    #[test]
    fn episode_is_permutation_equivariant() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let net = sample_net(9);
        let n = net.n;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let edges: Vec<(usize, usize, f64, f64)> = net
            .edges
            .iter()
            .map(|&(u, v)| (perm[u], perm[v], net.cap(u, v), net.weight(u, v)))
            .collect();
        let relabeled = FlowNetwork::from_edges(n, net.family, perm[net.s], perm[net.t], &edges);

        let config = cfg(Variant::Dual, Processor::Pgn);
        let params = init_params(&config, 5);
        let a = run_episode(&net, &params, &config, 2, None).unwrap();
        let b = run_episode(&relabeled, &params, &config, 2, None).unwrap();
        let h_dim = config.hidden_dim;
        let tol = 1e-9;
        for (sa, sb) in a.iter().zip(&b) {
            for i in 0..n {
                for d in 0..h_dim {
                    let lhs = sa.h[i * h_dim + d];
                    let rhs = sb.h[perm[i] * h_dim + d];
                    assert!((lhs - rhs).abs() <= tol, "latent mismatch at ({i},{d})");
                }
                for j in 0..n {
                    let lhs = sa.flow[i * n + j];
                    let rhs = sb.flow[perm[i] * n + perm[j]];
                    assert!((lhs - rhs).abs() <= tol, "flow mismatch at ({i},{j})");
                    let lhs = sa.pointer_logits[i * n + j];
                    let rhs = sb.pointer_logits[perm[i] * n + perm[j]];
                    assert!((lhs - rhs).abs() <= tol, "logit mismatch at ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn checkpoint_roundtrips_config_and_params() {
        let config = cfg(Variant::Dual, Processor::MpnnDense);
        let params = init_params(&config, 13);
        let ckpt = Checkpoint::new(config, params.clone());
        let json = ckpt.to_json();
        let back = Checkpoint::from_json(&json).unwrap();
        assert_eq!(back.config, config);
        assert_eq!(back.params, params);
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_candidate() {
        let logits = vec![
            0.5, 0.5, 0.1, //
            0.0, 0.3, 0.3, //
            0.9, 0.2, 0.9,
        ];
        assert_eq!(argmax_pointers(&logits, 3, None), vec![0, 1, 0]);
        let allowed = vec![
            false, true, true, //
            true, false, true, //
            true, true, false,
        ];
        assert_eq!(argmax_pointers(&logits, 3, Some(&allowed)), vec![1, 2, 0]);
    }

    #[test]
    fn missing_parameters_are_reported_by_name() {
        // A store initialized for the direct-prediction variant lacks the
        // pointer head entirely.
        let config = cfg(Variant::Primal, Processor::Pgn);
        let params = init_params(&cfg(Variant::NoAlgo, Processor::Pgn), 0);
        let net = sample_net(2);
        let err = run_episode(&net, &params, &config, 1, None).unwrap_err();
        match err {
            ModelError::MissingParam(name) => assert_eq!(name, "ptr_w1"),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
