//! Step-supervised training of the flow-imitation network.
//!
//! Every algorithm step contributes a pointer cross-entropy, a flow MSE
//! over directed edge entries, and (for cut-head variants) a per-node cut
//! BCE; the final outputs contribute one more flow/cut term. Terms are
//! summed unweighted. Teacher forcing is sampled once per episode with
//! probability `decay^epoch`. Optimization is plain SGD with decoupled L2,
//! one update per graph, and the returned parameters are those of the best
//! validation flow MAE epoch.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algo::Trajectory;
use crate::graph::{DatasetItem, FlowNetwork};
use crate::model::{
    append_capacity_free_encoders, build_episode, init_params, MaskRules, ModelConfig, ModelError,
    StepTids, Variant, CAPACITY_FREE_ENCODERS, STANDARD_ENCODERS,
};
use crate::seed::mix;
use crate::tensor::{ParamStore, Tape, TensorError, Tid};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config invalid: {0}")]
    BadConfig(String),
    #[error("dataset has no {0} items")]
    EmptyDataset(&'static str),
    #[error("cut labels missing or mis-sized: expected {want} nodes, got {got}")]
    MissingCutLabels { want: usize, got: usize },
    #[error("training diverged at epoch {epoch}: loss = {value}")]
    Diverged { epoch: usize, value: f64 },
    #[error("curve output: {0}")]
    Io(#[from] std::io::Error),
}

/// Full training configuration: the model plus optimization knobs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Per-epoch decay of the teacher-forcing probability.
    pub teacher_decay: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-scale profile with the tuned hyperparameters per variant.
    pub fn paper(variant: Variant) -> Self {
        let (hidden, lr, wd) = match variant {
            Variant::Dual => (65, 0.009868, 0.001734),
            // The remaining variants reuse the tuned primal values.
            _ => (68, 0.009341, 0.003420),
        };
        TrainConfig {
            model: ModelConfig::new(
                variant,
                crate::model::Processor::Pgn,
                crate::tensor::Agg::Max,
                hidden,
            ),
            epochs: 20_000,
            lr,
            weight_decay: wd,
            teacher_decay: 0.999,
            seed: 0,
        }
    }

    /// Reduced profile sized for a single desktop core: small hidden
    /// width, 2000 epochs, and one uniform optimizer setting for every
    /// variant. The full-scale learning rates are unstable at this width —
    /// occasional episodes hit a high-gain activation pattern in the
    /// recurrent processor, the forward pass grows geometrically over the
    /// trajectory, and the resulting gradient spike throws the parameters
    /// off a cliff (loss reaches NaN). The rate/decay pair below was
    /// selected by a stability-and-metrics search over the desk-scale
    /// study datasets.
    pub fn desk(variant: Variant) -> Self {
        let mut cfg = Self::paper(variant);
        cfg.model.hidden_dim = 6;
        cfg.epochs = 2_000;
        cfg.lr = 9e-4;
        cfg.weight_decay = 0.02;
        cfg
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::BadConfig("epochs must be >= 1".to_string()));
        }
        if !(self.teacher_decay > 0.0 && self.teacher_decay <= 1.0) {
            return Err(TrainError::BadConfig(format!(
                "teacher_decay must lie in (0, 1], got {}",
                self.teacher_decay
            )));
        }
        if self.model.hidden_dim == 0 {
            return Err(TrainError::BadConfig("hidden_dim must be > 0".to_string()));
        }
        Ok(())
    }
}

/// Probability that ground-truth hints feed the next step at this epoch.
pub fn teacher_force_probability(epoch: usize, decay: f64) -> f64 {
    decay.powi(epoch as i32).clamp(0.0, 1.0)
}

/// Samples the per-episode teacher-forcing decision.
pub fn teacher_force_gate(epoch: usize, decay: f64, rng: &mut impl Rng) -> bool {
    rng.gen_bool(teacher_force_probability(epoch, decay))
}

/// Flattened indices of the directed edges — the entries losses and MAEs
/// are computed over.
pub fn edge_indices(net: &FlowNetwork) -> Vec<usize> {
    net.edges.iter().map(|&(u, v)| u * net.n + v).collect()
}

fn cut_labels(truth: &Trajectory, n: usize) -> Result<Vec<f64>, TrainError> {
    if truth.cut.len() != n {
        return Err(TrainError::MissingCutLabels {
            want: n,
            got: truth.cut.len(),
        });
    }
    Ok(truth.cut.iter().map(|&c| c as f64).collect())
}

/// Sum of one step's loss terms: pointer cross-entropy, flow MSE over
/// directed edges, and cut BCE where the variant has a cut head.
pub fn step_loss(
    tape: &mut Tape,
    step: &StepTids,
    truth_pred: &[usize],
    truth_flow: &[f64],
    cut: Option<&[f64]>,
    edge_idx: &[usize],
) -> Result<Tid, TrainError> {
    let pointer = tape.pointer_loss(
        step.pointer_logits,
        truth_pred,
        step.pointer_allowed.as_deref(),
    )?;
    let targets: Vec<f64> = edge_idx.iter().map(|&e| truth_flow[e]).collect();
    let flow = tape.mse_indexed(step.flow, edge_idx, &targets)?;
    let mut total = tape.add(pointer, flow)?;
    if let (Some(labels), Some(logits)) = (cut, step.cut_logits) {
        let bce = tape.bce_loss(logits, labels)?;
        total = tape.add(total, bce)?;
    }
    Ok(total)
}

/// Episode loss: step losses over the trajectory plus final-output terms.
/// `None` when the episode has no steps and no final target signal
/// (zero-length trajectories predict the zero flow by convention).
pub fn episode_loss(
    tape: &mut Tape,
    steps: &[StepTids],
    truth: &Trajectory,
    net: &FlowNetwork,
    config: &ModelConfig,
) -> Result<Option<Tid>, TrainError> {
    let edge_idx = edge_indices(net);
    if config.variant == Variant::NoAlgo {
        // Direct prediction: only the final flow is supervised.
        let step = &steps[0];
        let targets: Vec<f64> = edge_idx.iter().map(|&e| truth.final_flow[e]).collect();
        let loss = tape.mse_indexed(step.flow, &edge_idx, &targets)?;
        return Ok(Some(loss));
    }
    if steps.is_empty() {
        return Ok(None);
    }
    let labels = if config.variant.has_cut_head() {
        Some(cut_labels(truth, net.n)?)
    } else {
        None
    };
    let mut total: Option<Tid> = None;
    for (k, step) in steps.iter().enumerate() {
        let term = step_loss(
            tape,
            step,
            &truth.steps[k].pred,
            &truth.steps[k].flow,
            labels.as_deref(),
            &edge_idx,
        )?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    // Final outputs: the last step's flow against the final flow, and the
    // cut against the cut labels.
    let last = steps.last().expect("non-empty episode");
    let targets: Vec<f64> = edge_idx.iter().map(|&e| truth.final_flow[e]).collect();
    let final_flow = tape.mse_indexed(last.flow, &edge_idx, &targets)?;
    let mut acc = tape.add(total.expect("non-empty episode"), final_flow)?;
    if let (Some(labels), Some(logits)) = (labels.as_deref(), last.cut_logits) {
        let bce = tape.bce_loss(logits, labels)?;
        acc = tape.add(acc, bce)?;
    }
    Ok(Some(acc))
}

/// One row of the per-epoch training record.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_f_mae: f64,
    /// Fraction of correctly classified nodes; absent without a cut head.
    pub cut_acc: Option<f64>,
}

#[derive(Debug)]
pub struct TrainResult {
    /// Parameters of the best validation epoch.
    pub params: ParamStore,
    pub curves: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_valid_f_mae: f64,
}

/// Mean absolute error on final flows (directed edges) plus cut accuracy,
/// on forward-only episodes of ground-truth length.
pub fn validation_metrics(
    params: &ParamStore,
    config: &ModelConfig,
    items: &[DatasetItem],
) -> Result<(f64, Option<f64>), TrainError> {
    let mut mae_sum = 0.0;
    let mut cut_hits = 0usize;
    let mut cut_total = 0usize;
    for item in items {
        let net = &item.network;
        let t = item.trajectory.len();
        let steps = crate::model::run_episode(net, params, config, t, None)?;
        let edge_idx = edge_indices(net);
        let flow: Option<&[f64]> = steps.last().map(|s| s.flow.as_slice());
        let mae = if edge_idx.is_empty() {
            0.0
        } else {
            edge_idx
                .iter()
                .map(|&e| {
                    let predicted = flow.map_or(0.0, |f| f[e]);
                    (predicted - item.trajectory.final_flow[e]).abs()
                })
                .sum::<f64>()
                / edge_idx.len() as f64
        };
        mae_sum += mae;
        if config.variant.has_cut_head() {
            if let Some(step) = steps.last() {
                if let Some(logits) = &step.cut_logits {
                    for (i, &z) in logits.iter().enumerate() {
                        let predicted = z > 0.0;
                        let label = item.trajectory.cut[i] == 1;
                        cut_hits += (predicted == label) as usize;
                        cut_total += 1;
                    }
                }
            }
        }
    }
    let f_mae = mae_sum / items.len().max(1) as f64;
    let cut_acc = (cut_total > 0).then(|| cut_hits as f64 / cut_total as f64);
    Ok((f_mae, cut_acc))
}

/// Trains on `train_items`, tracking validation each epoch; returns the
/// parameters of the best validation flow MAE along with the full curves.
pub fn train(
    train_items: &[DatasetItem],
    valid_items: &[DatasetItem],
    cfg: &TrainConfig,
) -> Result<TrainResult, TrainError> {
    cfg.validate()?;
    if train_items.is_empty() {
        return Err(TrainError::EmptyDataset("train"));
    }
    if valid_items.is_empty() {
        return Err(TrainError::EmptyDataset("valid"));
    }
    let rules = MaskRules::from(cfg.model.processor);
    let mut params = init_params(&cfg.model, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0xE70C));
    let mut curves = Vec::with_capacity(cfg.epochs);
    let mut best_epoch = 0usize;
    let mut best_f_mae = f64::INFINITY;
    let mut best_params = params.clone();
    let mut order: Vec<usize> = (0..train_items.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for &idx in &order {
            let item = &train_items[idx];
            let t = item.trajectory.len();
            let force = teacher_force_gate(epoch, cfg.teacher_decay, &mut rng);
            let teacher = force.then_some(&item.trajectory);
            let mut tape = Tape::new();
            let ids = params.register(&mut tape, true)?;
            let steps = build_episode(
                &mut tape,
                &ids,
                &item.network,
                &cfg.model,
                t,
                teacher,
                STANDARD_ENCODERS,
                rules,
            )?;
            let Some(loss) = episode_loss(&mut tape, &steps, &item.trajectory, &item.network, &cfg.model)?
            else {
                continue;
            };
            let value = tape.scalar(loss)?;
            if !value.is_finite() {
                return Err(TrainError::Diverged { epoch, value });
            }
            loss_sum += value;
            loss_count += 1;
            tape.backward(loss)?;
            let grads = params.collect_grads(&tape, &ids);
            params.sgd_step(&grads, cfg.lr, cfg.weight_decay)?;
        }
        let (f_mae, cut_acc) = validation_metrics(&params, &cfg.model, valid_items)?;
        curves.push(EpochStats {
            epoch,
            train_loss: loss_sum / loss_count.max(1) as f64,
            valid_f_mae: f_mae,
            cut_acc,
        });
        if f_mae < best_f_mae {
            best_f_mae = f_mae;
            best_epoch = epoch;
            best_params = params.clone();
        }
    }
    Ok(TrainResult {
        params: best_params,
        curves,
        best_epoch,
        best_valid_f_mae: best_f_mae,
    })
}

/// Writes the per-epoch record as CSV: epoch, train_loss, valid_F_mae,
/// cut_acc (empty when absent).
pub fn write_curves_csv(path: &Path, curves: &[EpochStats]) -> Result<(), TrainError> {
    Ok(std::fs::write(path, curves_to_csv(curves))?)
}

pub fn curves_to_csv(curves: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,valid_F_mae,cut_acc\n");
    for row in curves {
        let cut = row
            .cut_acc
            .map(|v| v.to_string())
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.epoch, row.train_loss, row.valid_f_mae, cut
        ));
    }
    out
}

// --- hyperparameter random search ------------------------------------------------

/// Sampling ranges for one search level. Level 2 ranges are nested inside
/// level 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub level: u8,
    pub samples: usize,
}

impl SearchSpace {
    pub fn new(level: u8, samples: usize) -> Result<Self, TrainError> {
        if level != 1 && level != 2 {
            return Err(TrainError::BadConfig(format!(
                "search level must be 1 or 2, got {level}"
            )));
        }
        Ok(SearchSpace { level, samples })
    }

    /// (lr range, weight-decay range, hidden range).
    pub fn ranges(&self) -> ((f64, f64), (f64, f64), (usize, usize)) {
        match self.level {
            1 => ((1e-5, 1e-1), (1e-5, 1e-1), (16, 512)),
            _ => ((1e-3, 1e-2), (1e-3, 4e-3), (60, 100)),
        }
    }

    /// Draws (lr, weight_decay, hidden): log-uniform reals, uniform integer.
    pub fn sample(&self, rng: &mut impl Rng) -> (f64, f64, usize) {
        let ((lr_lo, lr_hi), (wd_lo, wd_hi), (h_lo, h_hi)) = self.ranges();
        let lr = (rng.gen_range(lr_lo.ln()..lr_hi.ln())).exp();
        let wd = (rng.gen_range(wd_lo.ln()..wd_hi.ln())).exp();
        let hidden = rng.gen_range(h_lo..=h_hi);
        (lr, wd, hidden)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub lr: f64,
    pub weight_decay: f64,
    pub hidden_dim: usize,
    pub valid_f_mae: f64,
}

/// Samples `space.samples` configurations, scores each with the supplied
/// trainer (typically a reduced-budget [`train`]), and returns outcomes
/// ranked by validation flow MAE, best first.
pub fn random_search(
    space: &SearchSpace,
    seed: u64,
    mut score: impl FnMut(f64, f64, usize) -> Result<f64, TrainError>,
) -> Result<Vec<SearchOutcome>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x5EA2C4));
    let mut outcomes = Vec::with_capacity(space.samples);
    for _ in 0..space.samples {
        let (lr, wd, hidden) = space.sample(&mut rng);
        let valid_f_mae = score(lr, wd, hidden)?;
        outcomes.push(SearchOutcome {
            lr,
            weight_decay: wd,
            hidden_dim: hidden,
            valid_f_mae,
        });
    }
    outcomes.sort_by(|a, b| a.valid_f_mae.total_cmp(&b.valid_f_mae));
    Ok(outcomes)
}

// --- encoder retraining -------------------------------------------------------------

pub struct RetrainResult {
    pub params: ParamStore,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
}

/// Trains fresh capacity-free encoders on top of a trained model whose
/// every other parameter is frozen. Episodes read the `enc2_*` encoders
/// (edge inputs are [path weight, previous flow]; capacity appears only
/// inside the output envelope). Ground-truth hints always feed forward —
/// the new encoders are being fitted to an already-working network, not
/// the other way around.
pub fn retrain_encoders(
    base: &ParamStore,
    config: &ModelConfig,
    items: &[DatasetItem],
    epochs: usize,
    lr: f64,
    weight_decay: f64,
    seed: u64,
) -> Result<RetrainResult, TrainError> {
    if config.variant == Variant::Pipeline {
        return Err(TrainError::BadConfig(
            "the cut preprocessor has its own capacity encoders; retraining is not supported"
                .to_string(),
        ));
    }
    if items.is_empty() {
        return Err(TrainError::EmptyDataset("retrain"));
    }
    let mut params = base.clone();
    append_capacity_free_encoders(&mut params, config.hidden_dim, seed);
    let trainable = ["enc2_v_w", "enc2_v_b", "enc2_e_w", "enc2_e_b"];
    params.freeze_except(&trainable);
    let rules = MaskRules::from(config.processor);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x2E7A));
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for &idx in &order {
            let item = &items[idx];
            let t = item.trajectory.len();
            let mut tape = Tape::new();
            let ids = params.register(&mut tape, true)?;
            let steps = build_episode(
                &mut tape,
                &ids,
                &item.network,
                config,
                t,
                Some(&item.trajectory),
                CAPACITY_FREE_ENCODERS,
                rules,
            )?;
            let Some(loss) =
                episode_loss(&mut tape, &steps, &item.trajectory, &item.network, config)?
            else {
                continue;
            };
            let value = tape.scalar(loss)?;
            if !value.is_finite() {
                return Err(TrainError::Diverged { epoch, value });
            }
            loss_sum += value;
            count += 1;
            tape.backward(loss)?;
            let grads = params.collect_grads(&tape, &ids);
            let touched: BTreeSet<&str> = grads.keys().map(String::as_str).collect();
            debug_assert!(
                touched.iter().all(|name| trainable.contains(name)),
                "gradients leaked into frozen parameters"
            );
            params.sgd_step(&grads, lr, weight_decay)?;
        }
        losses.push(loss_sum / count.max(1) as f64);
    }
    Ok(RetrainResult { params, losses })
}

/// Ordinary least-squares slope of `values` against their index.
pub fn linear_fit_slope(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.len() < 2 {
        return 0.0;
    }
    let mean_x = (n - 1.0) / 2.0;
    let mean_y = values.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (i, &y) in values.iter().enumerate() {
        let dx = i as f64 - mean_x;
        cov += dx * (y - mean_y);
        var += dx * dx;
    }
    cov / var
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{gen_dataset, Family};
    use crate::model::Processor;
    use crate::tensor::Agg;

    fn desk_cfg(variant: Variant, hidden: usize, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            model: ModelConfig::new(variant, Processor::Pgn, Agg::Max, hidden),
            epochs,
            lr: 0.009868,
            weight_decay: 0.001734,
            teacher_decay: 0.999,
            seed,
        }
    }

    fn tiny_dataset(count: usize, seed: u64) -> Vec<DatasetItem> {
        gen_dataset(Family::TwoCommunity, 8, count, "train", seed)
            .expect("dataset")
            .items
    }

    #[test]
    fn gate_probability_follows_the_decay_schedule() {
        assert_eq!(teacher_force_probability(0, 0.999), 1.0);
        assert_eq!(teacher_force_probability(1, 0.999), 0.999);
        let p693 = teacher_force_probability(693, 0.999);
        assert!((p693 - 0.4999).abs() < 1e-3, "p(693) = {p693}");
        // Monotone decreasing for decay < 1.
        let mut prev = 1.0f64;
        for epoch in 1..50 {
            let p = teacher_force_probability(epoch, 0.999);
            assert!(p < prev);
            prev = p;
        }
        // Epoch 0 forces regardless of rng draws.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..100).all(|_| teacher_force_gate(0, 0.999, &mut rng)));
    }

    #[test]
    fn uniform_pointer_logits_cost_ln_n_per_step() {
        // With all-zero parameters and a dense candidate mask, the pointer
        // term of each step is exactly ln(n), flow/cut predictions are 0,
        // and every other term is computable in closed form.
        let items = tiny_dataset(1, 3);
        let item = &items[0];
        let n = item.network.n;
        let t = item.trajectory.len();
        assert!(t > 0);
        let config = ModelConfig::new(Variant::Dual, Processor::MpnnDense, Agg::Max, 4);
        let mut params = init_params(&config, 0);
        let names: Vec<String> = params.names().map(String::from).collect();
        for name in names {
            let shape = params.get(&name).unwrap().shape;
            params.insert(&name, shape.0, shape.1, vec![0.0; shape.0 * shape.1]);
        }
        let mut tape = Tape::new();
        let ids = params.register(&mut tape, false).unwrap();
        let steps = build_episode(
            &mut tape,
            &ids,
            &item.network,
            &config,
            t,
            Some(&item.trajectory),
            STANDARD_ENCODERS,
            MaskRules::Dense,
        )
        .unwrap();
        let loss = episode_loss(&mut tape, &steps, &item.trajectory, &item.network, &config)
            .unwrap()
            .unwrap();
        let edge_idx = edge_indices(&item.network);
        let mse_zero = |flow: &[f64]| {
            edge_idx.iter().map(|&e| flow[e] * flow[e]).sum::<f64>() / edge_idx.len() as f64
        };
        let ln2 = std::f64::consts::LN_2;
        let mut expected = 0.0;
        for step in &item.trajectory.steps {
            expected += (n as f64).ln() + mse_zero(&step.flow) + ln2;
        }
        expected += mse_zero(&item.trajectory.final_flow) + ln2;
        let got = tape.scalar(loss).unwrap();
        assert!(
            (got - expected).abs() < 1e-9,
            "episode loss {got} vs expected {expected}"
        );
    }

    #[test]
    fn perfect_predictions_hit_the_loss_floor() {
        // Hand-built step outputs that exactly match the targets: MSE and
        // BCE terms vanish (BCE up to sigmoid saturation).
        let items = tiny_dataset(1, 5);
        let item = &items[0];
        let net = &item.network;
        let n = net.n;
        let truth = &item.trajectory;
        let mut tape = Tape::new();
        let step0 = &truth.steps[0];
        let big = 50.0;
        let mut logits = vec![-big; n * n];
        for (i, &p) in step0.pred.iter().enumerate() {
            logits[i * n + p] = big;
        }
        let pointer_logits = tape.leaf(n, n, logits, false).unwrap();
        let flow = tape.leaf(n * n, 1, step0.flow.clone(), false).unwrap();
        let cut_logits_vals: Vec<f64> = truth
            .cut
            .iter()
            .map(|&c| if c == 1 { big } else { -big })
            .collect();
        let cut_logits = tape.leaf(n, 1, cut_logits_vals, false).unwrap();
        let step = StepTids {
            pointer_logits,
            pointer_allowed: None,
            pred_used: step0.pred.clone(),
            raw_flow: flow,
            flow,
            cut_logits: Some(cut_logits),
            h: flow,
        };
        let labels: Vec<f64> = truth.cut.iter().map(|&c| c as f64).collect();
        let loss = step_loss(
            &mut tape,
            &step,
            &step0.pred,
            &step0.flow,
            Some(&labels),
            &edge_indices(net),
        )
        .unwrap();
        assert!(tape.scalar(loss).unwrap() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let train_items = tiny_dataset(2, 11);
        let valid_items = tiny_dataset(1, 12);
        let mut cfg = desk_cfg(Variant::Primal, 4, 3, 7);
        cfg.lr = 0.0;
        cfg.teacher_decay = 1.0;
        let result = train(&train_items, &valid_items, &cfg).unwrap();
        assert_eq!(result.params, init_params(&cfg.model, cfg.seed));
        // Identical parameters every epoch -> identical losses.
        let first = result.curves[0].train_loss;
        for row in &result.curves {
            assert_eq!(row.train_loss, first);
            assert_eq!(row.valid_f_mae, result.curves[0].valid_f_mae);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let train_items = tiny_dataset(2, 21);
        let valid_items = tiny_dataset(1, 22);
        let cfg = desk_cfg(Variant::Dual, 4, 4, 3);
        let a = train(&train_items, &valid_items, &cfg).unwrap();
        let b = train(&train_items, &valid_items, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.best_epoch, b.best_epoch);
        for (x, y) in a.curves.iter().zip(&b.curves) {
            assert_eq!(x.train_loss, y.train_loss);
            assert_eq!(x.valid_f_mae, y.valid_f_mae);
        }
    }

    #[test]
    fn smoke_run_loss_trends_downward() {
        let train_items = tiny_dataset(1, 31);
        let valid_items = tiny_dataset(1, 32);
        let cfg = desk_cfg(Variant::Dual, 6, 60, 0);
        let result = train(&train_items, &valid_items, &cfg).unwrap();
        let losses: Vec<f64> = result.curves[..50].iter().map(|r| r.train_loss).collect();
        let slope = linear_fit_slope(&losses);
        assert!(slope < 0.0, "train-loss slope over 50 epochs = {slope}");
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostic() {
        let train_items = tiny_dataset(2, 41);
        let valid_items = tiny_dataset(1, 42);
        let cfg = desk_cfg(Variant::Primal, 4, 2, 0);
        // Poison the flow head's output bias; additions keep NaN alive all
        // the way into the loss.
        let mut params = init_params(&cfg.model, cfg.seed);
        let shape = params.get("flow_b2").unwrap().shape;
        params.insert("flow_b2", shape.0, shape.1, vec![f64::NAN; shape.0 * shape.1]);
        // train() inits its own params, so poison via a wrapper: run the
        // loss path directly.
        let item = &train_items[0];
        let mut tape = Tape::new();
        let ids = params.register(&mut tape, true).unwrap();
        let steps = build_episode(
            &mut tape,
            &ids,
            &item.network,
            &cfg.model,
            item.trajectory.len(),
            None,
            STANDARD_ENCODERS,
            MaskRules::Pgn,
        )
        .unwrap();
        let loss = episode_loss(&mut tape, &steps, &item.trajectory, &item.network, &cfg.model)
            .unwrap()
            .unwrap();
        assert!(!tape.scalar(loss).unwrap().is_finite());
        // And the loop-level guard turns that into Diverged.
        let mut bad_cfg = desk_cfg(Variant::Primal, 4, 2, 0);
        bad_cfg.lr = f64::NAN;
        let err = train(&train_items, &valid_items, &bad_cfg).unwrap_err();
        match err {
            TrainError::Diverged { epoch, .. } => assert_eq!(epoch, 0),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn search_spaces_nest_and_rank_outcomes() {
        let l1 = SearchSpace::new(1, 5).unwrap();
        let l2 = SearchSpace::new(2, 5).unwrap();
        let ((a1, b1), (c1, d1), (e1, f1)) = l1.ranges();
        let ((a2, b2), (c2, d2), (e2, f2)) = l2.ranges();
        assert!(a1 <= a2 && b2 <= b1);
        assert!(c1 <= c2 && d2 <= d1);
        assert!(e1 <= e2 && f2 <= f1);
        assert!(SearchSpace::new(3, 1).is_err());

        // Scoring by lr alone: outcomes come back sorted by score.
        let outcomes = random_search(&l2, 9, |lr, _, _| Ok(lr)).unwrap();
        assert_eq!(outcomes.len(), 5);
        for pair in outcomes.windows(2) {
            assert!(pair[0].valid_f_mae <= pair[1].valid_f_mae);
        }
        for o in &outcomes {
            assert!(o.lr >= 1e-3 && o.lr <= 1e-2);
            assert!(o.weight_decay >= 1e-3 && o.weight_decay <= 4e-3);
            assert!(o.hidden_dim >= 60 && o.hidden_dim <= 100);
        }
        // Budget 1 returns the single sampled config.
        let one = random_search(&SearchSpace::new(1, 1).unwrap(), 3, |_, _, _| Ok(0.5)).unwrap();
        assert_eq!(one.len(), 1);

        // Determinism of sampling.
        let again = random_search(&l2, 9, |lr, _, _| Ok(lr)).unwrap();
        for (x, y) in outcomes.iter().zip(&again) {
            assert_eq!(x.lr, y.lr);
            assert_eq!(x.hidden_dim, y.hidden_dim);
        }
    }

    #[test]
    fn retraining_touches_only_the_new_encoders() {
        let items = tiny_dataset(2, 51);
        let config = ModelConfig::new(Variant::Dual, Processor::Pgn, Agg::Max, 4);
        let base = init_params(&config, 8);
        let result = retrain_encoders(&base, &config, &items, 3, 0.01, 0.001, 77).unwrap();
        for name in base.names() {
            assert_eq!(
                base.get(name),
                result.params.get(name),
                "frozen parameter {name} changed"
            );
        }
        for name in ["enc2_v_w", "enc2_v_b", "enc2_e_w", "enc2_e_b"] {
            assert!(result.params.get(name).is_some());
            let fresh = {
                let mut s = ParamStore::new();
                append_capacity_free_encoders(&mut s, config.hidden_dim, 77);
                s
            };
            // Training must have moved the new encoders.
            assert_ne!(fresh.get(name), result.params.get(name), "{name} untouched");
        }
        assert_eq!(result.losses.len(), 3);
        // Zero epochs: parameters stay exactly the initialization.
        let zero = retrain_encoders(&base, &config, &items, 0, 0.01, 0.0, 77).unwrap();
        let mut expect = base.clone();
        append_capacity_free_encoders(&mut expect, config.hidden_dim, 77);
        expect.freeze_except(&["enc2_v_w", "enc2_v_b", "enc2_e_w", "enc2_e_b"]);
        assert_eq!(zero.params, expect);
    }

    #[test]
    fn curves_serialize_to_csv() {
        let curves = vec![
            EpochStats {
                epoch: 0,
                train_loss: 1.5,
                valid_f_mae: 0.25,
                cut_acc: Some(0.875),
            },
            EpochStats {
                epoch: 1,
                train_loss: 1.25,
                valid_f_mae: 0.5,
                cut_acc: None,
            },
        ];
        let csv = curves_to_csv(&curves);
        assert_eq!(
            csv,
            "epoch,train_loss,valid_F_mae,cut_acc\n0,1.5,0.25,0.875\n1,1.25,0.5,\n"
        );
    }

    #[test]
    fn slope_fit_matches_hand_values() {
        assert_eq!(linear_fit_slope(&[3.0, 2.0, 1.0]), -1.0);
        assert_eq!(linear_fit_slope(&[1.0, 1.0, 1.0]), 0.0);
        assert_eq!(linear_fit_slope(&[0.0]), 0.0);
    }
}
