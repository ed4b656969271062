//! `dar` — generate max-flow datasets, train and evaluate the
//! flow-imitation network, repair predicted flows, and export latent
//! representations. Every subcommand is seeded and deterministic; results
//! are JSON on stdout unless `--out` is given.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use dar_core::eval::{
    baseline_metrics, evaluate, export_embeddings, mean_std, r2_probe, MetricsReport,
};
use dar_core::graph::{gen_dataset, Dataset, Family};
use dar_core::model::{Checkpoint, ModelConfig, Processor, Variant};
use dar_core::postprocess::correct_flow;
use dar_core::tensor::Agg;
use dar_core::train::{
    random_search, train, write_curves_csv, SearchSpace, TrainConfig,
};

#[derive(Parser)]
#[command(name = "dar", about = "Dual algorithmic reasoning for max-flow", version)]
struct Cli {
    /// Base random seed for the subcommand.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Write the JSON result here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of flow networks with algorithm trajectories.
    Gen {
        /// Graph family: two_community or bipartite.
        #[arg(long, default_value = "two_community")]
        family: Family,
        /// Community size (bipartite totals n + 2 after source and sink).
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Split label stored in the file.
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Train a model and save the best-validation checkpoint.
    Train {
        /// JSON file holding a full training configuration; flags below
        /// are ignored when present (except --seed, which always applies).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "dual")]
        variant: Variant,
        #[arg(long, default_value = "pgn")]
        processor: Processor,
        #[arg(long, default_value = "max")]
        aggregation: Agg,
        #[arg(long, default_value_t = 6)]
        hidden: usize,
        #[arg(long, default_value_t = 2000)]
        epochs: usize,
        #[arg(long, default_value_t = 0.0009)]
        lr: f64,
        #[arg(long, default_value_t = 0.02)]
        weight_decay: f64,
        #[arg(long, default_value_t = 0.999)]
        teacher_decay: f64,
        /// Training dataset (from `dar gen`).
        #[arg(long)]
        data: PathBuf,
        /// Validation dataset.
        #[arg(long)]
        valid: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        ckpt: PathBuf,
        /// Per-epoch CSV record (epoch, train_loss, valid_F_mae, cut_acc).
        #[arg(long)]
        curves: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset; optional random-baseline trials.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Number of random-baseline repetitions to aggregate.
        #[arg(long, default_value_t = 0)]
        trials: usize,
    },
    /// Linear-probe R^2 of optimal values on pooled latent states.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Repair a predicted flow to feasibility.
    Correct {
        /// JSON n x n flow matrix (rows of reals).
        #[arg(long)]
        flow: PathBuf,
        /// Dataset file supplying the network.
        #[arg(long)]
        graph: PathBuf,
        /// Item index inside the dataset file.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Export per-node and per-edge latent representations.
    Export {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Random hyperparameter search at reduced budget.
    Search {
        /// 1 = wide log-uniform ranges, 2 = the refined ranges.
        #[arg(long, default_value_t = 2)]
        level: u8,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        /// Training epochs per sampled configuration.
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value = "dual")]
        variant: Variant,
        #[arg(long, default_value = "pgn")]
        processor: Processor,
        #[arg(long, default_value = "max")]
        aggregation: Agg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        valid: PathBuf,
    },
}

fn emit(value: &serde_json::Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => std::fs::write(path, text)
            .with_context(|| format!("writing {}", path.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::read_json(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn metrics_json(m: &MetricsReport) -> serde_json::Value {
    serde_json::to_value(m).expect("metrics serialize")
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let seed = cli.seed;
    let out = cli.out.as_deref();
    match cli.command {
        Command::Gen {
            family,
            n,
            count,
            split,
        } => {
            let dataset = gen_dataset(family, n, count, &split, seed)?;
            match out {
                Some(path) => dataset.write_json(path)?,
                None => println!("{}", dataset.to_json()?),
            }
        }
        Command::Train {
            config,
            variant,
            processor,
            aggregation,
            hidden,
            epochs,
            lr,
            weight_decay,
            teacher_decay,
            data,
            valid,
            ckpt,
            curves,
        } => {
            let mut cfg = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .with_context(|| format!("reading config {}", path.display()))?;
                    serde_json::from_str::<TrainConfig>(&text)
                        .with_context(|| format!("parsing config {}", path.display()))?
                }
                None => TrainConfig {
                    model: ModelConfig::new(variant, processor, aggregation, hidden),
                    epochs,
                    lr,
                    weight_decay,
                    teacher_decay,
                    seed,
                },
            };
            cfg.seed = seed;
            let train_set = load_dataset(&data)?;
            let valid_set = load_dataset(&valid)?;
            let result = train(&train_set.items, &valid_set.items, &cfg)?;
            Checkpoint::new(cfg.model, result.params).save(&ckpt)?;
            if let Some(path) = curves {
                write_curves_csv(&path, &result.curves)?;
            }
            emit(
                &json!({
                    "best_epoch": result.best_epoch,
                    "best_valid_f_mae": result.best_valid_f_mae,
                    "epochs": cfg.epochs,
                    "checkpoint": ckpt.display().to_string(),
                }),
                out,
            )?;
        }
        Command::Eval { ckpt, data, trials } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let dataset = load_dataset(&data)?;
            let report = evaluate(&checkpoint.params, &checkpoint.config, &dataset.items)?;
            let mut value = json!({ "model": metrics_json(&report) });
            if trials > 0 {
                let mut f_mae = Vec::with_capacity(trials);
                let mut qual_gap = Vec::with_capacity(trials);
                let mut cut_acc = Vec::with_capacity(trials);
                for k in 0..trials {
                    let b = baseline_metrics(&dataset.items, seed.wrapping_add(k as u64))?;
                    f_mae.push(b.f_mae);
                    qual_gap.push(b.qual_gap);
                    if let Some(acc) = b.cut_acc {
                        cut_acc.push(acc);
                    }
                }
                let stat = |xs: &[f64]| {
                    let (mean, std) = mean_std(xs);
                    json!({ "mean": mean, "std": std })
                };
                value["baseline"] = json!({
                    "trials": trials,
                    "f_mae": stat(&f_mae),
                    "qual_gap": stat(&qual_gap),
                    "cut_acc": stat(&cut_acc),
                });
            }
            emit(&value, out)?;
        }
        Command::Probe { ckpt, data } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let dataset = load_dataset(&data)?;
            let r2 = r2_probe(&checkpoint.params, &checkpoint.config, &dataset.items)?;
            emit(&json!({ "r2": r2, "graphs": dataset.items.len() }), out)?;
        }
        Command::Correct { flow, graph, index } => {
            let dataset = load_dataset(&graph)?;
            let Some(item) = dataset.items.get(index) else {
                bail!("dataset has {} items, no index {index}", dataset.items.len());
            };
            let net = &item.network;
            let text = std::fs::read_to_string(&flow)
                .with_context(|| format!("reading flow {}", flow.display()))?;
            let rows: Vec<Vec<f64>> = serde_json::from_str(&text)
                .with_context(|| format!("parsing flow {}", flow.display()))?;
            if rows.len() != net.n || rows.iter().any(|r| r.len() != net.n) {
                bail!("flow matrix must be {0} x {0}", net.n);
            }
            let flat: Vec<f64> = rows.into_iter().flatten().collect();
            let corr = correct_flow(net, &flat)?;
            let as_rows: Vec<Vec<f64>> = (0..net.n)
                .map(|i| corr.flow[i * net.n..(i + 1) * net.n].to_vec())
                .collect();
            emit(
                &json!({
                    "flow": as_rows,
                    "before": corr.before,
                    "after": corr.after,
                    "conservation_fallback": corr.conservation_fallback,
                    "capacity_fallback": corr.capacity_fallback,
                    "reductions": corr.reductions,
                }),
                out,
            )?;
        }
        Command::Export { ckpt, graph, index } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let dataset = load_dataset(&graph)?;
            let Some(item) = dataset.items.get(index) else {
                bail!("dataset has {} items, no index {index}", dataset.items.len());
            };
            match out {
                Some(path) => export_embeddings(
                    &checkpoint.params,
                    &checkpoint.config,
                    &item.network,
                    path,
                )?,
                None => {
                    let emb = dar_core::eval::embeddings(
                        &checkpoint.params,
                        &checkpoint.config,
                        &item.network,
                    )?;
                    emit(&serde_json::to_value(&emb)?, None)?;
                }
            }
        }
        Command::Search {
            level,
            samples,
            epochs,
            variant,
            processor,
            aggregation,
            data,
            valid,
        } => {
            let train_set = load_dataset(&data)?;
            let valid_set = load_dataset(&valid)?;
            let space = SearchSpace::new(level, samples)?;
            let outcomes = random_search(&space, seed, |lr, weight_decay, hidden| {
                let cfg = TrainConfig {
                    model: ModelConfig::new(variant, processor, aggregation, hidden),
                    epochs,
                    lr,
                    weight_decay,
                    teacher_decay: 0.999,
                    seed,
                };
                Ok(train(&train_set.items, &valid_set.items, &cfg)?.best_valid_f_mae)
            })?;
            emit(&serde_json::to_value(&outcomes)?, out)?;
        }
    }
    Ok(())
}
