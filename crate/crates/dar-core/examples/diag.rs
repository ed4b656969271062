//! Temporary training-dynamics probe: replicates the SGD loop with per-epoch
//! magnitude logging (max |param|, max |grad|, rollout activation sizes) to
//! locate what grows before the loss turns non-finite. Not part of the
//! shipped tool set.

use dar_core::graph::{gen_dataset, Family};
use dar_core::model::{
    build_episode, init_params, run_episode, MaskRules, Variant, STANDARD_ENCODERS,
};
use dar_core::tensor::Tape;
use dar_core::train::{episode_loss, teacher_force_gate, validation_metrics, TrainConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mix(base: u64, stream: u64) -> u64 {
    let mut state = base ^ stream.wrapping_mul(0xa24b_aed4_963e_e407);
    splitmix64(&mut state)
}

fn max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn max_abs_named<'a>(
    entries: impl Iterator<Item = (&'a str, &'a [f64])>,
) -> (String, f64) {
    let mut best = (String::new(), 0.0f64);
    for (name, data) in entries {
        let m = max_abs(data);
        if m > best.1 {
            best = (name.to_string(), m);
        }
    }
    best
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map_or(0.002, |s| s.parse().unwrap());
    let wd: f64 = args.get(2).map_or(0.001734, |s| s.parse().unwrap());
    let epochs: usize = args.get(3).map_or(400, |s| s.parse().unwrap());
    let seed: u64 = args.get(4).map_or(0, |s| s.parse().unwrap());
    let teacher_decay: Option<f64> = args.get(5).map(|s| s.parse().unwrap());
    let hidden: Option<usize> = args.get(6).map(|s| s.parse().unwrap());

    let train_set = gen_dataset(Family::TwoCommunity, 16, 200, "train", 1000).unwrap();
    let valid_set = gen_dataset(Family::TwoCommunity, 16, 50, "valid", 2000).unwrap();

    let mut cfg = TrainConfig::desk(Variant::Dual);
    cfg.lr = lr;
    cfg.weight_decay = wd;
    cfg.epochs = epochs;
    cfg.seed = seed;
    if let Some(td) = teacher_decay {
        cfg.teacher_decay = td;
    }
    if let Some(h) = hidden {
        cfg.model.hidden_dim = h;
    }
    eprintln!(
        "# lr={lr} wd={wd} epochs={epochs} seed={seed} teacher_decay={} hidden={}",
        cfg.teacher_decay, cfg.model.hidden_dim
    );

    let rules = MaskRules::from(cfg.model.processor);
    let mut params = init_params(&cfg.model, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0xE70C));
    let mut order: Vec<usize> = (0..train_set.items.len()).collect();
    let probe_item = &valid_set.items[0];

    println!("epoch,loss,maxparam,maxparam_name,maxgrad,maxgrad_name,h_inf,ptr_inf,raw_inf,probe_steps,valid_f_mae,valid_cut_acc");
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        let mut epoch_max_grad = (String::new(), 0.0f64);
        let mut fatal: Option<(usize, f64)> = None;
        for &idx in &order {
            let item = &train_set.items[idx];
            let t = item.trajectory.len();
            let force = teacher_force_gate(epoch, cfg.teacher_decay, &mut rng);
            let teacher = force.then_some(&item.trajectory);
            let mut tape = Tape::new();
            let ids = params.register(&mut tape, true).unwrap();
            let steps = build_episode(
                &mut tape,
                &ids,
                &item.network,
                &cfg.model,
                t,
                teacher,
                STANDARD_ENCODERS,
                rules,
            )
            .unwrap();
            let Some(loss) =
                episode_loss(&mut tape, &steps, &item.trajectory, &item.network, &cfg.model)
                    .unwrap()
            else {
                continue;
            };
            let value = tape.scalar(loss).unwrap();
            if !value.is_finite() || value > 1e4 {
                fatal = Some((idx, value));
                // First pathological episode: dissect it with the params as
                // they stood when it was built (no update applied yet).
                eprintln!(
                    "FIRST SPIKE epoch {epoch}: item {idx} loss={value:.6e} teacher={force} steps={t}"
                );
                let replay = run_episode(&item.network, &params, &cfg.model, t, teacher).unwrap();
                for (k, s) in replay.iter().enumerate() {
                    eprintln!(
                        "  step {k}: |h|={:.3e} |ptr|={:.3e} |raw|={:.3e} |cut|={:.3e}",
                        max_abs(&s.h),
                        max_abs(&s.pointer_logits),
                        max_abs(&s.raw_flow),
                        s.cut_logits.as_deref().map_or(0.0, max_abs)
                    );
                }
                if value.is_finite() {
                    tape.backward(loss).unwrap();
                    let grads = params.collect_grads(&tape, &ids);
                    let gm =
                        max_abs_named(grads.iter().map(|(n, g)| (n.as_str(), g.as_slice())));
                    eprintln!("  grad on spike: {} {:.3e}", gm.0, gm.1);
                }
                break;
            }
            loss_sum += value;
            loss_count += 1;
            tape.backward(loss).unwrap();
            let grads = params.collect_grads(&tape, &ids);
            let gm = max_abs_named(grads.iter().map(|(n, g)| (n.as_str(), g.as_slice())));
            if gm.1 > epoch_max_grad.1 {
                epoch_max_grad = gm;
            }
            params.sgd_step(&grads, cfg.lr, cfg.weight_decay).unwrap();
        }
        let pm = max_abs_named(
            params
                .names()
                .map(|n| (n, params.get(n).unwrap().data.as_slice()))
                .collect::<Vec<_>>()
                .into_iter(),
        );
        // Model-own rollout on a fixed held-out item: final-step magnitudes.
        let t = probe_item.trajectory.len();
        let steps = run_episode(&probe_item.network, &params, &cfg.model, t, None).unwrap();
        let (h_inf, ptr_inf, raw_inf) = steps.last().map_or((0.0, 0.0, 0.0), |s| {
            (max_abs(&s.h), max_abs(&s.pointer_logits), max_abs(&s.raw_flow))
        });
        let (f_mae, cut_acc) = if epoch % 10 == 0 || epoch + 1 == cfg.epochs {
            let (m, c) = validation_metrics(&params, &cfg.model, &valid_set.items).unwrap();
            (m, c.unwrap_or(f64::NAN))
        } else {
            (f64::NAN, f64::NAN)
        };
        println!(
            "{epoch},{:.6},{:.4},{},{:.4},{},{:.4},{:.4},{:.4},{t},{:.4},{:.4}",
            loss_sum / loss_count.max(1) as f64,
            pm.1,
            pm.0,
            epoch_max_grad.1,
            epoch_max_grad.0,
            h_inf,
            ptr_inf,
            raw_inf,
            f_mae,
            cut_acc
        );
        if let Some((idx, value)) = fatal {
            eprintln!("STOPPED epoch {epoch}: item {idx} loss={value:.6e}");
            std::process::exit(2);
        }
    }
}
