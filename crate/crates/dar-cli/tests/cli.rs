//! End-to-end smoke of every subcommand on tiny budgets.

use std::path::Path;
use std::process::Command;

fn dar(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dar"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &std::process::Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn path_str(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

#[test]
fn full_pipeline_roundtrip() {
    let dir = tempfile::tempdir().expect("tempdir");
    let d = dir.path();
    let train_json = path_str(d, "train.json");
    let valid_json = path_str(d, "valid.json");
    let ckpt = path_str(d, "ckpt.json");
    let curves = path_str(d, "curves.csv");

    // gen: two splits.
    let out = dar(&[
        "gen", "--family", "two_community", "--n", "8", "--count", "3", "--split", "train",
        "--seed", "1", "--out", &train_json,
    ]);
    assert_ok(&out, "gen train");
    let out = dar(&[
        "gen", "--family", "two_community", "--n", "8", "--count", "2", "--split", "valid",
        "--seed", "2", "--out", &valid_json,
    ]);
    assert_ok(&out, "gen valid");
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&train_json).unwrap()).unwrap();
    assert_eq!(parsed["items"].as_array().unwrap().len(), 3);

    // train: tiny dual run writing a checkpoint and curves.
    let out = dar(&[
        "train", "--variant", "dual", "--hidden", "4", "--epochs", "3", "--data", &train_json,
        "--valid", &valid_json, "--ckpt", &ckpt, "--curves", &curves, "--seed", "0",
    ]);
    assert_ok(&out, "train");
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["best_valid_f_mae"].as_f64().unwrap().is_finite());
    let curve_text = std::fs::read_to_string(&curves).unwrap();
    assert!(curve_text.starts_with("epoch,train_loss,valid_F_mae,cut_acc\n"));
    assert_eq!(curve_text.lines().count(), 4); // header + 3 epochs

    // eval with baseline trials.
    let out = dar(&[
        "eval", "--ckpt", &ckpt, "--data", &valid_json, "--trials", "2", "--seed", "5",
    ]);
    assert_ok(&out, "eval");
    let metrics: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(metrics["model"]["f_mae"].as_f64().unwrap() >= 0.0);
    assert!(metrics["baseline"]["f_mae"]["mean"].as_f64().unwrap() >= 0.0);

    // probe.
    let out = dar(&["probe", "--ckpt", &ckpt, "--data", &valid_json]);
    assert_ok(&out, "probe");
    let probe: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(probe["r2"].as_f64().unwrap() <= 1.0);

    // correct: a deliberately unbalanced flow on item 0 of the valid set.
    let valid: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&valid_json).unwrap()).unwrap();
    let n = valid["items"][0]["n"].as_u64().unwrap() as usize;
    let mut flow = vec![vec![0.0f64; n]; n];
    let (s, t) = (
        valid["items"][0]["s"].as_u64().unwrap() as usize,
        valid["items"][0]["t"].as_u64().unwrap() as usize,
    );
    // Push spurious flow from s to some non-sink node if one exists.
    if let Some(v) = (0..n).find(|&v| v != s && v != t) {
        flow[s][v] = 0.25;
        flow[v][s] = -0.25;
    }
    let flow_path = path_str(d, "flow.json");
    std::fs::write(&flow_path, serde_json::to_string(&flow).unwrap()).unwrap();
    let out = dar(&[
        "correct", "--flow", &flow_path, "--graph", &valid_json, "--index", "0",
    ]);
    assert_ok(&out, "correct");
    let corrected: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(
        corrected["after"]["max_internal_residual"].as_f64().unwrap() <= 1e-9,
        "correction left residuals"
    );

    // export.
    let emb_path = path_str(d, "emb.json");
    let out = dar(&[
        "export", "--ckpt", &ckpt, "--graph", &valid_json, "--index", "0", "--out", &emb_path,
    ]);
    assert_ok(&out, "export");
    let emb: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&emb_path).unwrap()).unwrap();
    assert_eq!(emb["node"].as_array().unwrap().len(), n);
    assert_eq!(emb["node"][0].as_array().unwrap().len(), 4);

    // search: two samples at a 1-epoch budget.
    let out = dar(&[
        "search", "--level", "2", "--samples", "2", "--epochs", "1", "--hidden-ignored",
    ]);
    assert!(!out.status.success(), "search without data must fail");
    let out = dar(&[
        "search", "--level", "2", "--samples", "2", "--epochs", "1", "--data", &train_json,
        "--valid", &valid_json, "--seed", "3",
    ]);
    assert_ok(&out, "search");
    let outcomes: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let arr = outcomes.as_array().unwrap();
    assert_eq!(arr.len(), 2);
    assert!(arr[0]["valid_f_mae"].as_f64().unwrap() <= arr[1]["valid_f_mae"].as_f64().unwrap());

    // determinism: regenerating with the same seed reproduces the file.
    let train2 = path_str(d, "train2.json");
    let out = dar(&[
        "gen", "--family", "two_community", "--n", "8", "--count", "3", "--split", "train",
        "--seed", "1", "--out", &train2,
    ]);
    assert_ok(&out, "gen again");
    assert_eq!(
        std::fs::read_to_string(&train_json).unwrap(),
        std::fs::read_to_string(&train2).unwrap()
    );
}
