use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rem_diffusion::cli::{RunRecord, EXIT_CONFIG, EXIT_INCOMPATIBLE, RUN_FILE};

fn remdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_remdiff")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = remdiff(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_deterministic_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["gen-data", "--out", s(&a), "--n", "12", "--size", "32", "--seed", "7"]);
    ok(&["gen-data", "--out", s(&b), "--n", "12", "--size", "32", "--seed", "7"]);
    assert_eq!(tree(&a), tree(&b));

    let bad = dir.path().join("c");
    let out = remdiff(&["gen-data", "--out", s(&bad), "--n", "2", "--size", "63"]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "n = 3\nbuildings = 4\n").unwrap();
    let out = remdiff(&["gen-data", "--config", s(&cfg), "--out", s(&bad)]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&out.stderr).contains("buildings"));
    assert!(!bad.exists());
}

#[test]
fn train_sample_eval_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["gen-data", "--out", s(&data), "--n", "30", "--size", "32", "--seed", "3"]);
    let cfg = dir.path().join("train.toml");
    fs::write(
        &cfg,
        "model = \"tiny\"\nbatch_size = 4\nwarmup = 2\nvalidation_period = 5\ncheckpoint_period = 5\ndiffusion_steps = 50\n",
    )
    .unwrap();
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--iterations", "10", "--set", "lr_peak=2e-3"]);
    let record: RunRecord = serde_json::from_str(&fs::read_to_string(run.join(RUN_FILE)).unwrap()).unwrap();
    assert_eq!(record.subcommand, "train");
    assert_eq!(record.config["iterations"], 10);
    assert_eq!(record.config["lr_peak"], 2e-3);
    assert_eq!(record.inputs_hash.len(), 64);
    assert!(record.inputs.iter().any(|i| i.name == "config"));
    assert!(record.inputs.iter().any(|i| i.name == "data/manifest.json"));

    let best = run.join("best");
    let store = dir.path().join("predicted");
    let stdout = ok(&[
        "sample", "--ckpt", s(&best), "--x", "12", "--y", "20", "--n", "2", "--sampler", "ddim", "--steps", "5", "--seed", "1",
        "--store", s(&store),
    ]);
    let paths: Vec<&str> = stdout.lines().collect();
    assert_eq!(paths.len(), 2);
    assert!(paths.iter().all(|p| Path::new(p).exists()));

    let report = dir.path().join("report");
    ok(&[
        "eval", "--ckpt", s(&best), "--data", s(&data), "--report", s(&report), "--steps", "5", "--ensemble-n", "2",
    ]);
    for f in ["report.json", "slice_rmse.csv", "cdf_curves.csv", "slice_profiles.csv", "loss_curve.csv", RUN_FILE] {
        assert!(report.join(f).exists(), "{f}");
    }
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(report.join("report.json")).unwrap()).unwrap();
    // the split written by training names 3 of the 30 records for evaluation
    assert_eq!(rep["records"].as_array().unwrap().len(), 3);

    for (path, kind) in [(&data, "dataset"), (&run, "training_run"), (&best, "checkpoint"), (&store, "predicted_store"), (&report, "eval_report")] {
        let v: serde_json::Value = serde_json::from_str(&ok(&["inspect", s(path)])).unwrap();
        assert_eq!(v["kind"], kind);
    }

    let wide = dir.path().join("wide");
    ok(&["gen-data", "--out", s(&wide), "--n", "3", "--size", "48"]);
    let out = remdiff(&["eval", "--ckpt", s(&best), "--data", s(&wide), "--report", s(&dir.path().join("r2"))]);
    assert_eq!(out.status.code(), Some(EXIT_INCOMPATIBLE));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("H: checkpoint 32 != data 48"), "{err}");
    assert!(fs::read_dir(&data).is_ok());
}
