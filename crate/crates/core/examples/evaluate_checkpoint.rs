//! Evaluates a trained checkpoint on its held-out split, including the
//! repeated-sampling study with its CDF envelope and slice profiles.
//!
//! ```text
//! cargo run --example train_desk -- /tmp/rem-train
//! cargo run --example evaluate_checkpoint -- /tmp/rem-train
//! ```

use std::path::PathBuf;

use rem_diffusion::evaluator::{evaluate_checkpoint, write_report, Protocol};
use rem_diffusion::net::load_checkpoint;
use rem_diffusion::sampler::SamplerKind;
use rem_diffusion::trainer::{SplitIds, BEST_DIR, SPLIT_FILE};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = PathBuf::from(std::env::args().nth(1).ok_or("usage: evaluate_checkpoint <train root>")?);
    let (data, run) = (root.join("data"), root.join("run"));
    let ckpt = load_checkpoint(&run.join(BEST_DIR))?;
    let split: SplitIds = serde_json::from_str(&std::fs::read_to_string(run.join(SPLIT_FILE))?)?;
    let cfg = &ckpt.manifest.config;

    let protocol = Protocol::scaled(cfg.height, cfg.width, 0).with_scaled_ensemble(cfg.height, cfg.width, 10);
    let kind = SamplerKind::DdpmStrided { substeps: 25 };
    let report = evaluate_checkpoint(&ckpt, kind, &data, Some(&split.eval), &protocol)?;

    for (name, s) in &report.aggregates {
        println!("{name:22} mean {:.3}  median {:.3}  std {:.3}", s.mean, s.median, s.std);
    }
    if let Some(e) = &report.ensemble {
        let widest = e.cdf_std.iter().copied().fold(0.0, f64::max);
        println!(
            "{} samples at ({}, {}): localization {:.2} px mean, widest CDF spread {widest:.3}",
            e.n_samples, e.tx.x, e.tx.y, e.localization_error.mean
        );
    }
    let files = write_report(&report, &root.join("report"), Some(&run.join("train_log.jsonl")))?;
    println!("{} files in {}", files.len(), root.join("report").display());
    Ok(())
}
