//! Trains a denoiser on a synthetic dataset and prints the loss curve.
//!
//! By default this is a short smoke run with the tiny preset on 32x32 maps.
//! Pass `--desk` for the full 64x64 desk-scale run (tens of minutes on one
//! core). Interrupted runs resume from the output directory.
//!
//! ```text
//! cargo run --example train_desk -- /tmp/rem-train
//! cargo run --example train_desk -- /tmp/rem-desk --desk
//! ```

use std::path::PathBuf;

use rem_diffusion::scene::{generate_dataset, SceneSpec};
use rem_diffusion::trainer::{load_train_log, run_training, ModelPreset, RunOptions, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let desk = args.iter().any(|a| a == "--desk");
    let root = args
        .iter()
        .find(|a| !a.starts_with("--"))
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("rem-train"));

    let (side, maps, config) = if desk {
        (64, 200, TrainConfig::desk())
    } else {
        let config = TrainConfig {
            iterations: 150,
            batch_size: 4,
            lr_peak: 1e-3,
            warmup: 15,
            validation_period: 50,
            checkpoint_period: 50,
            diffusion_steps: 200,
            model: ModelPreset::Tiny,
            ..TrainConfig::default()
        };
        (32, 60, config)
    };

    let data = root.join("data");
    if !data.join("manifest.json").exists() {
        generate_dataset(&SceneSpec::square(side, 1), maps, &data)?;
    }
    let run = root.join("run");
    let outcome = run_training(&data, &run, &config, RunOptions { resume: true, stop_after: None })?;

    let log = load_train_log(&outcome.log_path)?;
    let every = (log.len() / 10).max(1);
    for r in log.iter().filter(|r| r.iteration % every == 0 || r.validation_loss.is_some()) {
        let val = r.validation_loss.map(|v| format!("  val {v:.4}")).unwrap_or_default();
        println!("iter {:5}  loss {:.4}  lr {:.2e}  grad {:.3}{val}", r.iteration, r.loss, r.lr, r.grad_norm);
    }
    println!(
        "best checkpoint {} (validation {:.4}) in {}",
        outcome.best.id,
        outcome.final_validation_loss,
        outcome.best_dir.display()
    );
    Ok(())
}
