//! Scores ground-truth maps against themselves, the ceiling any sampler can
//! reach, and writes the report and CSV series.

use rem_diffusion::evaluator::{evaluate, write_report, EnsembleProtocol, LookupSampler, Protocol};
use rem_diffusion::rem_data::load_dataset;
use rem_diffusion::scene::{generate_dataset, SceneSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::env::temp_dir().join("rem-oracle");
    let data = root.join("data");
    if !data.join("manifest.json").exists() {
        generate_dataset(&SceneSpec::square(64, 3), 120, &data)?;
    }
    let records = load_dataset(&data)?.records;
    let held_out = &records[100..];

    let mut protocol = Protocol::scaled(64, 64, 0);
    // a lookup can only answer at positions it has maps for
    protocol.ensemble = Some(EnsembleProtocol {
        tx: held_out[0].tx,
        n_samples: 8,
    });
    let report = evaluate(&LookupSampler::ground_truth(held_out), held_out, &protocol)?;
    for (name, s) in &report.aggregates {
        println!("{name:22} mean {:.4}  max {:.4}  over {}", s.mean, s.max, s.count);
    }
    if let Some(e) = &report.ensemble {
        println!("ensemble at ({}, {}) against {}", e.tx.x, e.tx.y, e.reference_id);
    }
    for path in write_report(&report, &root.join("report"), None)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}
