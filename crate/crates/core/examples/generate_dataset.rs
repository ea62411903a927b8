//! Renders a synthetic urban scene, writes a dataset of maps for random
//! transmitter placements and reads it back.
//!
//! ```text
//! cargo run --example generate_dataset -- /tmp/rem-data 50
//! ```

use std::path::PathBuf;

use rem_diffusion::rem_data::{extract_tx, load_dataset};
use rem_diffusion::scene::{generate_dataset, SceneSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("rem-data"));
    let n: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(50);

    let scene = generate_dataset(&SceneSpec::square(64, 7), n, &out)?;
    let data = load_dataset(&out)?;
    println!(
        "{} maps of {}x{} in {} ({} buildings)",
        data.records.len(),
        data.manifest.height,
        data.manifest.width,
        out.display(),
        scene.buildings.len()
    );
    for r in data.records.iter().take(5) {
        let peak = extract_tx(&r.map);
        let mean = r.map.values().mean().unwrap_or(0.0);
        println!("{}  tx=({}, {})  brightest=({}, {})  mean={mean:.1}", r.id, r.tx.x, r.tx.y, peak.x, peak.y);
    }
    Ok(())
}
