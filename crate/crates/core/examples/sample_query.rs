//! Draws maps for a transmitter position from a trained checkpoint, saves
//! them as PNGs and files them in the predicted-map store.
//!
//! ```text
//! cargo run --example train_desk -- /tmp/rem-train
//! cargo run --example sample_query -- /tmp/rem-train/run/best 12 20
//! ```

use std::path::PathBuf;

use rem_diffusion::net::load_checkpoint;
use rem_diffusion::rem_data::{extract_tx, TxCoordinate};
use rem_diffusion::sampler::{load_predicted, store_predicted, sample, SampleRequest, SamplerKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let ckpt_dir = PathBuf::from(args.first().ok_or("usage: sample_query <checkpoint> [x] [y]")?);
    let x: usize = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(12);
    let y: usize = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(20);

    let ckpt = load_checkpoint(&ckpt_dir)?;
    let tx = TxCoordinate::lattice(x, y);
    let req = SampleRequest::new(tx, 4, SamplerKind::DdpmStrided { substeps: 25 }, 42);
    let maps = sample(&ckpt, &req)?;

    let out = std::env::temp_dir().join("rem-samples");
    std::fs::create_dir_all(&out)?;
    for p in &maps {
        let (h, w) = (p.record.map.height(), p.record.map.width());
        let path = out.join(format!("{}.png", p.record.id));
        image::GrayImage::from_raw(w as u32, h as u32, p.record.map.to_u8()?)
            .ok_or("map buffer has the wrong size")?
            .save(&path)?;
        let peak = extract_tx(&p.record.map);
        println!("{}  brightest ({}, {})  {:.1} px from query", path.display(), peak.x, peak.y, peak.distance(&tx));
    }

    let store = out.join("predicted");
    store_predicted(&maps, &store)?;
    println!("{} records in {}", load_predicted(&store)?.len(), store.display());
    Ok(())
}
