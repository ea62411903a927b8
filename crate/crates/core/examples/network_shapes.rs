//! Builds each denoiser preset and runs one forward pass.

use candle_core::{Device, Tensor};
use rem_diffusion::net::{Denoiser, DenoiserConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let presets = [
        ("tiny", DenoiserConfig::tiny(64, 64)),
        ("compact", DenoiserConfig::compact(64, 64)),
        ("standard", DenoiserConfig::standard(64, 64)),
    ];
    for (name, cfg) in presets {
        let net = Denoiser::new(cfg.clone(), 0)?;
        let x = Tensor::randn(0f32, 1.0, (2, 2, 64, 64), &Device::Cpu)?;
        let out = net.forward(&x, &[10.0, 900.0], None)?;
        println!(
            "{name:9} channels {:?}  parameters {:>9}  output {:?}",
            cfg.level_channels(),
            net.params().num_scalars(),
            out.dims()
        );
    }
    match Denoiser::new(DenoiserConfig::standard(60, 64), 0) {
        Ok(_) => println!("60x64 accepted"),
        Err(e) => println!("60x64 rejected: {e}"),
    }
    Ok(())
}
