//! Coordinate-conditioned denoising diffusion for radio environment maps.
//!
//! A corpus of maps, each tagged with its transmitter position, trains a
//! conditional U-Net to predict injected noise. Sampling then synthesizes
//! the map for any query coordinate in the same scene, and the evaluator
//! compares syntheses against ground truth with slice RMSE and intensity
//! CDFs.

pub mod cli;
pub mod evaluator;
pub mod net;
pub mod rem_data;
pub mod scene;
pub mod schedule;
pub mod sampler;
pub mod trainer;
