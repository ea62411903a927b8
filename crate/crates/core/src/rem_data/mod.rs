//! Radio environment maps, their normalization, the transmitter coordinate
//! prior and the on-disk dataset layout.

mod coords;
mod env;
mod grid;
mod store;

use std::path::PathBuf;

pub use coords::{extract_tx, gaussian_heatmap, round_half_down, CoordHeatmap, TxCoordinate};
pub use env::{zscore_env, EnvStats};
pub use grid::{
    denormalize, denormalize_values, normalize, normalize_or_zero, RemGrid, Units, ValueRange,
    MIN_SIDE,
};
pub(crate) use store::append_records;
pub use store::{
    load_dataset, map_path, read_manifest, save_dataset, split_indices, write_manifest, Dataset,
    DatasetRecord, Manifest, MANIFEST_FILE, MAPS_DIR, METADATA_FILE,
};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("degenerate value range [{min_val}, {max_val}]")]
    DegenerateRange { min_val: f64, max_val: f64 },
    #[error("value {value} at (y={y}, x={x}) is outside the {units:?} range")]
    ValueOutOfRange {
        y: usize,
        x: usize,
        value: f64,
        units: Units,
    },
    #[error("expected a {expected:?} grid, got {found:?}")]
    UnitsMismatch { expected: Units, found: Units },
    #[error("grid {height}x{width} is smaller than the {MIN_SIDE}x{MIN_SIDE} minimum")]
    TooSmall { height: usize, width: usize },
    #[error("transmitter ({x}, {y}) lies outside a {height}x{width} grid")]
    TxOutOfBounds {
        x: f64,
        y: f64,
        height: usize,
        width: usize,
    },
    #[error("heatmap sigma must be positive, got {0}")]
    InvalidSigma(f64),
    #[error("z-scoring needs at least 2 vectors, got {0}")]
    TooFewEnvVectors(usize),
    #[error("env vector has length {found}, expected {expected}")]
    EnvLength { expected: usize, found: usize },
    #[error("missing metadata: {0}")]
    MissingMetadata(String),
    #[error("corrupt image for record {id}: {reason}")]
    CorruptImage { id: String, reason: String },
    #[error("record {id}: map is {}x{}, manifest says {}x{}", found.0, found.1, expected.0, expected.1)]
    DimensionMismatch {
        id: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("duplicate record id {0}")]
    DuplicateId(String),
    #[error("invalid record id {0:?}")]
    InvalidId(String),
    #[error("malformed {}: {reason}", path.display())]
    Json { path: PathBuf, reason: String },
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
