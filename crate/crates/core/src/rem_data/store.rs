//! On-disk dataset layout:
//!
//! ```text
//! <root>/manifest.json      {"H", "W", "value_min", "value_max", "P"}
//! <root>/metadata.jsonl     {"id", "tx_x", "tx_y", "env"?} per line
//! <root>/maps/<id>.png      8-bit grayscale, exactly H×W
//! ```

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageFormat};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{extract_tx, DataError, RemGrid, TxCoordinate, ValueRange};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METADATA_FILE: &str = "metadata.jsonl";
pub const MAPS_DIR: &str = "maps";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub value_min: f64,
    pub value_max: f64,
    #[serde(rename = "P")]
    pub env_dim: usize,
}

impl Manifest {
    pub fn new(height: usize, width: usize, env_dim: usize) -> Self {
        Self {
            height,
            width,
            value_min: 0.0,
            value_max: 255.0,
            env_dim,
        }
    }

    pub fn value_range(&self) -> Result<ValueRange, DataError> {
        ValueRange::new(self.value_min, self.value_max)
    }
}

/// One transmitter placement and its map (raw units).
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub id: String,
    pub map: RemGrid,
    pub tx: TxCoordinate,
    pub env: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MetadataRow {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tx_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tx_y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    env: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    /// Seeded shuffle, then the last `round(n · eval_fraction)` records form
    /// the evaluation split. Both halves keep id order.
    pub fn split(&self, eval_fraction: f64, seed: u64) -> (Vec<DatasetRecord>, Vec<DatasetRecord>) {
        let n_eval = (self.records.len() as f64 * eval_fraction).round() as usize;
        let (train, eval) = split_indices(self.records.len(), n_eval, seed);
        let pick = |idx: &[usize]| idx.iter().map(|&i| self.records[i].clone()).collect();
        (pick(&train), pick(&eval))
    }
}

/// Partitions `0..n` into (train, eval) index sets, `eval` of size `n_eval`.
pub fn split_indices(n: usize, n_eval: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_eval = n_eval.min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut eval = idx.split_off(n - n_eval);
    idx.sort_unstable();
    eval.sort_unstable();
    (idx, eval)
}

pub fn map_path(root: &Path, id: &str) -> PathBuf {
    root.join(MAPS_DIR).join(format!("{id}.png"))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_manifest(root: &Path) -> Result<Manifest, DataError> {
    let path = root.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(DataError::MissingMetadata(format!("{} not found", path.display())));
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| DataError::Json {
        path: path.clone(),
        reason: e.to_string(),
    })
}

pub fn write_manifest(root: &Path, manifest: &Manifest) -> Result<(), DataError> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    let path = root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))
}

fn read_map(root: &Path, id: &str, manifest: &Manifest) -> Result<RemGrid, DataError> {
    let path = map_path(root, id);
    if !path.exists() {
        return Err(DataError::MissingMetadata(format!(
            "record {id}: image {} not found",
            path.display()
        )));
    }
    let img = image::ImageReader::open(&path)
        .map_err(io_err(&path))?
        .with_guessed_format()
        .map_err(io_err(&path))?
        .decode()
        .map_err(|e| DataError::CorruptImage {
            id: id.to_string(),
            reason: e.to_string(),
        })?;
    let gray = match img {
        DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(DataError::CorruptImage {
                id: id.to_string(),
                reason: format!("expected 8-bit grayscale, found {:?}", other.color()),
            })
        }
    };
    let (w, h) = gray.dimensions();
    if (h as usize, w as usize) != (manifest.height, manifest.width) {
        return Err(DataError::DimensionMismatch {
            id: id.to_string(),
            expected: (manifest.height, manifest.width),
            found: (h as usize, w as usize),
        });
    }
    RemGrid::from_u8(manifest.height, manifest.width, gray.as_raw())
}

/// Loads every record listed in `metadata.jsonl`, sorted by id. Records
/// without a stored coordinate get one from [`extract_tx`].
pub fn load_dataset(root: &Path) -> Result<Dataset, DataError> {
    let manifest = read_manifest(root)?;
    let meta_path = root.join(METADATA_FILE);
    if !meta_path.exists() {
        return Err(DataError::MissingMetadata(format!(
            "{} not found",
            meta_path.display()
        )));
    }
    let reader = BufReader::new(File::open(&meta_path).map_err(io_err(&meta_path))?);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(&meta_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: MetadataRow = serde_json::from_str(&line).map_err(|e| DataError::Json {
            path: meta_path.clone(),
            reason: format!("line {}: {e}", lineno + 1),
        })?;
        let map = read_map(root, &row.id, &manifest)?;
        let tx = match (row.tx_x, row.tx_y) {
            (Some(x), Some(y)) => TxCoordinate::new(x, y, manifest.height, manifest.width)?,
            (None, None) => extract_tx(&map),
            _ => {
                return Err(DataError::MissingMetadata(format!(
                    "record {}: only one of tx_x/tx_y given",
                    row.id
                )))
            }
        };
        match &row.env {
            Some(env) if env.len() != manifest.env_dim => {
                return Err(DataError::EnvLength {
                    expected: manifest.env_dim,
                    found: env.len(),
                })
            }
            None if manifest.env_dim > 0 => {
                return Err(DataError::MissingMetadata(format!(
                    "record {}: manifest declares P={} but env is absent",
                    row.id, manifest.env_dim
                )))
            }
            _ => {}
        }
        records.push(DatasetRecord {
            id: row.id,
            map,
            tx,
            env: row.env,
        });
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = records.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(DataError::DuplicateId(w[0].id.clone()));
    }
    Ok(Dataset { manifest, records })
}

fn check_record(record: &DatasetRecord, manifest: &Manifest) -> Result<(), DataError> {
    if (record.map.height(), record.map.width()) != (manifest.height, manifest.width) {
        return Err(DataError::DimensionMismatch {
            id: record.id.clone(),
            expected: (manifest.height, manifest.width),
            found: (record.map.height(), record.map.width()),
        });
    }
    if record.id.is_empty() || record.id.contains(['/', '\\']) {
        return Err(DataError::InvalidId(record.id.clone()));
    }
    let env_len = record.env.as_ref().map_or(0, Vec::len);
    if env_len != manifest.env_dim {
        return Err(DataError::EnvLength {
            expected: manifest.env_dim,
            found: env_len,
        });
    }
    Ok(())
}

pub(crate) fn write_map(root: &Path, record: &DatasetRecord) -> Result<(), DataError> {
    let path = map_path(root, &record.id);
    let img = GrayImage::from_raw(
        record.map.width() as u32,
        record.map.height() as u32,
        record.map.to_u8()?,
    )
    .expect("buffer length matches dimensions");
    img.save_with_format(&path, ImageFormat::Png)
        .map_err(|e| DataError::CorruptImage {
            id: record.id.clone(),
            reason: e.to_string(),
        })
}

pub(crate) fn metadata_line(record: &DatasetRecord) -> String {
    let row = MetadataRow {
        id: record.id.clone(),
        tx_x: Some(record.tx.x),
        tx_y: Some(record.tx.y),
        env: record.env.clone(),
    };
    serde_json::to_string(&row).expect("metadata row serializes")
}

/// Writes `records` under `root`, replacing any previous metadata.
pub fn save_dataset(root: &Path, manifest: &Manifest, records: &[DatasetRecord]) -> Result<(), DataError> {
    for r in records {
        check_record(r, manifest)?;
    }
    let mut sorted: Vec<&DatasetRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = sorted.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(DataError::DuplicateId(w[0].id.clone()));
    }
    let maps = root.join(MAPS_DIR);
    fs::create_dir_all(&maps).map_err(io_err(&maps))?;
    write_manifest(root, manifest)?;
    let meta_path = root.join(METADATA_FILE);
    let mut out = BufWriter::new(File::create(&meta_path).map_err(io_err(&meta_path))?);
    for r in sorted {
        write_map(root, r)?;
        writeln!(out, "{}", metadata_line(r)).map_err(io_err(&meta_path))?;
    }
    out.flush().map_err(io_err(&meta_path))
}

pub(crate) fn append_records(root: &Path, manifest: &Manifest, records: &[DatasetRecord]) -> Result<(), DataError> {
    for r in records {
        check_record(r, manifest)?;
    }
    let maps = root.join(MAPS_DIR);
    fs::create_dir_all(&maps).map_err(io_err(&maps))?;
    let meta_path = root.join(METADATA_FILE);
    let mut out = BufWriter::new(
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&meta_path)
            .map_err(io_err(&meta_path))?,
    );
    for r in records {
        write_map(root, r)?;
        writeln!(out, "{}", metadata_line(r)).map_err(io_err(&meta_path))?;
    }
    out.flush().map_err(io_err(&meta_path))
}
