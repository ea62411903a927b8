//! Coordinate-conditioned sampling by reverse diffusion, and the store of
//! predicted maps kept apart from the original dataset.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use candle_core::{Device, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::net::{CheckpointManifest, Denoiser, DenoiserCheckpoint, NetError};
use crate::rem_data::{
    append_records, denormalize_values, gaussian_heatmap, load_dataset, read_manifest, write_manifest,
    DataError, DatasetRecord, Manifest, RemGrid, TxCoordinate, MANIFEST_FILE, METADATA_FILE,
};
use crate::schedule::{DiffusionSchedule, ScheduleError};
use crate::trainer::{draw_noise, iteration_rng};

pub const PROVENANCE_FILE: &str = "provenance.jsonl";
pub const PREDICTED_DIR: &str = "predicted";
const CHUNK: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum SampleError {
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("invalid sample request: {0}")]
    InvalidRequest(String),
    #[error("{} is an original dataset root; predicted maps go to a separate store", .0.display())]
    OriginalRoot(PathBuf),
    #[error("duplicate record id {0}")]
    DuplicateId(String),
    #[error("disk full while writing {0}")]
    DiskFull(PathBuf),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

impl From<candle_core::Error> for SampleError {
    fn from(e: candle_core::Error) -> Self {
        SampleError::Net(NetError::Tensor(e))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SampleError + '_ {
    move |source| {
        if source.raw_os_error() == Some(28) {
            SampleError::DiskFull(path.to_path_buf())
        } else {
            SampleError::Data(DataError::Io {
                path: path.to_path_buf(),
                source,
            })
        }
    }
}

/// Reverse-process variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplerKind {
    /// Ancestral sampling over all `T` steps.
    DdpmFull,
    /// Ancestral sampling over `substeps` evenly spaced steps, with the
    /// posterior noise scale of each jump (implicit update at `η = 1`).
    DdpmStrided { substeps: usize },
    /// Deterministic sampling over `substeps` evenly spaced steps.
    Ddim { substeps: usize },
}

impl SamplerKind {
    pub fn label(&self) -> String {
        match self {
            SamplerKind::DdpmFull => "ddpm_full".to_string(),
            SamplerKind::DdpmStrided { substeps } => format!("ddpm_{substeps}"),
            SamplerKind::Ddim { substeps } => format!("ddim_{substeps}"),
        }
    }

    fn substeps(&self) -> Option<usize> {
        match *self {
            SamplerKind::DdpmFull => None,
            SamplerKind::DdpmStrided { substeps } | SamplerKind::Ddim { substeps } => Some(substeps),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRequest {
    pub tx: TxCoordinate,
    pub env: Option<Vec<f64>>,
    pub n_samples: usize,
    pub sampler: SamplerKind,
    pub seed: u64,
}

impl SampleRequest {
    pub fn new(tx: TxCoordinate, n_samples: usize, sampler: SamplerKind, seed: u64) -> Self {
        Self {
            tx,
            env: None,
            n_samples,
            sampler,
            seed,
        }
    }

    /// Checks the request against what the checkpoint was trained on.
    pub fn check(&self, manifest: &CheckpointManifest) -> Result<(), SampleError> {
        if self.n_samples == 0 {
            return Err(SampleError::InvalidRequest("n_samples must be at least 1".into()));
        }
        if let Some(substeps) = self.sampler.substeps() {
            if substeps == 0 || substeps > manifest.schedule.steps {
                return Err(SampleError::InvalidRequest(format!(
                    "substeps {substeps} outside [1, {}]",
                    manifest.schedule.steps
                )));
            }
        }
        if TxCoordinate::new(self.tx.x, self.tx.y, manifest.height, manifest.width).is_err() {
            return Err(SampleError::InvalidRequest(format!(
                "query ({}, {}) lies outside the checkpoint's {}x{} grid",
                self.tx.x, self.tx.y, manifest.height, manifest.width
            )));
        }
        let p = self.env.as_ref().map_or(0, Vec::len);
        if p != manifest.config.env_dim {
            return Err(SampleError::IncompatibleCheckpoint(format!(
                "P: checkpoint {} != request {p}",
                manifest.config.env_dim
            )));
        }
        Ok(())
    }
}

/// Where a predicted map came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub checkpoint_id: String,
    pub sampler: SamplerKind,
    pub request_seed: u64,
    pub sample_index: usize,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub requested_tx: TxCoordinate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictedRecord {
    pub record: DatasetRecord,
    pub provenance: Provenance,
}

/// Noise-prediction callback used by the reverse loops: `(x_t rows, t) → ε̂ rows`.
pub trait EpsModel {
    fn eps(&self, x_t: &[Vec<f64>], t: usize) -> Result<Vec<Vec<f64>>, SampleError>;
}

/// A trained denoiser bound to one query's conditioning.
pub struct Conditioned<'a> {
    model: &'a Denoiser,
    heat: Vec<f32>,
    env: Option<Vec<f32>>,
}

impl<'a> Conditioned<'a> {
    pub fn new(model: &'a Denoiser, manifest: &CheckpointManifest, tx: TxCoordinate, env: Option<&[f64]>) -> Result<Self, SampleError> {
        let h = gaussian_heatmap(tx, manifest.height, manifest.width, manifest.heatmap_sigma)?;
        let env = match (env, &manifest.env_stats) {
            (Some(raw), Some(stats)) => Some(stats.apply(raw)?.into_iter().map(|v| v as f32).collect()),
            (Some(raw), None) => Some(raw.iter().map(|&v| v as f32).collect()),
            (None, _) => None,
        };
        Ok(Self {
            model,
            heat: h.values().iter().map(|&v| v as f32).collect(),
            env,
        })
    }
}

impl EpsModel for Conditioned<'_> {
    fn eps(&self, x_t: &[Vec<f64>], t: usize) -> Result<Vec<Vec<f64>>, SampleError> {
        let cfg = self.model.config();
        let (b, hw) = (x_t.len(), cfg.height * cfg.width);
        let mut input = Vec::with_capacity(b * 2 * hw);
        for row in x_t {
            input.extend(row.iter().map(|&v| v as f32));
            input.extend_from_slice(&self.heat);
        }
        let dev = Device::Cpu;
        let input = Tensor::from_vec(input, (b, 2, cfg.height, cfg.width), &dev)?;
        let env = match &self.env {
            Some(e) => Some(Tensor::from_vec(e.repeat(b), (b, e.len()), &dev)?),
            None => None,
        };
        let out = self.model.forward(&input, &vec![t as f64; b], env.as_ref())?;
        let flat = out.flatten_all()?.to_vec1::<f32>()?;
        Ok(flat.chunks(hw).map(|c| c.iter().map(|&v| v as f64).collect()).collect())
    }
}

/// Clamps the clean map implied by each prediction to the normalized range
/// `[-1, 1]` and returns the noise consistent with the clamped map.
pub struct ClampedX0<'a, M: ?Sized> {
    pub inner: &'a M,
    pub schedule: &'a DiffusionSchedule,
}

impl<M: EpsModel + ?Sized> EpsModel for ClampedX0<'_, M> {
    fn eps(&self, x_t: &[Vec<f64>], t: usize) -> Result<Vec<Vec<f64>>, SampleError> {
        let eps = self.inner.eps(x_t, t)?;
        let ab = self.schedule.alpha_bar(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x_t
            .iter()
            .zip(eps)
            .map(|(x, e)| {
                x.iter()
                    .zip(e)
                    .map(|(&x, e)| {
                        let x0 = ((x - b * e) / a).clamp(-1.0, 1.0);
                        (x - a * x0) / b
                    })
                    .collect()
            })
            .collect())
    }
}

/// Runs the reverse process for `seeds.len()` independent chains and
/// returns their final states in normalized units.
pub fn reverse_diffusion<M: EpsModel + ?Sized>(
    model: &M,
    schedule: &DiffusionSchedule,
    sampler: SamplerKind,
    pixels: usize,
    request_seed: u64,
    indices: &[usize],
) -> Result<Vec<Vec<f64>>, SampleError> {
    let mut rngs: Vec<_> = indices.iter().map(|&i| iteration_rng(request_seed, i as u64)).collect();
    let mut x: Vec<Vec<f64>> = rngs
        .iter_mut()
        .map(|r| draw_noise(r, pixels).into_iter().map(f64::from).collect())
        .collect();
    match sampler {
        SamplerKind::DdpmFull => {
            for t in (1..=schedule.steps()).rev() {
                let eps = model.eps(&x, t)?;
                for ((xi, ei), rng) in x.iter_mut().zip(&eps).zip(rngs.iter_mut()) {
                    let z: Option<Vec<f64>> = (t > 1).then(|| draw_noise(rng, pixels).into_iter().map(f64::from).collect());
                    *xi = schedule.reverse_step(xi, ei, t, z.as_deref())?;
                }
            }
        }
        SamplerKind::DdpmStrided { substeps } => {
            for (t, t_prev) in schedule.ddim_pairs(substeps)? {
                let eps = model.eps(&x, t)?;
                for ((xi, ei), rng) in x.iter_mut().zip(&eps).zip(rngs.iter_mut()) {
                    let z: Option<Vec<f64>> =
                        (t_prev > 0).then(|| draw_noise(rng, pixels).into_iter().map(f64::from).collect());
                    *xi = schedule.ddim_step_eta(xi, ei, t, t_prev, 1.0, z.as_deref())?;
                }
            }
        }
        SamplerKind::Ddim { substeps } => {
            for (t, t_prev) in schedule.ddim_pairs(substeps)? {
                let eps = model.eps(&x, t)?;
                for (xi, ei) in x.iter_mut().zip(&eps) {
                    *xi = schedule.ddim_step(xi, ei, t, t_prev)?;
                }
            }
        }
    }
    Ok(x)
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Id for sample `index` of a request, unique per (checkpoint, query, seed).
pub fn predicted_id(checkpoint_id: &str, req: &SampleRequest, index: usize) -> String {
    let (x, y) = req.tx.to_lattice();
    format!(
        "pred-{checkpoint_id}-{}-x{x}-y{y}-s{}-{index:04}",
        req.sampler.label(),
        req.seed
    )
}

/// Draws `req.n_samples` maps at `req.tx`. Sample `i` depends only on
/// `(req.seed, i)`, so results do not depend on batching.
pub fn sample(ckpt: &DenoiserCheckpoint, req: &SampleRequest) -> Result<Vec<PredictedRecord>, SampleError> {
    let m = &ckpt.manifest;
    req.check(m)?;
    let schedule = DiffusionSchedule::from_params(m.schedule)?;
    let cond = Conditioned::new(&ckpt.model, m, req.tx, req.env.as_deref())?;
    let model = ClampedX0 {
        inner: &cond,
        schedule: &schedule,
    };
    let (h, w) = (m.height, m.width);
    let created_at = unix_now();
    let mut out = Vec::with_capacity(req.n_samples);
    let all: Vec<usize> = (0..req.n_samples).collect();
    for chunk in all.chunks(CHUNK) {
        let finals = reverse_diffusion(&model, &schedule, req.sampler, h * w, req.seed, chunk)?;
        for (&i, x0) in chunk.iter().zip(finals) {
            let values = Array2::from_shape_vec((h, w), x0).expect("state has H·W entries");
            let raw = denormalize_values(values.view(), &m.value_range)?;
            let map = RemGrid::raw(raw.into_values().mapv(f64::round))?;
            out.push(PredictedRecord {
                record: DatasetRecord {
                    id: predicted_id(&ckpt.id, req, i),
                    map,
                    tx: req.tx,
                    env: req.env.clone(),
                },
                provenance: Provenance {
                    checkpoint_id: ckpt.id.clone(),
                    sampler: req.sampler,
                    request_seed: req.seed,
                    sample_index: i,
                    created_at,
                    requested_tx: req.tx,
                },
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProvenanceLine {
    id: String,
    #[serde(flatten)]
    provenance: Provenance,
}

/// The default predicted store for a dataset: a `predicted/` directory
/// next to it.
pub fn default_predicted_root(data_root: &Path) -> PathBuf {
    match data_root.parent() {
        Some(p) => p.join(PREDICTED_DIR),
        None => PathBuf::from(PREDICTED_DIR),
    }
}

/// Appends `records` to the predicted store at `root`, creating it if
/// needed. Returns the store's record count afterwards.
pub fn store_predicted(records: &[PredictedRecord], root: &Path) -> Result<usize, SampleError> {
    let prov_path = root.join(PROVENANCE_FILE);
    let has_manifest = root.join(MANIFEST_FILE).exists();
    if has_manifest && !prov_path.exists() {
        return Err(SampleError::OriginalRoot(root.to_path_buf()));
    }
    let Some(first) = records.first() else {
        return Ok(if has_manifest { load_dataset(root)?.records.len() } else { 0 });
    };
    let manifest = if has_manifest {
        read_manifest(root)?
    } else {
        let env_dim = first.record.env.as_ref().map_or(0, Vec::len);
        let m = Manifest::new(first.record.map.height(), first.record.map.width(), env_dim);
        fs::create_dir_all(root).map_err(io_err(root))?;
        write_manifest(root, &m)?;
        fs::write(&prov_path, "").map_err(io_err(&prov_path))?;
        fs::write(root.join(METADATA_FILE), "").map_err(io_err(root))?;
        m
    };
    let mut existing: std::collections::BTreeSet<String> =
        load_dataset(root)?.records.into_iter().map(|r| r.id).collect();
    let before = existing.len();
    for r in records {
        if !existing.insert(r.record.id.clone()) {
            return Err(SampleError::DuplicateId(r.record.id.clone()));
        }
    }
    let plain: Vec<DatasetRecord> = records.iter().map(|r| r.record.clone()).collect();
    append_records(root, &manifest, &plain)?;
    let mut prov = OpenOptions::new()
        .append(true)
        .open(&prov_path)
        .map_err(io_err(&prov_path))?;
    for r in records {
        let line = ProvenanceLine {
            id: r.record.id.clone(),
            provenance: r.provenance.clone(),
        };
        writeln!(prov, "{}", serde_json::to_string(&line).expect("provenance serializes")).map_err(io_err(&prov_path))?;
    }
    Ok(before + records.len())
}

/// Loads the predicted store with each record's provenance.
pub fn load_predicted(root: &Path) -> Result<Vec<PredictedRecord>, SampleError> {
    let data = load_dataset(root)?;
    let prov_path = root.join(PROVENANCE_FILE);
    let text = fs::read_to_string(&prov_path).map_err(io_err(&prov_path))?;
    let mut by_id = std::collections::BTreeMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let p: ProvenanceLine = serde_json::from_str(line).map_err(|e| DataError::Json {
            path: prov_path.clone(),
            reason: format!("line {}: {e}", n + 1),
        })?;
        by_id.insert(p.id, p.provenance);
    }
    data.records
        .into_iter()
        .map(|record| {
            let provenance = by_id
                .remove(&record.id)
                .ok_or_else(|| DataError::MissingMetadata(format!("no provenance for {}", record.id)))?;
            Ok(PredictedRecord { record, provenance })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordOrigin {
    Original,
    Predicted,
}

/// Records available for training, each tagged with where it came from.
pub struct TrainingPool {
    pub manifest: Manifest,
    pub records: Vec<DatasetRecord>,
    pub origins: Vec<RecordOrigin>,
}

/// The original dataset, plus the predicted store next to it when
/// `include_predicted` is set and the store exists.
pub fn load_training_pool(data_root: &Path, include_predicted: bool) -> Result<TrainingPool, DataError> {
    let data = load_dataset(data_root)?;
    let mut origins = vec![RecordOrigin::Original; data.records.len()];
    let mut records = data.records;
    let predicted = default_predicted_root(data_root);
    if include_predicted && predicted.join(MANIFEST_FILE).exists() {
        let extra = load_dataset(&predicted)?;
        let (m, e) = (&data.manifest, &extra.manifest);
        if (m.height, m.width, m.env_dim) != (e.height, e.width, e.env_dim) {
            return Err(DataError::DimensionMismatch {
                id: predicted.display().to_string(),
                expected: (m.height, m.width),
                found: (e.height, e.width),
            });
        }
        origins.extend(std::iter::repeat_n(RecordOrigin::Predicted, extra.records.len()));
        records.extend(extra.records);
        let mut ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(DataError::DuplicateId(w[0].to_string()));
        }
    }
    Ok(TrainingPool {
        manifest: data.manifest,
        records,
        origins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rem_data::save_dataset;

    /// Predicts the noise that would have produced `target` from `x_t`.
    struct Towards {
        target: Vec<f64>,
        schedule: DiffusionSchedule,
    }

    impl EpsModel for Towards {
        fn eps(&self, x_t: &[Vec<f64>], t: usize) -> Result<Vec<Vec<f64>>, SampleError> {
            let ab = self.schedule.alpha_bar(t)?;
            Ok(x_t
                .iter()
                .map(|x| {
                    x.iter()
                        .zip(&self.target)
                        .map(|(xv, tv)| (xv - ab.sqrt() * tv) / (1.0 - ab).sqrt())
                        .collect()
                })
                .collect())
        }
    }

    #[test]
    fn exact_predictor_lands_on_target() {
        let schedule = DiffusionSchedule::linear(100, 1e-4, 0.02).unwrap();
        let target = vec![0.5, -0.25, 0.9, -1.0];
        let m = Towards {
            target: target.clone(),
            schedule: schedule.clone(),
        };
        for kind in [
            SamplerKind::DdpmFull,
            SamplerKind::DdpmStrided { substeps: 10 },
            SamplerKind::Ddim { substeps: 10 },
        ] {
            let out = reverse_diffusion(&m, &schedule, kind, 4, 3, &[0, 1]).unwrap();
            for x in out {
                for (a, b) in x.iter().zip(&target) {
                    assert!((a - b).abs() < 1e-9, "{kind:?}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn clamped_predictor_keeps_in_range_targets_and_clamps_the_rest() {
        let schedule = DiffusionSchedule::linear(100, 1e-4, 0.02).unwrap();
        let inside = Towards {
            target: vec![0.5, -0.25, 0.9, -1.0],
            schedule: schedule.clone(),
        };
        let outside = Towards {
            target: vec![3.0, -0.25, -7.0, 1.0],
            schedule: schedule.clone(),
        };
        let kind = SamplerKind::Ddim { substeps: 10 };
        let clamped = |m: &Towards| {
            let c = ClampedX0 {
                inner: m,
                schedule: &schedule,
            };
            reverse_diffusion(&c, &schedule, kind, 4, 3, &[0]).unwrap().remove(0)
        };
        for (a, b) in clamped(&inside).iter().zip(&inside.target) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in clamped(&outside).iter().zip([1.0, -0.25, -1.0, 1.0]) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn chains_do_not_depend_on_batching() {
        struct Half;
        impl EpsModel for Half {
            fn eps(&self, x_t: &[Vec<f64>], _: usize) -> Result<Vec<Vec<f64>>, SampleError> {
                Ok(x_t.iter().map(|x| x.iter().map(|v| 0.5 * v).collect()).collect())
            }
        }
        let s = DiffusionSchedule::linear(20, 1e-4, 0.02).unwrap();
        let all = reverse_diffusion(&Half, &s, SamplerKind::DdpmFull, 6, 9, &[0, 1, 2]).unwrap();
        let one = reverse_diffusion(&Half, &s, SamplerKind::DdpmFull, 6, 9, &[2]).unwrap();
        assert_eq!(all[2], one[0]);
        assert_ne!(all[0], all[1]);
    }

    fn predicted(i: usize) -> PredictedRecord {
        let map = Array2::from_shape_fn((8, 8), |(y, x)| ((x + y + i) * 9 % 256) as f64);
        let tx = TxCoordinate::lattice(3, 4);
        PredictedRecord {
            record: DatasetRecord {
                id: format!("pred-{i}"),
                map: RemGrid::raw(map).unwrap(),
                tx,
                env: None,
            },
            provenance: Provenance {
                checkpoint_id: "abcd".into(),
                sampler: SamplerKind::Ddim { substeps: 50 },
                request_seed: 7,
                sample_index: i,
                created_at: 1_700_000_000,
                requested_tx: tx,
            },
        }
    }

    #[test]
    fn store_round_trip_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("predicted");
        let recs: Vec<_> = (0..5).map(predicted).collect();
        assert_eq!(store_predicted(&recs, &root).unwrap(), 5);
        let back = load_predicted(&root).unwrap();
        assert_eq!(back, recs);
        let err = store_predicted(&recs[..1], &root).unwrap_err();
        assert!(matches!(err, SampleError::DuplicateId(_)));
        assert_eq!(store_predicted(&[predicted(9)], &root).unwrap(), 6);
    }

    #[test]
    fn original_root_is_protected_and_pool_is_opt_in() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let originals: Vec<DatasetRecord> = (10..13).map(|i| predicted(i).record).map(|mut r| {
            r.id = format!("rem_{}", r.id);
            r
        }).collect();
        save_dataset(&data, &Manifest::new(8, 8, 0), &originals).unwrap();
        let err = store_predicted(&[predicted(0)], &data).unwrap_err();
        assert!(matches!(err, SampleError::OriginalRoot(_)));
        assert_eq!(load_dataset(&data).unwrap().records.len(), 3);

        store_predicted(&[predicted(0), predicted(1)], &default_predicted_root(&data)).unwrap();
        let plain = load_training_pool(&data, false).unwrap();
        assert_eq!(plain.records.len(), 3);
        let both = load_training_pool(&data, true).unwrap();
        assert_eq!(both.records.len(), 5);
        assert_eq!(
            both.origins.iter().filter(|o| **o == RecordOrigin::Predicted).count(),
            2
        );
    }
}
