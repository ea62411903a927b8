//! Slice RMSE, intensity CDFs, ensemble envelopes and transmitter
//! localization, plus the report that ties them together.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::net::DenoiserCheckpoint;
use crate::rem_data::{extract_tx, load_dataset, DataError, DatasetRecord, RemGrid, TxCoordinate};
use crate::sampler::{sample, SampleError, SampleRequest, SamplerKind};
use crate::trainer::load_train_log;

/// Worst localization error of a perfect map: the transmitter may sit up
/// to half a pixel from the lattice point `extract_tx` reports, per axis.
pub const TIE_ROUNDING_BOUND: f64 = std::f64::consts::FRAC_1_SQRT_2;
/// Intensity grid size for CDF envelopes.
pub const CDF_GRID_POINTS: usize = 256;
pub const REPORT_FILE: &str = "report.json";
pub const STD_CONVENTION: &str = "sample standard deviation (n-1 divisor)";

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("slice index {index} outside [0, {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("maps differ in size: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("ensemble statistics need at least 2 samples, got {0}")]
    FewerThanTwoSamples(usize),
    #[error("invalid protocol: {0}")]
    InvalidProtocol(String),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error on {}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Column at fixed `x`, varying `y`.
    VerticalX,
    /// Row at fixed `y`, varying `x`.
    HorizontalY,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceSpec {
    pub axis: Axis,
    pub index: usize,
}

impl SliceSpec {
    pub fn vertical(x: usize) -> Self {
        Self {
            axis: Axis::VerticalX,
            index: x,
        }
    }

    pub fn horizontal(y: usize) -> Self {
        Self {
            axis: Axis::HorizontalY,
            index: y,
        }
    }

    pub fn label(&self) -> String {
        match self.axis {
            Axis::VerticalX => format!("x={}", self.index),
            Axis::HorizontalY => format!("y={}", self.index),
        }
    }

    fn check(&self, height: usize, width: usize) -> Result<(), EvalError> {
        let len = match self.axis {
            Axis::VerticalX => width,
            Axis::HorizontalY => height,
        };
        if self.index >= len {
            return Err(EvalError::IndexOutOfRange { index: self.index, len });
        }
        Ok(())
    }

    /// Intensities along the slice.
    pub fn extract(&self, map: &RemGrid) -> Result<Vec<f64>, EvalError> {
        self.along(&map.values())
    }

    /// Entries of `v` along the slice.
    pub fn along(&self, v: &ndarray::ArrayView2<'_, f64>) -> Result<Vec<f64>, EvalError> {
        let (h, w) = v.dim();
        self.check(h, w)?;
        Ok(match self.axis {
            Axis::VerticalX => v.column(self.index).to_vec(),
            Axis::HorizontalY => v.row(self.index).to_vec(),
        })
    }
}

fn same_dims(a: &RemGrid, b: &RemGrid) -> Result<(), EvalError> {
    let (da, db) = ((a.height(), a.width()), (b.height(), b.width()));
    if da != db {
        return Err(EvalError::DimensionMismatch(da, db));
    }
    Ok(())
}

/// Root-mean-square difference along one slice, in grayscale units.
pub fn slice_rmse(gen: &RemGrid, orig: &RemGrid, spec: SliceSpec) -> Result<f64, EvalError> {
    same_dims(gen, orig)?;
    let (g, o) = (spec.extract(gen)?, spec.extract(orig)?);
    let sum: f64 = g.iter().zip(&o).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((sum / g.len() as f64).sqrt())
}

/// Empirical CDF: every pixel value in ascending order, with the fraction of
/// pixels at or below each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfCurve {
    pub values: Vec<f64>,
    pub fractions: Vec<f64>,
}

impl CdfCurve {
    /// `F(v)`, the fraction of pixels `≤ v`.
    pub fn at(&self, v: f64) -> f64 {
        let k = self.values.partition_point(|&x| x <= v);
        if k == 0 {
            0.0
        } else {
            self.fractions[k - 1]
        }
    }
}

pub fn intensity_cdf(map: &RemGrid) -> CdfCurve {
    let mut values = map.to_vec();
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let fractions = (1..=values.len()).map(|i| i as f64 / n).collect();
    CdfCurve { values, fractions }
}

/// Kolmogorov–Smirnov distance `sup_v |F_a(v) − F_b(v)|`.
pub fn cdf_distance(a: &CdfCurve, b: &CdfCurve) -> f64 {
    // both are right-continuous steps, so the sup is reached at a jump
    a.values
        .iter()
        .chain(&b.values)
        .map(|&v| (a.at(v) - b.at(v)).abs())
        .fold(0.0, f64::max)
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.clone().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Pointwise moments over repeated samples at one transmitter.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub n_samples: usize,
    pub mean: Array2<f64>,
    pub std: Array2<f64>,
    pub cdf_grid: Vec<f64>,
    pub cdf_mean: Vec<f64>,
    pub cdf_std: Vec<f64>,
}

/// `CDF_GRID_POINTS` evenly spaced intensities over `[0, 255]`.
pub fn cdf_grid() -> Vec<f64> {
    (0..CDF_GRID_POINTS)
        .map(|i| 255.0 * i as f64 / (CDF_GRID_POINTS - 1) as f64)
        .collect()
}

pub fn ensemble_stats(samples: &[RemGrid]) -> Result<EnsembleStats, EvalError> {
    if samples.len() < 2 {
        return Err(EvalError::FewerThanTwoSamples(samples.len()));
    }
    for s in &samples[1..] {
        same_dims(&samples[0], s)?;
    }
    let (h, w) = (samples[0].height(), samples[0].width());
    let mut mean = Array2::zeros((h, w));
    let mut std = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let (m, s) = mean_std(samples.iter().map(|g| g.get(y, x)));
            mean[[y, x]] = m;
            std[[y, x]] = s;
        }
    }
    let grid = cdf_grid();
    let cdfs: Vec<CdfCurve> = samples.iter().map(intensity_cdf).collect();
    let (cdf_mean, cdf_std) = grid
        .iter()
        .map(|&v| mean_std(cdfs.iter().map(|c| c.at(v))))
        .unzip();
    Ok(EnsembleStats {
        n_samples: samples.len(),
        mean,
        std,
        cdf_grid: grid,
        cdf_mean,
        cdf_std,
    })
}

/// Produces maps for a query; the evaluator is agnostic to where they come
/// from.
pub trait MapSampler {
    fn label(&self) -> String;
    fn sample_maps(&self, tx: TxCoordinate, env: Option<&[f64]>, n: usize, seed: u64) -> Result<Vec<RemGrid>, EvalError>;
}

/// Samples a trained checkpoint.
pub struct CheckpointSampler<'a> {
    pub checkpoint: &'a DenoiserCheckpoint,
    pub kind: SamplerKind,
}

impl MapSampler for CheckpointSampler<'_> {
    fn label(&self) -> String {
        format!("{}:{}", self.checkpoint.id, self.kind.label())
    }

    fn sample_maps(&self, tx: TxCoordinate, env: Option<&[f64]>, n: usize, seed: u64) -> Result<Vec<RemGrid>, EvalError> {
        let mut req = SampleRequest::new(tx, n, self.kind, seed);
        req.env = env.map(<[f64]>::to_vec);
        Ok(sample(self.checkpoint, &req)?.into_iter().map(|p| p.record.map).collect())
    }
}

/// Returns a fixed map for every query, keyed by transmitter position.
/// With the ground-truth maps it is the perfect-predictor ceiling.
pub struct LookupSampler {
    maps: Vec<(TxCoordinate, RemGrid)>,
}

impl LookupSampler {
    pub fn ground_truth(records: &[DatasetRecord]) -> Self {
        Self {
            maps: records.iter().map(|r| (r.tx, r.map.clone())).collect(),
        }
    }
}

impl MapSampler for LookupSampler {
    fn label(&self) -> String {
        "ground_truth".into()
    }

    fn sample_maps(&self, tx: TxCoordinate, _: Option<&[f64]>, n: usize, _: u64) -> Result<Vec<RemGrid>, EvalError> {
        let (_, map) = self
            .maps
            .iter()
            .find(|(t, _)| *t == tx)
            .ok_or_else(|| EvalError::InvalidProtocol(format!("no map for ({}, {})", tx.x, tx.y)))?;
        Ok(vec![map.clone(); n])
    }
}

/// Repeated-sampling study at one transmitter position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleProtocol {
    pub tx: TxCoordinate,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    pub slices: Vec<SliceSpec>,
    pub samples_per_record: usize,
    pub seed: u64,
    pub ensemble: Option<EnsembleProtocol>,
}

impl Protocol {
    /// Slices at the 100-pixel column and row of a 256-pixel map, rescaled to
    /// `height×width`, one sample per record, no ensemble study.
    pub fn scaled(height: usize, width: usize, seed: u64) -> Self {
        Self {
            slices: vec![
                SliceSpec::vertical(scale(100.0, width)),
                SliceSpec::horizontal(scale(100.0, height)),
            ],
            samples_per_record: 1,
            seed,
            ensemble: None,
        }
    }

    /// Adds an ensemble study at the (108, 178) position of a 256-pixel map,
    /// rescaled.
    pub fn with_scaled_ensemble(mut self, height: usize, width: usize, n_samples: usize) -> Self {
        self.ensemble = Some(EnsembleProtocol {
            tx: TxCoordinate::lattice(scale(108.0, width), scale(178.0, height)),
            n_samples,
        });
        self
    }

    fn validate(&self, height: usize, width: usize) -> Result<(), EvalError> {
        if self.samples_per_record == 0 {
            return Err(EvalError::InvalidProtocol("samples_per_record must be at least 1".into()));
        }
        for s in &self.slices {
            s.check(height, width)?;
        }
        if let Some(e) = &self.ensemble {
            if e.n_samples < 2 {
                return Err(EvalError::FewerThanTwoSamples(e.n_samples));
            }
            TxCoordinate::new(e.tx.x, e.tx.y, height, width)?;
        }
        Ok(())
    }
}

fn scale(v: f64, side: usize) -> usize {
    ((v * side as f64 / 256.0).round() as usize).min(side - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        let mut sorted = xs.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = match n {
            0 => f64::NAN,
            _ if n % 2 == 1 => sorted[n / 2],
            _ => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
        };
        let (mean, std) = mean_std(xs.iter().copied());
        Self {
            count: n,
            mean,
            median,
            std,
            min: sorted.first().copied().unwrap_or(f64::NAN),
            max: sorted.last().copied().unwrap_or(f64::NAN),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.mean, self.median, self.std, self.min, self.max]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Metrics for one held-out record, averaged over its samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub id: String,
    pub tx: TxCoordinate,
    pub slice_rmse: BTreeMap<String, f64>,
    pub cdf_distance: f64,
    pub localization_error: f64,
}

impl RecordRow {
    pub fn is_finite(&self) -> bool {
        self.cdf_distance.is_finite()
            && self.localization_error.is_finite()
            && self.slice_rmse.values().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceProfile {
    pub slice: SliceSpec,
    pub original: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub tx: TxCoordinate,
    pub n_samples: usize,
    /// Record used as ground truth: the one whose transmitter is nearest.
    pub reference_id: String,
    pub reference_distance: f64,
    pub slice_rmse: BTreeMap<String, Summary>,
    pub cdf_distance: Summary,
    pub localization_error: Summary,
    pub cdf_grid: Vec<f64>,
    pub cdf_original: Vec<f64>,
    pub cdf_mean: Vec<f64>,
    pub cdf_std: Vec<f64>,
    pub slice_profiles: Vec<SliceProfile>,
    pub per_sample_slice_rmse: Vec<BTreeMap<String, f64>>,
}

impl EnsembleReport {
    pub fn is_finite(&self) -> bool {
        let all = |v: &[f64]| v.iter().all(|x| x.is_finite());
        self.slice_rmse.values().all(Summary::is_finite)
            && self.cdf_distance.is_finite()
            && self.localization_error.is_finite()
            && all(&self.cdf_grid)
            && all(&self.cdf_original)
            && all(&self.cdf_mean)
            && all(&self.cdf_std)
            && self
                .slice_profiles
                .iter()
                .all(|p| all(&p.original) && all(&p.mean) && all(&p.std))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sampler: String,
    pub protocol: Protocol,
    pub std_convention: String,
    pub records: Vec<RecordRow>,
    pub failures: Vec<Failure>,
    pub aggregates: BTreeMap<String, Summary>,
    pub ensemble: Option<EnsembleReport>,
}

/// Seed for the `i`-th evaluated record.
pub fn record_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add((index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn score(samples: &[RemGrid], truth: &DatasetRecord, slices: &[SliceSpec]) -> Result<(Vec<BTreeMap<String, f64>>, Vec<f64>, Vec<f64>), EvalError> {
    let truth_cdf = intensity_cdf(&truth.map);
    let mut rmse = Vec::with_capacity(samples.len());
    let mut ks = Vec::with_capacity(samples.len());
    let mut loc = Vec::with_capacity(samples.len());
    for s in samples {
        let mut row = BTreeMap::new();
        for spec in slices {
            row.insert(spec.label(), slice_rmse(s, &truth.map, *spec)?);
        }
        rmse.push(row);
        ks.push(cdf_distance(&intensity_cdf(s), &truth_cdf));
        loc.push(extract_tx(s).distance(&truth.tx));
    }
    Ok((rmse, ks, loc))
}

fn evaluate_record<S: MapSampler + ?Sized>(
    sampler: &S,
    record: &DatasetRecord,
    protocol: &Protocol,
    seed: u64,
) -> Result<RecordRow, EvalError> {
    let samples = sampler.sample_maps(record.tx, record.env.as_deref(), protocol.samples_per_record, seed)?;
    for s in &samples {
        same_dims(s, &record.map)?;
    }
    let (rmse, ks, loc) = score(&samples, record, &protocol.slices)?;
    let n = samples.len() as f64;
    let slice_rmse = protocol
        .slices
        .iter()
        .map(|spec| {
            let l = spec.label();
            let m = rmse.iter().map(|r| r[&l]).sum::<f64>() / n;
            (l, m)
        })
        .collect();
    Ok(RecordRow {
        id: record.id.clone(),
        tx: record.tx,
        slice_rmse,
        cdf_distance: ks.iter().sum::<f64>() / n,
        localization_error: loc.iter().sum::<f64>() / n,
    })
}

fn evaluate_ensemble<S: MapSampler + ?Sized>(
    sampler: &S,
    records: &[DatasetRecord],
    study: &EnsembleProtocol,
    slices: &[SliceSpec],
    seed: u64,
) -> Result<EnsembleReport, EvalError> {
    let reference = records
        .iter()
        .min_by(|a, b| a.tx.distance(&study.tx).total_cmp(&b.tx.distance(&study.tx)))
        .ok_or_else(|| EvalError::InvalidProtocol("ensemble study needs at least one record".into()))?;
    let samples = sampler.sample_maps(study.tx, reference.env.as_deref(), study.n_samples, seed)?;
    for s in &samples {
        same_dims(s, &reference.map)?;
    }
    let stats = ensemble_stats(&samples)?;
    let (rmse, ks, _) = score(&samples, reference, slices)?;
    let loc: Vec<f64> = samples.iter().map(|s| extract_tx(s).distance(&study.tx)).collect();
    let truth_cdf = intensity_cdf(&reference.map);
    let mut slice_profiles = Vec::new();
    for spec in slices {
        slice_profiles.push(SliceProfile {
            slice: *spec,
            original: spec.extract(&reference.map)?,
            mean: spec.along(&stats.mean.view())?,
            std: spec.along(&stats.std.view())?,
        });
    }
    Ok(EnsembleReport {
        tx: study.tx,
        n_samples: samples.len(),
        reference_id: reference.id.clone(),
        reference_distance: reference.tx.distance(&study.tx),
        slice_rmse: slices
            .iter()
            .map(|s| {
                let l = s.label();
                let xs: Vec<f64> = rmse.iter().map(|r| r[&l]).collect();
                (l, Summary::of(&xs))
            })
            .collect(),
        cdf_distance: Summary::of(&ks),
        localization_error: Summary::of(&loc),
        cdf_original: stats.cdf_grid.iter().map(|&v| truth_cdf.at(v)).collect(),
        cdf_grid: stats.cdf_grid,
        cdf_mean: stats.cdf_mean,
        cdf_std: stats.cdf_std,
        slice_profiles,
        per_sample_slice_rmse: rmse,
    })
}

/// Scores `sampler` on every record. A record whose sampling fails is
/// listed under `failures` and the sweep continues.
pub fn evaluate<S: MapSampler + ?Sized>(
    sampler: &S,
    records: &[DatasetRecord],
    protocol: &Protocol,
) -> Result<EvalReport, EvalError> {
    if let Some(first) = records.first() {
        protocol.validate(first.map.height(), first.map.width())?;
    }
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in records.iter().enumerate() {
        match evaluate_record(sampler, r, protocol, record_seed(protocol.seed, i)) {
            Ok(row) => rows.push(row),
            Err(e) => failures.push(Failure {
                id: r.id.clone(),
                error: e.to_string(),
            }),
        }
    }
    let mut aggregates = BTreeMap::new();
    for spec in &protocol.slices {
        let l = spec.label();
        let xs: Vec<f64> = rows.iter().map(|r| r.slice_rmse[&l]).collect();
        aggregates.insert(format!("slice_rmse[{l}]"), Summary::of(&xs));
    }
    let ks: Vec<f64> = rows.iter().map(|r| r.cdf_distance).collect();
    aggregates.insert("cdf_distance".into(), Summary::of(&ks));
    let loc: Vec<f64> = rows.iter().map(|r| r.localization_error).collect();
    aggregates.insert("localization_error".into(), Summary::of(&loc));
    let ensemble = match &protocol.ensemble {
        Some(study) => Some(evaluate_ensemble(
            sampler,
            records,
            study,
            &protocol.slices,
            record_seed(protocol.seed, records.len()),
        )?),
        None => None,
    };
    Ok(EvalReport {
        sampler: sampler.label(),
        protocol: protocol.clone(),
        std_convention: STD_CONVENTION.into(),
        records: rows,
        failures,
        aggregates,
        ensemble,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

struct CsvOut {
    path: PathBuf,
    writer: csv::Writer<fs::File>,
}

impl CsvOut {
    fn create(path: PathBuf, header: &[&str]) -> Result<Self, EvalError> {
        let writer = csv::Writer::from_path(&path).map_err(|source| EvalError::Csv {
            path: path.clone(),
            source,
        })?;
        let mut out = Self { path, writer };
        out.row(header.iter().map(|s| s.to_string()))?;
        Ok(out)
    }

    fn row(&mut self, fields: impl IntoIterator<Item = String>) -> Result<(), EvalError> {
        let fields: Vec<String> = fields.into_iter().collect();
        self.writer.write_record(&fields).map_err(|source| EvalError::Csv {
            path: self.path.clone(),
            source,
        })
    }

    fn finish(mut self) -> Result<PathBuf, EvalError> {
        self.writer.flush().map_err(io_err(&self.path))?;
        Ok(self.path)
    }
}

/// Writes `report.json` and the plot-ready CSV series into `dir`; returns
/// every path written. `train_log`, when given, becomes `loss_curve.csv`.
pub fn write_report(report: &EvalReport, dir: &Path, train_log: Option<&Path>) -> Result<Vec<PathBuf>, EvalError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    let path = dir.join(REPORT_FILE);
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    written.push(path);

    let mut rmse = CsvOut::create(dir.join("slice_rmse.csv"), &["record_id", "slice", "rmse"])?;
    for r in &report.records {
        for (slice, v) in &r.slice_rmse {
            rmse.row([r.id.clone(), slice.clone(), v.to_string()])?;
        }
    }
    written.push(rmse.finish()?);

    let mut rows = CsvOut::create(
        dir.join("records.csv"),
        &["record_id", "tx_x", "tx_y", "cdf_distance", "localization_error"],
    )?;
    for r in &report.records {
        rows.row([
            r.id.clone(),
            r.tx.x.to_string(),
            r.tx.y.to_string(),
            r.cdf_distance.to_string(),
            r.localization_error.to_string(),
        ])?;
    }
    written.push(rows.finish()?);

    if let Some(e) = &report.ensemble {
        let mut cdf = CsvOut::create(
            dir.join("cdf_curves.csv"),
            &["intensity", "original", "mean", "std", "lower", "upper"],
        )?;
        for i in 0..e.cdf_grid.len() {
            let (m, s) = (e.cdf_mean[i], e.cdf_std[i]);
            cdf.row([e.cdf_grid[i], e.cdf_original[i], m, s, m - s, m + s].map(|v| v.to_string()))?;
        }
        written.push(cdf.finish()?);

        let mut prof = CsvOut::create(
            dir.join("slice_profiles.csv"),
            &["slice", "position", "original", "mean", "std"],
        )?;
        for p in &e.slice_profiles {
            for k in 0..p.original.len() {
                prof.row([
                    p.slice.label(),
                    k.to_string(),
                    p.original[k].to_string(),
                    p.mean[k].to_string(),
                    p.std[k].to_string(),
                ])?;
            }
        }
        written.push(prof.finish()?);

        let mut per = CsvOut::create(dir.join("ensemble_slice_rmse.csv"), &["sample", "slice", "rmse"])?;
        for (i, row) in e.per_sample_slice_rmse.iter().enumerate() {
            for (slice, v) in row {
                per.row([i.to_string(), slice.clone(), v.to_string()])?;
            }
        }
        written.push(per.finish()?);
    }

    if let Some(log) = train_log {
        let records = load_train_log(log).map_err(|e| EvalError::InvalidProtocol(format!("{}: {e}", log.display())))?;
        let mut loss = CsvOut::create(
            dir.join("loss_curve.csv"),
            &["iteration", "loss", "lr", "grad_norm", "validation_loss"],
        )?;
        for r in records {
            loss.row([
                r.iteration.to_string(),
                r.loss.to_string(),
                r.lr.to_string(),
                r.grad_norm.to_string(),
                r.validation_loss.map_or(String::new(), |v| v.to_string()),
            ])?;
        }
        written.push(loss.finish()?);
    }
    Ok(written)
}

/// Loads the dataset at `data_root`, keeps the records named in `ids` (all
/// of them when `None`), checks the checkpoint against the data and scores
/// it.
pub fn evaluate_checkpoint(
    checkpoint: &DenoiserCheckpoint,
    kind: SamplerKind,
    data_root: &Path,
    ids: Option<&[String]>,
    protocol: &Protocol,
) -> Result<EvalReport, EvalError> {
    let data = load_dataset(data_root)?;
    let m = &data.manifest;
    checkpoint
        .manifest
        .check_compatible(m.height, m.width, m.env_dim)
        .map_err(|e| SampleError::IncompatibleCheckpoint(e.to_string()))?;
    let records = select(data.records, ids)?;
    evaluate(&CheckpointSampler { checkpoint, kind }, &records, protocol)
}

/// Records whose ids appear in `ids`, in dataset order.
pub fn select(records: Vec<DatasetRecord>, ids: Option<&[String]>) -> Result<Vec<DatasetRecord>, EvalError> {
    let Some(ids) = ids else {
        return Ok(records);
    };
    let wanted: std::collections::BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    let picked: Vec<DatasetRecord> = records.into_iter().filter(|r| wanted.contains(r.id.as_str())).collect();
    if picked.len() != wanted.len() {
        return Err(EvalError::InvalidProtocol(format!(
            "{} of {} requested records are missing from the dataset",
            wanted.len() - picked.len(),
            wanted.len()
        )));
    }
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> RemGrid {
        RemGrid::raw(Array2::from_shape_fn((h, w), |(y, x)| f(y, x))).unwrap()
    }

    #[test]
    fn rmse_zero_and_constant_offset() {
        let a = grid(16, 16, |y, x| ((x * 7 + y * 3) % 200) as f64);
        let s = SliceSpec::vertical(5);
        assert_eq!(slice_rmse(&a, &a, s).unwrap(), 0.0);
        let b = grid(16, 16, |y, x| ((x * 7 + y * 3) % 200) as f64 + 12.5);
        assert!((slice_rmse(&b, &a, s).unwrap() - 12.5).abs() < 1e-12);
        assert!((slice_rmse(&b, &a, SliceSpec::horizontal(15)).unwrap() - 12.5).abs() < 1e-12);
    }

    #[test]
    fn rmse_matches_loop_transcription_at_x100() {
        let mut seed = 12345u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (seed >> 33) as f64 / (1u64 << 31) as f64 * 255.0
        };
        let a = grid(128, 128, |_, _| next());
        let b = grid(128, 128, |_, _| next());
        let mut acc = 0.0;
        for y in 0..128 {
            let d = a.get(y, 100) - b.get(y, 100);
            acc += d * d;
        }
        let want = (acc / 128.0).sqrt();
        assert!((slice_rmse(&a, &b, SliceSpec::vertical(100)).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn rmse_rejects_bad_index() {
        let a = grid(8, 12, |_, _| 0.0);
        assert!(matches!(
            slice_rmse(&a, &a, SliceSpec::vertical(12)),
            Err(EvalError::IndexOutOfRange { index: 12, len: 12 })
        ));
        assert!(matches!(
            slice_rmse(&a, &a, SliceSpec::horizontal(8)),
            Err(EvalError::IndexOutOfRange { index: 8, len: 8 })
        ));
        let b = grid(8, 8, |_, _| 0.0);
        assert!(matches!(
            slice_rmse(&a, &b, SliceSpec::vertical(0)),
            Err(EvalError::DimensionMismatch(..))
        ));
    }

    #[test]
    fn cdf_of_constant_is_one_step() {
        let c = intensity_cdf(&grid(8, 8, |_, _| 42.0));
        assert_eq!(c.at(41.999), 0.0);
        assert_eq!(c.at(42.0), 1.0);
        assert_eq!(c.at(255.0), 1.0);
        assert_eq!(c.fractions[0], 1.0 / 64.0);
    }

    #[test]
    fn cdf_of_ramp_is_near_uniform() {
        let ramp = grid(16, 16, |y, x| (y * 16 + x) as f64);
        let c = intensity_cdf(&ramp);
        let tol = 1.0 / 256.0 + 1e-12;
        for k in 0..=2550 {
            let v = k as f64 / 10.0;
            assert!((c.at(v) - v / 255.0).abs() <= tol, "v = {v}");
        }
    }

    #[test]
    fn ks_of_shifted_ramps() {
        // uniform on [0, 200] against uniform on [20, 220]
        let n = 100 * 100;
        let a = grid(100, 100, |y, x| 200.0 * (y * 100 + x) as f64 / (n - 1) as f64);
        let b = grid(100, 100, |y, x| 20.0 + 200.0 * (y * 100 + x) as f64 / (n - 1) as f64);
        let d = cdf_distance(&intensity_cdf(&a), &intensity_cdf(&b));
        assert!((d - 0.1).abs() <= 2.0 / n as f64, "{d}");
    }

    #[test]
    fn ks_extremes() {
        let a = intensity_cdf(&grid(8, 8, |y, _| y as f64));
        assert_eq!(cdf_distance(&a, &a), 0.0);
        let b = intensity_cdf(&grid(8, 8, |y, _| 100.0 + y as f64));
        assert_eq!(cdf_distance(&a, &b), 1.0);
    }

    #[test]
    fn ensemble_two_point_std() {
        let m = grid(8, 8, |y, x| (x + y) as f64);
        let m2 = grid(8, 8, |y, x| (x + y) as f64 + 2.0);
        let s = ensemble_stats(&[m.clone(), m2]).unwrap();
        assert!(s.std.iter().all(|&v| (v - 2f64.sqrt()).abs() < 1e-12));
        let same = ensemble_stats(&[m.clone(), m.clone(), m.clone()]).unwrap();
        assert!(same.std.iter().all(|&v| v == 0.0));
        assert_eq!(same.mean, m.values().to_owned());
        assert!(same.cdf_std.iter().all(|&v| v == 0.0));
        assert_eq!(same.cdf_grid.len(), CDF_GRID_POINTS);
        assert!(matches!(ensemble_stats(&[m]), Err(EvalError::FewerThanTwoSamples(1))));
    }

    fn records(n: usize) -> Vec<DatasetRecord> {
        (0..n)
            .map(|i| {
                let tx = TxCoordinate::lattice(2 + i % 12, 3 + (i * 5) % 10);
                let map = grid(16, 16, |y, x| {
                    let d = ((x as f64 - tx.x).powi(2) + (y as f64 - tx.y).powi(2)).sqrt();
                    if (x, y) == (tx.x as usize, tx.y as usize) {
                        255.0
                    } else {
                        (240.0 - 14.0 * d).max(0.0)
                    }
                });
                DatasetRecord {
                    id: format!("r{i:02}"),
                    map,
                    tx,
                    env: None,
                }
            })
            .collect()
    }

    #[test]
    fn ground_truth_is_the_ceiling() {
        let rs = records(10);
        let p = Protocol::scaled(16, 16, 1).with_scaled_ensemble(16, 16, 4);
        let report = evaluate(&LookupSampler::ground_truth(&rs), &rs, &Protocol { ensemble: None, ..p }).unwrap();
        assert_eq!(report.records.len(), 10);
        assert!(report.failures.is_empty());
        for r in &report.records {
            assert!(r.slice_rmse.values().all(|&v| v == 0.0));
            assert_eq!(r.cdf_distance, 0.0);
            assert!(r.localization_error <= TIE_ROUNDING_BOUND);
        }
    }

    struct Constant(f64);
    impl MapSampler for Constant {
        fn label(&self) -> String {
            format!("constant_{}", self.0)
        }
        fn sample_maps(&self, _: TxCoordinate, _: Option<&[f64]>, n: usize, _: u64) -> Result<Vec<RemGrid>, EvalError> {
            Ok(vec![grid(16, 16, |_, _| self.0); n])
        }
    }

    #[test]
    fn constant_sampler_matches_standalone_ks() {
        let rs = records(5);
        let report = evaluate(&Constant(80.0), &rs, &Protocol::scaled(16, 16, 0)).unwrap();
        let flat = intensity_cdf(&grid(16, 16, |_, _| 80.0));
        for (row, r) in report.records.iter().zip(&rs) {
            assert_eq!(row.cdf_distance, cdf_distance(&flat, &intensity_cdf(&r.map)));
        }
    }

    struct Flaky;
    impl MapSampler for Flaky {
        fn label(&self) -> String {
            "flaky".into()
        }
        fn sample_maps(&self, tx: TxCoordinate, _: Option<&[f64]>, n: usize, _: u64) -> Result<Vec<RemGrid>, EvalError> {
            if tx.x as usize % 2 == 0 {
                Err(EvalError::InvalidProtocol("boom".into()))
            } else {
                Ok(vec![grid(16, 16, |_, _| 1.0); n])
            }
        }
    }

    #[test]
    fn failures_do_not_abort_the_sweep() {
        let rs = records(6);
        let report = evaluate(&Flaky, &rs, &Protocol::scaled(16, 16, 0)).unwrap();
        assert_eq!(report.records.len() + report.failures.len(), 6);
        assert!(!report.failures.is_empty() && !report.records.is_empty());
    }

    #[test]
    fn report_is_deterministic_and_complete() {
        let rs = records(6);
        let p = Protocol::scaled(16, 16, 9).with_scaled_ensemble(16, 16, 3);
        let a = evaluate(&Constant(30.0), &rs, &p).unwrap();
        let b = evaluate(&Constant(30.0), &rs, &p).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let e = a.ensemble.as_ref().unwrap();
        assert!(e.is_finite());
        assert_eq!(e.cdf_grid.len(), CDF_GRID_POINTS);

        let dir = tempfile::tempdir().unwrap();
        let paths = write_report(&a, dir.path(), None).unwrap();
        let names: Vec<String> = paths
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        for want in ["report.json", "slice_rmse.csv", "cdf_curves.csv", "slice_profiles.csv"] {
            assert!(names.iter().any(|n| n == want), "{names:?}");
        }
        let back: EvalReport = serde_json::from_str(&fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap()).unwrap();
        assert_eq!(back, a);
    }

    proptest! {
        #[test]
        fn rmse_symmetric_and_linear(seed in 0u64..1000, k in 0.0f64..1.0, x in 0usize..12) {
            let a = grid(12, 12, |yy, xx| ((yy * 31 + xx * 17 + seed as usize) % 120) as f64);
            let b = grid(12, 12, |yy, xx| ((yy * 13 + xx * 7 + 3 * seed as usize) % 120) as f64);
            let s = SliceSpec::vertical(x);
            let ab = slice_rmse(&a, &b, s).unwrap();
            prop_assert!((ab - slice_rmse(&b, &a, s).unwrap()).abs() < 1e-12);
            // scaling both maps by k scales their difference by k
            let ka = grid(12, 12, |yy, xx| k * a.get(yy, xx));
            let kb = grid(12, 12, |yy, xx| k * b.get(yy, xx));
            prop_assert!((slice_rmse(&ka, &kb, s).unwrap() - k * ab).abs() < 1e-9);
        }

        #[test]
        fn cdf_fractions_end_at_one(vals in proptest::collection::vec(0.0f64..255.0, 64)) {
            let c = intensity_cdf(&RemGrid::raw(Array2::from_shape_vec((8, 8), vals).unwrap()).unwrap());
            prop_assert!(c.fractions.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(*c.fractions.last().unwrap(), 1.0);
            prop_assert!(c.values.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn cdf_is_permutation_invariant(vals in proptest::collection::vec(0.0f64..255.0, 64), rot in 0usize..64) {
            let mut p = vals.clone();
            p.rotate_left(rot);
            p.reverse();
            let a = intensity_cdf(&RemGrid::raw(Array2::from_shape_vec((8, 8), vals).unwrap()).unwrap());
            let b = intensity_cdf(&RemGrid::raw(Array2::from_shape_vec((8, 8), p).unwrap()).unwrap());
            prop_assert_eq!(a, b);
        }
    }
}
