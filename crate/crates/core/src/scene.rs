//! Synthetic urban scenes: log-distance path loss from the transmitter plus
//! a fixed penetration loss for every building the line of sight crosses.
//! Buildings render black.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rem_data::{save_dataset, DataError, DatasetRecord, Manifest, RemGrid, TxCoordinate};

pub const SCENE_FILE: &str = "scene.json";

const LAYOUT_STREAM: u64 = 0x5ce9e;
const TX_STREAM: u64 = 0x7a11;
const PLACEMENT_RETRIES: usize = 10_000;

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("transmitter ({x}, {y}) lies inside a building")]
    TxInsideBuilding { x: f64, y: f64 },
    #[error("no free transmitter position found after {0} draws")]
    NoFreeSpace(usize),
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub n_buildings: usize,
    /// Inclusive range of building side lengths, in pixels.
    pub building_min: usize,
    pub building_max: usize,
    pub path_loss_exponent: f64,
    /// Intensity at the 1-pixel reference distance.
    pub p0: f64,
    /// Intensity lost per crossed building.
    pub penetration_loss: f64,
    pub noise_floor: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            n_buildings: 6,
            building_min: 6,
            building_max: 14,
            path_loss_exponent: 2.2,
            p0: 255.0,
            penetration_loss: 60.0,
            noise_floor: 10.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    /// Default spec on a `size×size` grid, building sizes scaled to match.
    pub fn square(size: usize, seed: u64) -> Self {
        let scale = size as f64 / 64.0;
        let building_min = ((6.0 * scale).round() as usize).max(2);
        let building_max = ((14.0 * scale).round() as usize).max(building_min);
        Self {
            height: size,
            width: size,
            building_min,
            building_max,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::InvalidSpec(m.to_string()));
        if self.height < 8 || self.width < 8 {
            return bad("grid must be at least 8x8");
        }
        if !(self.p0 <= 255.0 && self.p0 > 0.0) {
            return bad("p0 must lie in (0, 255]");
        }
        if !(self.noise_floor >= 0.0 && self.noise_floor < self.p0) {
            return bad("noise floor must lie in [0, p0)");
        }
        if !(self.path_loss_exponent > 0.0) || !(self.penetration_loss >= 0.0) {
            return bad("path-loss exponent must be positive and penetration loss non-negative");
        }
        if self.building_min == 0
            || self.building_min > self.building_max
            || self.building_max + 2 > self.height.min(self.width)
        {
            return bad("building sizes must satisfy 1 <= min <= max <= side - 2");
        }
        Ok(())
    }
}

/// Axis-aligned building covering pixel columns `x0..=x1` and rows `y0..=y1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Building {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Building {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }

    fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64 - 0.5
            && x <= self.x1 as f64 + 0.5
            && y >= self.y0 as f64 - 0.5
            && y <= self.y1 as f64 + 0.5
    }

    fn overlaps_padded(&self, other: &Building, gap: usize) -> bool {
        self.x0 <= other.x1 + gap
            && other.x0 <= self.x1 + gap
            && self.y0 <= other.y1 + gap
            && other.y0 <= self.y1 + gap
    }

    /// Whether the segment `a → b` (pixel centres) passes through the
    /// building's footprint `[x0 − ½, x1 + ½] × [y0 − ½, y1 + ½]`.
    pub fn intersects_segment(&self, a: (f64, f64), b: (f64, f64)) -> bool {
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        let bounds = [
            (-dx, a.0 - (self.x0 as f64 - 0.5)),
            (dx, (self.x1 as f64 + 0.5) - a.0),
            (-dy, a.1 - (self.y0 as f64 - 0.5)),
            (dy, (self.y1 as f64 + 0.5) - a.1),
        ];
        for (p, q) in bounds {
            if p == 0.0 {
                if q < 0.0 {
                    return false;
                }
            } else {
                let r = q / p;
                if p < 0.0 {
                    t0 = t0.max(r);
                } else {
                    t1 = t1.min(r);
                }
                if t0 > t1 {
                    return false;
                }
            }
        }
        true
    }
}

/// A fixed building layout shared by every transmitter placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub spec: SceneSpec,
    pub buildings: Vec<Building>,
}

impl Scene {
    /// Places `n_buildings` non-touching rectangles inside the grid,
    /// deterministically from the spec's seed.
    pub fn generate(spec: &SceneSpec) -> Result<Self, SceneError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ LAYOUT_STREAM);
        let mut buildings: Vec<Building> = Vec::with_capacity(spec.n_buildings);
        let mut tries = 0;
        while buildings.len() < spec.n_buildings {
            tries += 1;
            if tries > PLACEMENT_RETRIES {
                return Err(SceneError::InvalidSpec(format!(
                    "could not place {} buildings",
                    spec.n_buildings
                )));
            }
            let bw = rng.random_range(spec.building_min..=spec.building_max);
            let bh = rng.random_range(spec.building_min..=spec.building_max);
            let x0 = rng.random_range(1..=spec.width - 1 - bw);
            let y0 = rng.random_range(1..=spec.height - 1 - bh);
            let b = Building {
                x0,
                y0,
                x1: x0 + bw - 1,
                y1: y0 + bh - 1,
            };
            if buildings.iter().all(|o| !o.overlaps_padded(&b, 2)) {
                buildings.push(b);
            }
        }
        Ok(Self {
            spec: spec.clone(),
            buildings,
        })
    }

    pub fn with_buildings(spec: SceneSpec, buildings: Vec<Building>) -> Result<Self, SceneError> {
        spec.validate()?;
        if let Some(b) = buildings
            .iter()
            .find(|b| b.x1 >= spec.width || b.y1 >= spec.height || b.x0 > b.x1 || b.y0 > b.y1)
        {
            return Err(SceneError::InvalidSpec(format!("building {b:?} leaves the grid")));
        }
        Ok(Self { spec, buildings })
    }

    pub fn is_building(&self, x: usize, y: usize) -> bool {
        self.buildings.iter().any(|b| b.contains(x, y))
    }

    /// Number of buildings crossed by the line from `tx` to pixel `(x, y)`.
    pub fn crossings(&self, tx: TxCoordinate, x: usize, y: usize) -> usize {
        self.buildings
            .iter()
            .filter(|b| b.intersects_segment((tx.x, tx.y), (x as f64, y as f64)))
            .count()
    }

    /// Unclamped received intensity at an open-space pixel.
    pub fn intensity(&self, tx: TxCoordinate, x: usize, y: usize) -> f64 {
        let d = ((x as f64 - tx.x).powi(2) + (y as f64 - tx.y).powi(2)).sqrt();
        self.spec.p0
            - 10.0 * self.spec.path_loss_exponent * d.max(1.0).log10()
            - self.spec.penetration_loss * self.crossings(tx, x, y) as f64
    }

    /// Renders the map for a transmitter at `tx`, quantized to whole
    /// grayscale levels. The transmitter pixel holds the map maximum.
    pub fn render(&self, tx: TxCoordinate) -> Result<RemGrid, SceneError> {
        let s = &self.spec;
        TxCoordinate::new(tx.x, tx.y, s.height, s.width)?;
        if self.buildings.iter().any(|b| b.contains_point(tx.x, tx.y)) {
            return Err(SceneError::TxInsideBuilding { x: tx.x, y: tx.y });
        }
        let mut values = Array2::from_shape_fn((s.height, s.width), |(y, x)| {
            if self.is_building(x, y) {
                0.0
            } else {
                self.intensity(tx, x, y)
                    .clamp(s.noise_floor, 255.0)
                    .round()
            }
        });
        let (tx_x, tx_y) = tx.to_lattice();
        let peak = values.iter().copied().fold(0.0, f64::max);
        values[[tx_y, tx_x]] = peak;
        Ok(RemGrid::raw(values)?)
    }

    /// A transmitter position is usable when its whole 3×3 neighbourhood is
    /// inside the grid and outside every building.
    pub fn is_clear(&self, x: usize, y: usize) -> bool {
        if x == 0 || y == 0 || x + 1 >= self.spec.width || y + 1 >= self.spec.height {
            return false;
        }
        (y - 1..=y + 1).all(|yy| (x - 1..=x + 1).all(|xx| !self.is_building(xx, yy)))
    }

    /// Draws a uniformly random clear transmitter position.
    pub fn sample_tx(&self, rng: &mut impl Rng) -> Result<TxCoordinate, SceneError> {
        for _ in 0..PLACEMENT_RETRIES {
            let x = rng.random_range(0..self.spec.width);
            let y = rng.random_range(0..self.spec.height);
            if self.is_clear(x, y) {
                return Ok(TxCoordinate::lattice(x, y));
            }
        }
        Err(SceneError::NoFreeSpace(PLACEMENT_RETRIES))
    }
}

/// Record for one transmitter placement.
pub fn generate_scene(scene: &Scene, tx: TxCoordinate, id: impl Into<String>) -> Result<DatasetRecord, SceneError> {
    Ok(DatasetRecord {
        id: id.into(),
        map: scene.render(tx)?,
        tx,
        env: None,
    })
}

/// `n_records` placements over one layout, deterministic under the seed.
pub fn generate_records(spec: &SceneSpec, n_records: usize) -> Result<(Scene, Vec<DatasetRecord>), SceneError> {
    let scene = Scene::generate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ TX_STREAM);
    let width = n_records.max(1).to_string().len().max(4);
    let records = (0..n_records)
        .map(|i| {
            let tx = scene.sample_tx(&mut rng)?;
            generate_scene(&scene, tx, format!("rem_{i:0width$}"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((scene, records))
}

/// Writes a synthetic dataset (plus `scene.json`) under `root`.
pub fn generate_dataset(spec: &SceneSpec, n_records: usize, root: &Path) -> Result<Scene, SceneError> {
    let (scene, records) = generate_records(spec, n_records)?;
    save_dataset(root, &Manifest::new(spec.height, spec.width, 0), &records)?;
    let text = serde_json::to_string_pretty(&scene).expect("scene serializes");
    fs::write(root.join(SCENE_FILE), text + "\n")?;
    Ok(scene)
}
