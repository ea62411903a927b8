use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{DataError, RemGrid};

/// Transmitter position in pixel units: `x` is the column (rightward), `y`
/// the row (downward). Sub-pixel values are allowed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TxCoordinate {
    pub x: f64,
    pub y: f64,
}

impl TxCoordinate {
    /// Validated coordinate inside an `height×width` grid.
    pub fn new(x: f64, y: f64, height: usize, width: usize) -> Result<Self, DataError> {
        let ok = x.is_finite()
            && y.is_finite()
            && (0.0..=(width as f64 - 1.0)).contains(&x)
            && (0.0..=(height as f64 - 1.0)).contains(&y);
        if !ok {
            return Err(DataError::TxOutOfBounds {
                x,
                y,
                height,
                width,
            });
        }
        Ok(Self { x, y })
    }

    pub fn lattice(x: usize, y: usize) -> Self {
        Self {
            x: x as f64,
            y: y as f64,
        }
    }

    pub fn distance(&self, other: &TxCoordinate) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }

    /// Nearest lattice point, ties rounding toward the origin.
    pub fn to_lattice(&self) -> (usize, usize) {
        (round_half_down(self.x) as usize, round_half_down(self.y) as usize)
    }
}

/// Rounds to the nearest integer, sending exact halves down.
pub fn round_half_down(v: f64) -> f64 {
    (v - 0.5).ceil()
}

/// Gaussian prior around a transmitter, stored in `[-1, 1]` as `2C − 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordHeatmap {
    values: Array2<f64>,
    sigma: f64,
    tx: TxCoordinate,
}

impl CoordHeatmap {
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn tx(&self) -> TxCoordinate {
        self.tx
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }
}

/// `C(x, y) = exp(−((x − x₀)² + (y − y₀)²) / 2σ²)`, rescaled to `2C − 1`.
pub fn gaussian_heatmap(
    tx: TxCoordinate,
    height: usize,
    width: usize,
    sigma: f64,
) -> Result<CoordHeatmap, DataError> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(DataError::InvalidSigma(sigma));
    }
    let denom = 2.0 * sigma * sigma;
    let values = Array2::from_shape_fn((height, width), |(y, x)| {
        let d2 = (x as f64 - tx.x).powi(2) + (y as f64 - tx.y).powi(2);
        2.0 * (-d2 / denom).exp() - 1.0
    });
    Ok(CoordHeatmap { values, sigma, tx })
}

/// Position of the brightest pixel. When several pixels share the maximum,
/// their centroid is returned, rounded to the lattice with halves going
/// toward the origin.
pub fn extract_tx(map: &RemGrid) -> TxCoordinate {
    let values = map.values();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for ((y, x), &v) in values.indexed_iter() {
        if v == max {
            sx += x as f64;
            sy += y as f64;
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    TxCoordinate {
        x: round_half_down(sx / n),
        y: round_half_down(sy / n),
    }
}
