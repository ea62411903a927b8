use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::DataError;

/// Smallest accepted side length of a map.
pub const MIN_SIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    /// 8-bit grayscale intensities in `[0, 255]`.
    Raw,
    /// Intensities rescaled to `[-1, 1]`.
    Normalized,
}

/// An `H×W` signal-intensity field, indexed `[[y, x]]` with the origin at the
/// top-left corner.
#[derive(Debug, Clone, PartialEq)]
pub struct RemGrid {
    values: Array2<f64>,
    units: Units,
}

impl RemGrid {
    pub fn new(values: Array2<f64>, units: Units) -> Result<Self, DataError> {
        let (h, w) = values.dim();
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(DataError::TooSmall { height: h, width: w });
        }
        let (lo, hi) = match units {
            Units::Raw => (0.0, 255.0),
            Units::Normalized => (-1.0, 1.0),
        };
        if let Some(((y, x), &v)) = values
            .indexed_iter()
            .find(|(_, v)| !v.is_finite() || **v < lo || **v > hi)
        {
            return Err(DataError::ValueOutOfRange { y, x, value: v, units });
        }
        Ok(Self { values, units })
    }

    pub fn raw(values: Array2<f64>) -> Result<Self, DataError> {
        Self::new(values, Units::Raw)
    }

    pub fn normalized(values: Array2<f64>) -> Result<Self, DataError> {
        Self::new(values, Units::Normalized)
    }

    /// Builds a raw grid from row-major 8-bit pixels.
    pub fn from_u8(height: usize, width: usize, pixels: &[u8]) -> Result<Self, DataError> {
        if pixels.len() != height * width {
            return Err(DataError::DimensionMismatch {
                id: String::new(),
                expected: (height, width),
                found: (pixels.len() / width.max(1), width),
            });
        }
        let values = Array2::from_shape_fn((height, width), |(y, x)| pixels[y * width + x] as f64);
        Self::raw(values)
    }

    /// Row-major 8-bit pixels of a raw grid, rounding to the nearest level.
    pub fn to_u8(&self) -> Result<Vec<u8>, DataError> {
        if self.units != Units::Raw {
            return Err(DataError::UnitsMismatch {
                expected: Units::Raw,
                found: self.units,
            });
        }
        Ok(self
            .values
            .iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect())
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn units(&self) -> Units {
        self.units
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[[y, x]]
    }

    /// Row-major copy of the entries.
    pub fn to_vec(&self) -> Vec<f64> {
        self.values.iter().copied().collect()
    }
}

/// Intensity range used to map raw values onto `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueRange {
    pub min_val: f64,
    pub max_val: f64,
}

impl ValueRange {
    pub fn new(min_val: f64, max_val: f64) -> Result<Self, DataError> {
        if !(min_val.is_finite() && max_val.is_finite()) || max_val <= min_val {
            return Err(DataError::DegenerateRange { min_val, max_val });
        }
        Ok(Self { min_val, max_val })
    }

    /// The dataset-wide 8-bit range `[0, 255]`.
    pub const fn eight_bit() -> Self {
        Self {
            min_val: 0.0,
            max_val: 255.0,
        }
    }

    /// Per-image range spanning one map's own extremes.
    pub fn of_map(map: &RemGrid) -> Result<Self, DataError> {
        let (lo, hi) = map
            .values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        Self::new(lo, hi)
    }

    fn span(&self) -> f64 {
        self.max_val - self.min_val
    }
}

impl Default for ValueRange {
    fn default() -> Self {
        Self::eight_bit()
    }
}

/// Maps raw intensities onto `[-1, 1]` with `2·(v − min)/(max − min) − 1`.
pub fn normalize(map: &RemGrid, range: &ValueRange) -> Result<RemGrid, DataError> {
    if map.units != Units::Raw {
        return Err(DataError::UnitsMismatch {
            expected: Units::Raw,
            found: map.units,
        });
    }
    let range = ValueRange::new(range.min_val, range.max_val)?;
    if let Some(((y, x), &v)) = map
        .values
        .indexed_iter()
        .find(|(_, v)| **v < range.min_val || **v > range.max_val)
    {
        return Err(DataError::ValueOutOfRange {
            y,
            x,
            value: v,
            units: Units::Raw,
        });
    }
    let span = range.span();
    let values = map
        .values
        .mapv(|v| (2.0 * (v - range.min_val) / span - 1.0).clamp(-1.0, 1.0));
    RemGrid::normalized(values)
}

/// Like [`normalize`], but a constant map (degenerate per-image range)
/// becomes the all-zero normalized map when `allow_constant` is set.
pub fn normalize_or_zero(
    map: &RemGrid,
    range: &ValueRange,
    allow_constant: bool,
) -> Result<RemGrid, DataError> {
    match normalize(map, range) {
        Err(DataError::DegenerateRange { .. }) if allow_constant => {
            RemGrid::normalized(Array2::zeros(map.values.dim()))
        }
        other => other,
    }
}

/// Inverse of [`normalize`] on arbitrary real values (e.g. a sampler's final
/// state, which may overshoot `[-1, 1]`); the result is clamped to the range.
pub fn denormalize_values(values: ArrayView2<'_, f64>, range: &ValueRange) -> Result<RemGrid, DataError> {
    let range = ValueRange::new(range.min_val, range.max_val)?;
    let span = range.span();
    let lo = range.min_val.max(0.0);
    let hi = range.max_val.min(255.0);
    let out = values.mapv(|v| {
        let v = if v.is_finite() { v } else { 0.0 };
        ((v + 1.0) * 0.5 * span + range.min_val).clamp(lo, hi)
    });
    RemGrid::raw(out)
}

pub fn denormalize(map: &RemGrid, range: &ValueRange) -> Result<RemGrid, DataError> {
    if map.units != Units::Normalized {
        return Err(DataError::UnitsMismatch {
            expected: Units::Normalized,
            found: map.units,
        });
    }
    denormalize_values(map.values.view(), range)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn flat(v: f64) -> RemGrid {
        RemGrid::raw(Array2::from_elem((8, 8), v)).unwrap()
    }

    #[test]
    fn endpoints_and_midpoint() {
        let r = ValueRange::eight_bit();
        assert_eq!(normalize(&flat(0.0), &r).unwrap().get(3, 3), -1.0);
        assert_eq!(normalize(&flat(255.0), &r).unwrap().get(3, 3), 1.0);
        assert_eq!(normalize(&flat(127.5), &r).unwrap().get(3, 3), 0.0);
    }

    #[test]
    fn denormalize_midpoint_and_overshoot_clamp() {
        let r = ValueRange::eight_bit();
        let zero = RemGrid::normalized(Array2::zeros((8, 8))).unwrap();
        assert_eq!(denormalize(&zero, &r).unwrap().get(0, 0), 127.5);
        let over = Array2::from_elem((8, 8), 1.2);
        assert_eq!(denormalize_values(over.view(), &r).unwrap().get(5, 5), 255.0);
        let under = Array2::from_elem((8, 8), -3.0);
        assert_eq!(denormalize_values(under.view(), &r).unwrap().get(5, 5), 0.0);
    }

    #[test]
    fn degenerate_range_is_rejected_unless_flagged() {
        let m = flat(42.0);
        let per_image = ValueRange {
            min_val: 42.0,
            max_val: 42.0,
        };
        assert!(matches!(
            normalize(&m, &per_image),
            Err(DataError::DegenerateRange { .. })
        ));
        let z = normalize_or_zero(&m, &per_image, true).unwrap();
        assert!(z.values().iter().all(|&v| v == 0.0));
        assert!(ValueRange::of_map(&m).is_err());
    }

    #[test]
    fn rejects_out_of_range_and_tiny_grids() {
        assert!(RemGrid::raw(Array2::from_elem((8, 8), 256.0)).is_err());
        assert!(RemGrid::normalized(Array2::from_elem((8, 8), -1.01)).is_err());
        assert!(RemGrid::raw(Array2::from_elem((7, 8), 1.0)).is_err());
        assert!(RemGrid::raw(Array2::from_elem((8, 8), f64::NAN)).is_err());
        let narrow = ValueRange::new(10.0, 20.0).unwrap();
        assert!(normalize(&flat(5.0), &narrow).is_err());
    }

    #[test]
    fn per_image_range_spans_extremes() {
        let mut v = Array2::from_elem((8, 8), 50.0);
        v[[1, 1]] = 10.0;
        v[[2, 2]] = 200.0;
        let m = RemGrid::raw(v).unwrap();
        let r = ValueRange::of_map(&m).unwrap();
        let n = normalize(&m, &r).unwrap();
        assert_eq!(n.get(1, 1), -1.0);
        assert_eq!(n.get(2, 2), 1.0);
    }

    #[test]
    fn round_trip_on_random_maps() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let r = ValueRange::eight_bit();
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let m = RemGrid::raw(Array2::from_shape_fn((8, 8), |_| rng.random_range(0.0..=255.0))).unwrap();
            let back = denormalize(&normalize(&m, &r).unwrap(), &r).unwrap();
            let err = (&m.values - &back.values).iter().fold(0.0f64, |a, e| a.max(e.abs()));
            worst = worst.max(err);
        }
        assert!(worst < 1e-6, "{worst}");
    }

    proptest! {
        #[test]
        fn round_trip_identity_any_range(lo in 0.0f64..100.0, span in 1.0f64..155.0, seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let r = ValueRange::new(lo, lo + span).unwrap();
            let m = RemGrid::raw(Array2::from_shape_fn((8, 9), |_| rng.random_range(lo..=lo + span))).unwrap();
            let n = normalize(&m, &r).unwrap();
            prop_assert!(n.values().iter().all(|v| (-1.0..=1.0).contains(v)));
            let back = denormalize(&n, &r).unwrap();
            for (a, b) in m.values().iter().zip(back.values().iter()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
