use serde::{Deserialize, Serialize};

use super::DataError;

/// Per-feature standardization statistics, kept so inference can apply the
/// training-time transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvStats {
    pub mean: Vec<f64>,
    /// Population standard deviation (divisor `n`).
    pub std: Vec<f64>,
    /// Features with zero spread; they standardize to 0.
    pub zero_variance: Vec<bool>,
}

impl EnvStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>, DataError> {
        if v.len() != self.dim() {
            return Err(DataError::EnvLength {
                expected: self.dim(),
                found: v.len(),
            });
        }
        Ok(v.iter()
            .enumerate()
            .map(|(i, x)| {
                if self.zero_variance[i] {
                    0.0
                } else {
                    (x - self.mean[i]) / self.std[i]
                }
            })
            .collect())
    }
}

/// Z-scores each feature over the given set of vectors.
pub fn zscore_env(vectors: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, EnvStats), DataError> {
    if vectors.len() < 2 {
        return Err(DataError::TooFewEnvVectors(vectors.len()));
    }
    let p = vectors[0].len();
    if let Some(bad) = vectors.iter().find(|v| v.len() != p) {
        return Err(DataError::EnvLength {
            expected: p,
            found: bad.len(),
        });
    }
    let n = vectors.len() as f64;
    let mut mean = vec![0.0; p];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; p];
    for v in vectors {
        for ((s, x), m) in var.iter_mut().zip(v).zip(&mean) {
            *s += (x - m) * (x - m);
        }
    }
    let std: Vec<f64> = var.iter().map(|s| (s / n).sqrt()).collect();
    let zero_variance = std.iter().map(|&s| s <= f64::EPSILON).collect();
    let stats = EnvStats {
        mean,
        std,
        zero_variance,
    };
    let out = vectors
        .iter()
        .map(|v| stats.apply(v))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn two_point() {
        let (z, stats) = zscore_env(&[vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(z, vec![vec![-1.0], vec![1.0]]);
        assert_eq!(stats.mean, vec![2.0]);
    }

    #[test]
    fn constant_feature_is_zeroed_and_flagged() {
        let (z, stats) = zscore_env(&[vec![5.0, 1.0], vec![5.0, 2.0], vec![5.0, 3.0]]).unwrap();
        assert!(z.iter().all(|v| v[0] == 0.0));
        assert_eq!(stats.zero_variance, vec![true, false]);
    }

    #[test]
    fn errors() {
        assert!(zscore_env(&[vec![1.0]]).is_err());
        assert!(zscore_env(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn random_matrix_moments() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let data: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..3).map(|j| rng.random_range(-5.0..5.0) * (j + 1) as f64 + j as f64 * 10.0).collect())
            .collect();
        let (z, _) = zscore_env(&data).unwrap();
        for j in 0..3 {
            // Kahan-compensated sums as an independent moment oracle
            let col: Vec<f64> = z.iter().map(|r| r[j]).collect();
            let kahan = |it: &mut dyn Iterator<Item = f64>| {
                let (mut s, mut c) = (0.0f64, 0.0f64);
                for x in it {
                    let y = x - c;
                    let t = s + y;
                    c = (t - s) - y;
                    s = t;
                }
                s
            };
            let mean = kahan(&mut col.iter().copied()) / 100.0;
            let var = kahan(&mut col.iter().map(|x| (x - mean) * (x - mean))) / 100.0;
            assert!(mean.abs() < 1e-9, "{mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-9, "{var}");
        }
    }
}
