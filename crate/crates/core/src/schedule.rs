//! Fixed noise schedule and the closed-form forward / reverse diffusion
//! updates. Steps are 1-based: `t ∈ [1, T]`, with `ᾱ_0 = 1`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScheduleError {
    #[error("invalid schedule: {0}")]
    InvalidRange(String),
    #[error("step {step} outside [{lo}, {hi}]")]
    StepOutOfRange { step: usize, lo: usize, hi: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

/// Serializable description from which the tables are rebuilt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear `β` from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, ScheduleError> {
        Self::from_params(ScheduleParams {
            kind: ScheduleKind::Linear,
            steps,
            beta_start,
            beta_end,
        })
    }

    pub fn from_params(params: ScheduleParams) -> Result<Self, ScheduleError> {
        let ScheduleParams {
            steps,
            beta_start,
            beta_end,
            ..
        } = params;
        if steps == 0 {
            return Err(ScheduleError::InvalidRange("T must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(ScheduleError::InvalidRange(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let sigmas = betas.iter().map(|b| b.sqrt()).collect();
        Ok(Self {
            params,
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<usize, ScheduleError> {
        if t == 0 || t > self.steps() {
            return Err(ScheduleError::StepOutOfRange {
                step: t,
                lo: 1,
                hi: self.steps(),
            });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64, ScheduleError> {
        Ok(self.betas[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64, ScheduleError> {
        Ok(self.alphas[self.check(t)?])
    }

    /// `ᾱ_t = ∏_{s ≤ t} (1 − β_s)`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64, ScheduleError> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bars[self.check(t)?])
    }

    /// Reverse-step noise scale, `√β_t`.
    pub fn sigma(&self, t: usize) -> Result<f64, ScheduleError> {
        Ok(self.sigmas[self.check(t)?])
    }

    /// Posterior standard deviation `√(β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t))`.
    pub fn posterior_std(&self, t: usize) -> Result<f64, ScheduleError> {
        let beta = self.beta(t)?;
        let ab = self.alpha_bar(t)?;
        let ab_prev = self.alpha_bar(t - 1)?;
        Ok((beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt())
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `√ᾱ_t · x0 + √(1 − ᾱ_t) · ε`.
    pub fn q_sample(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>, ScheduleError> {
        same_len(x0, eps)?;
        let ab = self.alpha_bar(t)?;
        self.check(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
    }

    /// Solves the forward relation for `x0` given the injected noise.
    pub fn predict_x0(&self, x_t: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>, ScheduleError> {
        same_len(x_t, eps)?;
        let ab = self.alpha_bar(t)?;
        self.check(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x_t.iter().zip(eps).map(|(x, e)| (x - b * e) / a).collect())
    }

    /// Ancestral update
    /// `x_{t−1} = (x_t − (1 − α_t)/√(1 − ᾱ_t) · ε̂) / √α_t + σ_t z`
    /// with `σ_t = √β_t`. `z = None` drops the noise term.
    pub fn reverse_step(
        &self,
        x_t: &[f64],
        eps_hat: &[f64],
        t: usize,
        z: Option<&[f64]>,
    ) -> Result<Vec<f64>, ScheduleError> {
        let sigma = self.sigma(t)?;
        self.reverse_step_with_sigma(x_t, eps_hat, t, sigma, z)
    }

    /// [`Self::reverse_step`] with an explicit noise scale.
    pub fn reverse_step_with_sigma(
        &self,
        x_t: &[f64],
        eps_hat: &[f64],
        t: usize,
        sigma: f64,
        z: Option<&[f64]>,
    ) -> Result<Vec<f64>, ScheduleError> {
        same_len(x_t, eps_hat)?;
        let alpha = self.alpha(t)?;
        let ab = self.alpha_bar(t)?;
        let coef = (1.0 - alpha) / (1.0 - ab).sqrt();
        let inv = 1.0 / alpha.sqrt();
        let mut out: Vec<f64> = x_t
            .iter()
            .zip(eps_hat)
            .map(|(x, e)| inv * (x - coef * e))
            .collect();
        if let Some(z) = z {
            same_len(x_t, z)?;
            out.iter_mut().zip(z).for_each(|(o, n)| *o += sigma * n);
        }
        Ok(out)
    }

    /// Deterministic (`η = 0`) implicit step from `t` to `t_prev ≤ t`:
    /// `x̂0 = (x_t − √(1 − ᾱ_t) ε̂)/√ᾱ_t`,
    /// `x_{t_prev} = √ᾱ_{t_prev} x̂0 + √(1 − ᾱ_{t_prev}) ε̂`.
    pub fn ddim_step(
        &self,
        x_t: &[f64],
        eps_hat: &[f64],
        t: usize,
        t_prev: usize,
    ) -> Result<Vec<f64>, ScheduleError> {
        self.ddim_step_eta(x_t, eps_hat, t, t_prev, 0.0, None)
    }

    /// Implicit step with stochasticity `η`; the injected noise scale is
    /// `η · √((1 − ᾱ_{t_prev})/(1 − ᾱ_t) · (1 − ᾱ_t/ᾱ_{t_prev}))`.
    pub fn ddim_step_eta(
        &self,
        x_t: &[f64],
        eps_hat: &[f64],
        t: usize,
        t_prev: usize,
        eta: f64,
        z: Option<&[f64]>,
    ) -> Result<Vec<f64>, ScheduleError> {
        same_len(x_t, eps_hat)?;
        self.check(t)?;
        if t_prev > t {
            return Err(ScheduleError::StepOutOfRange {
                step: t_prev,
                lo: 0,
                hi: t,
            });
        }
        if t_prev == t {
            return Ok(x_t.to_vec());
        }
        let ab = self.alpha_bar(t)?;
        let ab_prev = self.alpha_bar(t_prev)?;
        let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).sqrt();
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let sa_prev = ab_prev.sqrt();
        let mut out: Vec<f64> = x_t
            .iter()
            .zip(eps_hat)
            .map(|(x, e)| {
                let x0 = (x - sb * e) / sa;
                sa_prev * x0 + dir * e
            })
            .collect();
        if let Some(z) = z {
            same_len(x_t, z)?;
            out.iter_mut().zip(z).for_each(|(o, n)| *o += sigma * n);
        }
        Ok(out)
    }

    /// `S` evenly spaced steps, descending from `T`, each paired with the
    /// step it jumps to (the last pair targets 0).
    pub fn ddim_pairs(&self, substeps: usize) -> Result<Vec<(usize, usize)>, ScheduleError> {
        let total = self.steps();
        if substeps == 0 || substeps > total {
            return Err(ScheduleError::StepOutOfRange {
                step: substeps,
                lo: 1,
                hi: total,
            });
        }
        let grid: Vec<usize> = (0..=substeps)
            .map(|i| ((i * total) as f64 / substeps as f64).round() as usize)
            .collect();
        Ok(grid.windows(2).rev().map(|w| (w[1], w[0])).collect())
    }
}

fn same_len(a: &[f64], b: &[f64]) -> Result<(), ScheduleError> {
    if a.len() != b.len() {
        return Err(ScheduleError::LengthMismatch(a.len(), b.len()));
    }
    Ok(())
}
