use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::net::ParamStore;

/// Linear warm-up to `peak`, then cosine decay to `floor` at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub floor: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    pub fn at(&self, iteration: usize) -> f64 {
        if iteration < self.warmup {
            return self.peak * (iteration + 1) as f64 / (self.warmup + 1) as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1) as f64;
        let progress = ((iteration - self.warmup) as f64 / span).min(1.0);
        self.floor + 0.5 * (self.peak - self.floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam hyperparameters with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// AdamW whose moment buffers can be written out and restored exactly.
/// Weight decay applies to matrices and kernels, not to biases or norm
/// gains.
pub struct AdamW {
    params: AdamWParams,
    step: usize,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

/// Euclidean norm of all gradients taken together.
pub fn global_grad_norm(store: &ParamStore, grads: &GradStore) -> candle_core::Result<f64> {
    let mut total = 0.0f64;
    for (_, var) in store.vars() {
        if let Some(g) = grads.get(var.as_tensor()) {
            total += g.to_dtype(candle_core::DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
    }
    Ok(total.sqrt())
}

/// Factor that brings a gradient of norm `norm` to at most `clip`.
pub fn clip_factor(norm: f64, clip: f64) -> f64 {
    if norm > clip {
        clip / norm
    } else {
        1.0
    }
}

impl AdamW {
    pub fn new(params: AdamWParams) -> Self {
        Self {
            params,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update with learning rate `lr`, each gradient scaled by `scale`.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64, scale: f64) -> candle_core::Result<()> {
        self.step += 1;
        let p = self.params;
        let bc1 = 1.0 - p.beta1.powi(self.step as i32);
        let bc2 = 1.0 - p.beta2.powi(self.step as i32);
        for (name, var) in store.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = (g * scale)?;
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (m.clone(), v.clone()),
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = ((m * p.beta1)? + (&g * (1.0 - p.beta1))?)?;
            let v = ((v * p.beta2)? + (g.sqr()? * (1.0 - p.beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + p.eps)?)?;
            let w = var.as_tensor();
            let decayed = if w.rank() >= 2 {
                (w * (1.0 - lr * p.weight_decay))?
            } else {
                w.clone()
            };
            var.set(&(decayed - (update * lr)?)?)?;
            self.moments.insert(name.to_string(), (m, v));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> candle_core::Result<()> {
        let mut tensors: HashMap<String, Tensor> = HashMap::new();
        for (name, (m, v)) in &self.moments {
            tensors.insert(format!("m.{name}"), m.clone());
            tensors.insert(format!("v.{name}"), v.clone());
        }
        let step = Tensor::new(&[self.step as u32], &Device::Cpu)?;
        tensors.insert("step".to_string(), step);
        candle_core::safetensors::save(&tensors, path)
    }

    pub fn load(params: AdamWParams, path: &Path, store: &ParamStore) -> candle_core::Result<Self> {
        let mut tensors = candle_core::safetensors::load(path, &Device::Cpu)?;
        let step = match tensors.remove("step") {
            Some(t) => t.to_vec1::<u32>()?[0] as usize,
            None => candle_core::bail!("optimizer state without step counter"),
        };
        let mut moments = BTreeMap::new();
        for (name, var) in store.vars() {
            match (tensors.remove(&format!("m.{name}")), tensors.remove(&format!("v.{name}"))) {
                (Some(m), Some(v)) if m.dims() == var.dims() && v.dims() == var.dims() => {
                    moments.insert(name.to_string(), (m, v));
                }
                (None, None) => {}
                _ => candle_core::bail!("optimizer moments for {name} missing or misshapen"),
            }
        }
        if let Some(extra) = tensors.keys().next() {
            candle_core::bail!("optimizer state has unknown entry {extra}");
        }
        Ok(Self { params, step, moments })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_shape() {
        let s = LrSchedule {
            peak: 1e-4,
            floor: 1e-6,
            warmup: 500,
            total: 2000,
        };
        assert!(s.at(0) < s.at(500));
        assert_eq!(s.at(500), 1e-4);
        for i in 1..500 {
            assert!(s.at(i) > s.at(i - 1));
        }
        for i in 501..=2000 {
            assert!(s.at(i) <= s.at(i - 1));
        }
        assert!(s.at(2000) >= 1e-6);
        assert!((s.at(2000) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn clipping_caps_the_norm() {
        for &(norm, clip) in &[(5.0, 1.0), (0.5, 1.0), (1e6, 0.3)] {
            let scaled = norm * clip_factor(norm, clip);
            assert!(scaled <= clip + 1e-6);
            if norm <= clip {
                assert_eq!(scaled, norm);
            }
        }
    }

    /// Scalar AdamW transcription for one coordinate.
    fn scalar_adamw(w0: f64, grads: &[f64], lr: f64, p: AdamWParams) -> f64 {
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = p.beta1 * m + (1.0 - p.beta1) * g;
            v = p.beta2 * v + (1.0 - p.beta2) * g * g;
            let mh = m / (1.0 - p.beta1.powi(t));
            let vh = v / (1.0 - p.beta2.powi(t));
            w = w * (1.0 - lr * p.weight_decay) - lr * mh / (vh.sqrt() + p.eps);
        }
        w
    }

    #[test]
    fn matches_scalar_transcription_and_round_trips() {
        let mut store = ParamStore::new(3);
        let w = store.normal("w", &[2, 2], 1.0).unwrap();
        let w0 = w.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let p = AdamWParams {
            weight_decay: 0.1,
            ..AdamWParams::default()
        };
        let mut opt = AdamW::new(p);
        let coeffs = [0.5f32, -1.0, 2.0, 0.25];
        let c = Tensor::from_vec(coeffs.to_vec(), (2, 2), &Device::Cpu).unwrap();
        let var = store.get("w").unwrap().clone();
        let mut history = vec![Vec::new(); 4];
        for _ in 0..3 {
            // L = Σ c·w², ∂L/∂w = 2cw
            let cur = var.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            for i in 0..4 {
                history[i].push((2.0 * coeffs[i] * cur[i]) as f64);
            }
            let loss = (var.as_tensor().sqr().unwrap() * &c).unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&store, &grads, 0.01, 1.0).unwrap();
        }
        let got = var.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for i in 0..4 {
            let want = scalar_adamw(w0[i] as f64, &history[i], 0.01, p);
            assert!((got[i] as f64 - want).abs() < 1e-5, "{} vs {want}", got[i]);
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("opt.safetensors");
        opt.save(&path).unwrap();
        let back = AdamW::load(p, &path, &store).unwrap();
        assert_eq!(back.steps_taken(), 3);
        for (name, (m, v)) in &opt.moments {
            let (m2, v2) = &back.moments[name];
            assert_eq!(m.flatten_all().unwrap().to_vec1::<f32>().unwrap(), m2.flatten_all().unwrap().to_vec1::<f32>().unwrap());
            assert_eq!(v.flatten_all().unwrap().to_vec1::<f32>().unwrap(), v2.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        }
    }
}
