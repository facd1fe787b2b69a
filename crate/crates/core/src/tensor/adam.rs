use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{dim_err, Error, Result};

/// Adam hyperparameters. Defaults follow the usual Transformer recipe
/// (β₂ = 0.98, ε = 1e-9).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// First and second moments for a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new<'t>(params: impl IntoIterator<Item = &'t Tensor>, config: AdamConfig) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(|p| p.len()).collect();
        Self {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            config,
        }
    }

    /// One bias-corrected Adam update at learning rate `lr`. `None` gradients
    /// count as zero.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(dim_err!(
                "adam: {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                self.m.len()
            ));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.len() != params[i].len() || params[i].len() != self.m[i].len() {
                    return Err(dim_err!("adam: parameter {i} length mismatch"));
                }
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of parameter {i}")));
                }
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads[i].map(|g| g.data());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warm-up to `max_lr`, then decay with the inverse square root of
/// the step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverseSqrtSchedule {
    pub max_lr: f64,
    pub warmup: u64,
}

impl InverseSqrtSchedule {
    /// Learning rate for a 1-based step.
    pub fn lr(&self, step: u64) -> f64 {
        let step = step.max(1) as f64;
        let warm = self.warmup.max(1) as f64;
        self.max_lr * (step / warm).min((warm / step).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::full(&[3], 0.25);
        let g = Tensor::zeros(&[3]);
        let mut st = AdamState::new([&p], AdamConfig::default());
        st.step(&mut [&mut p], &[Some(&g)], 1e-3).unwrap();
        assert_eq!(p.data(), &[0.25; 3]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = Tensor::zeros(&[1]);
        let g = Tensor::full(&[1], 1.0);
        let mut st = AdamState::new([&p], AdamConfig::default());
        st.step(&mut [&mut p], &[Some(&g)], 1e-3).unwrap();
        // m̂ = 1, v̂ = 1 -> Δ = -lr / (1 + ε)
        assert!((p.data()[0] + 1e-3 / (1.0 + 1e-9)).abs() < 1e-18);
    }

    #[test]
    fn nan_gradient_is_an_error() {
        let mut p = Tensor::zeros(&[1]);
        let g = Tensor::full(&[1], f64::NAN);
        let mut st = AdamState::new([&p], AdamConfig::default());
        assert!(matches!(
            st.step(&mut [&mut p], &[Some(&g)], 1e-3),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn identical_runs_are_bitwise_equal() {
        let run = || {
            let mut p = Tensor::full(&[4], 0.5);
            let mut st = AdamState::new([&p], AdamConfig::default());
            for k in 0..10 {
                let g = Tensor::new(vec![4], (0..4).map(|j| ((k * 4 + j) as f64).sin()).collect()).unwrap();
                st.step(&mut [&mut p], &[Some(&g)], 1e-2).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn schedule_peaks_at_warmup() {
        let s = InverseSqrtSchedule { max_lr: 2e-4, warmup: 100 };
        assert!((s.lr(100) - 2e-4).abs() < 1e-18);
        assert!(s.lr(50) < s.lr(100));
        assert!((s.lr(400) - 1e-4).abs() < 1e-18);
    }
}
