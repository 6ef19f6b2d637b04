//! AdamW: Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    shape: Vec<usize>,
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Optimizer state: one pair of moment buffers per parameter slot, plus the
/// shared step counter. Parameters are identified by their position in the
/// slice handed to [`AdamW::step`], which must stay stable across calls.
#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    moments: Vec<Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| Moments {
                    shape: p.shape().to_vec(),
                    first: vec![0.0; p.numel()],
                    second: vec![0.0; p.numel()],
                })
                .collect();
        }
        if self.moments.len() != params.len() {
            return Err(Error::StateCorruption(format!(
                "state tracks {} parameters, step received {}",
                self.moments.len(),
                params.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let state = &self.moments[i];
            if state.shape != p.shape() || state.first.len() != p.numel() {
                return Err(Error::StateCorruption(format!(
                    "parameter {i} has shape {:?} but its moments have shape {:?}",
                    p.shape(),
                    state.shape
                )));
            }
            if g.shape() != p.shape() {
                return Err(Error::dim(
                    "optimizer_step",
                    format!("gradient {:?} for parameter {:?}", g.shape(), p.shape()),
                ));
            }
        }

        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        for (p, (g, state)) in params.iter_mut().zip(grads.iter().zip(&mut self.moments)) {
            let values = p.data_mut();
            for (j, &gj) in g.data().iter().enumerate() {
                let m = beta1 * state.first[j] + (1.0 - beta1) * gj;
                let v = beta2 * state.second[j] + (1.0 - beta2) * gj * gj;
                state.first[j] = m;
                state.second[j] = v;
                let m_hat = m / bias1;
                let v_hat = v / bias2;
                let decayed = values[j] - lr * weight_decay * values[j];
                let update = if m_hat == 0.0 { 0.0 } else { m_hat / (v_hat.sqrt() + eps) };
                values[j] = decayed - lr * update;
            }
            if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    op: "optimizer_step".into(),
                    detail: format!("parameter became {bad}"),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_fixed_point_without_decay() {
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        let mut p = Tensor::vector(vec![1.0, -2.0, 3.5]).unwrap();
        let g = Tensor::zeros(vec![3]);
        for _ in 0..5 {
            opt.step(&mut [&mut p], &[&g]).unwrap();
        }
        assert_eq!(p.data(), &[1.0, -2.0, 3.5]);
        assert_eq!(opt.step_count(), 5);
    }

    #[test]
    fn degenerate_moments_closed_form() {
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            weight_decay: 0.0,
        });
        let mut p = Tensor::scalar(1.0).unwrap();
        let g = Tensor::scalar(1.0).unwrap();
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert!((p.item() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn descends_quadratic() {
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            ..Default::default()
        });
        let mut p = Tensor::scalar(0.0).unwrap();
        let mut last = (p.item() - 3.0).abs();
        for _ in 0..10 {
            let g = Tensor::scalar(2.0 * (p.item() - 3.0)).unwrap();
            opt.step(&mut [&mut p], &[&g]).unwrap();
            let d = (p.item() - 3.0).abs();
            assert!(d < last, "{d} !< {last}");
            last = d;
        }
    }

    #[test]
    fn shape_change_is_state_corruption() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut p = Tensor::vector(vec![1.0, 2.0]).unwrap();
        opt.step(&mut [&mut p], &[&Tensor::zeros(vec![2])]).unwrap();
        let mut q = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        let err = opt.step(&mut [&mut q], &[&Tensor::zeros(vec![3])]).unwrap_err();
        assert!(matches!(err, Error::StateCorruption(_)));
    }
}
