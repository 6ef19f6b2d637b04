//! Learnable singular-value selection masks.
//!
//! Each factorized layer carries one logit per singular value. During
//! training the mask is a Gumbel-sigmoid (binary concrete) sample,
//!
//! ```text
//! b̂ = sigmoid(w),  u ~ Uniform(0, 1)
//! soft = sigmoid( (log(b̂·u) − log((1 − b̂)(1 − u))) / τ )
//! ```
//!
//! which is evaluated in the algebraically equal, numerically stable form
//! `sigmoid((w + log u − log(1 − u)) / τ)`. After training the mask is
//! hardened with `sigmoid(w) ≥ 0.5`, i.e. `w ≥ 0`, without noise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Logit given to the largest singular value at initialization.
pub const INIT_LOGIT_HIGH: f64 = 6.0;
/// Logit given to the smallest singular value at initialization.
pub const INIT_LOGIT_LOW: f64 = 3.0;
pub const DEFAULT_TEMPERATURE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskLogits {
    w: Vec<f64>,
    temperature: f64,
}

/// One stochastic draw of a mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSample {
    pub soft: Vec<f64>,
    pub hard: Vec<f64>,
    /// The uniform draws that produced `soft`.
    pub noise: Vec<f64>,
}

impl MaskLogits {
    /// Linearly spaced logits from 6 (first singular value) down to 3 (last).
    /// Every entry is positive, so the initial hard mask keeps everything.
    pub fn init(rank: usize) -> Result<Self> {
        if rank < 1 {
            return Err(Error::contract("mask rank must be at least 1"));
        }
        let w = if rank == 1 {
            vec![INIT_LOGIT_HIGH]
        } else {
            let step = (INIT_LOGIT_HIGH - INIT_LOGIT_LOW) / (rank - 1) as f64;
            (0..rank).map(|i| INIT_LOGIT_HIGH - step * i as f64).collect()
        };
        Ok(Self {
            w,
            temperature: DEFAULT_TEMPERATURE,
        })
    }

    pub fn from_values(w: Vec<f64>, temperature: f64) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::contract("mask rank must be at least 1"));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::contract(format!("temperature must be positive, got {temperature}")));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op: "mask_logits".into(),
                detail: "non-finite logit".into(),
            });
        }
        Ok(Self { w, temperature })
    }

    pub fn values(&self) -> &[f64] {
        &self.w
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.w
    }

    pub fn rank(&self) -> usize {
        self.w.len()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.w.len()], self.w.clone())
    }

    /// Noise-free 0/1 mask: 1 where `w ≥ 0`.
    pub fn harden(&self) -> Vec<f64> {
        self.w.iter().map(|&v| if v >= 0.0 { 1.0 } else { 0.0 }).collect()
    }

    pub fn selected(&self) -> usize {
        self.w.iter().filter(|&&v| v >= 0.0).count()
    }

    pub fn selected_indices(&self) -> Vec<usize> {
        (0..self.w.len()).filter(|&i| self.w[i] >= 0.0).collect()
    }

    /// Deterministic `sigmoid(w)`.
    pub fn probabilities(&self) -> Vec<f64> {
        self.w.iter().map(|&v| crate::tensor::sigmoid(v)).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> MaskSample {
        let noise = draw_uniform(rng, self.w.len());
        MaskSample {
            soft: soft_mask(&self.w, &noise, self.temperature),
            hard: self.harden(),
            noise,
        }
    }
}

/// Uniform draws in the open interval (0, 1); exact zeros are redrawn.
pub fn draw_uniform<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let u: f64 = rng.random();
            if u > 0.0 && u < 1.0 {
                break u;
            }
        })
        .collect()
}

/// `log u − log(1 − u)`, the logistic noise added to the logits.
pub fn logistic_noise(u: &[f64]) -> Vec<f64> {
    u.iter().map(|&u| u.ln() - (1.0 - u).ln()).collect()
}

pub fn soft_mask(w: &[f64], u: &[f64], temperature: f64) -> Vec<f64> {
    w.iter()
        .zip(logistic_noise(u))
        .map(|(&w, g)| crate::tensor::sigmoid((w + g) / temperature))
        .collect()
}

/// The same relaxation recorded on a tape so gradients reach `logits`.
pub fn soft_mask_on_tape(tape: &mut Tape, logits: Var, u: &[f64], temperature: f64) -> Result<Var> {
    let noise = tape.constant(Tensor::new(tape.value(logits).shape().to_vec(), logistic_noise(u))?);
    let shifted = tape.add(logits, noise)?;
    let scaled = tape.scale(shifted, 1.0 / temperature)?;
    tape.sigmoid(scaled)
}
