use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exponent applied to the per-channel activation magnitude.
pub const WHITENING_EXPONENT: f64 = 0.5;
pub const DEFAULT_EPSILON_FLOOR: f64 = 1e-6;

/// Diagonal input-channel scale `S` for activation-aware SVD:
/// `s[i] = max(mean_t |x_t[i]|, floor) ^ 0.5`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhiteningScale {
    s: Vec<f64>,
    alpha_exponent: f64,
    epsilon_floor: f64,
}

impl WhiteningScale {
    pub fn identity(n: usize) -> Self {
        Self {
            s: vec![1.0; n],
            alpha_exponent: WHITENING_EXPONENT,
            epsilon_floor: DEFAULT_EPSILON_FLOOR,
        }
    }

    /// Wrap precomputed scale values; every value must clear the floor.
    pub fn from_values(s: Vec<f64>, epsilon_floor: f64) -> Result<Self> {
        if !(epsilon_floor > 0.0) {
            return Err(Error::contract("whitening floor must be positive"));
        }
        if let Some(bad) = s.iter().find(|&&v| !(v.is_finite() && v >= epsilon_floor)) {
            return Err(Error::contract(format!("scale value {bad} below floor {epsilon_floor}")));
        }
        Ok(Self {
            s,
            alpha_exponent: WHITENING_EXPONENT,
            epsilon_floor,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.s
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn epsilon_floor(&self) -> f64 {
        self.epsilon_floor
    }

    pub fn alpha_exponent(&self) -> f64 {
        self.alpha_exponent
    }

    /// Diagonal of `S⁻¹`.
    pub fn inverse(&self) -> Vec<f64> {
        self.s.iter().map(|v| 1.0 / v).collect()
    }
}

/// Streaming per-channel mean of absolute activations.
#[derive(Clone, Debug)]
pub struct WhiteningAccumulator {
    sum_abs: Vec<f64>,
    count: usize,
}

impl WhiteningAccumulator {
    pub fn new(channels: usize) -> Self {
        Self {
            sum_abs: vec![0.0; channels],
            count: 0,
        }
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.sum_abs.len() {
            return Err(Error::dim(
                "compute_whitening",
                format!("activation of length {} for {} channels", row.len(), self.sum_abs.len()),
            ));
        }
        for (acc, x) in self.sum_abs.iter_mut().zip(row) {
            *acc += x.abs();
        }
        self.count += 1;
        Ok(())
    }

    /// Push every row of a row-major `rows × channels` block.
    pub fn push_rows(&mut self, data: &[f64]) -> Result<()> {
        let c = self.sum_abs.len().max(1);
        for row in data.chunks(c) {
            self.push(row)?;
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(&self, epsilon_floor: f64) -> Result<WhiteningScale> {
        if self.count == 0 {
            return Err(Error::contract("whitening needs at least one activation vector"));
        }
        if !(epsilon_floor > 0.0) {
            return Err(Error::contract("whitening floor must be positive"));
        }
        let s = self
            .sum_abs
            .iter()
            .map(|total| (total / self.count as f64).max(epsilon_floor).powf(WHITENING_EXPONENT))
            .collect();
        Ok(WhiteningScale {
            s,
            alpha_exponent: WHITENING_EXPONENT,
            epsilon_floor,
        })
    }
}

pub fn compute_whitening<'a, I>(activations: I, epsilon_floor: f64) -> Result<WhiteningScale>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut iter = activations.into_iter().peekable();
    let first = iter
        .peek()
        .ok_or_else(|| Error::contract("whitening needs at least one activation vector"))?;
    let mut acc = WhiteningAccumulator::new(first.len());
    for row in iter {
        acc.push(row)?;
    }
    acc.finish(epsilon_floor)
}
