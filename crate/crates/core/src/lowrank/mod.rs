//! Low-rank factorization of linear layers.
//!
//! A layer `W: m×n` (output × input) is decomposed either directly or after
//! scaling its input channels by an activation-derived diagonal `S`
//! (activation-aware SVD). Reconstruction applies a per-singular-value mask
//! and, for the activation-aware case, undoes the scaling with `S⁻¹`.

mod svd;
mod whitening;

pub use svd::{svd, svd_with, SvdFactors, SvdOptions};
pub use whitening::{compute_whitening, WhiteningAccumulator, WhiteningScale, DEFAULT_EPSILON_FLOOR, WHITENING_EXPONENT};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Factors of `W·S` together with the `S` that produced them (`None` for a
/// plain SVD of `W`).
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub factors: SvdFactors,
    pub scale: Option<WhiteningScale>,
}

impl Decomposition {
    pub fn plain(w: &Tensor) -> Result<Self> {
        Ok(Self {
            factors: svd(w)?,
            scale: None,
        })
    }

    pub fn reconstruct(&self, mask: &[f64]) -> Result<Tensor> {
        reconstruct(&self.factors, mask, self.scale.as_ref())
    }

    pub fn rank(&self) -> usize {
        self.factors.rank()
    }
}

/// SVD of `W · diag(s)`; reconstruct with the returned scale to undo it.
pub fn decompose_weighted(w: &Tensor, scale: &WhiteningScale) -> Result<Decomposition> {
    let n = w.cols();
    if scale.len() != n {
        return Err(Error::dim(
            "decompose_weighted",
            format!("{} scales for a layer with {n} input channels", scale.len()),
        ));
    }
    let scaled = w.scale_columns(scale.values())?;
    Ok(Decomposition {
        factors: svd(&scaled)?,
        scale: Some(scale.clone()),
    })
}

/// `U · diag(sigma ∘ mask) · Vᵀ`, post-multiplied by `diag(s)⁻¹` when a
/// scale is given.
pub fn reconstruct(f: &SvdFactors, mask: &[f64], scale: Option<&WhiteningScale>) -> Result<Tensor> {
    if mask.len() != f.rank() {
        return Err(Error::contract(format!(
            "mask of length {} for a rank-{} factorization",
            mask.len(),
            f.rank()
        )));
    }
    let weights: Vec<f64> = f.sigma.iter().zip(mask).map(|(s, m)| s * m).collect();
    let left = f.u.scale_columns(&weights)?;
    let mut w = left.matmul(&f.v.transpose()?)?;
    if let Some(scale) = scale {
        if scale.len() != f.n {
            return Err(Error::dim("reconstruct", format!("{} scales for {} columns", scale.len(), f.n)));
        }
        w = w.scale_columns(&scale.inverse())?;
    }
    Ok(w)
}

/// Stored parameters of a rank-`r` factorization relative to the dense layer:
/// `r(m + n) / (mn)`.
pub fn param_ratio(m: usize, n: usize, r: usize) -> f64 {
    (r * (m + n)) as f64 / (m * n) as f64
}

/// FLOPs of the two factor matmuls relative to the dense matmul, for a batch
/// of `m` input rows: `(2m²r + 2mrn) / (2m²n)`, which reduces to the same
/// expression as [`param_ratio`].
pub fn flop_ratio(m: usize, n: usize, r: usize) -> f64 {
    let (m, n, r) = (m as u128, n as u128, r as u128);
    let original = 2 * m * m * n;
    let compressed = 2 * m * m * r + 2 * m * r * n;
    compressed as f64 / original as f64
}

/// True when a rank-`k` factorization stores strictly fewer parameters than
/// the dense `m×n` matrix.
pub fn saves_parameters(m: usize, n: usize, k: usize) -> bool {
    k * (m + n) < m * n
}

/// Parameter cost of a layer of rank `k` under the keep-dense rule.
pub fn layer_cost(m: usize, n: usize, k: usize) -> usize {
    (k * (m + n)).min(m * n)
}

/// Per-layer accounting for a chosen rank.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerBudget {
    pub m: usize,
    pub n: usize,
    pub selected_rank: usize,
    pub param_ratio: f64,
    pub flop_ratio: f64,
    pub compressed: bool,
}

impl LayerBudget {
    pub fn new(m: usize, n: usize, selected_rank: usize) -> Self {
        let compressed = saves_parameters(m, n, selected_rank);
        let (param_ratio, flop_ratio) = if compressed {
            (param_ratio(m, n, selected_rank), flop_ratio(m, n, selected_rank))
        } else {
            (1.0, 1.0)
        };
        Self {
            m,
            n,
            selected_rank,
            param_ratio,
            flop_ratio,
            compressed,
        }
    }

    pub fn parameters(&self) -> usize {
        layer_cost(self.m, self.n, self.selected_rank)
    }
}
