//! The mask-training objective, its weight schedules and the training loop.
//!
//! `L = α·L_distill + β·L_compress + γ·L_tv`, where
//!
//! - `L_compress` is the mean over layers of the mean raw mask logit,
//! - `L_distill` is the squared Frobenius distance between the compressed
//!   and original activations at the middle and pre-logits sites, divided by
//!   the number of tokens,
//! - `L_tv` is the total variation of each layer's `sigmoid(w)`, summed over
//!   layers.
//!
//! `α` follows a clamped cosine after a warm-up, `β` is 1 until the hardened
//! masks first meet the target ratio and 0 from then on, and `γ` is constant.

mod trainer;

pub use trainer::{dry_run, objective, train, write_metrics_log, ObjectiveValue, StepMetrics, TrainState};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowrank::layer_cost;
use crate::masking::MaskLogits;
use crate::model::{DistillationRecord, HiddenVars, MaskedModel};
use crate::tensor::{Tape, Tensor, Var};

/// Weights of the three loss terms and the `α` schedule parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Base distillation weight; during training it is replaced by the
    /// scheduled value.
    pub alpha: f64,
    /// Initial compression weight (1 until the target is reached).
    pub beta: f64,
    pub gamma: f64,
    /// Constant multiplier on the compression term, applied on top of the
    /// gated `β`. The term averages over every logit of every layer, so its
    /// per-logit gradient shrinks with model size; small models need a
    /// larger value (see [`TOY_COMPRESSION_SCALE`]).
    #[serde(default = "unit_scale")]
    pub compression_scale: f64,
    /// `(b, c)` clamp bounds for the scheduled `α`.
    pub alpha_bounds: (f64, f64),
    pub warmup_steps: usize,
    /// Fraction of the total steps taken by one cosine period.
    pub cycle_fraction: f64,
}

/// Compression multiplier that lets the 4-layer, width-64 toy model reach a
/// 0.8 ratio within a few hundred steps.
pub const TOY_COMPRESSION_SCALE: f64 = 100.0;

fn unit_scale() -> f64 {
    1.0
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            compression_scale: 1.0,
            alpha_bounds: (0.3, 1.0),
            warmup_steps: 250,
            cycle_fraction: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let (b, c) = self.alpha_bounds;
        if !(0.0 <= b && b <= c && c <= 1.0) {
            return Err(Error::Config(format!("alpha bounds ({b}, {c}) must satisfy 0 <= b <= c <= 1")));
        }
        if !(self.cycle_fraction > 0.0 && self.cycle_fraction.is_finite()) {
            return Err(Error::Config("cycle_fraction must be positive".into()));
        }
        if ![self.alpha, self.beta, self.gamma].iter().all(|w| w.is_finite()) {
            return Err(Error::Config("loss weights must be finite".into()));
        }
        if !(self.compression_scale >= 0.0 && self.compression_scale.is_finite()) {
            return Err(Error::Config(format!("compression scale {} must be finite and non-negative", self.compression_scale)));
        }
        Ok(())
    }

    pub fn alpha_at(&self, step: usize, total_steps: usize) -> f64 {
        alpha_schedule_with(step, total_steps, self.alpha_bounds, self.warmup_steps, self.cycle_fraction)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub target_param_ratio: f64,
    pub total_steps: usize,
    /// Steps to keep training after the target is first reached.
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub ratio_check_interval: usize,
    pub seed: u64,
    /// AdamW learning rate for the mask logits.
    pub lr: f64,
    /// Use the mean of `sigmoid(w)` instead of the raw logits in the
    /// compression term.
    pub compression_on_sigmoid: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            target_param_ratio: 0.8,
            total_steps: 5000,
            early_stop_patience: 750,
            batch_size: 4,
            ratio_check_interval: 25,
            seed: 0,
            lr: 0.05,
            compression_on_sigmoid: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let t = self.target_param_ratio;
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::Config(format!("target ratio {t} must lie strictly between 0 and 1")));
        }
        if self.batch_size == 0 || self.ratio_check_interval == 0 {
            return Err(Error::Config("batch_size and ratio_check_interval must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// `(1/N) Σ_layers mean(w_layer)` over raw logits.
pub fn compression_loss(logits: &[&MaskLogits]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::contract("compression loss needs at least one layer"));
    }
    let total: f64 = logits
        .iter()
        .map(|l| l.values().iter().sum::<f64>() / l.rank() as f64)
        .sum();
    Ok(total / logits.len() as f64)
}

/// `Σ_sites ‖A_compressed − A‖²_F / L` for one record of `L` tokens.
pub fn distillation_loss(middle: &Tensor, pre_logits: &Tensor, target: &DistillationRecord) -> Result<f64> {
    let pairs = [(middle, &target.middle_hidden), (pre_logits, &target.pre_logits_hidden)];
    let mut total = 0.0;
    for (a, b) in pairs {
        if a.shape() != b.shape() {
            return Err(Error::contract(format!(
                "activation shape {:?} against target {:?}",
                a.shape(),
                b.shape()
            )));
        }
        total += a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    }
    Ok(total / target.len().max(1) as f64)
}

/// `Σ_layers Σ_n |m[n+1] − m[n]|`.
pub fn tv_loss(masks: &[Vec<f64>]) -> f64 {
    masks
        .iter()
        .map(|m| m.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>())
        .sum()
}

/// Number of 0↔1 switches between adjacent entries of hardened masks.
pub fn transition_count(masks: &[Vec<f64>]) -> usize {
    masks
        .iter()
        .map(|m| m.windows(2).filter(|w| w[0] != w[1]).count())
        .sum()
}

/// `1` during warm-up, then `clamp(cos(2π·10·step/total), b, c)`.
pub fn alpha_schedule(step: usize, total_steps: usize, bounds: (f64, f64), warmup: usize) -> f64 {
    alpha_schedule_with(step, total_steps, bounds, warmup, 0.1)
}

pub fn alpha_schedule_with(step: usize, total_steps: usize, bounds: (f64, f64), warmup: usize, cycle_fraction: f64) -> f64 {
    if step < warmup {
        return 1.0;
    }
    let cycles = 1.0 / cycle_fraction;
    let z = (2.0 * std::f64::consts::PI * cycles * step as f64 / total_steps.max(1) as f64).cos();
    z.max(bounds.0).min(bounds.1)
}

/// The three loss values combined with fixed weights `(α, β, γ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub distill: f64,
    pub compress: f64,
    pub tv: f64,
}

pub fn total_loss(parts: LossParts, (alpha, beta, gamma): (f64, f64, f64)) -> f64 {
    alpha * parts.distill + beta * parts.compress + gamma * parts.tv
}

/// Parameters implied by the hardened masks, with any layer whose rank does
/// not save parameters counted at its dense size, over the dense total.
pub fn effective_param_ratio(model: &MaskedModel) -> f64 {
    let (mut kept, mut dense) = (0usize, 0usize);
    for l in model.layers() {
        let (m, n) = l.dims();
        kept += layer_cost(m, n, l.logits.selected());
        dense += m * n;
    }
    kept as f64 / dense as f64
}

pub(crate) fn compression_on_tape(tape: &mut Tape, logits: &[Var], on_sigmoid: bool) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &w in logits {
        let x = if on_sigmoid { tape.sigmoid(w)? } else { w };
        let m = tape.mean(x)?;
        total = Some(match total {
            None => m,
            Some(t) => tape.add(t, m)?,
        });
    }
    let total = total.ok_or_else(|| Error::contract("compression loss needs at least one layer"))?;
    tape.scale(total, 1.0 / logits.len() as f64)
}

pub(crate) fn tv_on_tape(tape: &mut Tape, logits: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &w in logits {
        let p = tape.sigmoid(w)?;
        let d = tape.abs_diff_sum(p)?;
        total = Some(match total {
            None => d,
            Some(t) => tape.add(t, d)?,
        });
    }
    total.ok_or_else(|| Error::contract("tv loss needs at least one layer"))
}

pub(crate) fn distill_on_tape(tape: &mut Tape, h: HiddenVars, target: &DistillationRecord) -> Result<Var> {
    let mut sum: Option<Var> = None;
    for (act, want) in [(h.middle, &target.middle_hidden), (h.pre_logits, &target.pre_logits_hidden)] {
        if tape.value(act).shape() != want.shape() {
            return Err(Error::contract(format!(
                "activation shape {:?} against target {:?}",
                tape.value(act).shape(),
                want.shape()
            )));
        }
        let t = tape.constant(want.clone());
        let d = tape.sub(act, t)?;
        let sq = tape.squared_norm(d)?;
        sum = Some(match sum {
            None => sq,
            Some(s) => tape.add(s, sq)?,
        });
    }
    tape.scale(sum.expect("two sites"), 1.0 / target.len().max(1) as f64)
}
