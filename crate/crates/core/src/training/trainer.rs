use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    compression_on_tape, distill_on_tape, effective_param_ratio, tv_on_tape, LossParts, LossWeights, TrainConfig,
};
use crate::error::{Error, Result};
use crate::masking::{draw_uniform, soft_mask_on_tape};
use crate::model::{forward_on_tape, DistillationRecord, MaskedModel};
use crate::tensor::{AdamW, AdamWConfig, Tape, Tensor, Var};

/// One line of the metrics log. `alpha`, `beta` and `gamma` are the weights
/// used for this step; `ratio` is measured after its update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub distill: f64,
    pub compress: f64,
    pub tv: f64,
    pub total: f64,
    pub ratio: f64,
}

impl StepMetrics {
    pub fn to_line(&self) -> String {
        format!(
            "step={} alpha={} beta={} gamma={} distill={} compress={} tv={} total={} ratio={}",
            self.step, self.alpha, self.beta, self.gamma, self.distill, self.compress, self.tv, self.total, self.ratio
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainState {
    /// Optimizer steps completed.
    pub step: usize,
    pub current_ratio: f64,
    /// Completed-step count at the ratio check that first met the target.
    pub target_reached_at: Option<usize>,
    pub beta: f64,
    pub history: Vec<StepMetrics>,
    /// Set when the run hit `total_steps` without meeting the target.
    pub target_missed: bool,
    /// Completed-step count of the snapshot restored at the end, if the final
    /// masks had drifted back above the target.
    pub restored_snapshot: Option<usize>,
    pub base_checksum_before: String,
    pub base_checksum_after: String,
}

impl TrainState {
    pub fn metrics_log(&self) -> String {
        let mut out = String::new();
        for m in &self.history {
            let _ = writeln!(out, "{}", m.to_line());
        }
        out
    }
}

pub fn write_metrics_log(state: &TrainState, path: &Path) -> Result<()> {
    std::fs::write(path, state.metrics_log())?;
    Ok(())
}

/// Gating and stopping rules, shared by [`train`] and [`dry_run`].
struct Schedule<'a> {
    cfg: &'a TrainConfig,
    weights: &'a LossWeights,
    beta: f64,
    reached_at: Option<usize>,
}

impl<'a> Schedule<'a> {
    fn new(cfg: &'a TrainConfig, weights: &'a LossWeights) -> Self {
        Self {
            cfg,
            weights,
            beta: weights.beta,
            reached_at: None,
        }
    }

    fn weights(&self, step: usize) -> (f64, f64, f64) {
        (
            self.weights.alpha * self.weights.alpha_at(step, self.cfg.total_steps),
            self.beta,
            self.weights.gamma,
        )
    }

    /// Returns true when training should stop after `completed` steps.
    fn after_step(&mut self, completed: usize, ratio: f64) -> bool {
        if self.reached_at.is_none() && completed.is_multiple_of(self.cfg.ratio_check_interval) && ratio <= self.cfg.target_param_ratio {
            self.reached_at = Some(completed);
            self.beta = 0.0;
        }
        matches!(self.reached_at, Some(r) if completed >= r + self.cfg.early_stop_patience)
    }
}

/// Runs the schedule alone, with the ratio after each step supplied by the
/// caller. Loss fields of the history are zero.
pub fn dry_run(cfg: &TrainConfig, weights: &LossWeights, mut ratio_after: impl FnMut(usize) -> f64) -> Result<TrainState> {
    cfg.validate()?;
    weights.validate()?;
    let mut sched = Schedule::new(cfg, weights);
    let mut state = TrainState {
        beta: sched.beta,
        current_ratio: 1.0,
        ..TrainState::default()
    };
    for step in 0..cfg.total_steps {
        let (alpha, beta, gamma) = sched.weights(step);
        let ratio = ratio_after(step);
        state.history.push(StepMetrics {
            step,
            alpha,
            beta,
            gamma,
            distill: 0.0,
            compress: 0.0,
            tv: 0.0,
            total: 0.0,
            ratio,
        });
        state.step = step + 1;
        state.current_ratio = ratio;
        let stop = sched.after_step(step + 1, ratio);
        state.beta = sched.beta;
        if stop {
            break;
        }
    }
    state.target_reached_at = sched.reached_at;
    state.target_missed = sched.reached_at.is_none();
    Ok(state)
}

/// Value and mask-logit gradient of the full objective for fixed noise.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveValue {
    pub parts: LossParts,
    pub total: f64,
    /// One gradient vector per layer.
    pub grads: Vec<Vec<f64>>,
}

struct StepVars {
    logits: Vec<Var>,
    distill: Var,
    compress: Var,
    tv: Var,
    total: Var,
}

fn record_objective(
    tape: &mut Tape,
    model: &MaskedModel,
    batch: &[&DistillationRecord],
    noise: &[Vec<f64>],
    (alpha, beta, gamma): (f64, f64, f64),
    on_sigmoid: bool,
) -> Result<StepVars> {
    if noise.len() != model.layers().len() {
        return Err(Error::contract(format!("{} noise vectors for {} layers", noise.len(), model.layers().len())));
    }
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let logits: Vec<Var> = model.layers().iter().map(|l| tape.param(l.logits.to_tensor())).collect();
    let mut masks = Vec::with_capacity(logits.len());
    for ((l, &w), u) in model.layers().iter().zip(&logits).zip(noise) {
        if u.len() != l.logits.rank() {
            return Err(Error::contract(format!("noise of length {} for {}", u.len(), l.site.name())));
        }
        masks.push(soft_mask_on_tape(tape, w, u, l.logits.temperature())?);
    }
    let bound = model.bind(tape, &masks)?;
    let mut distill: Option<Var> = None;
    for rec in batch {
        let h = forward_on_tape(tape, model.config(), &bound, &rec.token_ids, None)?;
        let d = distill_on_tape(tape, h, rec)?;
        distill = Some(match distill {
            None => d,
            Some(s) => tape.add(s, d)?,
        });
    }
    let distill = tape.scale(distill.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
    let compress = compression_on_tape(tape, &logits, on_sigmoid)?;
    let tv = tv_on_tape(tape, &logits)?;
    let a = tape.scale(distill, alpha)?;
    let b = tape.scale(compress, beta)?;
    let g = tape.scale(tv, gamma)?;
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, g)?;
    Ok(StepVars {
        logits,
        distill,
        compress,
        tv,
        total,
    })
}

/// The objective averaged over `batch`, with `noise[l]` the uniform draws
/// of layer `l`'s Gumbel-sigmoid mask.
pub fn objective(
    model: &MaskedModel,
    batch: &[&DistillationRecord],
    noise: &[Vec<f64>],
    weights: (f64, f64, f64),
    compression_on_sigmoid: bool,
) -> Result<ObjectiveValue> {
    let mut tape = Tape::new();
    let v = record_objective(&mut tape, model, batch, noise, weights, compression_on_sigmoid)?;
    let mut g = tape.gradient(v.total, &v.logits)?;
    Ok(ObjectiveValue {
        parts: LossParts {
            distill: tape.value(v.distill).item(),
            compress: tape.value(v.compress).item(),
            tv: tape.value(v.tv).item(),
        },
        total: tape.value(v.total).item(),
        grads: v
            .logits
            .iter()
            .map(|&w| g.take(w).expect("gradient per layer").into_data())
            .collect(),
    })
}

fn check_dataset(model: &MaskedModel, dataset: &[DistillationRecord]) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::contract("training needs at least one distillation record"));
    }
    let d = model.config().d_model;
    for r in dataset {
        let shape = [r.len(), d];
        if r.is_empty() || r.middle_hidden.shape() != shape || r.pre_logits_hidden.shape() != shape {
            return Err(Error::contract(format!(
                "record for document {:x} chunk {} does not match the model",
                r.doc_id, r.chunk_index
            )));
        }
    }
    Ok(())
}

fn step_failure(step: usize, err: Error) -> Error {
    match err {
        Error::Numeric { op, detail } => Error::Numeric {
            op: format!("mask training step {step}: {op}"),
            detail,
        },
        other => other,
    }
}

/// Train the mask logits of `model` against `dataset`. Only the logits
/// change; the document ids of the dataset join the model's calibration set.
pub fn train(
    model: &mut MaskedModel,
    dataset: &[DistillationRecord],
    cfg: &TrainConfig,
    weights: &LossWeights,
) -> Result<TrainState> {
    cfg.validate()?;
    weights.validate()?;
    check_dataset(model, dataset)?;

    let before = model.base_checksum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    let mut params: Vec<Tensor> = model.layers().iter().map(|l| l.logits.to_tensor()).collect();
    let mut sched = Schedule::new(cfg, weights);
    let mut state = TrainState {
        beta: sched.beta,
        current_ratio: effective_param_ratio(model),
        base_checksum_before: before.clone(),
        ..TrainState::default()
    };
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut snapshot: Option<(usize, Vec<Tensor>)> = None;

    for step in 0..cfg.total_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..dataset.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&dataset[order[cursor]]);
            cursor += 1;
        }
        let noise: Vec<Vec<f64>> = model
            .layers()
            .iter()
            .map(|l| draw_uniform(&mut rng, l.logits.rank()))
            .collect();
        let w = sched.weights(step);

        let mut tape = Tape::new();
        let applied = (w.0, w.1 * weights.compression_scale, w.2);
        let v = record_objective(&mut tape, model, &batch, &noise, applied, cfg.compression_on_sigmoid)
            .map_err(|e| step_failure(step, e))?;
        let parts = LossParts {
            distill: tape.value(v.distill).item(),
            compress: tape.value(v.compress).item(),
            tv: tape.value(v.tv).item(),
        };
        let total = tape.value(v.total).item();
        let mut grads = tape.gradient(v.total, &v.logits)?;
        let grads: Vec<Tensor> = v.logits.iter().map(|&x| grads.take(x).expect("gradient per layer")).collect();
        if let Some(bad) = grads.iter().position(|g| g.data().iter().any(|x| !x.is_finite())) {
            return Err(Error::Numeric {
                op: format!("mask training step {step}"),
                detail: format!(
                    "non-finite gradient for {} (distill={} compress={} tv={})",
                    model.layers()[bad].site.name(),
                    parts.distill,
                    parts.compress,
                    parts.tv
                ),
            });
        }
        {
            let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
            opt.step(&mut refs, &grads.iter().collect::<Vec<_>>())
                .map_err(|e| step_failure(step, e))?;
        }
        for (l, p) in model.layers.iter_mut().zip(&params) {
            l.logits.values_mut().copy_from_slice(p.data());
        }

        let ratio = effective_param_ratio(model);
        if ratio <= cfg.target_param_ratio {
            snapshot = Some((step + 1, params.clone()));
        }
        state.history.push(StepMetrics {
            step,
            alpha: w.0,
            beta: w.1,
            gamma: w.2,
            distill: parts.distill,
            compress: parts.compress,
            tv: parts.tv,
            total,
            ratio,
        });
        state.step = step + 1;
        state.current_ratio = ratio;
        let stop = sched.after_step(step + 1, ratio);
        state.beta = sched.beta;
        if stop {
            break;
        }
    }

    state.target_reached_at = sched.reached_at;
    state.target_missed = sched.reached_at.is_none();
    if state.target_reached_at.is_some() && state.current_ratio > cfg.target_param_ratio {
        if let Some((at, saved)) = snapshot {
            for (l, p) in model.layers.iter_mut().zip(&saved) {
                l.logits.values_mut().copy_from_slice(p.data());
            }
            state.restored_snapshot = Some(at);
            state.current_ratio = effective_param_ratio(model);
        }
    }
    model.calibration_ids.extend(dataset.iter().map(|r| r.doc_id));
    state.base_checksum_after = model.base_checksum();
    if state.base_checksum_after != before {
        return Err(Error::contract("base weights changed during mask training"));
    }
    Ok(state)
}
