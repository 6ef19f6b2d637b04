use std::collections::BTreeSet;
use std::time::Instant;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::compressed::CompressedModel;
use crate::error::{Error, Result};
use crate::model::{DistillationRecord, DocId, Document, ForwardOutput, MaskMode, MaskedModel, ModelConfig, ToyTransformer};
use crate::tensor::Tensor;
use crate::training::effective_param_ratio;

/// Anything that maps a token sequence to the three named activations.
pub trait LanguageModel {
    fn config(&self) -> &ModelConfig;
    fn forward(&self, ids: &[usize]) -> Result<ForwardOutput>;
    /// Documents this model has seen during compression.
    fn calibration_ids(&self) -> Option<&BTreeSet<DocId>>;
    /// Eligible-layer parameter ratio.
    fn param_ratio(&self) -> f64;
}

impl LanguageModel for ToyTransformer {
    fn config(&self) -> &ModelConfig {
        ToyTransformer::config(self)
    }

    fn forward(&self, ids: &[usize]) -> Result<ForwardOutput> {
        ToyTransformer::forward(self, ids)
    }

    fn calibration_ids(&self) -> Option<&BTreeSet<DocId>> {
        None
    }

    fn param_ratio(&self) -> f64 {
        1.0
    }
}

/// Evaluated with hardened masks.
impl LanguageModel for MaskedModel {
    fn config(&self) -> &ModelConfig {
        MaskedModel::config(self)
    }

    fn forward(&self, ids: &[usize]) -> Result<ForwardOutput> {
        let mut unused = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        crate::model::forward_masked(self, ids, MaskMode::Hard, &mut unused)
    }

    fn calibration_ids(&self) -> Option<&BTreeSet<DocId>> {
        Some(&self.calibration_ids)
    }

    fn param_ratio(&self) -> f64 {
        effective_param_ratio(self)
    }
}

impl LanguageModel for CompressedModel {
    fn config(&self) -> &ModelConfig {
        CompressedModel::config(self)
    }

    fn forward(&self, ids: &[usize]) -> Result<ForwardOutput> {
        CompressedModel::forward(self, ids)
    }

    fn calibration_ids(&self) -> Option<&BTreeSet<DocId>> {
        Some(&self.provenance.calibration_ids)
    }

    fn param_ratio(&self) -> f64 {
        CompressedModel::param_ratio(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Mean squared activation error over every element of both sites;
    /// `None` without records.
    pub distill_mse: Option<f64>,
    /// `exp(mean next-token cross-entropy)` over the held-out documents;
    /// `None` without documents.
    pub perplexity: Option<f64>,
    pub param_ratio: f64,
    pub wall_clock_secs: f64,
    pub predicted_tokens: usize,
    pub records: usize,
}

/// Sum of squared errors and element count against the records.
fn squared_errors(model: &dyn LanguageModel, records: &[DistillationRecord]) -> Result<(f64, usize)> {
    let (mut sse, mut count) = (0.0, 0usize);
    for r in records {
        let out = model.forward(&r.token_ids)?;
        for (a, b) in [(&out.middle_hidden, &r.middle_hidden), (&out.pre_logits_hidden, &r.pre_logits_hidden)] {
            if a.shape() != b.shape() {
                return Err(Error::contract(format!("record shape {:?} against model output {:?}", b.shape(), a.shape())));
            }
            sse += a.sub(b)?.squared_norm();
            count += a.numel();
        }
    }
    Ok((sse, count))
}

pub fn distillation_mse(model: &dyn LanguageModel, records: &[DistillationRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::contract("no distillation records"));
    }
    let (sse, count) = squared_errors(model, records)?;
    Ok(sse / count.max(1) as f64)
}

/// Total next-token cross-entropy of one sequence and the number of
/// predictions.
pub(crate) fn sequence_nll(logits: &Tensor, ids: &[usize]) -> (f64, usize) {
    let mut total = 0.0;
    for (i, &target) in ids.iter().enumerate().skip(1) {
        let row = logits.row(i - 1);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        total += max + z.ln() - row[target];
    }
    (total, ids.len().saturating_sub(1))
}

pub fn perplexity(model: &dyn LanguageModel, docs: &[Document]) -> Result<f64> {
    let (nll, n) = corpus_nll(model, docs)?;
    Ok((nll / n as f64).exp())
}

fn corpus_nll(model: &dyn LanguageModel, docs: &[Document]) -> Result<(f64, usize)> {
    let max_seq = model.config().max_seq;
    let (mut nll, mut n) = (0.0, 0usize);
    for doc in docs {
        for chunk in doc.chunks(max_seq) {
            if chunk.tokens.len() < 2 {
                continue;
            }
            let out = model.forward(&chunk.tokens)?;
            let (l, c) = sequence_nll(&out.logits, &chunk.tokens);
            nll += l;
            n += c;
        }
    }
    if n == 0 {
        return Err(Error::contract("held-out corpus has no tokens to predict"));
    }
    Ok((nll, n))
}

/// Held-out metrics. Fails when any held-out document id is in the model's
/// calibration set.
pub fn evaluate(model: &dyn LanguageModel, heldout: &[Document], records: &[DistillationRecord]) -> Result<EvalResult> {
    if let Some(calib) = model.calibration_ids() {
        let clash = heldout
            .iter()
            .map(|d| d.id)
            .chain(records.iter().map(|r| r.doc_id))
            .find(|id| calib.contains(id));
        if let Some(id) = clash {
            return Err(Error::contract(format!("held-out document {id:016x} was used for calibration")));
        }
    }
    let start = Instant::now();
    let (sse, count) = squared_errors(model, records)?;
    let (nll, n) = if heldout.is_empty() { (0.0, 0) } else { corpus_nll(model, heldout)? };
    Ok(EvalResult {
        distill_mse: (count > 0).then(|| sse / count as f64),
        perplexity: (n > 0).then(|| (nll / n as f64).exp()),
        param_ratio: model.param_ratio(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
        predicted_tokens: n,
        records: records.len(),
    })
}
