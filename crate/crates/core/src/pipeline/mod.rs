//! Conversion of trained masks into a smaller model, baselines, evaluation
//! and compression reports.

mod baselines;
mod compressed;
mod eval;
mod report;

pub use baselines::{
    fixed_rate_baseline, fixed_rate_from_factorized, fixed_rate_rank, sensitivity_search_baseline,
    LayerSensitivity, SensitivityOptions, SensitivityOutcome, DEFAULT_CANDIDATES,
};
pub use compressed::{
    compress_with_ranks, convert, convert_with, topk_convert, CompressedLayer, CompressedModel, ConvertOptions,
    LayerForm, Provenance, Selection,
};
pub use eval::{distillation_mse, evaluate, perplexity, EvalResult, LanguageModel};
pub use report::{report, report_masked, CompressionReport, GroupSummary, LayerReport};

use std::path::Path;

use crate::error::Result;
use crate::model::{decode, Checkpoint, Container, DistillationRecord, MaskedModel, ToyTransformer};

/// Any checkpointed artifact, dispatched on the stored kind.
#[derive(Clone, Debug, PartialEq)]
pub enum Artifact {
    Toy(ToyTransformer),
    Masked(MaskedModel),
    Compressed(CompressedModel),
    Records(Vec<DistillationRecord>),
}

impl Artifact {
    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        Ok(match c.kind.as_str() {
            k if k == ToyTransformer::KIND => Self::Toy(decode(c)?),
            k if k == MaskedModel::KIND => Self::Masked(decode(c)?),
            k if k == CompressedModel::KIND => Self::Compressed(decode(c)?),
            _ => Self::Records(decode(c)?),
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Toy(_) => ToyTransformer::KIND,
            Self::Masked(_) => MaskedModel::KIND,
            Self::Compressed(_) => CompressedModel::KIND,
            Self::Records(_) => <Vec<DistillationRecord>>::KIND,
        }
    }
}
