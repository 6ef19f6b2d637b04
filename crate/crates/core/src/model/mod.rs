//! The toy transformer, its masked-factorized form, byte-level corpora,
//! distillation capture and checkpoints.

mod checkpoint;
mod config;
mod corpus;
mod distill;
mod masked;
mod transformer;

pub use checkpoint::{decode, load_checkpoint, save_checkpoint, Checkpoint, Container, FORMAT_VERSION, MAGIC, MANIFEST_OFFSET};
pub use config::{ConfigFile, ModelConfig, PretrainConfig, BYTE_VOCAB};
pub use corpus::{
    chunk_documents, doc_id, load_corpus, packed_stream, parse_corpus, synthetic_corpus, Chunk, DocId, Document, BOS,
    DEFAULT_MIN_WORDS, PAD,
};
pub use distill::{capture_distillation_dataset, DistillationRecord};
pub use masked::{factorize_model, forward_masked, FactorizeOptions, MaskMode, MaskedLayer, MaskedModel};
pub use transformer::{build_and_pretrain, Backbone, ForwardOutput, LayerNormParams, PretrainReport, ToyTransformer};

pub(crate) use checkpoint::{meta_field, push_backbone, read_config, take_backbone};
pub(crate) use transformer::{forward_on_tape, Bound, BoundLinear, HiddenVars};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The six linear projections of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Q,
    K,
    V,
    O,
    Up,
    Down,
}

impl LayerKind {
    pub const ALL: [LayerKind; 6] = [Self::Q, Self::K, Self::V, Self::O, Self::Up, Self::Down];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Q => "q",
            Self::K => "k",
            Self::V => "v",
            Self::O => "o",
            Self::Up => "up",
            Self::Down => "down",
        }
    }

    fn ordinal(self) -> usize {
        self as usize
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::contract(format!("unknown layer kind `{s}`")))
    }
}

/// One eligible linear layer: block index plus projection kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerSite {
    pub layer: usize,
    pub kind: LayerKind,
}

impl LayerSite {
    /// Position in forward order, `layer * 6 + kind`.
    pub fn index(&self) -> usize {
        self.layer * LayerKind::ALL.len() + self.kind.ordinal()
    }

    /// Registry name, e.g. `blocks.2.up`.
    pub fn name(&self) -> String {
        format!("blocks.{}.{}", self.layer, self.kind)
    }
}
