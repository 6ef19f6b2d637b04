//! Learned low-rank compression for small decoder-only transformers.
//!
//! Every linear projection (except the logits head) is factorized with an
//! SVD, optionally after activation-aware rescaling of its input channels. A
//! trainable logit per singular value decides, through a Gumbel-sigmoid
//! relaxation, which singular values survive. The logits are trained against
//! a distillation + compression + smoothness objective while the rest of the
//! network stays frozen, and the result is converted into a genuinely smaller
//! model.
//!
//! Module map:
//!
//! - [`tensor`]: dense tensors, the differentiation tape and AdamW.
//! - [`lowrank`]: Jacobi SVD, whitening, reconstruction and ratio accounting.
//! - [`masking`]: mask logits, Gumbel-sigmoid sampling and hardening.
//! - [`model`]: the toy transformer, its masked-factorized form, corpora,
//!   distillation capture and checkpoints.
//! - [`training`]: the loss terms, schedules and the mask training loop.
//! - [`pipeline`]: conversion, baselines, evaluation and reporting.

pub mod error;
pub mod lowrank;
pub mod masking;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use lowrank::{LayerBudget, SvdFactors, WhiteningScale};
pub use masking::{MaskLogits, MaskSample};
pub use model::{
    DistillationRecord, Document, LayerKind, LayerSite, MaskMode, MaskedModel, ModelConfig,
    ToyTransformer,
};
pub use pipeline::{CompressedModel, CompressionReport, EvalResult};
pub use tensor::{AdamW, AdamWConfig, Tape, Tensor, Var};
pub use training::{LossWeights, TrainConfig, TrainState};
