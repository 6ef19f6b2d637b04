use super::corpus::{DocId, Document};
use super::transformer::ToyTransformer;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Activations of the original model on one document chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillationRecord {
    pub doc_id: DocId,
    pub chunk_index: usize,
    pub token_ids: Vec<usize>,
    /// `seq × d_model`
    pub middle_hidden: Tensor,
    /// `seq × d_model`
    pub pre_logits_hidden: Tensor,
}

impl DistillationRecord {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// One record per chunk of at most `max_seq` tokens, in document order.
pub fn capture_distillation_dataset(model: &ToyTransformer, docs: &[Document]) -> Result<Vec<DistillationRecord>> {
    if !model.is_frozen() {
        return Err(Error::contract("distillation targets need a frozen model"));
    }
    if docs.is_empty() {
        return Err(Error::contract("distillation corpus is empty"));
    }
    let max_seq = model.config().max_seq;
    let mut out = Vec::new();
    for doc in docs {
        for chunk in doc.chunks(max_seq) {
            let f = model.forward(&chunk.tokens)?;
            out.push(DistillationRecord {
                doc_id: chunk.doc_id,
                chunk_index: chunk.index,
                token_ids: chunk.tokens,
                middle_hidden: f.middle_hidden,
                pre_logits_hidden: f.pre_logits_hidden,
            });
        }
    }
    Ok(out)
}
