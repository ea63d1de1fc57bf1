//! Raw attention-matrix export for offline plotting.
//!
//! Uses the checkpoint container: the header is JSON describing every entry,
//! and entry `attn.{layer}.{head}` holds that head's row-major `T×T` matrix.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, ForwardOptions, ModalityMask, Sample};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::Graph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionEntry {
    /// Attention layer index; modality stacks first, then fusion.
    pub layer: usize,
    pub head: usize,
    /// Sequence length the head attends over.
    pub tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionHeader {
    pub mask: String,
    pub entries: Vec<AttentionEntry>,
}

pub fn entry_name(layer: usize, head: usize) -> String {
    format!("attn.{layer}.{head}")
}

/// Every executed head's attention matrix for `sample` under `mask`.
pub fn export_attention(model: &Backbone, sample: &Sample, mask: &ModalityMask) -> Result<Checkpoint> {
    let mut g = Graph::new();
    let opts = ForwardOptions { keep_attention: true, ..Default::default() };
    let out = model.forward_sample(&mut g, sample, mask, &opts)?;
    let mut entries = Vec::new();
    let mut tensors = Vec::new();
    for (layer, att) in &out.trace.attention {
        for head in 0..att.probs.len() {
            let m = att.attention_matrix(&g, head);
            entries.push(AttentionEntry { layer: *layer, head, tokens: m.shape()[0] });
            tensors.push((entry_name(*layer, head), m));
        }
    }
    if tensors.is_empty() {
        return Err(Error::Structure("model executed no attention layers".into()));
    }
    let header = AttentionHeader { mask: mask.bits(), entries };
    Ok(Checkpoint::new(serde_json::to_string(&header)?, tensors))
}
