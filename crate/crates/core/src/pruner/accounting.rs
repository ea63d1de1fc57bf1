//! Forward-pass FLOP counts and serialized model size.
//!
//! Counts are closed-form: every multiply-add of a matrix product counts as
//! two FLOPs. Bias additions, normalizations, activations, softmax, query
//! selection and the mean fill are not counted. Mixture-of-experts layers are
//! charged the expected cost of `top_k` experts of average width per token.

use serde::{Deserialize, Serialize};

use crate::attention::{grouped_attention_flops, top_u};
use crate::backbone::{AttentionLayer, Backbone};
use crate::error::Result;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopBreakdown {
    pub embed: f64,
    pub attention: f64,
    pub ffn: f64,
    pub moe: f64,
    pub head: f64,
    pub total: f64,
}

fn attention_layer_flops(attn: &AttentionLayer, tokens: usize, d: usize, sparse: bool, c: usize) -> f64 {
    let u = if sparse { top_u(tokens, c) } else { tokens };
    grouped_attention_flops(tokens, d, attn.head_dim, attn.heads.len(), attn.groups.len(), u)
}

/// Per-inference FLOPs with every modality present, using the model's own
/// attention mode (`sparse = None`) or forcing dense/sparse attention.
pub fn model_flops(model: &Backbone, sparse: Option<bool>) -> FlopBreakdown {
    let cfg = &model.config;
    let sparse = sparse.unwrap_or(cfg.sparse_attention);
    let (t, d) = (cfg.seq_len as f64, cfg.model_dim as f64);
    let n = cfg.fusion_tokens();
    let mut f = FlopBreakdown::default();
    for enc in &model.arch.encoders {
        f.embed += 2.0 * t * cfg.input_dim as f64 * d;
        for blk in &enc.blocks {
            f.attention += attention_layer_flops(&blk.attn, cfg.seq_len, cfg.model_dim, sparse, cfg.sparsity_const);
            f.ffn += 4.0 * t * d * blk.ffn.width as f64;
        }
    }
    for blk in &model.arch.fusion {
        f.attention += attention_layer_flops(&blk.attn, n, cfg.model_dim, sparse, cfg.sparsity_const);
        let e = blk.moe.experts.len() as f64;
        let mean_width = blk.moe.experts.iter().map(|x| x.width as f64).sum::<f64>() / e;
        f.moe += 2.0 * n as f64 * d * e + n as f64 * blk.moe.top_k as f64 * 4.0 * d * mean_width;
    }
    f.head = 2.0 * d * cfg.n_classes as f64;
    f.total = f.embed + f.attention + f.ffn + f.moe + f.head;
    f
}

/// Exact byte length of the model's checkpoint.
pub fn model_memory(model: &Backbone) -> Result<usize> {
    Ok(model.to_checkpoint(None)?.serialized_len())
}
