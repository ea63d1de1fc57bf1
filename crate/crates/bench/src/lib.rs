//! Benchmark fixtures shared by the criterion targets.

use sentry_core::attention::{AttentionConfig, AttentionWeights};
use sentry_core::rng::{normal_tensor, seeded};
use sentry_core::{Backbone, BackboneConfig, Sample, Tensor};

/// Attention weights and a `T×D` input for sequence length `t`.
pub fn attention_case(t: usize, d: usize, heads: usize, groups: usize) -> (AttentionConfig, AttentionWeights, Tensor) {
    let cfg = AttentionConfig::new(heads, groups, d, t).expect("valid attention config");
    let mut rng = seeded(t as u64);
    let w = AttentionWeights::random(&cfg, &mut rng);
    let x = normal_tensor(&[t, d], 1.0, &mut rng);
    (cfg, w, x)
}

/// A default-sized model and one fully observed sample.
pub fn model_case() -> (Backbone, Sample) {
    let model = Backbone::new(BackboneConfig::default(), 7).expect("valid default config");
    let c = &model.config;
    let mut rng = seeded(8);
    let sample = Sample {
        streams: (0..c.n_modalities).map(|_| Some(normal_tensor(&[c.seq_len, c.input_dim], 1.0, &mut rng))).collect(),
        label: 0,
    };
    (model, sample)
}
