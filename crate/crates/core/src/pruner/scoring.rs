//! Unit importance scorers.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, ForwardOptions, ModalityMask, Sample};
use crate::error::{Error, Result};
use crate::gating::{normalize_saliency, raw_saliency, GateSet};
use crate::graph::{Graph, TapRecord};
use crate::params::ParamId;
use crate::rng::seeded;
use crate::tensor::Tensor;
use crate::units::{Site, UnitLayout};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scorer {
    Sentrygate,
    Random,
    Magnitude,
    Synflow,
    Taylor,
}

impl Scorer {
    /// Scorers that need neither data nor gradients at pruning time.
    pub const ZERO_SHOT: [Scorer; 4] = [Scorer::Sentrygate, Scorer::Random, Scorer::Magnitude, Scorer::Synflow];

    pub fn name(self) -> &'static str {
        match self {
            Scorer::Sentrygate => "sentrygate",
            Scorer::Random => "random",
            Scorer::Magnitude => "magnitude",
            Scorer::Synflow => "synflow",
            Scorer::Taylor => "taylor",
        }
    }
}

impl fmt::Display for Scorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Scorer::Sentrygate, Scorer::Random, Scorer::Magnitude, Scorer::Synflow, Scorer::Taylor]
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown scorer {s:?}")))
    }
}

/// One score per prunable unit, grouped by unit layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitScores {
    pub scorer: Scorer,
    pub layers: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub site: Site,
    pub layer: usize,
    pub unit: usize,
    pub score: f64,
}

impl UnitScores {
    pub fn check(&self, layout: &UnitLayout) -> Result<()> {
        if self.layers.len() != layout.layers.len()
            || self.layers.iter().zip(&layout.layers).any(|(s, l)| s.len() != l.n_units)
        {
            return Err(Error::Structure(format!("{} scores do not match the model's unit layout", self.scorer)));
        }
        if self.layers.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("{} produced a non-finite score", self.scorer)));
        }
        Ok(())
    }

    pub fn entries(&self, layout: &UnitLayout) -> Vec<ScoreEntry> {
        self.layers
            .iter()
            .zip(&layout.layers)
            .enumerate()
            .flat_map(|(l, (s, ul))| {
                s.iter().enumerate().map(move |(unit, &score)| ScoreEntry { site: ul.site, layer: l, unit, score })
            })
            .collect()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers.concat()
    }
}

/// Min-max over all units of all layers; a constant table maps to 0.5.
fn normalize_global(scorer: Scorer, layers: Vec<Vec<f64>>) -> UnitScores {
    let flat = normalize_saliency(&layers.concat());
    let mut it = flat.into_iter();
    let layers = layers.iter().map(|l| it.by_ref().take(l.len()).collect()).collect();
    UnitScores { scorer, layers }
}

/// Gate outputs for the platform mask; no data and no gradients.
pub fn score_sentrygate(gates: &GateSet, mask: &ModalityMask) -> Result<UnitScores> {
    Ok(UnitScores { scorer: Scorer::Sentrygate, layers: gates.scores(mask)? })
}

pub fn score_random(layout: &UnitLayout, seed: u64) -> UnitScores {
    let mut rng = seeded(seed);
    let layers = layout.layers.iter().map(|l| (0..l.n_units).map(|_| rng.random::<f64>()).collect()).collect();
    UnitScores { scorer: Scorer::Random, layers }
}

/// Parameter slice owned by one unit.
/// Heads own their query block and output rows whole; channels own one
/// column of the first matrix and one row of the second.
enum Slice {
    Whole(ParamId),
    Col(ParamId, usize),
    Row(ParamId, usize),
}

fn unit_slices(model: &Backbone) -> Vec<Vec<Vec<Slice>>> {
    let a = &model.arch;
    let mut out = Vec::new();
    let heads = |attn: &crate::backbone::AttentionLayer| -> Vec<Vec<Slice>> {
        attn.heads.iter().map(|h| vec![Slice::Whole(h.wq), Slice::Whole(h.wo)]).collect()
    };
    let channels = |f: &crate::backbone::Ffn| -> Vec<Vec<Slice>> {
        (0..f.width).map(|k| vec![Slice::Col(f.w1, k), Slice::Row(f.w2, k)]).collect()
    };
    for enc in &a.encoders {
        for blk in &enc.blocks {
            out.push(heads(&blk.attn));
            out.push(channels(&blk.ffn));
        }
    }
    for blk in &a.fusion {
        out.push(heads(&blk.attn));
        out.push(blk.moe.experts.iter().flat_map(channels).collect());
    }
    out
}

fn slice_values<'a>(t: &'a Tensor, s: &Slice) -> Box<dyn Iterator<Item = f64> + 'a> {
    match *s {
        Slice::Whole(_) => Box::new(t.data().iter().copied()),
        Slice::Col(_, k) => Box::new((0..t.rows()).map(move |r| t.at(r, k))),
        Slice::Row(_, k) => Box::new(t.row(k).iter().copied()),
    }
}

fn slice_param(s: &Slice) -> ParamId {
    match *s {
        Slice::Whole(p) | Slice::Col(p, _) | Slice::Row(p, _) => p,
    }
}

/// Mean absolute weight of each unit's slice, min-max normalized globally.
pub fn score_magnitude(model: &Backbone) -> UnitScores {
    let layers = unit_slices(model)
        .iter()
        .map(|units| {
            units
                .iter()
                .map(|slices| {
                    let (sum, n) = slices.iter().fold((0.0, 0usize), |(s, n), sl| {
                        let t = model.store.get(slice_param(sl));
                        slice_values(t, sl).fold((s, n), |(s, n), v| (s + v.abs(), n + 1))
                    });
                    sum / n as f64
                })
                .collect()
        })
        .collect();
    normalize_global(Scorer::Magnitude, layers)
}

/// Synaptic-flow saliency: with every parameter replaced by its absolute
/// value and an all-ones input, `R = Σ logits`; a unit scores
/// `Σ |θ ⊙ ∂R/∂θ|` over its slice.
pub fn score_synflow(model: &Backbone) -> Result<UnitScores> {
    let mut abs_model = model.clone();
    abs_model.store.tensors_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = v.abs()));
    let cfg = &model.config;
    let sample = Sample {
        streams: vec![Some(Tensor::ones(&[cfg.seq_len, cfg.input_dim])); cfg.n_modalities],
        label: 0,
    };
    let mut g = Graph::new();
    let out =
        abs_model.forward_sample(&mut g, &sample, &ModalityMask::all_present(cfg.n_modalities), &ForwardOptions::default())?;
    let r = g.sum(out.logits);
    g.backward(r)?;
    let grads: std::collections::HashMap<ParamId, Vec<f64>> =
        g.param_grads(&abs_model.store)?.into_iter().map(|(id, gr)| (id, gr.to_vec())).collect();
    let layers = unit_slices(&abs_model)
        .iter()
        .map(|units| {
            units
                .iter()
                .map(|slices| {
                    slices
                        .iter()
                        .map(|sl| {
                            let p = slice_param(sl);
                            let theta = abs_model.store.get(p);
                            let Some(gr) = grads.get(&p) else { return 0.0 };
                            let gt = Tensor::new(theta.shape().to_vec(), gr.clone()).expect("grad shape");
                            slice_values(theta, sl).zip(slice_values(&gt, sl)).map(|(a, b)| (a * b).abs()).sum::<f64>()
                        })
                        .sum()
                })
                .collect()
        })
        .collect();
    Ok(normalize_global(Scorer::Synflow, layers))
}

/// Taylor saliency on labelled data under `mask`, normalized per layer like the
/// gate targets. This is the teacher the gates are trained to imitate.
pub fn score_taylor(model: &Backbone, samples: &[Sample], mask: &ModalityMask, chunk: usize) -> Result<UnitScores> {
    if samples.is_empty() {
        return Err(Error::Input("Taylor scoring needs samples".into()));
    }
    let layout = model.layout();
    let mut taps: Vec<TapRecord> = Vec::new();
    for part in samples.chunks(chunk.max(1)) {
        let batch: Vec<&Sample> = part.iter().collect();
        let labels: Vec<usize> = part.iter().map(|s| s.label).collect();
        let mut g = Graph::new();
        let opts = ForwardOptions { taps: true, ..Default::default() };
        let (logits, _) = model.forward_batch(&mut g, &batch, mask, &opts)?;
        // summed per-chunk losses so chunking does not rescale gradients
        let loss = g.cross_entropy(logits, &labels)?;
        let loss = g.scale(loss, part.len() as f64);
        g.backward(loss)?;
        taps.extend(g.collect_taps()?);
    }
    let layers = layout
        .layers
        .iter()
        .enumerate()
        .map(|(l, ul)| {
            let mine: Vec<&TapRecord> = taps.iter().filter(|t| t.tap_id.layer == l).collect();
            if mine.is_empty() {
                return Ok(vec![0.0; ul.n_units]);
            }
            Ok(normalize_saliency(&raw_saliency(ul, &mine, samples.len())?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(UnitScores { scorer: Scorer::Taylor, layers })
}
