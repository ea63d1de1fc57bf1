//! Modality-conditioned importance gates.
//!
//! Every prunable unit `i` in unit layer `ℓ` owns a small MLP `f_i` over the
//! availability mask and a base logit `ζ_i`; the layer shares a scale `γ`:
//!
//! ```text
//! g_i(m) = σ(ζ_i + γ · f_i(m)),   f_i(m) = w2_i · tanh(W1_i m + b1_i) + b2_i
//! ```
//!
//! Gates only observe the backbone. They are fitted to per-layer normalized
//! first-order saliency `|x ⊙ ∂L/∂x|` harvested from activation taps.

use serde::{Deserialize, Serialize};

use crate::backbone::ModalityMask;
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, TapRecord, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::{normal_tensor, seeded};
use crate::tensor::Tensor;
use crate::units::{Site, UnitKind, UnitLayer, UnitLayout};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateLayer {
    pub unit_layer: UnitLayer,
    pub zeta: ParamId,
    /// `M × (N·H)`: column block `i·H..(i+1)·H` is unit `i`'s first layer.
    pub w1: ParamId,
    pub b1: ParamId,
    /// `1 × (N·H)`.
    pub w2: ParamId,
    pub b2: ParamId,
    pub gamma: ParamId,
}

#[derive(Clone, Debug)]
pub struct GateSet {
    pub n_modalities: usize,
    pub hidden: usize,
    pub layers: Vec<GateLayer>,
    pub store: ParamStore,
}

/// Per-layer saliency target in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyTarget {
    pub layer: usize,
    pub values: Vec<f64>,
}

impl GateSet {
    /// Fresh gates for every layer of `layout`: `ζ = 0`, `γ = 1`, hidden width `2M`.
    pub fn new(layout: &UnitLayout, n_modalities: usize, seed: u64) -> Result<Self> {
        if n_modalities == 0 {
            return Err(Error::Config("gates need at least one modality".into()));
        }
        let hidden = 2 * n_modalities;
        let mut rng = seeded(seed);
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(layout.layers.len());
        for (l, ul) in layout.layers.iter().enumerate() {
            let n = ul.n_units;
            let nh = n * hidden;
            let p = format!("gate.{l}");
            layers.push(GateLayer {
                unit_layer: ul.clone(),
                zeta: store.add(format!("{p}.zeta"), Tensor::zeros(&[n]))?,
                w1: store.add(
                    format!("{p}.w1"),
                    normal_tensor(&[n_modalities, nh], 1.0 / (n_modalities as f64).sqrt(), &mut rng),
                )?,
                b1: store.add(format!("{p}.b1"), Tensor::zeros(&[nh]))?,
                w2: store.add(format!("{p}.w2"), normal_tensor(&[1, nh], 0.1 / (hidden as f64).sqrt(), &mut rng))?,
                b2: store.add(format!("{p}.b2"), Tensor::zeros(&[n]))?,
                gamma: store.add(format!("{p}.gamma"), Tensor::ones(&[1]))?,
            });
        }
        Ok(GateSet { n_modalities, hidden, layers, store })
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    fn layer(&self, l: usize) -> Result<&GateLayer> {
        self.layers.get(l).ok_or_else(|| Error::Input(format!("no gate layer {l}")))
    }

    /// Records the gate computation for layer `l` on `g`, returning `1×N` scores.
    pub fn forward_on(&self, g: &mut Graph, l: usize, mask: &ModalityMask) -> Result<Var> {
        mask.check_len(self.n_modalities)?;
        let gl = self.layer(l)?;
        let n = gl.unit_layer.n_units;
        let m = g.constant(Tensor::new(vec![1, self.n_modalities], mask.as_f64())?);
        let w1 = g.param(&self.store, gl.w1);
        let b1 = g.param(&self.store, gl.b1);
        let w2 = g.param(&self.store, gl.w2);
        let b2 = g.param(&self.store, gl.b2);
        let gamma = g.param(&self.store, gl.gamma);
        let zeta = g.param(&self.store, gl.zeta);
        let h = g.matmul(m, w1)?;
        let h = g.add_bias(h, b1)?;
        let h = g.tanh(h);
        let f = g.mul(h, w2)?;
        let f = g.reshape(f, &[n, self.hidden])?;
        let f = g.sum_axis(f, 1)?;
        let f = g.reshape(f, &[1, n])?;
        let f = g.add_bias(f, b2)?;
        let f = g.mul_scalar(f, gamma)?;
        let logit = g.add_bias(f, zeta)?;
        Ok(g.sigmoid(logit))
    }

    /// Gate scores `g_i(m)` for every unit of layer `l`.
    pub fn gate_forward(&self, mask: &ModalityMask, l: usize) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let v = self.forward_on(&mut g, l, mask)?;
        Ok(g.value(v).data().to_vec())
    }

    /// Scores of all layers, concatenated in layout order.
    pub fn scores(&self, mask: &ModalityMask) -> Result<Vec<Vec<f64>>> {
        (0..self.layers.len()).map(|l| self.gate_forward(mask, l)).collect()
    }

    /// Serializable view: per-unit parameters plus score tables for `masks`.
    pub fn table(&self, masks: &[ModalityMask]) -> Result<GateTable> {
        let mut units = Vec::new();
        for (l, gl) in self.layers.iter().enumerate() {
            let h = self.hidden;
            let w1 = self.store.get(gl.w1);
            let gamma = self.store.get(gl.gamma).data()[0];
            for i in 0..gl.unit_layer.n_units {
                let cols: Vec<usize> = (i * h..(i + 1) * h).collect();
                units.push(GateUnitEntry {
                    site: gl.unit_layer.site,
                    layer: l,
                    layer_label: gl.unit_layer.label(),
                    unit: i,
                    zeta: self.store.get(gl.zeta).data()[i],
                    gamma,
                    w1: w1.select_cols(&cols)?.into_data(),
                    b1: self.store.get(gl.b1).data()[i * h..(i + 1) * h].to_vec(),
                    w2: self.store.get(gl.w2).data()[i * h..(i + 1) * h].to_vec(),
                    b2: self.store.get(gl.b2).data()[i],
                });
            }
        }
        let scores = masks
            .iter()
            .map(|m| Ok(MaskScores { mask: m.bits(), scores: self.scores(m)? }))
            .collect::<Result<Vec<_>>>()?;
        Ok(GateTable { n_modalities: self.n_modalities, hidden: self.hidden, units, scores })
    }

    /// Rebuilds gates from a table produced by [`GateSet::table`].
    pub fn from_table(table: &GateTable, layout: &UnitLayout) -> Result<Self> {
        let mut gates = GateSet::new(layout, table.n_modalities, 0)?;
        if gates.hidden != table.hidden {
            return Err(Error::Format(format!("gate hidden width {} vs {}", table.hidden, gates.hidden)));
        }
        let h = gates.hidden;
        let expected = layout.total_units();
        if table.units.len() != expected {
            return Err(Error::Format(format!("{} gate units for {expected} model units", table.units.len())));
        }
        for u in &table.units {
            let gl = gates.layer(u.layer)?.clone();
            if u.unit >= gl.unit_layer.n_units || u.w1.len() != table.n_modalities * h || u.b1.len() != h || u.w2.len() != h {
                return Err(Error::Format(format!("malformed gate unit {}/{}", u.layer, u.unit)));
            }
            let i = u.unit;
            gates.store.get_mut(gl.zeta).data_mut()[i] = u.zeta;
            gates.store.get_mut(gl.gamma).data_mut()[0] = u.gamma;
            gates.store.get_mut(gl.b2).data_mut()[i] = u.b2;
            gates.store.get_mut(gl.b1).data_mut()[i * h..(i + 1) * h].copy_from_slice(&u.b1);
            gates.store.get_mut(gl.w2).data_mut()[i * h..(i + 1) * h].copy_from_slice(&u.w2);
            let w1 = gates.store.get_mut(gl.w1);
            let cols = w1.shape()[1];
            for r in 0..table.n_modalities {
                w1.data_mut()[r * cols + i * h..r * cols + (i + 1) * h].copy_from_slice(&u.w1[r * h..(r + 1) * h]);
            }
        }
        Ok(gates)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateUnitEntry {
    pub site: Site,
    pub layer: usize,
    pub layer_label: String,
    pub unit: usize,
    pub zeta: f64,
    pub gamma: f64,
    /// Row-major `M×H`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskScores {
    pub mask: String,
    pub scores: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateTable {
    pub n_modalities: usize,
    pub hidden: usize,
    pub units: Vec<GateUnitEntry>,
    pub scores: Vec<MaskScores>,
}

/// Mean over samples and tokens of `|x ⊙ ∂L/∂x|`, summed over each unit's features.
///
/// `taps` must all belong to `layer`; `n_samples` is the number of forward
/// passes they were harvested from (experts see only routed tokens, so their
/// record count can be lower).
pub fn raw_saliency(layer: &UnitLayer, taps: &[&TapRecord], n_samples: usize) -> Result<Vec<f64>> {
    if n_samples == 0 {
        return Err(Error::Contract("saliency over zero samples".into()));
    }
    let mut s = vec![0.0; layer.n_units];
    for rec in taps {
        let (x, gx) = (&rec.activation, &rec.activation_grad);
        if x.shape() != gx.shape() {
            return Err(Error::Contract("tap activation and gradient shapes differ".into()));
        }
        let cols = x.cols();
        let contrib = x.data().iter().zip(gx.data()).map(|(a, b)| (a * b).abs());
        match &layer.kind {
            UnitKind::Heads { .. } => {
                let h = rec.tap_id.slot;
                if h >= layer.n_units {
                    return Err(shape_err!("tap slot {h} beyond {} heads", layer.n_units));
                }
                s[h] += contrib.sum::<f64>();
            }
            UnitKind::Ffn => {
                if cols != layer.n_units {
                    return Err(shape_err!("FFN tap with {cols} channels for {} units", layer.n_units));
                }
                for (k, v) in contrib.enumerate() {
                    s[k % cols] += v;
                }
            }
            UnitKind::Experts { widths } => {
                let e = rec.tap_id.slot;
                let (start, _) = layer.expert_range(e).ok_or_else(|| shape_err!("no expert {e}"))?;
                if cols != widths[e] {
                    return Err(shape_err!("expert {e} tap with {cols} channels, width {}", widths[e]));
                }
                for (k, v) in contrib.enumerate() {
                    s[start + k % cols] += v;
                }
            }
        }
    }
    let denom = (n_samples * layer.tokens) as f64;
    s.iter_mut().for_each(|v| *v /= denom);
    Ok(s)
}

/// Min-max normalization into `[0, 1]`; a constant vector maps to all `0.5`.
pub fn normalize_saliency(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; raw.len()];
    }
    raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Normalized saliency of layer `l` from the taps recorded for it.
pub fn saliency_from_taps(
    layout: &UnitLayout,
    l: usize,
    taps: &[TapRecord],
    n_samples: usize,
) -> Result<SaliencyTarget> {
    let layer = layout.layers.get(l).ok_or_else(|| Error::Input(format!("no unit layer {l}")))?;
    let mine: Vec<&TapRecord> = taps.iter().filter(|t| t.tap_id.layer == l).collect();
    if mine.is_empty() && !matches!(layer.kind, UnitKind::Experts { .. }) {
        return Err(Error::Contract(format!("no taps recorded for layer {}", layer.label())));
    }
    let raw = raw_saliency(layer, &mine, n_samples)?;
    Ok(SaliencyTarget { layer: l, values: normalize_saliency(&raw) })
}

/// Normalized saliency for every layer of `layout`.
///
/// A layer with no taps did not execute (its modality was absent), so its raw
/// saliency is identically zero and its target is all zeros rather than the
/// "no evidence" value 0.5.
pub fn layer_targets(layout: &UnitLayout, taps: &[TapRecord], n_samples: usize) -> Result<Vec<Vec<f64>>> {
    let mut by_layer: Vec<Vec<&TapRecord>> = vec![Vec::new(); layout.layers.len()];
    for t in taps {
        by_layer
            .get_mut(t.tap_id.layer)
            .ok_or_else(|| Error::Contract(format!("tap for unknown layer {}", t.tap_id.layer)))?
            .push(t);
    }
    layout
        .layers
        .iter()
        .zip(&by_layer)
        .map(|(layer, recs)| {
            if recs.is_empty() {
                Ok(vec![0.0; layer.n_units])
            } else {
                Ok(normalize_saliency(&raw_saliency(layer, recs, n_samples)?))
            }
        })
        .collect()
}

/// `(1/N) Σ (g_i − s_i)²`.
pub fn alignment_loss(g: &[f64], target: &[f64]) -> Result<f64> {
    if g.len() != target.len() || g.is_empty() {
        return Err(shape_err!("alignment over {} gates and {} targets", g.len(), target.len()));
    }
    Ok(g.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / g.len() as f64)
}

/// `(1/N) Σ g_i (1 − g_i)`.
pub fn binarization_loss(g: &[f64]) -> f64 {
    if g.is_empty() {
        return 0.0;
    }
    g.iter().map(|v| v * (1.0 - v)).sum::<f64>() / g.len() as f64
}

/// Tape version of [`binarization_loss`] for a `1×N` gate vector.
pub fn binarization_loss_on(g: &mut Graph, gates: Var) -> Result<Var> {
    let n = g.value(gates).numel();
    let ones = g.constant(Tensor::ones(g.value(gates).shape()));
    let comp = g.sub(ones, gates)?;
    let prod = g.mul(gates, comp)?;
    let s = g.sum(prod);
    Ok(g.scale(s, 1.0 / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::TapId;

    fn toy_layout() -> UnitLayout {
        UnitLayout {
            layers: vec![
                UnitLayer {
                    site: Site::AttentionHead,
                    stack: crate::units::Stack::Fusion,
                    block: 0,
                    n_units: 3,
                    tokens: 2,
                    kind: UnitKind::Heads { head_group: vec![0, 0, 1], n_groups: 2 },
                },
                UnitLayer {
                    site: Site::FfnChannel,
                    stack: crate::units::Stack::Modality(0),
                    block: 0,
                    n_units: 2,
                    tokens: 2,
                    kind: UnitKind::Ffn,
                },
            ],
        }
    }

    #[test]
    fn neutral_gates_are_one_half() {
        let mut gates = GateSet::new(&toy_layout(), 3, 1).unwrap();
        let gl = gates.layers[0].clone();
        gates.store.get_mut(gl.gamma).data_mut()[0] = 0.0;
        for mask in ["111", "010", "100"] {
            let g = gates.gate_forward(&ModalityMask::parse(mask).unwrap(), 0).unwrap();
            assert_eq!(g, vec![0.5; 3]);
        }
    }

    #[test]
    fn large_base_logit_saturates() {
        let mut gates = GateSet::new(&toy_layout(), 3, 1).unwrap();
        let gl = gates.layers[1].clone();
        gates.store.get_mut(gl.gamma).data_mut()[0] = 0.0;
        gates.store.get_mut(gl.zeta).data_mut().fill(10.0);
        let g = gates.gate_forward(&ModalityMask::all_present(3), 1).unwrap();
        let expect = 1.0 / (1.0 + (-10f64).exp());
        assert!(g.iter().all(|v| (v - expect).abs() < 1e-15));
        assert!((expect - 0.99995).abs() < 1e-5);
    }

    #[test]
    fn masks_condition_scores() {
        let gates = GateSet::new(&toy_layout(), 3, 5).unwrap();
        let a = gates.gate_forward(&ModalityMask::parse("111").unwrap(), 0).unwrap();
        let b = gates.gate_forward(&ModalityMask::parse("101").unwrap(), 0).unwrap();
        assert_ne!(a, b);
        assert!(a.iter().chain(&b).all(|&v| v > 0.0 && v < 1.0));
        assert!(gates.gate_forward(&ModalityMask::parse("11").unwrap(), 0).is_err());
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_saliency(&[2.0, 4.0, 6.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_saliency(&[0.0; 4]), vec![0.5; 4]);
        assert_eq!(normalize_saliency(&[0.0, 3.0, 0.0]), vec![0.0, 1.0, 0.0]);
    }

    fn rec(layer: usize, slot: usize, x: &[f64], g: &[f64], shape: &[usize]) -> TapRecord {
        TapRecord {
            tap_id: TapId { layer, slot },
            activation: Tensor::new(shape.to_vec(), x.to_vec()).unwrap(),
            activation_grad: Tensor::new(shape.to_vec(), g.to_vec()).unwrap(),
        }
    }

    #[test]
    fn saliency_from_head_and_ffn_taps() {
        let layout = toy_layout();
        let taps = vec![
            rec(0, 0, &[1.0, 1.0], &[0.0, 0.0], &[2, 1]),
            rec(0, 1, &[1.0, -2.0], &[3.0, 1.0], &[2, 1]),
            rec(0, 2, &[0.0, 0.0], &[5.0, 5.0], &[2, 1]),
            rec(1, 0, &[1.0, 2.0, 3.0, 4.0], &[0.0; 4], &[2, 2]),
        ];
        let s = saliency_from_taps(&layout, 0, &taps, 1).unwrap();
        assert_eq!(s.values, vec![0.0, 1.0, 0.0]);
        // zero gradients everywhere: degenerate rule
        let s = saliency_from_taps(&layout, 1, &taps, 1).unwrap();
        assert_eq!(s.values, vec![0.5, 0.5]);
        assert!(saliency_from_taps(&layout, 1, &taps[..3], 1).is_err());
    }

    #[test]
    fn raw_saliency_averages_tokens_and_samples() {
        let layout = toy_layout();
        let a = rec(1, 0, &[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0, 1.0, -1.0], &[2, 2]);
        let b = rec(1, 0, &[1.0, 0.0, 1.0, 0.0], &[1.0, 0.0, 1.0, 0.0], &[2, 2]);
        let raw = raw_saliency(&layout.layers[1], &[&a, &b], 2).unwrap();
        assert_eq!(raw, vec![(1.0 + 3.0 + 1.0 + 1.0) / 4.0, (2.0 + 4.0) / 4.0]);
    }

    #[test]
    fn dead_layers_target_zero() {
        let layout = toy_layout();
        let taps = vec![rec(1, 0, &[1.0, 2.0, 3.0, 4.0], &[1.0; 4], &[2, 2])];
        let t = layer_targets(&layout, &taps, 1).unwrap();
        assert_eq!(t, vec![vec![0.0; 3], vec![0.0, 1.0]]);
        let stray = vec![rec(7, 0, &[1.0], &[1.0], &[1, 1])];
        assert!(layer_targets(&layout, &stray, 1).is_err());
    }

    #[test]
    fn loss_values() {
        assert_eq!(alignment_loss(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(alignment_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(alignment_loss(&[0.5], &[0.0]).unwrap(), 0.25);
        assert!(alignment_loss(&[0.5], &[0.0, 1.0]).is_err());
        assert_eq!(binarization_loss(&[0.0, 1.0, 1.0]), 0.0);
        assert_eq!(binarization_loss(&[0.5; 7]), 0.25);
        assert!((binarization_loss(&[0.2, 0.8]) - 0.16).abs() < 1e-15);
    }

    #[test]
    fn tape_binarization_matches_values() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(vec![1, 2], vec![0.2, 0.8]).unwrap());
        let l = binarization_loss_on(&mut g, v).unwrap();
        assert!((g.value(l).data()[0] - 0.16).abs() < 1e-15);
    }

    #[test]
    fn table_round_trip() {
        let layout = toy_layout();
        let gates = GateSet::new(&layout, 3, 11).unwrap();
        let masks = [ModalityMask::all_present(3), ModalityMask::parse("011").unwrap()];
        let table = gates.table(&masks).unwrap();
        assert_eq!(table.units.len(), 5);
        let json = serde_json::to_string(&table).unwrap();
        let back = GateSet::from_table(&serde_json::from_str(&json).unwrap(), &layout).unwrap();
        for m in &masks {
            assert_eq!(back.scores(m).unwrap(), gates.scores(m).unwrap());
        }
    }
}
