//! Joint training of the backbone and its observer gates.
//!
//! Each step runs the task forward with activation taps, backpropagates the
//! classification loss into the backbone, and (after warmup) fits the gates to
//! the detached saliency targets on a separate tape, so gate losses can never
//! reach backbone parameters.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{argmax, Backbone, BackboneConfig, ForwardOptions, ModalityMask, Sample};
use crate::error::{Error, Result};
use crate::gating::{binarization_loss_on, layer_targets, GateSet};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::pruner::{model_flops, model_memory, FlopBreakdown};
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Defaults to 20% of `epochs`.
    pub warmup_epochs: Option<usize>,
    pub p_max: f64,
    pub alpha: f64,
    pub lambda_bin: f64,
    pub lr_backbone: f64,
    pub lr_gates: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Decay of the per-mask moving average of saliency targets.
    pub ema_decay: f64,
    /// Check observer transparency and gradient isolation on every batch.
    pub verify_observer: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            warmup_epochs: None,
            p_max: 0.4,
            alpha: 1.0,
            lambda_bin: 0.1,
            lr_backbone: 0.03,
            lr_gates: 0.5,
            momentum: 0.9,
            batch_size: 8,
            seed: 0,
            ema_decay: 0.9,
            verify_observer: false,
        }
    }
}

impl TrainConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_epochs.unwrap_or(self.epochs / 5)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p_max) {
            return Err(Error::Config(format!("p_max {} outside [0, 1)", self.p_max)));
        }
        if self.epochs > 0 && self.warmup() >= self.epochs {
            return Err(Error::Config(format!("warmup {} not below {} epochs", self.warmup(), self.epochs)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let nonneg = [self.alpha, self.lambda_bin, self.lr_backbone, self.lr_gates, self.momentum];
        if nonneg.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("loss weights, rates and momentum must be finite and nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} outside [0, 1)", self.ema_decay)));
        }
        Ok(())
    }
}

/// Per-modality drop probability at epoch `t`: zero through warmup, then a
/// linear ramp reaching `p_max` at the final epoch.
pub fn drop_probability(t: usize, cfg: &TrainConfig) -> f64 {
    let tw = cfg.warmup();
    if t < tw || cfg.epochs == 0 {
        return 0.0;
    }
    let span = cfg.epochs.saturating_sub(1).saturating_sub(tw);
    if span == 0 {
        return cfg.p_max;
    }
    (cfg.p_max * (t - tw) as f64 / span as f64).clamp(0.0, cfg.p_max)
}

/// Each modality present independently with probability `1 − p`; an all-absent
/// draw is resampled.
pub fn sample_mask(p: f64, m: usize, rng: &mut impl Rng) -> ModalityMask {
    loop {
        let bits: Vec<bool> = (0..m).map(|_| rng.random::<f64>() >= p).collect();
        if bits.iter().any(|&b| b) {
            return ModalityMask(bits);
        }
    }
}

pub fn curriculum_mask(t: usize, cfg: &TrainConfig, m: usize, rng: &mut impl Rng) -> ModalityMask {
    sample_mask(drop_probability(t, cfg), m, rng)
}

/// SGD with heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd { lr, momentum, velocity: Vec::new() }
    }

    /// Applies accumulated gradients and clears them.
    pub fn step(&mut self, store: &mut ParamStore) {
        if self.velocity.is_empty() {
            self.velocity = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        }
        for (t, vel) in store.tensors_mut().zip(&mut self.velocity) {
            let Some(grad) = t.grad().map(<[f64]>::to_vec) else { continue };
            for ((p, v), g) in t.data_mut().iter_mut().zip(vel.iter_mut()).zip(&grad) {
                *v = self.momentum * *v + g;
                *p -= self.lr * *v;
            }
            t.zero_grad();
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub cls: f64,
    /// Summed over unit layers; zero while gates are frozen.
    pub align: f64,
    pub bin: f64,
    pub total: f64,
    pub correct: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub p_drop: f64,
    pub cls: f64,
    pub align: f64,
    pub bin: f64,
    pub total: f64,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub warmup_epochs: usize,
    pub epochs: Vec<EpochReport>,
    /// Training accuracy over the whole run keyed by number of missing modalities.
    pub accuracy_by_missing: BTreeMap<usize, f64>,
    pub backbone_params: usize,
    pub gate_params: usize,
    pub gate_param_ratio: f64,
    /// Per-inference FLOPs of the trained model with every modality present.
    pub flops: FlopBreakdown,
    /// Serialized checkpoint size of the trained model.
    pub memory_bytes: usize,
    /// Batches on which observer transparency and gradient isolation were asserted.
    pub verified_batches: usize,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Backbone,
    pub gates: GateSet,
    backbone_opt: Sgd,
    gate_opt: Sgd,
    /// Moving-average saliency targets keyed by the exact mask.
    targets: BTreeMap<ModalityMask, Vec<Vec<f64>>>,
    pub verified_batches: usize,
}

fn bit_identical(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

impl Trainer {
    pub fn new(model: Backbone, gates: GateSet, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if gates.n_modalities != model.config.n_modalities || gates.layers.len() != model.layout().layers.len() {
            return Err(Error::Structure("gate set does not match the backbone layout".into()));
        }
        Ok(Trainer {
            backbone_opt: Sgd::new(cfg.lr_backbone, cfg.momentum),
            gate_opt: Sgd::new(cfg.lr_gates, cfg.momentum),
            cfg,
            model,
            gates,
            targets: BTreeMap::new(),
            verified_batches: 0,
        })
    }

    pub fn gates_active(&self, epoch: usize) -> bool {
        epoch >= self.cfg.warmup() && self.cfg.alpha > 0.0
    }

    /// One optimization step on `batch` under `mask`.
    pub fn train_step(&mut self, batch: &[&Sample], mask: &ModalityMask, epoch: usize) -> Result<StepLosses> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let verify = self.cfg.verify_observer;
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();

        // Task tape: backbone forward (gates observing when verifying) and L_cls.
        let mut g = Graph::new();
        let opts = ForwardOptions { taps: true, observer: verify.then_some(&self.gates), keep_attention: false };
        let (logits, _) = self.model.forward_batch(&mut g, batch, mask, &opts)?;
        let cls = g.cross_entropy(logits, &labels)?;
        let cls_value = g.value(cls).data()[0];
        if !cls_value.is_finite() {
            return Err(Error::Diverged(format!("classification loss {cls_value} at epoch {epoch}")));
        }
        let logit_values = g.value(logits).clone();
        let correct = (0..batch.len()).filter(|&i| argmax(logit_values.row(i)) == labels[i]).count();
        if verify {
            let mut plain = Graph::new();
            let (free, _) = self.model.forward_batch(&mut plain, batch, mask, &ForwardOptions::default())?;
            if !bit_identical(plain.value(free), &logit_values) {
                return Err(Error::Contract("attached gates changed the backbone logits".into()));
            }
        }
        g.backward(cls)?;
        if verify && g.param_grads(&self.gates.store)?.iter().any(|(_, gr)| gr.iter().any(|&v| v != 0.0)) {
            return Err(Error::Contract("classification loss reached gate parameters".into()));
        }
        self.model.store.accumulate_grads(&g)?;
        let taps = g.collect_taps()?;
        drop(g);

        let mut out = StepLosses { cls: cls_value, total: cls_value, correct, ..Default::default() };
        if self.gates_active(epoch) {
            let layout = self.model.layout();
            let fresh = layer_targets(&layout, &taps, batch.len())?;
            let decay = self.cfg.ema_decay;
            let targets = self
                .targets
                .entry(mask.clone())
                .and_modify(|t| {
                    for (old, new) in t.iter_mut().zip(&fresh) {
                        old.iter_mut().zip(new).for_each(|(o, n)| *o = decay * *o + (1.0 - decay) * n);
                    }
                })
                .or_insert(fresh)
                .clone();

            let mut gt = Graph::new();
            let (align, bin, gate_loss) = self.gate_objective(&mut gt, mask, &targets)?;
            out.align = gt.value(align).data()[0];
            out.bin = gt.value(bin).data()[0];
            out.total += gt.value(gate_loss).data()[0];
            gt.backward(gate_loss)?;
            if verify {
                self.check_isolation(batch, mask, &targets)?;
            }
            self.gates.store.accumulate_grads(&gt)?;
            self.gate_opt.step(&mut self.gates.store);
        } else {
            self.gates.store.zero_grad();
        }
        if verify {
            self.verified_batches += 1;
        }
        self.backbone_opt.step(&mut self.model.store);
        Ok(out)
    }

    /// `α·Σ_ℓ (L_align + λ_bin·L_bin)` on `g`; returns (Σ align, Σ bin, total).
    fn gate_objective(
        &self,
        g: &mut Graph,
        mask: &ModalityMask,
        targets: &[Vec<f64>],
    ) -> Result<(Var, Var, Var)> {
        let mut acc: Option<(Var, Var)> = None;
        for (l, target) in targets.iter().enumerate() {
            let gv = self.gates.forward_on(g, l, mask)?;
            let t = g.constant(Tensor::new(vec![1, target.len()], target.clone())?);
            let a = g.mse(gv, t)?;
            let b = binarization_loss_on(g, gv)?;
            acc = Some(match acc {
                Some((sa, sb)) => (g.add(sa, a)?, g.add(sb, b)?),
                None => (a, b),
            });
        }
        let (align, bin) = acc.ok_or_else(|| Error::Structure("model has no prunable layers".into()))?;
        let weighted_bin = g.scale(bin, self.cfg.lambda_bin);
        let inner = g.add(align, weighted_bin)?;
        let total = g.scale(inner, self.cfg.alpha);
        Ok((align, bin, total))
    }

    /// Builds the gate objective on the same tape as a full backbone forward
    /// and asserts that no backbone parameter receives a nonzero gradient.
    fn check_isolation(&self, batch: &[&Sample], mask: &ModalityMask, targets: &[Vec<f64>]) -> Result<()> {
        let mut g = Graph::new();
        let opts = ForwardOptions { taps: false, observer: Some(&self.gates), keep_attention: false };
        self.model.forward_batch(&mut g, batch, mask, &opts)?;
        let (_, _, loss) = self.gate_objective(&mut g, mask, targets)?;
        g.backward(loss)?;
        if g.param_grads(&self.model.store)?.iter().any(|(_, gr)| gr.iter().any(|&v| v != 0.0)) {
            return Err(Error::Contract("gate losses produced backbone gradients".into()));
        }
        Ok(())
    }
}

pub struct TrainOutcome {
    pub model: Backbone,
    pub gates: GateSet,
    pub report: RunReport,
    /// Masks the gates were fitted on, ascending.
    pub seen_masks: Vec<ModalityMask>,
}

/// Trains a fresh backbone and gate set on `data`; deterministic in `tcfg.seed`.
pub fn train(data: &[Sample], bcfg: &BackboneConfig, tcfg: &TrainConfig) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    tcfg.validate()?;
    let model = Backbone::new(bcfg.clone(), derive_seed(tcfg.seed, &[1]))?;
    let gates = GateSet::new(&model.layout(), bcfg.n_modalities, derive_seed(tcfg.seed, &[2]))?;
    train_from(model, gates, data, tcfg)
}

/// Continues training given initialized model and gates.
pub fn train_from(model: Backbone, gates: GateSet, data: &[Sample], tcfg: &TrainConfig) -> Result<TrainOutcome> {
    let m = model.config.n_modalities;
    let mut trainer = Trainer::new(model, gates, tcfg.clone())?;
    let mut rng = seeded(derive_seed(tcfg.seed, &[3]));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epochs = Vec::with_capacity(tcfg.epochs);
    let mut by_missing: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut initial_loss: Option<f64> = None;
    for epoch in 0..tcfg.epochs {
        order.shuffle(&mut rng);
        let p = drop_probability(epoch, tcfg);
        let mut sums = StepLosses::default();
        let mut batches = 0usize;
        for chunk in order.chunks(tcfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let mask = sample_mask(p, m, &mut rng);
            let s = trainer.train_step(&batch, &mask, epoch)?;
            let init = *initial_loss.get_or_insert(s.cls);
            if s.cls > 1e3 * init.max(f64::MIN_POSITIVE) {
                return Err(Error::Diverged(format!("loss {} exceeds 1000× initial {init} at epoch {epoch}", s.cls)));
            }
            let e = by_missing.entry(mask.missing_count()).or_default();
            e.0 += s.correct;
            e.1 += batch.len();
            sums.cls += s.cls;
            sums.align += s.align;
            sums.bin += s.bin;
            sums.total += s.total;
            sums.correct += s.correct;
            batches += 1;
        }
        let nb = batches as f64;
        epochs.push(EpochReport {
            epoch,
            p_drop: p,
            cls: sums.cls / nb,
            align: sums.align / nb,
            bin: sums.bin / nb,
            total: sums.total / nb,
            train_accuracy: sums.correct as f64 / data.len() as f64,
        });
    }
    let backbone_params = trainer.model.param_count();
    let gate_params = trainer.gates.param_count();
    let report = RunReport {
        seed: tcfg.seed,
        backbone: trainer.model.config.clone(),
        train: tcfg.clone(),
        warmup_epochs: tcfg.warmup(),
        epochs,
        accuracy_by_missing: by_missing.into_iter().map(|(k, (c, n))| (k, c as f64 / n as f64)).collect(),
        backbone_params,
        gate_params,
        gate_param_ratio: gate_params as f64 / backbone_params as f64,
        flops: model_flops(&trainer.model, None),
        memory_bytes: model_memory(&trainer.model)?,
        verified_batches: trainer.verified_batches,
    };
    let seen_masks = trainer.targets.keys().cloned().collect();
    Ok(TrainOutcome { model: trainer.model, gates: trainer.gates, report, seen_masks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_shape() {
        let cfg = TrainConfig { epochs: 11, warmup_epochs: Some(2), p_max: 0.4, ..Default::default() };
        assert_eq!(drop_probability(0, &cfg), 0.0);
        assert_eq!(drop_probability(2, &cfg), 0.0);
        assert!((drop_probability(6, &cfg) - 0.2).abs() < 1e-15);
        assert_eq!(drop_probability(10, &cfg), 0.4);
        let default = TrainConfig::default();
        assert_eq!(default.warmup(), 4);
    }

    #[test]
    fn warmup_masks_are_full() {
        let cfg = TrainConfig { epochs: 10, ..Default::default() };
        let mut rng = seeded(1);
        for t in 0..cfg.warmup() {
            assert_eq!(curriculum_mask(t, &cfg, 6, &mut rng), ModalityMask::all_present(6));
        }
    }

    #[test]
    fn high_drop_never_yields_empty_mask() {
        let mut rng = seeded(2);
        for _ in 0..1000 {
            assert!(sample_mask(0.95, 3, &mut rng).any_present());
        }
    }

    #[test]
    fn sgd_momentum_update() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        let mut opt = Sgd::new(0.1, 0.9);
        for _ in 0..2 {
            store.get_mut(id).accumulate_grad(&[1.0]).unwrap();
            opt.step(&mut store);
        }
        // v1 = 1, v2 = 1.9; w = 1 − 0.1 − 0.19
        assert!((store.get(id).data()[0] - 0.71).abs() < 1e-15);
        assert!(store.get(id).grad().is_none_or(|g| g == [0.0]));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { p_max: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 2, warmup_epochs: Some(2), ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
