//! Scorer × pruning-ratio × missing-modality sweeps.
//!
//! For every seed a model is trained on that seed's synthetic data. For every
//! missing count `k` a platform mask with `k` absent modalities is drawn, each
//! scorer ranks the units for that mask, and the pruned model is evaluated on
//! the held-out split under the same mask.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, ModalityMask, Sample};
use crate::error::{Error, Result};
use crate::gating::GateSet;
use crate::pruner::{
    materialize, model_flops, model_memory, score_magnitude, score_random, score_sentrygate, score_synflow,
    score_taylor, select_by_budget, Scorer, UnitScores,
};
use crate::rng::{derive_seed, seeded};
use crate::trainer::{train, RunReport, TrainConfig};

use super::data::{generate, Dataset, SyntheticSpec};
use super::eval::{accuracy_with_mask, random_missing_mask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepGrid {
    pub ratios: Vec<f64>,
    pub missing: Vec<usize>,
    pub scorers: Vec<Scorer>,
    pub seeds: Vec<u64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            ratios: vec![0.06, 0.12, 0.17, 0.23],
            missing: vec![0, 1, 2, 4],
            scorers: Scorer::ZERO_SHOT.to_vec(),
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl SweepGrid {
    pub fn validate(&self, n_modalities: usize) -> Result<()> {
        if self.ratios.is_empty() || self.missing.is_empty() || self.scorers.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("sweep grid axes must be nonempty".into()));
        }
        if let Some(r) = self.ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(Error::Config(format!("pruning ratio {r} outside [0, 1)")));
        }
        if let Some(k) = self.missing.iter().find(|&&k| k >= n_modalities) {
            return Err(Error::Config(format!("cannot drop {k} of {n_modalities} modalities")));
        }
        Ok(())
    }
}

/// Everything a sweep needs; one document on disk.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: SyntheticSpec,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub grid: SweepGrid,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.backbone.validate()?;
        self.train.validate()?;
        self.grid.validate(self.backbone.n_modalities)?;
        let (d, b) = (&self.data, &self.backbone);
        if (d.n_modalities, d.seq_len, d.input_dim, d.n_classes) != (b.n_modalities, b.seq_len, b.input_dim, b.n_classes) {
            return Err(Error::Config("data and backbone disagree on modalities, length, input width or classes".into()));
        }
        Ok(())
    }

    /// Data and training configs for one seed of the sweep.
    pub fn for_seed(&self, seed: u64) -> (SyntheticSpec, TrainConfig) {
        (SyntheticSpec { seed, ..self.data.clone() }, TrainConfig { seed, ..self.train.clone() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scorer: Scorer,
    pub ratio: f64,
    pub missing: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub flops: f64,
    pub memory_bytes: usize,
}

/// A trained model with the data it was trained on.
pub struct TrainedRun {
    pub seed: u64,
    pub data: Dataset,
    pub model: Backbone,
    pub gates: GateSet,
    pub report: RunReport,
    pub seen_masks: Vec<ModalityMask>,
}

pub fn train_run(cfg: &ExperimentConfig, seed: u64) -> Result<TrainedRun> {
    let (spec, tcfg) = cfg.for_seed(seed);
    let data = generate(&spec)?;
    let out = train(&data.train, &cfg.backbone, &tcfg)?;
    Ok(TrainedRun { seed, data, model: out.model, gates: out.gates, report: out.report, seen_masks: out.seen_masks })
}

/// Deployment mask with `k` absent modalities for (`seed`, `k`).
pub fn platform_mask(seed: u64, n_modalities: usize, k: usize) -> Result<ModalityMask> {
    random_missing_mask(n_modalities, k, &mut seeded(derive_seed(seed, &[0x706c_6174, k as u64])))
}

/// Scores from `scorer` for pruning toward `mask`. The Taylor teacher uses the
/// training split; all other scorers are data-free.
pub fn score_units(
    scorer: Scorer,
    model: &Backbone,
    gates: &GateSet,
    mask: &ModalityMask,
    train: &[Sample],
    seed: u64,
) -> Result<UnitScores> {
    match scorer {
        Scorer::Sentrygate => score_sentrygate(gates, mask),
        Scorer::Random => Ok(score_random(&model.layout(), derive_seed(seed, &[0x7261_6e64, mask.missing_count() as u64]))),
        Scorer::Magnitude => Ok(score_magnitude(model)),
        Scorer::Synflow => score_synflow(model),
        Scorer::Taylor => score_taylor(model, train, mask, 32),
    }
}

/// All rows for one trained run, in (missing, scorer, ratio) order.
pub fn sweep_run(run: &TrainedRun, grid: &SweepGrid) -> Result<Vec<SweepRow>> {
    let m = run.model.config.n_modalities;
    grid.validate(m)?;
    let layout = run.model.layout();
    let mut rows = Vec::new();
    for &k in &grid.missing {
        let mask = platform_mask(run.seed, m, k)?;
        for &scorer in &grid.scorers {
            let scores = score_units(scorer, &run.model, &run.gates, &mask, &run.data.train, run.seed)?;
            for &ratio in &grid.ratios {
                let plan = select_by_budget(&scores, &layout, ratio)?;
                let pruned = materialize(&run.model, &plan)?;
                rows.push(SweepRow {
                    scorer,
                    ratio,
                    missing: k,
                    seed: run.seed,
                    accuracy: accuracy_with_mask(&pruned, &run.data.test, &mask)?,
                    flops: model_flops(&pruned, None).total,
                    memory_bytes: model_memory(&pruned)?,
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub ratio: f64,
    pub missing: usize,
    /// Mean accuracy over seeds per scorer.
    pub accuracy: BTreeMap<Scorer, f64>,
    pub best: Scorer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub cells: Vec<CellSummary>,
    /// Mean accuracy per scorer over the whole grid.
    pub overall: BTreeMap<Scorer, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub summary: SweepSummary,
    pub runs: Vec<RunReport>,
}

pub fn summarize(rows: &[SweepRow]) -> SweepSummary {
    let mut cells: BTreeMap<(u64, usize), BTreeMap<Scorer, Vec<f64>>> = BTreeMap::new();
    let mut overall: BTreeMap<Scorer, Vec<f64>> = BTreeMap::new();
    for r in rows {
        cells.entry((r.ratio.to_bits(), r.missing)).or_default().entry(r.scorer).or_default().push(r.accuracy);
        overall.entry(r.scorer).or_default().push(r.accuracy);
    }
    let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let cells = cells
        .into_iter()
        .map(|((ratio, missing), per)| {
            let accuracy: BTreeMap<Scorer, f64> = per.iter().map(|(s, v)| (*s, mean(v))).collect();
            // first scorer in enum order wins ties
            let best = accuracy.iter().fold(None, |b: Option<(Scorer, f64)>, (&s, &a)| match b {
                Some((_, ba)) if ba >= a => b,
                _ => Some((s, a)),
            });
            CellSummary { ratio: f64::from_bits(ratio), missing, accuracy, best: best.expect("nonempty cell").0 }
        })
        .collect();
    SweepSummary { cells, overall: overall.iter().map(|(s, v)| (*s, mean(v))).collect() }
}

/// Trains one model per seed and sweeps the grid over each.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &seed in &cfg.grid.seeds {
        let run = train_run(cfg, seed)?;
        rows.extend(sweep_run(&run, &cfg.grid)?);
        runs.push(run.report);
    }
    let summary = summarize(&rows);
    Ok(SweepReport { rows, summary, runs })
}

pub fn rows_to_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn rows_from_csv(text: &str) -> Result<Vec<SweepRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| Error::Format(e.to_string())))
        .collect()
}
