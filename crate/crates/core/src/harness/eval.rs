//! Accuracy under modality dropout.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, ModalityMask, Sample};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub missing: usize,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Fraction of `samples` classified correctly under a fixed mask.
pub fn accuracy_with_mask(model: &Backbone, samples: &[Sample], mask: &ModalityMask) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("no samples to evaluate".into()));
    }
    let mut hits = 0;
    for s in samples {
        if model.predict(s, mask)? == s.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Uniformly random mask with exactly `k` of `m` modalities absent.
pub fn random_missing_mask(m: usize, k: usize, rng: &mut impl rand::Rng) -> Result<ModalityMask> {
    if k >= m {
        return Err(Error::Input(format!("cannot drop {k} of {m} modalities")));
    }
    Ok(ModalityMask::from_missing(m, &sample(rng, m, k).into_vec()))
}

/// Mean accuracy over `seeds`, dropping `k` modalities per sample at random.
pub fn evaluate(model: &Backbone, samples: &[Sample], k: usize, seeds: &[u64]) -> Result<EvalResult> {
    let m = model.config.n_modalities;
    if k >= m {
        return Err(Error::Input(format!("cannot drop {k} of {m} modalities")));
    }
    if samples.is_empty() || seeds.is_empty() {
        return Err(Error::Input("evaluation needs samples and seeds".into()));
    }
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut rng = seeded(derive_seed(seed, &[k as u64]));
        let mut hits = 0;
        for s in samples {
            let mask = random_missing_mask(m, k, &mut rng)?;
            if model.predict(s, &mask)? == s.label {
                hits += 1;
            }
        }
        per_seed.push(hits as f64 / samples.len() as f64);
    }
    let (mean, std) = mean_std(&per_seed);
    Ok(EvalResult { missing: k, per_seed, mean, std })
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
