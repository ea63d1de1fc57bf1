//! Global budgeted unit selection.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units::{UnitKind, UnitLayer, UnitLayout};

use super::scoring::UnitScores;

/// Retained indices of one unit layer, all ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerPlan {
    Heads { keep_heads: Vec<usize>, keep_groups: Vec<usize> },
    Ffn { keep: Vec<usize> },
    /// Per expert, indices local to that expert's hidden layer.
    Experts { keep: Vec<Vec<usize>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub ratio: f64,
    pub total_units: usize,
    /// Units removed after floors were applied.
    pub dropped_units: usize,
    /// Units the budget dropped but a per-layer floor put back.
    pub floor_restored: usize,
    pub layers: Vec<LayerPlan>,
}

fn groups_of(head_group: &[usize], heads: &[usize]) -> Vec<usize> {
    heads.iter().map(|&h| head_group[h]).collect::<BTreeSet<_>>().into_iter().collect()
}

fn layer_from_mask(ul: &UnitLayer, keep: &[bool]) -> LayerPlan {
    let kept = |r: std::ops::Range<usize>| r.filter(|&i| keep[i]).collect::<Vec<_>>();
    match &ul.kind {
        UnitKind::Heads { head_group, .. } => {
            let keep_heads = kept(0..ul.n_units);
            LayerPlan::Heads { keep_groups: groups_of(head_group, &keep_heads), keep_heads }
        }
        UnitKind::Ffn => LayerPlan::Ffn { keep: kept(0..ul.n_units) },
        UnitKind::Experts { widths } => {
            let mut start = 0;
            let keep = widths
                .iter()
                .map(|&w| {
                    let k = kept(start..start + w).into_iter().map(|i| i - start).collect();
                    start += w;
                    k
                })
                .collect();
            LayerPlan::Experts { keep }
        }
    }
}

impl PrunePlan {
    pub fn identity(layout: &UnitLayout) -> Self {
        let layers = layout.layers.iter().map(|ul| layer_from_mask(ul, &vec![true; ul.n_units])).collect();
        PrunePlan { ratio: 0.0, total_units: layout.total_units(), dropped_units: 0, floor_restored: 0, layers }
    }

    pub fn retained_units(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerPlan::Heads { keep_heads, .. } => keep_heads.len(),
                LayerPlan::Ffn { keep } => keep.len(),
                LayerPlan::Experts { keep } => keep.iter().map(Vec::len).sum(),
            })
            .sum()
    }

    /// Checks index ranges, ordering, GQA consistency and per-layer floors.
    pub fn validate(&self, layout: &UnitLayout) -> Result<()> {
        if self.layers.len() != layout.layers.len() {
            return Err(Error::Structure(format!("plan has {} layers, model {}", self.layers.len(), layout.layers.len())));
        }
        let ascending = |v: &[usize], n: usize| v.windows(2).all(|w| w[0] < w[1]) && v.iter().all(|&i| i < n);
        for (l, (plan, ul)) in self.layers.iter().zip(&layout.layers).enumerate() {
            let bad = |what: &str| Err(Error::Structure(format!("layer {} ({}): {what}", l, ul.label())));
            match (plan, &ul.kind) {
                (LayerPlan::Heads { keep_heads, keep_groups }, UnitKind::Heads { head_group, n_groups }) => {
                    if !ascending(keep_heads, ul.n_units) || !ascending(keep_groups, *n_groups) {
                        return bad("head or group indices out of range or unsorted");
                    }
                    if keep_heads.is_empty() {
                        return bad("no head retained");
                    }
                    if groups_of(head_group, keep_heads) != *keep_groups {
                        return bad("retained groups differ from the groups of retained heads");
                    }
                }
                (LayerPlan::Ffn { keep }, UnitKind::Ffn) => {
                    if !ascending(keep, ul.n_units) {
                        return bad("channel indices out of range or unsorted");
                    }
                    if keep.is_empty() {
                        return bad("no channel retained");
                    }
                }
                (LayerPlan::Experts { keep }, UnitKind::Experts { widths }) => {
                    if keep.len() != widths.len() {
                        return bad("expert count differs");
                    }
                    for (k, &w) in keep.iter().zip(widths) {
                        if !ascending(k, w) {
                            return bad("expert channel indices out of range or unsorted");
                        }
                        if k.is_empty() {
                            return bad("an expert lost every channel");
                        }
                    }
                }
                _ => return bad("plan kind does not match the unit kind"),
            }
        }
        Ok(())
    }
}

/// Drops the `⌊ρ·N⌋` lowest-scoring units globally, then applies per-layer
/// floors and derives the retained K/V groups from the retained heads.
///
/// Ordering is by score, with ties resolved so that lower indices are kept.
pub fn select_by_budget(scores: &UnitScores, layout: &UnitLayout, ratio: f64) -> Result<PrunePlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Input(format!("pruning ratio {ratio} outside [0, 1)")));
    }
    scores.check(layout)?;
    let flat = scores.flat();
    let n = flat.len();
    let n_drop = (ratio * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| flat[a].total_cmp(&flat[b]).then(b.cmp(&a)));
    let mut keep = vec![true; n];
    for &i in &order[..n_drop] {
        keep[i] = false;
    }

    let mut restored = 0;
    let offsets = layout.offsets();
    for (ul, &off) in layout.layers.iter().zip(&offsets) {
        // every head layer, FFN, and expert must keep at least one unit
        let spans: Vec<(usize, usize)> = match &ul.kind {
            UnitKind::Experts { widths } => (0..widths.len()).filter_map(|e| ul.expert_range(e)).collect(),
            _ => vec![(0, ul.n_units)],
        };
        for (a, b) in spans {
            let range = off + a..off + b;
            if range.clone().all(|i| !keep[i]) {
                let best = range.fold(off + a, |best, i| if flat[i] > flat[best] { i } else { best });
                keep[best] = true;
                restored += 1;
            }
        }
    }

    let layers = layout
        .layers
        .iter()
        .zip(&offsets)
        .map(|(ul, &off)| layer_from_mask(ul, &keep[off..off + ul.n_units]))
        .collect();
    let plan = PrunePlan {
        ratio,
        total_units: n,
        dropped_units: keep.iter().filter(|k| !**k).count(),
        floor_restored: restored,
        layers,
    };
    plan.validate(layout)?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruner::scoring::Scorer;
    use crate::units::{Site, Stack};

    fn ffn_layout(n: usize) -> UnitLayout {
        UnitLayout {
            layers: vec![UnitLayer {
                site: Site::FfnChannel,
                stack: Stack::Modality(0),
                block: 0,
                n_units: n,
                tokens: 1,
                kind: UnitKind::Ffn,
            }],
        }
    }

    fn scores(layers: Vec<Vec<f64>>) -> UnitScores {
        UnitScores { scorer: Scorer::Random, layers }
    }

    #[test]
    fn quantile_example() {
        let plan = select_by_budget(&scores(vec![vec![0.1, 0.2, 0.9, 0.95]]), &ffn_layout(4), 0.5).unwrap();
        assert_eq!(plan.layers[0], LayerPlan::Ffn { keep: vec![2, 3] });
    }

    #[test]
    fn zero_ratio_is_identity() {
        let layout = ffn_layout(5);
        let plan = select_by_budget(&scores(vec![vec![0.3; 5]]), &layout, 0.0).unwrap();
        assert_eq!(plan, PrunePlan::identity(&layout));
    }

    #[test]
    fn ties_keep_lower_indices() {
        let plan = select_by_budget(&scores(vec![vec![0.5; 4]]), &ffn_layout(4), 0.5).unwrap();
        assert_eq!(plan.layers[0], LayerPlan::Ffn { keep: vec![0, 1] });
    }

    #[test]
    fn floors_and_group_repair() {
        let layout = UnitLayout {
            layers: vec![
                UnitLayer {
                    site: Site::AttentionHead,
                    stack: Stack::Fusion,
                    block: 0,
                    n_units: 4,
                    tokens: 1,
                    kind: UnitKind::Heads { head_group: vec![0, 0, 1, 1], n_groups: 2 },
                },
                UnitLayer {
                    site: Site::ExpertChannel,
                    stack: Stack::Fusion,
                    block: 0,
                    n_units: 4,
                    tokens: 1,
                    kind: UnitKind::Experts { widths: vec![2, 2] },
                },
            ],
        };
        let s = scores(vec![vec![0.0, 0.1, 0.05, 0.02], vec![0.9, 0.8, 0.01, 0.03]]);
        let plan = select_by_budget(&s, &layout, 0.75).unwrap();
        assert_eq!(plan.layers[0], LayerPlan::Heads { keep_heads: vec![1], keep_groups: vec![0] });
        assert_eq!(plan.layers[1], LayerPlan::Experts { keep: vec![vec![0, 1], vec![1]] });
        assert_eq!(plan.floor_restored, 2);
        assert!(select_by_budget(&s, &layout, 1.0).is_err());
        assert!(select_by_budget(&s, &layout, -0.1).is_err());
    }

    #[test]
    fn wrong_shape_scores_rejected() {
        assert!(select_by_budget(&scores(vec![vec![0.1; 3]]), &ffn_layout(4), 0.5).is_err());
        assert!(select_by_budget(&scores(vec![vec![f64::NAN; 4]]), &ffn_layout(4), 0.5).is_err());
    }
}
