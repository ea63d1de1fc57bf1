//! Structural surgery: builds a compact model by slicing trained weights.

use std::collections::{HashMap, HashSet};

use crate::backbone::{AttentionLayer, Backbone, Ffn, GroupParams, HeadParams};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

use super::plan::{LayerPlan, PrunePlan};

/// Slicing decisions keyed by source parameter.
#[derive(Default)]
struct Edits {
    replace: HashMap<ParamId, Tensor>,
    remove: HashSet<ParamId>,
}

impl Edits {
    fn attention(&mut self, attn: &AttentionLayer, plan: &LayerPlan) -> Result<AttentionLayer> {
        let LayerPlan::Heads { keep_heads, keep_groups } = plan else {
            return Err(Error::Structure("attention layer paired with a non-head plan".into()));
        };
        let new_group: HashMap<usize, usize> = keep_groups.iter().enumerate().map(|(i, &g)| (g, i)).collect();
        let mut heads = Vec::with_capacity(keep_heads.len());
        for (h, hp) in attn.heads.iter().enumerate() {
            if keep_heads.contains(&h) {
                let group = *new_group
                    .get(&hp.group)
                    .ok_or_else(|| Error::Structure(format!("head {h} kept but its group {} dropped", hp.group)))?;
                heads.push(HeadParams { wq: hp.wq, wo: hp.wo, group });
            } else {
                self.remove.extend([hp.wq, hp.wo]);
            }
        }
        let mut groups = Vec::with_capacity(keep_groups.len());
        for (g, gp) in attn.groups.iter().enumerate() {
            if keep_groups.contains(&g) {
                groups.push(GroupParams { wk: gp.wk, wv: gp.wv });
            } else {
                self.remove.extend([gp.wk, gp.wv]);
            }
        }
        Ok(AttentionLayer { heads, groups, head_dim: attn.head_dim })
    }

    fn ffn(&mut self, store: &ParamStore, f: &Ffn, keep: &[usize]) -> Result<Ffn> {
        let b1 = store.get(f.b1);
        let b1 = Tensor::new(vec![keep.len()], keep.iter().map(|&k| b1.data()[k]).collect())?;
        self.replace.insert(f.w1, store.get(f.w1).select_cols(keep)?);
        self.replace.insert(f.b1, b1);
        self.replace.insert(f.w2, store.get(f.w2).select_rows(keep)?);
        Ok(Ffn { width: keep.len(), ..f.clone() })
    }
}

/// Applies `plan` to `model`. Retained values are copied bit-for-bit; the
/// router, biases of the output side and everything outside pruned units are
/// untouched.
pub fn materialize(model: &Backbone, plan: &PrunePlan) -> Result<Backbone> {
    let layout = model.layout();
    plan.validate(&layout)?;
    let mut edits = Edits::default();
    let mut arch = model.arch.clone();
    let mut layer_plans = plan.layers.iter();
    let mut next = || layer_plans.next().ok_or_else(|| Error::Structure("plan shorter than model".into()));
    for enc in &mut arch.encoders {
        for blk in &mut enc.blocks {
            blk.attn = edits.attention(&blk.attn, next()?)?;
            let LayerPlan::Ffn { keep } = next()? else {
                return Err(Error::Structure("FFN paired with a non-FFN plan".into()));
            };
            blk.ffn = edits.ffn(&model.store, &blk.ffn, keep)?;
        }
    }
    for blk in &mut arch.fusion {
        blk.attn = edits.attention(&blk.attn, next()?)?;
        let LayerPlan::Experts { keep } = next()? else {
            return Err(Error::Structure("MoE paired with a non-expert plan".into()));
        };
        for (expert, k) in blk.moe.experts.iter_mut().zip(keep) {
            *expert = edits.ffn(&model.store, expert, k)?;
        }
    }

    let mut store = ParamStore::new();
    let mut remap = HashMap::new();
    for (id, name, t) in model.store.iter() {
        if edits.remove.contains(&id) {
            continue;
        }
        let t = edits.replace.remove(&id).unwrap_or_else(|| t.clone());
        remap.insert(id, store.add(name, t)?);
    }
    let map = |id: &mut ParamId| -> Result<()> {
        *id = *remap.get(id).ok_or_else(|| Error::Structure(format!("parameter {} removed but referenced", id.0)))?;
        Ok(())
    };
    visit_ids(&mut arch, map)?;
    Ok(Backbone { config: model.config.clone(), arch, store })
}

/// Calls `f` on every parameter id referenced by `arch`.
pub(crate) fn visit_ids(arch: &mut crate::backbone::Architecture, mut f: impl FnMut(&mut ParamId) -> Result<()>) -> Result<()> {
    let attn = |a: &mut AttentionLayer, f: &mut dyn FnMut(&mut ParamId) -> Result<()>| -> Result<()> {
        for h in &mut a.heads {
            f(&mut h.wq)?;
            f(&mut h.wo)?;
        }
        for g in &mut a.groups {
            f(&mut g.wk)?;
            f(&mut g.wv)?;
        }
        Ok(())
    };
    let ffn = |x: &mut Ffn, f: &mut dyn FnMut(&mut ParamId) -> Result<()>| -> Result<()> {
        for id in [&mut x.w1, &mut x.b1, &mut x.w2, &mut x.b2] {
            f(id)?;
        }
        Ok(())
    };
    for enc in &mut arch.encoders {
        f(&mut enc.embed.w)?;
        f(&mut enc.embed.b)?;
        f(&mut enc.missing)?;
        for blk in &mut enc.blocks {
            attn(&mut blk.attn, &mut f)?;
            ffn(&mut blk.ffn, &mut f)?;
        }
    }
    for blk in &mut arch.fusion {
        attn(&mut blk.attn, &mut f)?;
        f(&mut blk.moe.router.w)?;
        f(&mut blk.moe.router.b)?;
        for e in &mut blk.moe.experts {
            ffn(e, &mut f)?;
        }
    }
    f(&mut arch.head.w)?;
    f(&mut arch.head.b)
}
