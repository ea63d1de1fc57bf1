//! Dense multi-head attention and sparse grouped-query attention.
//!
//! Query heads are partitioned into key/value groups; every head in a group
//! shares that group's K/V projections. In sparse mode each head attends only
//! with its `U = min(T, c·⌈ln T⌉)` spikiest queries (max-minus-mean score over
//! the full score row); the remaining rows receive the mean of the group's
//! values, which is exactly uniform attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::normal_tensor;
use crate::tensor::Tensor;

pub const DEFAULT_SPARSITY_CONST: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub n_heads: usize,
    pub n_kv_groups: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub seq_len: usize,
    pub sparsity_const: usize,
    pub sparse_enabled: bool,
}

impl AttentionConfig {
    pub fn new(n_heads: usize, n_kv_groups: usize, model_dim: usize, seq_len: usize) -> Result<Self> {
        if n_heads == 0 || !model_dim.is_multiple_of(n_heads) {
            return Err(Error::Config(format!("model_dim {model_dim} not divisible by {n_heads} heads")));
        }
        let cfg = AttentionConfig {
            n_heads,
            n_kv_groups,
            model_dim,
            head_dim: model_dim / n_heads,
            seq_len,
            sparsity_const: DEFAULT_SPARSITY_CONST,
            sparse_enabled: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dense(mut self) -> Self {
        self.sparse_enabled = false;
        self
    }

    pub fn with_sparsity_const(mut self, c: usize) -> Self {
        self.sparsity_const = c;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.n_kv_groups == 0 || self.seq_len == 0 || self.head_dim == 0 {
            return Err(Error::Config("attention dimensions must be positive".into()));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_groups) {
            return Err(Error::Config(format!(
                "{} query heads cannot be split into {} groups",
                self.n_heads, self.n_kv_groups
            )));
        }
        if self.model_dim != self.n_heads * self.head_dim {
            return Err(Error::Config(format!(
                "model_dim {} != {} heads × {}",
                self.model_dim, self.n_heads, self.head_dim
            )));
        }
        if self.sparsity_const == 0 {
            return Err(Error::Config("sparsity constant must be positive".into()));
        }
        Ok(())
    }

    pub fn heads_per_group(&self) -> usize {
        self.n_heads / self.n_kv_groups
    }

    /// Number of attended queries per head: `U` when sparse, `T` when dense.
    pub fn effective_queries(&self) -> usize {
        if self.sparse_enabled {
            top_u(self.seq_len, self.sparsity_const)
        } else {
            self.seq_len
        }
    }
}

/// `min(T, c·⌈ln T⌉)`, clamped to at least one query.
pub fn top_u(seq_len: usize, c: usize) -> usize {
    let logs = (seq_len as f64).ln().ceil() as usize;
    (c * logs).clamp(1, seq_len.max(1))
}

/// Projection weights for one attention layer.
///
/// `wo` is stored as one `d_k×D` row block per head, so removing a head drops
/// its query block and its output rows together.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub wq: Vec<Tensor>,
    pub wo: Vec<Tensor>,
    pub head_group: Vec<usize>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
}

impl AttentionWeights {
    pub fn random(cfg: &AttentionConfig, rng: &mut impl Rng) -> Self {
        let (d, dk) = (cfg.model_dim, cfg.head_dim);
        let std_in = 1.0 / (d as f64).sqrt();
        let std_out = 1.0 / ((cfg.n_heads * dk) as f64).sqrt();
        let hpg = cfg.heads_per_group();
        AttentionWeights {
            wq: (0..cfg.n_heads).map(|_| normal_tensor(&[d, dk], std_in, rng)).collect(),
            wo: (0..cfg.n_heads).map(|_| normal_tensor(&[dk, d], std_out, rng)).collect(),
            head_group: (0..cfg.n_heads).map(|h| h / hpg).collect(),
            wk: (0..cfg.n_kv_groups).map(|_| normal_tensor(&[d, dk], std_in, rng)).collect(),
            wv: (0..cfg.n_kv_groups).map(|_| normal_tensor(&[d, dk], std_in, rng)).collect(),
        }
    }

    /// Scalar count of the shared K and V projections.
    pub fn kv_param_count(&self) -> usize {
        self.wk.iter().chain(&self.wv).map(Tensor::numel).sum()
    }

    pub fn bind(&self, g: &mut Graph) -> AttentionVars {
        AttentionVars {
            heads: self
                .wq
                .iter()
                .zip(&self.wo)
                .zip(&self.head_group)
                .map(|((q, o), &group)| HeadVars { wq: g.leaf(q.clone()), wo: g.leaf(o.clone()), group })
                .collect(),
            groups: self
                .wk
                .iter()
                .zip(&self.wv)
                .map(|(k, v)| GroupVars { wk: g.leaf(k.clone()), wv: g.leaf(v.clone()) })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub wq: Var,
    pub wo: Var,
    pub group: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GroupVars {
    pub wk: Var,
    pub wv: Var,
}

/// Attention weights bound onto a tape.
#[derive(Clone, Debug)]
pub struct AttentionVars {
    pub heads: Vec<HeadVars>,
    pub groups: Vec<GroupVars>,
}

#[derive(Clone, Debug)]
pub struct AttendOutput {
    pub output: Var,
    /// Per-head `T×d_k` outputs before the output projection.
    pub head_outputs: Vec<Var>,
    /// Per-head attention probabilities over the attended rows (`|rows|×T`).
    pub probs: Vec<Var>,
    /// Per-head attended query rows, ascending.
    pub rows: Vec<Vec<usize>>,
}

impl AttendOutput {
    /// Full `T×T` attention matrix of head `h`; unattended rows are uniform.
    pub fn attention_matrix(&self, g: &Graph, h: usize) -> Tensor {
        let p = g.value(self.probs[h]);
        let t = p.shape()[1];
        let mut out = vec![1.0 / t as f64; t * t];
        for (k, &r) in self.rows[h].iter().enumerate() {
            out[r * t..(r + 1) * t].copy_from_slice(p.row(k));
        }
        Tensor::new(vec![t, t], out).expect("square")
    }
}

/// Max-minus-mean spikiness of each query's scaled score row against `k`.
pub fn sparsity_score(q: &Tensor, k: &Tensor) -> Result<Vec<f64>> {
    q.expect_matrix("sparsity_score")?;
    k.expect_matrix("sparsity_score")?;
    let dk = q.shape()[1];
    if k.shape()[1] != dk {
        return Err(shape_err!("query width {dk} vs key width {}", k.shape()[1]));
    }
    let scale = 1.0 / (dk as f64).sqrt();
    let n_keys = k.shape()[0];
    Ok((0..q.shape()[0])
        .map(|t| {
            let qt = q.row(t);
            let (mut max, mut sum) = (f64::NEG_INFINITY, 0.0);
            for j in 0..n_keys {
                let s = qt.iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>() * scale;
                max = max.max(s);
                sum += s;
            }
            max - sum / n_keys as f64
        })
        .collect())
}

/// Indices of the `u` largest scores (lowest index wins ties), ascending.
pub fn top_u_select(scores: &[f64], u: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(u.min(scores.len()));
    order.sort_unstable();
    order
}

/// Grouped attention over `x (T×D)`. Sparse query selection when `sparse`.
pub fn attend(g: &mut Graph, x: Var, w: &AttentionVars, sparse: bool, c: usize) -> Result<AttendOutput> {
    let xv = g.value(x);
    xv.expect_matrix("attention input")?;
    let t = xv.shape()[0];
    if w.heads.is_empty() {
        return Err(shape_err!("attention layer without heads"));
    }
    if let Some(h) = w.heads.iter().find(|h| h.group >= w.groups.len()) {
        return Err(shape_err!("head mapped to group {} of {}", h.group, w.groups.len()));
    }
    let mut kv = Vec::with_capacity(w.groups.len());
    for grp in &w.groups {
        let k = g.matmul(x, grp.wk)?;
        let kt = g.transpose(k)?;
        let v = g.matmul(x, grp.wv)?;
        kv.push((k, kt, v));
    }
    let u = if sparse { top_u(t, c) } else { t };
    let mut head_outputs = Vec::with_capacity(w.heads.len());
    let mut probs = Vec::with_capacity(w.heads.len());
    let mut rows = Vec::with_capacity(w.heads.len());
    for head in &w.heads {
        let (k, kt, v) = kv[head.group];
        let q = g.matmul(x, head.wq)?;
        let dk = g.value(q).shape()[1];
        let (q_sel, sel) = if u < t {
            let scores = sparsity_score(g.value(q), g.value(k))?;
            let sel = top_u_select(&scores, u);
            (g.gather_rows(q, &sel)?, sel)
        } else {
            (q, (0..t).collect())
        };
        let s = g.matmul(q_sel, kt)?;
        let s = g.scale(s, 1.0 / (dk as f64).sqrt());
        let p = g.softmax(s, 1)?;
        let att = g.matmul(p, v)?;
        let out = if u < t {
            let fill = g.mean(v, 0)?;
            g.merge_rows(att, fill, &sel, t)?
        } else {
            att
        };
        head_outputs.push(out);
        probs.push(p);
        rows.push(sel);
    }
    let concat = g.concat_cols(&head_outputs)?;
    let wo_blocks: Vec<Var> = w.heads.iter().map(|h| h.wo).collect();
    let wo = g.concat_rows(&wo_blocks)?;
    let output = g.matmul(concat, wo)?;
    Ok(AttendOutput { output, head_outputs, probs, rows })
}

fn check_input(g: &Graph, x: Var, w: &AttentionVars, cfg: &AttentionConfig) -> Result<()> {
    cfg.validate()?;
    let s = g.value(x).shape();
    if s != [cfg.seq_len, cfg.model_dim] {
        return Err(shape_err!("input {s:?} vs configured {}×{}", cfg.seq_len, cfg.model_dim));
    }
    if w.heads.len() != cfg.n_heads || w.groups.len() != cfg.n_kv_groups {
        return Err(shape_err!(
            "weights hold {} heads / {} groups, config {} / {}",
            w.heads.len(),
            w.groups.len(),
            cfg.n_heads,
            cfg.n_kv_groups
        ));
    }
    Ok(())
}

/// Standard multi-head attention; every head owns its K/V.
pub fn dense_mha(g: &mut Graph, x: Var, w: &AttentionVars, cfg: &AttentionConfig) -> Result<AttendOutput> {
    check_input(g, x, w, cfg)?;
    if cfg.sparse_enabled || cfg.n_kv_groups != cfg.n_heads {
        return Err(Error::Config("dense_mha needs sparse_enabled = false and one group per head".into()));
    }
    let t = cfg.seq_len;
    let mut output: Option<Var> = None;
    let (mut head_outputs, mut probs) = (Vec::new(), Vec::new());
    for head in &w.heads {
        let grp = w.groups[head.group];
        let q = g.matmul(x, head.wq)?;
        let k = g.matmul(x, grp.wk)?;
        let v = g.matmul(x, grp.wv)?;
        let dk = g.value(q).shape()[1];
        let kt = g.transpose(k)?;
        let s = g.matmul(q, kt)?;
        let s = g.scale(s, 1.0 / (dk as f64).sqrt());
        let p = g.softmax(s, 1)?;
        let att = g.matmul(p, v)?;
        let proj = g.matmul(att, head.wo)?;
        output = Some(match output {
            Some(acc) => g.add(acc, proj)?,
            None => proj,
        });
        head_outputs.push(att);
        probs.push(p);
    }
    let output = output.ok_or_else(|| Error::Config("attention needs at least one head".into()))?;
    let rows = vec![(0..t).collect(); w.heads.len()];
    Ok(AttendOutput { output, head_outputs, probs, rows })
}

/// Sparse grouped-query attention.
pub fn sentry_attend(g: &mut Graph, x: Var, w: &AttentionVars, cfg: &AttentionConfig) -> Result<AttendOutput> {
    check_input(g, x, w, cfg)?;
    if !cfg.sparse_enabled {
        return Err(Error::Config("sentry_attend needs sparse_enabled = true".into()));
    }
    attend(g, x, w, true, cfg.sparsity_const)
}

/// Forward FLOPs of one attention layer, counting each multiply-add as two:
///
/// ```text
/// 2·T·D·H_q·d_k            query projection
/// 2·2·T·D·H_k·d_k          shared key/value projections
/// 2·H_q·U_eff·T·d_k        scores
/// 2·H_q·U_eff·T·d_k        value mix
/// 2·T·H_q·d_k·D            output projection
/// ```
///
/// `U_eff` is `T` when dense. The query selection pass is counted as selection
/// overhead, not attention, and is excluded together with softmax and the
/// context-vector mean, which are not multiply-adds.
pub fn attention_flops(cfg: &AttentionConfig) -> f64 {
    grouped_attention_flops(
        cfg.seq_len,
        cfg.model_dim,
        cfg.head_dim,
        cfg.n_heads,
        cfg.n_kv_groups,
        cfg.effective_queries(),
    )
}

/// [`attention_flops`] for an arbitrary (possibly pruned) head/group count,
/// with `u` attended query rows per head.
pub fn grouped_attention_flops(t: usize, d: usize, dk: usize, hq: usize, hk: usize, u: usize) -> f64 {
    let (t, d, dk, hq, hk, u) = (t as f64, d as f64, dk as f64, hq as f64, hk as f64, u as f64);
    let proj = 2.0 * t * d * hq * dk + 4.0 * t * d * hk * dk + 2.0 * t * hq * dk * d;
    proj + 4.0 * hq * u * t * dk
}

/// The score and value-mix terms of [`attention_flops`].
pub fn attention_score_mix_flops(cfg: &AttentionConfig) -> f64 {
    let u = cfg.effective_queries() as f64;
    4.0 * cfg.n_heads as f64 * u * cfg.seq_len as f64 * cfg.head_dim as f64
}
