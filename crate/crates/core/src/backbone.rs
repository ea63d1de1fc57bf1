//! Reference multimodal classifier.
//!
//! Each modality stream is embedded and run through its own encoder stack
//! (sparse grouped-query attention + FFN, pre-norm residual). Absent
//! modalities are replaced by a learned missing-token stream. The streams are
//! concatenated along time and fused by blocks of attention + sparse MoE FFN,
//! then mean-pooled into a linear classification head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::attention::{attend, AttendOutput, AttentionConfig, AttentionVars, GroupVars, HeadVars};
use crate::error::{shape_err, Error, Result};
use crate::gating::GateSet;
use crate::graph::{Graph, TapId, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::{normal_tensor, seeded};
use crate::tensor::Tensor;
use crate::units::{Site, Stack, UnitKind, UnitLayer, UnitLayout};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub n_modalities: usize,
    pub seq_len: usize,
    pub input_dim: usize,
    pub model_dim: usize,
    pub encoder_depth: usize,
    pub fusion_depth: usize,
    pub ffn_dim: usize,
    pub expert_dim: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub n_classes: usize,
    pub n_heads: usize,
    pub n_kv_groups: usize,
    pub sparsity_const: usize,
    pub sparse_attention: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            n_modalities: 6,
            seq_len: 16,
            input_dim: 3,
            model_dim: 16,
            encoder_depth: 1,
            fusion_depth: 1,
            ffn_dim: 4,
            expert_dim: 4,
            n_experts: 4,
            top_k: 2,
            n_classes: 4,
            n_heads: 8,
            n_kv_groups: 4,
            sparsity_const: 5,
            sparse_attention: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_modalities,
            self.seq_len,
            self.input_dim,
            self.model_dim,
            self.ffn_dim,
            self.expert_dim,
            self.n_experts,
            self.top_k,
            self.n_classes,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("backbone dimensions must be positive".into()));
        }
        if self.top_k > self.n_experts {
            return Err(Error::Config(format!("top_k {} exceeds {} experts", self.top_k, self.n_experts)));
        }
        self.attention(self.seq_len)?;
        Ok(())
    }

    /// Attention config for a stack running over `tokens` positions.
    pub fn attention(&self, tokens: usize) -> Result<AttentionConfig> {
        let mut cfg = AttentionConfig::new(self.n_heads, self.n_kv_groups, self.model_dim, tokens)?
            .with_sparsity_const(self.sparsity_const);
        cfg.sparse_enabled = self.sparse_attention;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn fusion_tokens(&self) -> usize {
        self.n_modalities * self.seq_len
    }
}

/// Per-modality availability, `true` = present.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModalityMask(pub Vec<bool>);

impl ModalityMask {
    pub fn all_present(m: usize) -> Self {
        ModalityMask(vec![true; m])
    }

    pub fn from_missing(m: usize, missing: &[usize]) -> Self {
        let mut bits = vec![true; m];
        for &j in missing {
            bits[j] = false;
        }
        ModalityMask(bits)
    }

    /// Every mask with at least one modality present, in counting order.
    pub fn all_nonempty(m: usize) -> Vec<Self> {
        (1u64..1 << m).map(|b| ModalityMask((0..m).map(|j| b >> j & 1 == 1).collect())).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn present(&self, j: usize) -> bool {
        self.0[j]
    }

    pub fn missing_count(&self) -> usize {
        self.0.iter().filter(|b| !**b).count()
    }

    pub fn any_present(&self) -> bool {
        self.0.iter().any(|&b| b)
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Bitstring such as `110111`, modality 0 first.
    pub fn bits(&self) -> String {
        self.0.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn parse(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                _ => Err(Error::Input(format!("mask {s:?} must contain only 0 and 1"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(ModalityMask)
    }

    pub fn check_len(&self, m: usize) -> Result<()> {
        if self.len() != m {
            return Err(Error::Input(format!("mask of length {} for {m} modalities", self.len())));
        }
        Ok(())
    }
}

/// One multimodal window: `streams[j]` is `T×d_in`, `None` when not recorded.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub streams: Vec<Option<Tensor>>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub wq: ParamId,
    pub wo: ParamId,
    pub group: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupParams {
    pub wk: ParamId,
    pub wv: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionLayer {
    pub heads: Vec<HeadParams>,
    pub groups: Vec<GroupParams>,
    pub head_dim: usize,
}

/// Two-layer GELU feed-forward: `W1 (D×h)`, `W2 (h×D)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ffn {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeFfn {
    pub router: Linear,
    pub experts: Vec<Ffn>,
    pub top_k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderBlock {
    pub attn: AttentionLayer,
    pub ffn: Ffn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionBlock {
    pub attn: AttentionLayer,
    pub moe: MoeFfn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityEncoder {
    pub embed: Linear,
    pub missing: ParamId,
    pub blocks: Vec<EncoderBlock>,
}

/// Parameter wiring of a (possibly pruned) backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub encoders: Vec<ModalityEncoder>,
    pub fusion: Vec<FusionBlock>,
    pub head: Linear,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub arch: Architecture,
    pub store: ParamStore,
}

/// Switches for a forward pass.
#[derive(Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    /// Register an activation tap on every prunable unit.
    pub taps: bool,
    /// Evaluate these gates alongside the forward pass without applying them.
    pub observer: Option<&'a GateSet>,
    /// Keep per-layer attention outputs for export.
    pub keep_attention: bool,
}

/// Side products of a forward pass.
#[derive(Default)]
pub struct Trace {
    /// `(attention layer index, output)`; index counts modality stacks first.
    pub attention: Vec<(usize, AttendOutput)>,
    /// `(unit layer index, gate values)` when an observer is attached.
    pub gate_outputs: Vec<(usize, Var)>,
}

pub struct SampleOutput {
    pub logits: Var,
    pub trace: Trace,
}

/// Fixed sinusoidal position signal, `T×D`.
pub fn positional_encoding(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![t, d], data).expect("shape")
}

struct Builder<'r, R: Rng> {
    store: ParamStore,
    rng: &'r mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> Result<ParamId> {
        let t = normal_tensor(shape, std, self.rng);
        self.store.add(name, t)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> Result<ParamId> {
        self.store.add(name, Tensor::zeros(shape))
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        Ok(Linear {
            w: self.normal(format!("{prefix}.w"), &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())?,
            b: self.zeros(format!("{prefix}.b"), &[fan_out])?,
        })
    }

    fn ffn(&mut self, prefix: &str, d: usize, h: usize) -> Result<Ffn> {
        Ok(Ffn {
            w1: self.normal(format!("{prefix}.w1"), &[d, h], 1.0 / (d as f64).sqrt())?,
            b1: self.zeros(format!("{prefix}.b1"), &[h])?,
            w2: self.normal(format!("{prefix}.w2"), &[h, d], 1.0 / (h as f64).sqrt())?,
            b2: self.zeros(format!("{prefix}.b2"), &[d])?,
            width: h,
        })
    }

    fn attention(&mut self, prefix: &str, cfg: &AttentionConfig) -> Result<AttentionLayer> {
        let (d, dk) = (cfg.model_dim, cfg.head_dim);
        let std_in = 1.0 / (d as f64).sqrt();
        let std_out = 1.0 / ((cfg.n_heads * dk) as f64).sqrt();
        let hpg = cfg.heads_per_group();
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            heads.push(HeadParams {
                wq: self.normal(format!("{prefix}.head.{h}.wq"), &[d, dk], std_in)?,
                wo: self.normal(format!("{prefix}.head.{h}.wo"), &[dk, d], std_out)?,
                group: h / hpg,
            });
        }
        let mut groups = Vec::with_capacity(cfg.n_kv_groups);
        for k in 0..cfg.n_kv_groups {
            groups.push(GroupParams {
                wk: self.normal(format!("{prefix}.group.{k}.wk"), &[d, dk], std_in)?,
                wv: self.normal(format!("{prefix}.group.{k}.wv"), &[d, dk], std_in)?,
            });
        }
        Ok(AttentionLayer { heads, groups, head_dim: dk })
    }
}

impl Backbone {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut b = Builder { store: ParamStore::new(), rng: &mut rng };
        let d = config.model_dim;
        let enc_attn = config.attention(config.seq_len)?;
        let fus_attn = config.attention(config.fusion_tokens())?;
        let mut encoders = Vec::with_capacity(config.n_modalities);
        for j in 0..config.n_modalities {
            let embed = b.linear(&format!("enc.{j}.embed"), config.input_dim, d)?;
            let missing = b.normal(format!("enc.{j}.missing"), &[1, d], 0.5)?;
            let mut blocks = Vec::with_capacity(config.encoder_depth);
            for k in 0..config.encoder_depth {
                let p = format!("enc.{j}.block.{k}");
                blocks.push(EncoderBlock {
                    attn: b.attention(&format!("{p}.attn"), &enc_attn)?,
                    ffn: b.ffn(&format!("{p}.ffn"), d, config.ffn_dim)?,
                });
            }
            encoders.push(ModalityEncoder { embed, missing, blocks });
        }
        let mut fusion = Vec::with_capacity(config.fusion_depth);
        for k in 0..config.fusion_depth {
            let p = format!("fusion.{k}");
            let attn = b.attention(&format!("{p}.attn"), &fus_attn)?;
            let router = b.linear(&format!("{p}.moe.router"), d, config.n_experts)?;
            let experts = (0..config.n_experts)
                .map(|e| b.ffn(&format!("{p}.moe.expert.{e}"), d, config.expert_dim))
                .collect::<Result<Vec<_>>>()?;
            fusion.push(FusionBlock { attn, moe: MoeFfn { router, experts, top_k: config.top_k } });
        }
        let head = b.linear("head", d, config.n_classes)?;
        let store = b.store;
        Ok(Backbone { config, arch: Architecture { encoders, fusion, head }, store })
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// Unit layers in the canonical order: per modality stack its blocks'
    /// heads then FFN channels, then per fusion block its heads then experts.
    pub fn layout(&self) -> UnitLayout {
        let cfg = &self.config;
        let mut layers = Vec::new();
        let heads = |attn: &AttentionLayer, stack, block, tokens| UnitLayer {
            site: Site::AttentionHead,
            stack,
            block,
            n_units: attn.heads.len(),
            tokens,
            kind: UnitKind::Heads {
                head_group: attn.heads.iter().map(|h| h.group).collect(),
                n_groups: attn.groups.len(),
            },
        };
        for (j, enc) in self.arch.encoders.iter().enumerate() {
            for (k, blk) in enc.blocks.iter().enumerate() {
                layers.push(heads(&blk.attn, Stack::Modality(j), k, cfg.seq_len));
                layers.push(UnitLayer {
                    site: Site::FfnChannel,
                    stack: Stack::Modality(j),
                    block: k,
                    n_units: blk.ffn.width,
                    tokens: cfg.seq_len,
                    kind: UnitKind::Ffn,
                });
            }
        }
        for (k, blk) in self.arch.fusion.iter().enumerate() {
            layers.push(heads(&blk.attn, Stack::Fusion, k, cfg.fusion_tokens()));
            let widths: Vec<usize> = blk.moe.experts.iter().map(|e| e.width).collect();
            layers.push(UnitLayer {
                site: Site::ExpertChannel,
                stack: Stack::Fusion,
                block: k,
                n_units: widths.iter().sum(),
                tokens: cfg.fusion_tokens(),
                kind: UnitKind::Experts { widths },
            });
        }
        UnitLayout { layers }
    }

    fn encoder_layer_index(&self, j: usize, block: usize) -> usize {
        2 * (j * self.config.encoder_depth + block)
    }

    fn fusion_layer_index(&self, block: usize) -> usize {
        2 * (self.config.n_modalities * self.config.encoder_depth + block)
    }

    fn bind_attention(&self, g: &mut Graph, layer: &AttentionLayer) -> AttentionVars {
        AttentionVars {
            heads: layer
                .heads
                .iter()
                .map(|h| HeadVars { wq: g.param(&self.store, h.wq), wo: g.param(&self.store, h.wo), group: h.group })
                .collect(),
            groups: layer
                .groups
                .iter()
                .map(|gr| GroupVars { wk: g.param(&self.store, gr.wk), wv: g.param(&self.store, gr.wv) })
                .collect(),
        }
    }

    fn linear(&self, g: &mut Graph, x: Var, l: &Linear) -> Result<Var> {
        let w = g.param(&self.store, l.w);
        let b = g.param(&self.store, l.b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    /// FFN on `x`; returns the output and the post-activation hidden.
    fn ffn(&self, g: &mut Graph, x: Var, f: &Ffn) -> Result<(Var, Var)> {
        let (w1, b1) = (g.param(&self.store, f.w1), g.param(&self.store, f.b1));
        let (w2, b2) = (g.param(&self.store, f.w2), g.param(&self.store, f.b2));
        let h = g.matmul(x, w1)?;
        let h = g.add_bias(h, b1)?;
        let h = g.gelu(h);
        let y = g.matmul(h, w2)?;
        Ok((g.add_bias(y, b2)?, h))
    }

    /// Linear embedding of a raw stream, before the position signal.
    pub fn embed(&self, g: &mut Graph, j: usize, x: &Tensor) -> Result<Var> {
        let cfg = &self.config;
        if x.shape() != [cfg.seq_len, cfg.input_dim] {
            return Err(shape_err!(
                "modality {j} stream {:?}, expected {}×{}",
                x.shape(),
                cfg.seq_len,
                cfg.input_dim
            ));
        }
        let xv = g.constant(x.clone());
        self.linear(g, xv, &self.arch.encoders[j].embed)
    }

    fn observe(&self, g: &mut Graph, opts: &ForwardOptions, layer: usize, mask: &ModalityMask, out: &mut Trace) -> Result<()> {
        if let Some(gates) = opts.observer {
            let v = gates.forward_on(g, layer, mask)?;
            out.gate_outputs.push((layer, v));
        }
        Ok(())
    }

    /// Per-modality encoding: `T×D`, or the broadcast missing token when absent.
    pub fn encode_modality(
        &self,
        g: &mut Graph,
        j: usize,
        stream: Option<&Tensor>,
        present: bool,
        opts: &ForwardOptions,
        mask: &ModalityMask,
        out: &mut Trace,
    ) -> Result<Var> {
        let cfg = &self.config;
        let enc = &self.arch.encoders[j];
        if !present {
            let tok = g.param(&self.store, enc.missing);
            return g.repeat_rows(tok, cfg.seq_len);
        }
        let x = stream.ok_or_else(|| Error::Input(format!("modality {j} flagged present but has no data")))?;
        let e = self.embed(g, j, x)?;
        let pe = g.constant(positional_encoding(cfg.seq_len, cfg.model_dim));
        let mut h = g.add(e, pe)?;
        for (k, blk) in enc.blocks.iter().enumerate() {
            let li = self.encoder_layer_index(j, k);
            h = self.attention_block(g, h, &blk.attn, li, opts, out)?;
            self.observe(g, opts, li, mask, out)?;
            let n = g.layer_norm(h, 1, LN_EPS)?;
            let (y, hidden) = self.ffn(g, n, &blk.ffn)?;
            if opts.taps {
                g.register_tap(hidden, TapId { layer: li + 1, slot: 0 })?;
            }
            self.observe(g, opts, li + 1, mask, out)?;
            h = g.add(h, y)?;
        }
        Ok(h)
    }

    fn attention_block(
        &self,
        g: &mut Graph,
        h: Var,
        layer: &AttentionLayer,
        unit_layer: usize,
        opts: &ForwardOptions,
        out: &mut Trace,
    ) -> Result<Var> {
        let n = g.layer_norm(h, 1, LN_EPS)?;
        let vars = self.bind_attention(g, layer);
        let att = attend(g, n, &vars, self.config.sparse_attention, self.config.sparsity_const)?;
        if opts.taps {
            for (slot, &ho) in att.head_outputs.iter().enumerate() {
                g.register_tap(ho, TapId { layer: unit_layer, slot })?;
            }
        }
        let y = g.add(h, att.output)?;
        if opts.keep_attention {
            out.attention.push((unit_layer / 2, att));
        }
        Ok(y)
    }

    /// Routes each row of `x` to its `top_k` experts by router logit and mixes
    /// their outputs with softmax weights renormalized over the chosen experts.
    pub fn moe_ffn(&self, g: &mut Graph, x: Var, moe: &MoeFfn, tap_layer: Option<usize>) -> Result<Var> {
        let n = g.value(x).shape()[0];
        let logits = self.linear(g, x, &moe.router)?;
        let k = moe.top_k;
        let routes: Vec<Vec<usize>> = (0..n).map(|t| top_experts(g.value(logits).row(t), k)).collect();
        let picks: Vec<(usize, usize)> =
            routes.iter().enumerate().flat_map(|(t, r)| r.iter().map(move |&e| (t, e))).collect();
        let chosen = g.gather_elems(logits, &picks)?;
        let chosen = g.reshape(chosen, &[n, k])?;
        let weights = g.softmax(chosen, 1)?;
        let mut total: Option<Var> = None;
        for (e, expert) in moe.experts.iter().enumerate() {
            let (tokens, slots): (Vec<usize>, Vec<(usize, usize)>) = routes
                .iter()
                .enumerate()
                .filter_map(|(t, r)| r.iter().position(|&x| x == e).map(|s| (t, (t, s))))
                .unzip();
            if tokens.is_empty() {
                continue;
            }
            let xe = g.gather_rows(x, &tokens)?;
            let (ye, hidden) = self.ffn(g, xe, expert)?;
            if let Some(layer) = tap_layer {
                g.register_tap(hidden, TapId { layer, slot: e })?;
            }
            let we = g.gather_elems(weights, &slots)?;
            let ye = g.scale_rows(ye, we)?;
            let ye = g.scatter_add_rows(ye, &tokens, n)?;
            total = Some(match total {
                Some(acc) => g.add(acc, ye)?,
                None => ye,
            });
        }
        total.ok_or_else(|| Error::Structure("no expert received a token".into()))
    }

    /// Fusion encoder, mean pooling and classification head over `M` streams.
    pub fn fuse_and_classify(
        &self,
        g: &mut Graph,
        streams: &[Var],
        opts: &ForwardOptions,
        mask: &ModalityMask,
        out: &mut Trace,
    ) -> Result<Var> {
        if streams.len() != self.config.n_modalities {
            return Err(shape_err!("{} streams for {} modalities", streams.len(), self.config.n_modalities));
        }
        let mut z = g.concat_rows(streams)?;
        for (k, blk) in self.arch.fusion.iter().enumerate() {
            let li = self.fusion_layer_index(k);
            z = self.attention_block(g, z, &blk.attn, li, opts, out)?;
            self.observe(g, opts, li, mask, out)?;
            let n = g.layer_norm(z, 1, LN_EPS)?;
            let y = self.moe_ffn(g, n, &blk.moe, opts.taps.then_some(li + 1))?;
            self.observe(g, opts, li + 1, mask, out)?;
            z = g.add(z, y)?;
        }
        let n = g.layer_norm(z, 1, LN_EPS)?;
        let pooled = g.mean(n, 0)?;
        self.linear(g, pooled, &self.arch.head)
    }

    pub fn forward_sample(
        &self,
        g: &mut Graph,
        sample: &Sample,
        mask: &ModalityMask,
        opts: &ForwardOptions,
    ) -> Result<SampleOutput> {
        mask.check_len(self.config.n_modalities)?;
        if sample.streams.len() != self.config.n_modalities {
            return Err(Error::Input(format!(
                "sample has {} streams, model expects {}",
                sample.streams.len(),
                self.config.n_modalities
            )));
        }
        let mut out = Trace::default();
        let mut streams = Vec::with_capacity(self.config.n_modalities);
        for j in 0..self.config.n_modalities {
            let s = self.encode_modality(g, j, sample.streams[j].as_ref(), mask.present(j), opts, mask, &mut out)?;
            streams.push(s);
        }
        let logits = self.fuse_and_classify(g, &streams, opts, mask, &mut out)?;
        Ok(SampleOutput { logits, trace: out })
    }

    /// Stacks per-sample logits into `B×C`.
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        samples: &[&Sample],
        mask: &ModalityMask,
        opts: &ForwardOptions,
    ) -> Result<(Var, Vec<SampleOutput>)> {
        let outs = samples
            .iter()
            .map(|s| self.forward_sample(g, s, mask, opts))
            .collect::<Result<Vec<_>>>()?;
        let rows: Vec<Var> = outs.iter().map(|o| o.logits).collect();
        Ok((g.concat_rows(&rows)?, outs))
    }

    /// Inference-only logits for one sample.
    pub fn logits(&self, sample: &Sample, mask: &ModalityMask) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let out = self.forward_sample(&mut g, sample, mask, &ForwardOptions::default())?;
        Ok(g.value(out.logits).data().to_vec())
    }

    pub fn predict(&self, sample: &Sample, mask: &ModalityMask) -> Result<usize> {
        Ok(argmax(&self.logits(sample, mask)?))
    }
}

/// JSON header stored in a model checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub config: BackboneConfig,
    pub arch: Architecture,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

impl Backbone {
    pub fn to_checkpoint(&self, provenance: Option<serde_json::Value>) -> Result<Checkpoint> {
        let header = ModelHeader { config: self.config.clone(), arch: self.arch.clone(), provenance };
        Ok(Checkpoint::from_store(serde_json::to_string(&header)?, &self.store))
    }

    /// Rebuilds a model (and its provenance record, if any) from a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Option<serde_json::Value>)> {
        let header: ModelHeader = serde_json::from_str(&ck.header)?;
        header.config.validate()?;
        let mut store = ParamStore::new();
        for (name, t) in &ck.entries {
            store.add(name.clone(), t.clone())?;
        }
        let model = Backbone { config: header.config, arch: header.arch, store };
        let layout_ok = model.arch.encoders.len() == model.config.n_modalities
            && model.arch.fusion.iter().all(|b| b.moe.top_k <= b.moe.experts.len());
        let n = model.store.len();
        let mut ids_ok = true;
        let mut probe = model.arch.clone();
        crate::pruner::surgery::visit_ids(&mut probe, |id| {
            ids_ok &= id.0 < n;
            Ok(())
        })?;
        if !layout_ok || !ids_ok {
            return Err(Error::Format("checkpoint header does not match its tensors".into()));
        }
        Ok((model, header.provenance))
    }
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

/// Indices of the `k` largest router logits; ties go to the lower index.
pub fn top_experts(logits: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}
