//! Property tests for structural invariants of plans, gates, saliency, tensors and the curriculum.

use proptest::prelude::*;

use sentry_core::attention::top_u;
use sentry_core::gating::{alignment_loss, binarization_loss, normalize_saliency};
use sentry_core::pruner::{select_by_budget, LayerPlan};
use sentry_core::trainer::drop_probability;
use sentry_core::units::UnitKind;
use sentry_core::{Backbone, BackboneConfig, GateSet, Graph, ModalityMask, Scorer, Tensor, TrainConfig, UnitScores};

fn tiny_config(m: usize, hk: usize, per_group: usize, ffn: usize, experts: usize, expert_dim: usize) -> BackboneConfig {
    let hq = hk * per_group;
    BackboneConfig {
        n_modalities: m,
        seq_len: 3,
        model_dim: hq,
        ffn_dim: ffn,
        expert_dim,
        n_experts: experts,
        top_k: 1,
        n_heads: hq,
        n_kv_groups: hk,
        ..Default::default()
    }
}

fn config_strategy() -> impl Strategy<Value = BackboneConfig> {
    (1..=3usize, 1..=3usize, 1..=3usize, 1..=5usize, 1..=3usize, 1..=3usize)
        .prop_map(|(m, hk, pg, ffn, e, ed)| tiny_config(m, hk, pg, ffn, e, ed))
}

fn is_ascending_unique(v: &[usize]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, ..ProptestConfig::default() })]

    #[test]
    fn plans_respect_budget_and_floors(cfg in config_strategy(), seed in any::<u64>(), ratio in 0.0f64..1.0, levels in 1u32..5) {
        let layout = Backbone::new(cfg, seed).unwrap().layout();
        let mut rng_state = seed;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng_state >> 33) as u32 % levels
        };
        let layers = layout.layers.iter().map(|l| (0..l.n_units).map(|_| next() as f64).collect()).collect();
        let scores = UnitScores { scorer: Scorer::Random, layers };
        let plan = select_by_budget(&scores, &layout, ratio).unwrap();
        prop_assert!(plan.validate(&layout).is_ok());
        let n = layout.total_units();
        prop_assert_eq!(plan.retained_units() + plan.dropped_units, n);
        prop_assert!(plan.dropped_units <= (ratio * n as f64).floor() as usize);
        for (ul, lp) in layout.layers.iter().zip(&plan.layers) {
            match (&ul.kind, lp) {
                (UnitKind::Heads { head_group, .. }, LayerPlan::Heads { keep_heads, keep_groups }) => {
                    prop_assert!(!keep_heads.is_empty());
                    prop_assert!(is_ascending_unique(keep_heads) && is_ascending_unique(keep_groups));
                    let mut used: Vec<usize> = keep_heads.iter().map(|&h| head_group[h]).collect();
                    used.dedup();
                    prop_assert_eq!(&used, keep_groups);
                }
                (UnitKind::Ffn, LayerPlan::Ffn { keep }) => {
                    prop_assert!(!keep.is_empty() && is_ascending_unique(keep));
                }
                (UnitKind::Experts { widths }, LayerPlan::Experts { keep }) => {
                    prop_assert_eq!(keep.len(), widths.len());
                    prop_assert!(keep.iter().all(|k| !k.is_empty() && is_ascending_unique(k)));
                }
                _ => prop_assert!(false, "plan kind does not match layout"),
            }
        }
    }

    #[test]
    fn zero_ratio_keeps_everything(cfg in config_strategy(), seed in any::<u64>()) {
        let layout = Backbone::new(cfg, seed).unwrap().layout();
        let layers = layout.layers.iter().map(|l| vec![0.0; l.n_units]).collect();
        let plan = select_by_budget(&UnitScores { scorer: Scorer::Random, layers }, &layout, 0.0).unwrap();
        prop_assert_eq!(plan.retained_units(), layout.total_units());
    }

    #[test]
    fn gate_outputs_stay_strictly_inside_unit_interval(
        cfg in config_strategy(),
        seed in any::<u64>(),
        zeta in -20.0f64..20.0,
        gamma in -3.0f64..3.0,
        bits in any::<u32>(),
    ) {
        let m = cfg.n_modalities;
        let layout = Backbone::new(cfg, seed).unwrap().layout();
        let mut gates = GateSet::new(&layout, m, seed).unwrap();
        for layer in gates.layers.clone() {
            gates.store.get_mut(layer.zeta).data_mut().iter_mut().for_each(|v| *v = zeta);
            gates.store.get_mut(layer.gamma).data_mut()[0] = gamma;
        }
        let missing: Vec<usize> = (0..m).filter(|j| bits >> j & 1 == 1).collect();
        let mask = ModalityMask::from_missing(m, &missing);
        for layer in gates.scores(&mask).unwrap() {
            prop_assert!(layer.iter().all(|&g| g > 0.0 && g < 1.0), "{layer:?}");
        }
    }

    #[test]
    fn saliency_normalization_is_min_max(raw in prop::collection::vec(0.0f64..10.0, 1..40)) {
        let s = normalize_saliency(&raw);
        prop_assert_eq!(s.len(), raw.len());
        prop_assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
        let constant = raw.iter().all(|&v| v == raw[0]);
        if constant {
            prop_assert!(s.iter().all(|&v| v == 0.5));
        } else {
            prop_assert_eq!(s.iter().cloned().fold(f64::INFINITY, f64::min), 0.0);
            prop_assert_eq!(s.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 1.0);
            for i in 0..raw.len() {
                for j in 0..raw.len() {
                    if raw[i] < raw[j] {
                        prop_assert!(s[i] <= s[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn gate_losses_are_bounded(g in prop::collection::vec(0.0f64..=1.0, 1..32), t in prop::collection::vec(0.0f64..=1.0, 32)) {
        let t = &t[..g.len()];
        let a = alignment_loss(&g, t).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert_eq!(a, alignment_loss(t, &g).unwrap());
        let b = binarization_loss(&g);
        prop_assert!((0.0..=0.25).contains(&b));
    }

    #[test]
    fn matmul_and_transpose_shapes(r in 1..6usize, k in 1..6usize, c in 1..6usize, extra in 1..3usize) {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[r, k]));
        let b = g.constant(Tensor::zeros(&[k, c]));
        let bad = g.constant(Tensor::zeros(&[k + extra, c]));
        let p = g.matmul(a, b).unwrap();
        prop_assert_eq!(g.value(p).shape(), &[r, c]);
        prop_assert!(g.matmul(a, bad).is_err());
        let t = g.transpose(p).unwrap();
        prop_assert_eq!(g.value(t).shape(), &[c, r]);
        let tt = g.transpose(t).unwrap();
        prop_assert!(g.value(tt).bit_eq(g.value(p)));
    }

    #[test]
    fn curriculum_is_monotone_and_bounded(epochs in 1..60usize, warm in 0..20usize, p_max in 0.0f64..0.99) {
        let cfg = TrainConfig { epochs, warmup_epochs: Some(warm), p_max, ..Default::default() };
        let mut prev = 0.0;
        for t in 0..epochs {
            let p = drop_probability(t, &cfg);
            prop_assert!(p >= prev && p <= p_max);
            if t < warm {
                prop_assert_eq!(p, 0.0);
            }
            prev = p;
        }
    }

    #[test]
    fn top_u_is_clamped_and_monotone(t in 1..4096usize, c in 1..16usize) {
        let u = top_u(t, c);
        prop_assert!(u >= 1 && u <= t);
        prop_assert!(top_u(t, c + 1) >= u);
    }
}
