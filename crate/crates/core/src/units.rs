//! Addressing of prunable structural units.
//!
//! A *unit layer* is one group of units that share a gate scale and a
//! saliency normalization: the query heads of one attention layer, the hidden
//! channels of one FFN, or the hidden channels of all experts in one MoE block.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Site {
    AttentionHead,
    FfnChannel,
    ExpertChannel,
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Site::AttentionHead => "attention-head",
            Site::FfnChannel => "ffn-channel",
            Site::ExpertChannel => "expert-channel",
        })
    }
}

/// Which encoder stack a block lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stack {
    Modality(usize),
    Fusion,
}

impl fmt::Display for Stack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stack::Modality(j) => write!(f, "enc{j}"),
            Stack::Fusion => f.write_str("fusion"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnitKind {
    /// `head_group[h]` is the K/V group serving head `h`.
    Heads { head_group: Vec<usize>, n_groups: usize },
    Ffn,
    /// Units are laid out expert-major: expert `e` owns a contiguous run of `widths[e]`.
    Experts { widths: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitLayer {
    pub site: Site,
    pub stack: Stack,
    pub block: usize,
    pub n_units: usize,
    /// Tokens per sample flowing through this layer.
    pub tokens: usize,
    pub kind: UnitKind,
}

impl UnitLayer {
    pub fn label(&self) -> String {
        format!("{}.{}.{}", self.stack, self.block, self.site)
    }

    /// Unit range `[start, end)` owned by expert `e`.
    pub fn expert_range(&self, e: usize) -> Option<(usize, usize)> {
        match &self.kind {
            UnitKind::Experts { widths } => {
                let start: usize = widths[..e].iter().sum();
                Some((start, start + widths[e]))
            }
            _ => None,
        }
    }
}

/// Ordered list of unit layers of a model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitLayout {
    pub layers: Vec<UnitLayer>,
}

impl UnitLayout {
    pub fn total_units(&self) -> usize {
        self.layers.iter().map(|l| l.n_units).sum()
    }

    /// Offset of each layer's first unit in a flat unit list.
    pub fn offsets(&self) -> Vec<usize> {
        self.layers
            .iter()
            .scan(0, |acc, l| {
                let o = *acc;
                *acc += l.n_units;
                Some(o)
            })
            .collect()
    }

    pub fn find(&self, stack: Stack, block: usize, site: Site) -> Option<usize> {
        self.layers.iter().position(|l| l.stack == stack && l.block == block && l.site == site)
    }
}
