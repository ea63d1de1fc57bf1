//! Zero-shot structured pruning: unit scoring, budgeted selection, surgery
//! and cost accounting.

pub mod accounting;
pub mod plan;
pub mod scoring;
pub mod surgery;

pub use accounting::{model_flops, model_memory, FlopBreakdown};
pub use plan::{select_by_budget, LayerPlan, PrunePlan};
pub use scoring::{score_magnitude, score_random, score_sentrygate, score_synflow, score_taylor, Scorer, UnitScores};
pub use surgery::materialize;
