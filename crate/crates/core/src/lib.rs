pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod gating;
pub mod graph;
pub mod harness;
pub mod params;
pub mod pruner;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod units;

pub use error::{Error, Result};
pub use graph::{Graph, TapId, TapRecord, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
pub use backbone::{Backbone, BackboneConfig, ModalityMask, Sample};
pub use gating::{GateSet, GateTable};
pub use harness::{ExperimentConfig, SweepGrid, SyntheticSpec};
pub use pruner::{PrunePlan, Scorer, UnitScores};
pub use trainer::{RunReport, TrainConfig};
pub use units::UnitLayout;
