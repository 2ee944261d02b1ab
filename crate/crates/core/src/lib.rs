//! Branchy DNN co-inference between a device and an edge server.
//!
//! [`model`] describes multi-exit networks, [`predictor`] estimates per-layer
//! latency from regression models, [`profiler`] measures reference kernels to
//! fit those models, [`planner`] picks the exit point and partition, and
//! [`simulator`] replays plans over bandwidth and budget sweeps.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod kernels;
pub mod model;
pub mod planner;
pub mod predictor;
pub mod profiler;
mod regression;
pub mod simulator;

pub use model::{BranchyModel, ExitBranch, LayerKind, LayerSpec};
pub use planner::{PartitionPlan, PlanOutcome, PlanRequest};
pub use predictor::{CostKind, PredictorSet, Side};
