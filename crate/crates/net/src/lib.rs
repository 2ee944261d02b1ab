//! Split inference between a device agent and an edge server over TCP.
//!
//! The edge runs the first `p` layers of the chosen exit, the device runs
//! the rest. See `docs/protocol.md` for the wire format.

pub mod device;
pub mod edge;
mod engine;
pub mod shaper;
pub mod wire;

use edgent_core::kernels::KernelError;
use edgent_core::model::ModelError;
use edgent_core::planner::{PlanError, PlanReport};
use thiserror::Error;

pub use device::{run_device, BandwidthSource, Device, DeviceConfig, DeviceReport, PhaseTimings};
pub use edge::{EdgeConfig, EdgeServer, ServeHandle, ShutdownHandle};
pub use shaper::ShapedWriter;
pub use wire::{ErrorCode, Message, Mode};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wire(#[from] wire::WireError),
    #[error("edge replied {code}: {message}")]
    Remote { code: ErrorCode, message: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("connection lost during {phase} after {elapsed_ms:.1} ms")]
    ConnectionLost {
        phase: &'static str,
        elapsed_ms: f64,
        partial: Box<PhaseTimings>,
        #[source]
        source: wire::WireError,
    },
    #[error("no partition meets the {budget_ms} ms budget (best is {:.3} ms)", .best.predicted_latency_ms)]
    Infeasible { budget_ms: f64, best: Box<PlanReport> },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Model(#[from] ModelError),
}
