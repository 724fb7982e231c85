//! CPU-assisted prefill while an adapter is still loading.
//!
//! A coordinator runs the base projections and the rest of each layer, while
//! CPU workers compute the low-rank deltas for their token slices and exchange
//! them through a shared-memory segment ([`shm`]).

mod overlap;
mod plan;
pub mod shm;
mod split;
mod worker;

use thiserror::Error;

use crate::core_math::MathError;

pub use overlap::{overlap_prefill_end, overlap_ttft, LoadModel, OverlapTiming, ServingMode};
pub use plan::{plan_parallelization, ParallelPlan, TokenSlice};
pub use shm::{SegmentLayout, ShmSegment};
pub use split::{split_prefill, SplitConfig, SplitPrefillOutput};
pub use worker::{run_worker, worker_compute, worker_main, WorkerHandle, WorkerLauncher, WorkerSpec};

#[derive(Debug, Error)]
pub enum AssistError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("shared-memory protocol error: {0}")]
    Protocol(String),
    #[error("worker {worker} failed: {reason}")]
    WorkerFault { worker: usize, reason: String },
    #[error("could not start worker: {0}")]
    Spawn(String),
    #[error("timed out after {0:?} waiting for worker output")]
    Timeout(std::time::Duration),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
