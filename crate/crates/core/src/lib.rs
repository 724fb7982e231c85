//! Desk-scale multi-tenant LoRA serving.
//!
//! * [`core_math`]: reference transformer layer with LoRA-adapted projections.
//! * [`kernels`]: padded (`bgmv`) and padding-free (`mbgmv`) batched adapter kernels.
//! * [`cpu_assist`]: coordinator/worker split prefill over shared memory.
//! * [`perf_model`]: linear latency models for heterogeneous-rank batches.
//! * [`scheduler`]: rank-aware routing and baseline policies.
//! * [`simulator`]: discrete-event continuous-batching fleet simulator.

pub mod core_math;
pub mod cpu_assist;
pub mod exec;
pub mod kernels;
pub mod perf_model;
pub mod scheduler;
pub mod simulator;

pub use exec::Exec;
