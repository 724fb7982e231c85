//! Discrete-event simulation of a continuous-batching fleet.
//!
//! Each server alternates prefill and decode iterations: whenever its queue is
//! non-empty the next iteration prefills the queued requests (pausing decode),
//! otherwise it advances every running request by one token. Finished
//! requests leave the batch at the end of the iteration that completes them.
//! Time advances in integer microsecond ticks; simultaneous events run in the
//! order they were scheduled.

mod config;
mod engine;
mod metrics;
mod workload;

use thiserror::Error;

use crate::perf_model::PerfError;
use crate::scheduler::{SchedError, SchedulerConfig};
use crate::Exec;

pub use config::{BaseTerms, FleetConfig};
pub use engine::{
    ms_to_ticks, prefill_duration, simulate_trace, ticks_to_ms, EventQueue, IterationCost, IterationCounts, LruCache,
    SimEvent, Simulation, Tick,
};
pub use metrics::{RequestRecord, SimMetrics, SimResult};
pub use workload::{
    generate_workload, read_trace_csv, write_trace_csv, LengthDist, TraceRequest, WorkloadKind, WorkloadSpec,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error(transparent)]
    Perf(#[from] PerfError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Generates the workload and simulates it.
pub fn run_simulation(
    fleet: &FleetConfig,
    workload: &WorkloadSpec,
    sched: SchedulerConfig,
) -> Result<SimResult, SimError> {
    let trace = generate_workload(workload)?;
    simulate_trace(fleet, &trace, sched)
}

/// One independent simulation in a sweep.
#[derive(Debug, Clone)]
pub struct SimJob {
    pub fleet: FleetConfig,
    pub workload: WorkloadSpec,
    pub sched: SchedulerConfig,
}

/// Runs independent simulations, in parallel under [`Exec::Parallel`].
/// Results keep the order of `jobs`.
pub fn run_sweep(exec: Exec, jobs: &[SimJob]) -> Vec<Result<SimResult, SimError>> {
    exec.map(jobs, |j| run_simulation(&j.fleet, &j.workload, j.sched.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core_math::AdapterId;
    use crate::cpu_assist::{LoadModel, ServingMode};
    use crate::kernels::KernelKind;
    use crate::perf_model::PerfModel;
    use crate::scheduler::Policy;

    fn req(arrival_ms: f64, adapter: u32, prompt: u64, output: u64) -> TraceRequest {
        TraceRequest { arrival_ms, adapter_id: AdapterId(adapter), rank: 8, prompt_len: prompt, output_len: output }
    }

    /// Prefill takes 10 ms + 0.1 ms/token, decode 5 ms flat, loads 50 ms.
    fn fleet(mode: ServingMode) -> FleetConfig {
        FleetConfig {
            servers: 1,
            mode,
            base: BaseTerms { p0: 10.0, p1: 0.1, d0: 5.0, d1: 0.0 },
            kernel: PerfModel::new(KernelKind::Mbgmv, 0.0, 0.0),
            load: LoadModel { bandwidth_gb_per_s: 1.0, setup_ms: 50.0 },
            adapter_bytes_per_rank: 0,
            cpu_assist_rate: 1.0,
            ..FleetConfig::default()
        }
    }

    fn run(f: &FleetConfig, trace: &[TraceRequest]) -> SimResult {
        simulate_trace(f, trace, f.scheduler_config(Policy::RankAware, 1e9, 64.0, 0)).unwrap()
    }

    #[test]
    fn one_request_counts_iterations() {
        let r = run(&fleet(ServingMode::Cached), &[req(0.0, 0, 100, 3)]);
        assert_eq!(r.metrics.prefill_iterations, 1);
        assert_eq!(r.metrics.decode_iterations, 2);
        let rec = &r.records[0];
        assert_eq!(rec.ttft_ms, Some(20.0));
        assert_eq!(rec.latency_ms, Some(30.0));
        assert_eq!(rec.tpt_ms, Some(5.0));
        assert_eq!(r.metrics.slo_attainment, 1.0);
        assert_eq!(r.metrics.cold_start_share, 0.0);
        assert!(r.metrics.conserved());
    }

    #[test]
    fn ondmd_adds_the_load_to_ttft() {
        let trace = [req(0.0, 0, 100, 4), req(1000.0, 1, 40, 2), req(2000.0, 2, 10, 3)];
        let cached = run(&fleet(ServingMode::Cached), &trace);
        let ondmd = run(&fleet(ServingMode::OnDmd), &trace);
        for (c, o) in cached.records.iter().zip(&ondmd.records) {
            assert_eq!(o.ttft_ms.unwrap() - c.ttft_ms.unwrap(), 50.0);
            assert_eq!(o.cold_ms, 50.0);
        }
        assert_eq!(ondmd.metrics.adapter_loads, 3);
        assert!(ondmd.metrics.cold_start_share > 0.0);
    }

    #[test]
    fn assisted_overlaps_the_load() {
        // 100 tokens: 20 ms of compute, so 5 tokens/ms on the accelerator and 1/ms assisted
        let trace = [req(0.0, 0, 100, 2)];
        let ttft = |m| run(&fleet(m), &trace).records[0].ttft_ms.unwrap();
        assert_eq!(ttft(ServingMode::Cached), 20.0);
        assert_eq!(ttft(ServingMode::OnDmd), 70.0);
        // 50 tokens during the load, the other 50 in 10 ms
        assert_eq!(ttft(ServingMode::Assisted), 60.0);
    }

    #[test]
    fn resident_adapter_skips_the_load() {
        let trace = [req(0.0, 0, 10, 2), req(1000.0, 0, 10, 2)];
        let r = run(&fleet(ServingMode::OnDmd), &trace);
        assert_eq!(r.metrics.adapter_loads, 1);
        assert_eq!(r.records[1].cold_ms, 0.0);
    }

    #[test]
    fn arrival_preempts_decode() {
        // request 0: prefill 0..20, decodes 25, 30, ... ; request 1 arrives at 22 mid-decode
        let trace = [req(0.0, 0, 100, 6), req(22.0, 0, 50, 2)];
        let r = run(&fleet(ServingMode::Cached), &trace);
        // decode 20..25 finishes, then the 15 ms prefill of request 1 runs 25..40
        assert_eq!(r.records[1].prefill_start_ms, Some(25.0));
        assert_eq!(r.records[1].first_token_ms, Some(40.0));
        // request 0 tokens at 20, 25, then 45, 50, 55, 60
        assert_eq!(r.records[0].done_ms, Some(60.0));
        let alone = run(&fleet(ServingMode::Cached), &trace[..1]);
        assert_eq!(alone.records[0].done_ms.unwrap() + 15.0, 60.0);
    }

    #[test]
    fn queued_requests_prefill_together() {
        let trace = [req(0.0, 0, 10, 2), req(0.5, 1, 10, 2), req(0.7, 2, 10, 2)];
        let r = run(&fleet(ServingMode::Cached), &trace);
        assert_eq!(r.metrics.prefill_iterations, 2);
        let capped = FleetConfig { max_prefill_batch: Some(1), ..fleet(ServingMode::Cached) };
        assert_eq!(run(&capped, &trace).metrics.prefill_iterations, 3);
    }

    #[test]
    fn timestamps_are_monotone() {
        let f = FleetConfig { servers: 4, mode: ServingMode::OnDmd, cache_slots: 2, ..FleetConfig::default() };
        let w = WorkloadSpec { aggregate_rps: 20.0, duration_s: 20.0, seed: 4, ..WorkloadSpec::default() };
        let r = run_simulation(&f, &w, f.scheduler_config(Policy::MostIdle, 100.0, 96.0, 0)).unwrap();
        assert!(r.metrics.conserved());
        assert_eq!(r.metrics.completed, r.metrics.generated);
        for rec in &r.records {
            let ts = [Some(rec.arrival_ms), rec.sched_ms, rec.prefill_start_ms, rec.first_token_ms, rec.done_ms];
            assert!(ts.windows(2).all(|w| w[0].unwrap() <= w[1].unwrap()), "{rec:?}");
        }
    }

    #[test]
    fn unroutable_requests_are_dropped() {
        let f = FleetConfig { memory_tokens: 50, max_retries: 2, ..fleet(ServingMode::Cached) };
        let r = run(&f, &[req(0.0, 0, 10, 5), req(1.0, 0, 100, 5)]);
        assert_eq!(r.metrics.dropped, 1);
        assert!(r.records[1].dropped && !r.records[1].slo_met);
        assert_eq!(r.metrics.slo_attainment, 0.5);
        assert!(r.metrics.conserved());
    }

    #[test]
    fn memory_pressure_defers_then_admits() {
        let f = FleetConfig { memory_tokens: 20, max_retries: 100, retry_ms: 5.0, ..fleet(ServingMode::Cached) };
        let r = run(&f, &[req(0.0, 0, 10, 5), req(1.0, 0, 10, 5)]);
        assert_eq!(r.metrics.dropped, 0);
        assert!(r.records[1].sched_ms.unwrap() >= r.records[0].done_ms.unwrap());
    }

    #[test]
    fn sweep_matches_individual_runs() {
        let f = FleetConfig { servers: 3, ..FleetConfig::default() };
        let w = WorkloadSpec { aggregate_rps: 10.0, duration_s: 10.0, ..WorkloadSpec::default() };
        let jobs: Vec<SimJob> = Policy::ALL
            .iter()
            .map(|&p| SimJob { fleet: f.clone(), workload: w.clone(), sched: f.scheduler_config(p, 50.0, 96.0, 1) })
            .collect();
        let par = run_sweep(Exec::Parallel, &jobs);
        let seq = run_sweep(Exec::Sequential, &jobs);
        for (a, b) in par.iter().zip(&seq) {
            assert_eq!(a.as_ref().unwrap().metrics, b.as_ref().unwrap().metrics);
        }
    }

    #[test]
    fn event_ties_keep_insertion_order() {
        let mut q = EventQueue::default();
        q.push(5, SimEvent::IterationEnd(1));
        q.push(3, SimEvent::Arrival(9));
        q.push(5, SimEvent::Arrival(2));
        assert_eq!(q.pop(), Some((3, SimEvent::Arrival(9))));
        assert_eq!(q.pop(), Some((5, SimEvent::IterationEnd(1))));
        assert_eq!(q.pop(), Some((5, SimEvent::Arrival(2))));
        assert!(q.is_empty());
    }

    #[test]
    fn lru_evicts_least_recent() {
        let mut c = LruCache::new(2);
        assert!(!c.touch(AdapterId(1)));
        assert!(!c.touch(AdapterId(2)));
        assert!(c.touch(AdapterId(1)));
        assert!(!c.touch(AdapterId(3)));
        assert!(c.contains(AdapterId(1)) && !c.contains(AdapterId(2)));
        assert_eq!(c.len(), 2);
    }
}
