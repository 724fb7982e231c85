use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SimError;
use crate::cpu_assist::{LoadModel, ServingMode};
use crate::kernels::KernelKind;
use crate::perf_model::{IterationModel, PerfModel};
use crate::scheduler::{Policy, SchedulerConfig};

/// Per-iteration base latency outside the adapter kernels:
/// prefill `p0 + p1·tokens`, decode `d0 + d1·batch`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseTerms {
    pub p0: f64,
    pub p1: f64,
    pub d0: f64,
    pub d1: f64,
}

impl Default for BaseTerms {
    fn default() -> Self {
        Self { p0: 8.0, p1: 0.05, d0: 12.0, d1: 0.15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FleetConfig {
    pub servers: u32,
    pub mode: ServingMode,
    /// Adapters resident on each accelerator at once.
    pub cache_slots: usize,
    pub base: BaseTerms,
    pub kernel: PerfModel,
    /// Overrides `kernel` when set; relative paths resolve against the config file.
    pub perf_model_file: Option<PathBuf>,
    /// KV capacity per server; each request reserves prompt + output tokens.
    pub memory_tokens: u64,
    /// Cap on requests per prefill iteration; unlimited when absent.
    pub max_prefill_batch: Option<usize>,
    pub load: LoadModel,
    pub adapter_bytes_per_rank: u64,
    /// Tokens per ms prefilled with CPU-side adaptation while an adapter loads.
    pub cpu_assist_rate: f64,
    /// Servers hosting each adapter; all of them when absent.
    pub replicas: Option<u32>,
    pub max_retries: u32,
    pub retry_ms: f64,
}

impl Default for FleetConfig {
    fn default() -> Self {
        Self {
            servers: 8,
            mode: ServingMode::Assisted,
            cache_slots: 8,
            base: BaseTerms::default(),
            kernel: PerfModel::new(KernelKind::Bgmv, 0.01, 0.5),
            perf_model_file: None,
            memory_tokens: 24_000,
            max_prefill_batch: None,
            load: LoadModel::default(),
            // 32 layers x 3 projections x (A + B) x 4096 x 2 bytes per unit of rank
            adapter_bytes_per_rank: 32 * 3 * 2 * 4096 * 2,
            cpu_assist_rate: 4.0,
            replicas: None,
            max_retries: 20,
            retry_ms: 50.0,
        }
    }
}

impl FleetConfig {
    /// Reads a JSON fleet config and resolves its perf-model file.
    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Config(format!("cannot read fleet config {}: {e}", path.display())))?;
        let mut cfg: FleetConfig = serde_json::from_str(&text)
            .map_err(|e| SimError::Config(format!("fleet config {}: {e}", path.display())))?;
        if let Some(file) = cfg.perf_model_file.clone() {
            let file = if file.is_relative() { path.parent().unwrap_or(Path::new(".")).join(file) } else { file };
            cfg.kernel = PerfModel::read_json(&file)
                .map_err(|e| SimError::Config(format!("perf model {}: {e}", file.display())))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.servers == 0 {
            return bad("servers must be >= 1".into());
        }
        if self.cache_slots == 0 {
            return bad("cache_slots must be >= 1".into());
        }
        if self.memory_tokens == 0 {
            return bad("memory_tokens must be >= 1".into());
        }
        if self.max_prefill_batch == Some(0) {
            return bad("max_prefill_batch must be >= 1".into());
        }
        if self.replicas.is_some_and(|r| r == 0 || r > self.servers) {
            return bad(format!("replicas must be in 1..={}", self.servers));
        }
        let b = self.base;
        let finite_nonneg =
            [b.p0, b.p1, b.d0, b.d1, self.kernel.alpha, self.kernel.beta, self.load.setup_ms, self.retry_ms];
        if finite_nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("base terms, kernel coefficients, setup and retry times must be finite and >= 0".into());
        }
        if !(self.cpu_assist_rate > 0.0 && self.load.bandwidth_gb_per_s > 0.0) {
            return bad("cpu_assist_rate and load bandwidth must be > 0".into());
        }
        Ok(())
    }

    pub fn prefill_model(&self) -> IterationModel {
        IterationModel { fixed_ms: self.base.p0, per_request_ms: 0.0, per_token_ms: self.base.p1, kernel: self.kernel }
    }

    pub fn decode_model(&self) -> IterationModel {
        IterationModel { fixed_ms: self.base.d0, per_request_ms: self.base.d1, per_token_ms: 0.0, kernel: self.kernel }
    }

    /// Scheduler settings whose latency models match this fleet.
    pub fn scheduler_config(&self, policy: Policy, slo_ms: f64, avg_resp_len: f64, seed: u64) -> SchedulerConfig {
        SchedulerConfig {
            slo_ms,
            avg_resp_len,
            penalty_score: 1e6,
            policy,
            decode_model: self.decode_model(),
            prefill_model: self.prefill_model(),
            seed,
        }
    }

    /// Servers hosting `adapter`, spread evenly around the fleet.
    pub fn hosts(&self, adapter: u32) -> Vec<u32> {
        let n = self.servers;
        let r = self.replicas.unwrap_or(n);
        (0..r).map(|j| ((adapter as u64 + j as u64 * n as u64 / r as u64) % n as u64) as u32).collect()
    }

    pub fn adapter_load_ms(&self, rank: usize) -> f64 {
        self.load.latency_ms(rank as u64 * self.adapter_bytes_per_rank)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_partial() {
        let cfg = FleetConfig::default();
        let back: FleetConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        let partial: FleetConfig = serde_json::from_str(r#"{"servers": 3, "mode": "ondmd"}"#).unwrap();
        assert_eq!(partial.servers, 3);
        assert_eq!(partial.mode, ServingMode::OnDmd);
        assert_eq!(partial.cache_slots, cfg.cache_slots);
    }

    #[test]
    fn load_resolves_perf_model_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("m.json"), PerfModel::new(KernelKind::Bgmv, 0.5, 2.0).to_json()).unwrap();
        std::fs::write(dir.path().join("fleet.json"), r#"{"servers": 2, "perf_model_file": "m.json"}"#).unwrap();
        let cfg = FleetConfig::load(&dir.path().join("fleet.json")).unwrap();
        assert_eq!(cfg.kernel.kind, KernelKind::Bgmv);
        assert_eq!(cfg.kernel.alpha, 0.5);
        assert!(FleetConfig::load(&dir.path().join("missing.json")).is_err());
        std::fs::write(dir.path().join("bad.json"), r#"{"servers": 0}"#).unwrap();
        assert!(FleetConfig::load(&dir.path().join("bad.json")).is_err());
    }

    #[test]
    fn hosts_spread_and_default_rank64_size() {
        let cfg = FleetConfig { servers: 6, replicas: Some(2), ..FleetConfig::default() };
        assert_eq!(cfg.hosts(0), vec![0, 3]);
        assert_eq!(cfg.hosts(4), vec![4, 1]);
        assert_eq!(FleetConfig { servers: 3, ..FleetConfig::default() }.hosts(1), vec![1, 2, 0]);
        // about 100 MB for a rank-64 adapter
        let bytes = 64 * FleetConfig::default().adapter_bytes_per_rank;
        assert_eq!(bytes, 100_663_296);
    }
}
