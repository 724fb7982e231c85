use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::AssistError;

/// How a server deals with adapters that are not yet on the accelerator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServingMode {
    /// Every adapter is already resident; no loading ever happens.
    Cached,
    /// Load on demand, then prefill.
    OnDmd,
    /// Prefill on CPU workers while the adapter loads, hand off at load completion.
    Assisted,
}

impl ServingMode {
    pub const ALL: [ServingMode; 3] = [ServingMode::Cached, ServingMode::OnDmd, ServingMode::Assisted];

    pub fn as_str(self) -> &'static str {
        match self {
            ServingMode::Cached => "cached",
            ServingMode::OnDmd => "ondmd",
            ServingMode::Assisted => "assisted",
        }
    }
}

impl fmt::Display for ServingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ServingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ServingMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown mode '{s}' (expected cached, ondmd or assisted)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapTiming {
    pub load_latency_ms: f64,
    /// Tokens per ms prefilled with CPU-side adaptation (all planned cores together).
    pub cpu_prefill_rate: f64,
    /// Tokens per ms prefilled entirely on the accelerator.
    pub gpu_prefill_rate: f64,
    pub decode_step_ms: f64,
}

impl OverlapTiming {
    pub fn validate(&self) -> Result<(), AssistError> {
        let ok = self.load_latency_ms >= 0.0
            && self.cpu_prefill_rate > 0.0
            && self.gpu_prefill_rate > 0.0
            && self.decode_step_ms >= 0.0
            && [self.load_latency_ms, self.cpu_prefill_rate, self.gpu_prefill_rate, self.decode_step_ms]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(AssistError::Precondition(format!("invalid overlap timing {self:?}")))
        }
    }
}

/// Load latency of `bytes` of adapter weights over a host-to-device link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadModel {
    pub bandwidth_gb_per_s: f64,
    pub setup_ms: f64,
}

impl Default for LoadModel {
    fn default() -> Self {
        Self { bandwidth_gb_per_s: 8.0, setup_ms: 1.0 }
    }
}

impl LoadModel {
    pub fn latency_ms(&self, bytes: u64) -> f64 {
        self.setup_ms + bytes as f64 / (self.bandwidth_gb_per_s * 1e6)
    }
}

/// Time at which a `tokens`-long prefill finishes when CPU-assisted adaptation
/// overlaps a `load_ms` adapter load.
///
/// Until the load completes, tokens advance at the CPU-assisted rate, which can
/// never exceed the accelerator rate since the base path still runs there.
/// Whatever remains at load completion finishes at the accelerator rate.
pub fn overlap_prefill_end(tokens: f64, load_ms: f64, cpu_rate: f64, gpu_rate: f64) -> f64 {
    let assisted_rate = cpu_rate.min(gpu_rate);
    let done = tokens.min(assisted_rate * load_ms);
    if done >= tokens {
        load_ms.max(tokens / assisted_rate)
    } else {
        // never ahead of a fully resident adapter, also after rounding
        (load_ms + (tokens - done) / gpu_rate).max(tokens / gpu_rate)
    }
}

/// Time to first token for a single `tokens`-long request under `mode`.
/// Decoding always waits for the adapter to be resident.
pub fn overlap_ttft(tokens: usize, t: &OverlapTiming, mode: ServingMode) -> Result<f64, AssistError> {
    if tokens == 0 {
        return Err(AssistError::Precondition("prompt must have at least one token".into()));
    }
    t.validate()?;
    let l = tokens as f64;
    let gpu_only = l / t.gpu_prefill_rate;
    let prefill_end = match mode {
        ServingMode::Cached => gpu_only,
        ServingMode::OnDmd => t.load_latency_ms + gpu_only,
        ServingMode::Assisted => overlap_prefill_end(l, t.load_latency_ms, t.cpu_prefill_rate, t.gpu_prefill_rate),
    };
    Ok(prefill_end + t.decode_step_ms)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn timing(load: f64, cpu: f64, gpu: f64, decode: f64) -> OverlapTiming {
        OverlapTiming { load_latency_ms: load, cpu_prefill_rate: cpu, gpu_prefill_rate: gpu, decode_step_ms: decode }
    }

    #[test]
    fn worked_example() {
        let t = timing(50.0, 1.0, 10.0, 5.0);
        assert_eq!(overlap_ttft(100, &t, ServingMode::OnDmd).unwrap(), 65.0);
        // 50 tokens on CPU during the load, 50 more at 10 t/ms: 50 + 5 + decode 5
        assert_eq!(overlap_ttft(100, &t, ServingMode::Assisted).unwrap(), 60.0);
        assert_eq!(overlap_ttft(100, &t, ServingMode::Cached).unwrap(), 15.0);
    }

    #[test]
    fn no_cold_start_means_cached() {
        let t = timing(0.0, 2.0, 10.0, 3.0);
        assert_eq!(
            overlap_ttft(64, &t, ServingMode::Assisted).unwrap(),
            overlap_ttft(64, &t, ServingMode::Cached).unwrap()
        );
    }

    #[test]
    fn cpu_fast_enough_hides_load() {
        // cpu_rate >= L / load: the prompt finishes on CPU before the load does
        let t = timing(20.0, 5.0, 10.0, 2.0);
        assert_eq!(overlap_ttft(100, &t, ServingMode::Assisted).unwrap(), 22.0);
    }

    #[test]
    fn rejects_bad_input() {
        let t = timing(1.0, 1.0, 1.0, 1.0);
        assert!(overlap_ttft(0, &t, ServingMode::Cached).is_err());
        assert!(overlap_ttft(1, &timing(1.0, 0.0, 1.0, 1.0), ServingMode::Cached).is_err());
        assert!(overlap_ttft(1, &timing(-1.0, 1.0, 1.0, 1.0), ServingMode::Cached).is_err());
    }

    #[test]
    fn load_model_default() {
        // 100 MiB at 8 GB/s plus 1 ms setup
        let ms = LoadModel::default().latency_ms(100 * 1024 * 1024);
        assert!((ms - (1.0 + 104_857_600.0 / 8e6)).abs() < 1e-9);
        assert_eq!("Assisted".parse::<ServingMode>().unwrap(), ServingMode::Assisted);
    }
}
