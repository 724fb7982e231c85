//! Rank-aware request routing and the baseline policies it is compared with.
//!
//! For each candidate server the rank-aware policy estimates how much a new
//! request slows that server down:
//!
//! ```text
//! Δ_prefill = PrePerf(queue + req) − PrePerf(queue)
//! Δ_decode  = DecPerf(running + queue + req) − DecPerf(running + queue)
//! cost      = Δ_prefill / avg_resp_len + Δ_decode   (+ penalty if the new DecPerf > SLO)
//! total     = cost × (|running| + |queue|)
//! ```
//!
//! and routes to the minimum `total`. Queued requests count toward the decode
//! estimate even though they are not decoding yet.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core_math::AdapterId;
use crate::kernels::{AdapterBatch, BatchMember};
use crate::perf_model::IterationModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedError {
    #[error("server {server} does not host {adapter}")]
    NotHosted { server: u32, adapter: AdapterId },
    #[error("no server can take request {request}; retry later")]
    NoCandidate { request: u64 },
    #[error("invalid scheduler config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    RankAware,
    MostIdle,
    FirstFit,
    Random,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::RankAware, Policy::MostIdle, Policy::FirstFit, Policy::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::RankAware => "rank-aware",
            Policy::MostIdle => "most-idle",
            Policy::FirstFit => "first-fit",
            Policy::Random => "random",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Policy::ALL
            .into_iter()
            .find(|p| p.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown policy '{s}' (expected rank-aware, most-idle, first-fit or random)"))
    }
}

/// A request as seen by a server's stats: which adapter, its rank, its prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotInfo {
    pub adapter_id: AdapterId,
    pub rank: usize,
    #[serde(default)]
    pub prompt_len: u64,
}

impl SlotInfo {
    fn member(&self) -> BatchMember {
        BatchMember { adapter: self.adapter_id, rank: self.rank }
    }
}

/// Synchronous view of one server at decision time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerSnapshot {
    pub server_id: u32,
    pub running: Vec<SlotInfo>,
    pub queue: Vec<SlotInfo>,
    pub hosted_adapter_ids: BTreeSet<AdapterId>,
    pub free_memory_tokens: u64,
}

impl ServerSnapshot {
    pub fn request_count(&self) -> usize {
        self.running.len() + self.queue.len()
    }

    fn batch_of(slots: &[SlotInfo]) -> AdapterBatch {
        AdapterBatch::new(slots.iter().map(SlotInfo::member).collect())
    }

    fn prompt_tokens(slots: &[SlotInfo]) -> u64 {
        slots.iter().map(|s| s.prompt_len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedRequest {
    pub id: u64,
    pub adapter_id: AdapterId,
    /// 0 for base-model-only requests, which need no hosted adapter.
    pub rank: usize,
    pub prompt_len: u64,
    /// Memory the server must have free to admit the request.
    pub reserve_tokens: u64,
}

impl SchedRequest {
    pub fn new(id: u64, adapter_id: AdapterId, rank: usize, prompt_len: u64) -> Self {
        Self { id, adapter_id, rank, prompt_len, reserve_tokens: prompt_len }
    }

    fn slot(&self) -> SlotInfo {
        SlotInfo { adapter_id: self.adapter_id, rank: self.rank, prompt_len: self.prompt_len }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchedulerConfig {
    /// Time-per-token objective in ms.
    pub slo_ms: f64,
    pub avg_resp_len: f64,
    pub penalty_score: f64,
    pub policy: Policy,
    pub decode_model: IterationModel,
    pub prefill_model: IterationModel,
    #[serde(default)]
    pub seed: u64,
}

impl SchedulerConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), SchedError> {
        if !(self.slo_ms > 0.0) {
            return Err(SchedError::Config(format!("slo_ms must be > 0, got {}", self.slo_ms)));
        }
        if !(self.avg_resp_len >= 1.0) {
            return Err(SchedError::Config(format!("avg_resp_len must be >= 1, got {}", self.avg_resp_len)));
        }
        if !(self.penalty_score > 0.0) {
            return Err(SchedError::Config(format!("penalty_score must be > 0, got {}", self.penalty_score)));
        }
        Ok(())
    }
}

/// The terms of one server's cost score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostBreakdown {
    pub delta_prefill: f64,
    pub delta_decode: f64,
    /// Predicted decode iteration latency after admitting the request.
    pub decode_after: f64,
    pub penalized: bool,
    pub cost_score: f64,
}

pub fn calc_cost(
    req: &SchedRequest,
    snap: &ServerSnapshot,
    cfg: &SchedulerConfig,
) -> Result<CostBreakdown, SchedError> {
    if req.rank > 0 && !snap.hosted_adapter_ids.contains(&req.adapter_id) {
        return Err(SchedError::NotHosted { server: snap.server_id, adapter: req.adapter_id });
    }
    let queue = ServerSnapshot::batch_of(&snap.queue);
    let queue_tokens = ServerSnapshot::prompt_tokens(&snap.queue);
    let member = req.slot().member();
    let pre_before = cfg.prefill_model.predict(&queue, queue_tokens);
    let pre_after = cfg.prefill_model.predict(&queue.with(member), queue_tokens + req.prompt_len);

    let exists = ServerSnapshot::batch_of(&snap.running).joined(&queue);
    let dec_before = cfg.decode_model.predict(&exists, exists.len() as u64);
    let after = exists.with(member);
    let dec_after = cfg.decode_model.predict(&after, after.len() as u64);

    let delta_prefill = pre_after - pre_before;
    let delta_decode = dec_after - dec_before;
    let mut cost_score = delta_prefill / cfg.avg_resp_len + delta_decode;
    let penalized = dec_after > cfg.slo_ms;
    if penalized {
        cost_score += cfg.penalty_score;
    }
    Ok(CostBreakdown { delta_prefill, delta_decode, decode_after: dec_after, penalized, cost_score })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub request_id: u64,
    pub server_id: u32,
    /// Cost score of the chosen server (informational for non-rank-aware policies).
    pub cost_score: f64,
    pub policy: Policy,
}

pub struct Scheduler {
    config: SchedulerConfig,
    rng: ChaCha8Rng,
}

impl Scheduler {
    pub fn new(config: SchedulerConfig) -> Result<Self, SchedError> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self { config, rng })
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    /// Servers hosting the adapter with enough free memory, in server-id order.
    pub fn candidates<'a>(req: &SchedRequest, snapshots: &'a [ServerSnapshot]) -> Vec<&'a ServerSnapshot> {
        let mut c: Vec<&ServerSnapshot> = snapshots
            .iter()
            .filter(|s| req.rank == 0 || s.hosted_adapter_ids.contains(&req.adapter_id))
            .filter(|s| s.free_memory_tokens >= req.reserve_tokens)
            .collect();
        c.sort_by_key(|s| s.server_id);
        c
    }

    pub fn schedule(&mut self, req: &SchedRequest, snapshots: &[ServerSnapshot]) -> Result<Decision, SchedError> {
        let cands = Self::candidates(req, snapshots);
        if cands.is_empty() {
            return Err(SchedError::NoCandidate { request: req.id });
        }
        let chosen: &ServerSnapshot = match self.config.policy {
            Policy::RankAware => {
                let mut best: Option<(&ServerSnapshot, f64)> = None;
                for s in &cands {
                    let cost = calc_cost(req, s, &self.config)?.cost_score;
                    let total = cost * s.request_count() as f64;
                    if best.is_none_or(|(_, b)| total < b) {
                        best = Some((s, total));
                    }
                }
                best.expect("non-empty").0
            }
            Policy::MostIdle => {
                cands.iter().min_by_key(|s| (s.request_count(), s.server_id)).copied().expect("non-empty")
            }
            Policy::FirstFit => cands[0],
            Policy::Random => cands[self.rng.random_range(0..cands.len())],
        };
        let cost_score = calc_cost(req, chosen, &self.config)?.cost_score;
        Ok(Decision { request_id: req.id, server_id: chosen.server_id, cost_score, policy: self.config.policy })
    }
}

/// Writes decisions as `request_id,server_id,cost_score,policy`.
pub fn write_decision_log<W: Write>(w: W, decisions: &[Decision]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(w);
    writeln!(w, "request_id,server_id,cost_score,policy")?;
    for d in decisions {
        writeln!(w, "{},{},{},{}", d.request_id, d.server_id, d.cost_score, d.policy)?;
    }
    w.flush()
}
