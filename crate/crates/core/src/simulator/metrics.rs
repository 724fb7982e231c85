use std::io::Write;

use serde::{Deserialize, Serialize};

use super::engine::{ticks_to_ms, IterationCounts, Tick};
use super::workload::TraceRequest;
use super::SimError;
use crate::scheduler::{write_decision_log, Decision};

/// Per-request outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: u64,
    pub arrival_ms: f64,
    pub sched_ms: Option<f64>,
    pub prefill_start_ms: Option<f64>,
    pub first_token_ms: Option<f64>,
    pub done_ms: Option<f64>,
    pub output_len: u64,
    pub ttft_ms: Option<f64>,
    /// `(done − first_token) / (output_len − 1)`; zero for single-token outputs.
    pub tpt_ms: Option<f64>,
    pub latency_ms: Option<f64>,
    /// Adapter-load time this request sat through.
    pub cold_ms: f64,
    pub slo_met: bool,
    pub dropped: bool,
}

impl RequestRecord {
    pub(crate) fn new(
        id: u64,
        r: &TraceRequest,
        arrival: Tick,
        [sched, prefill, first, done]: [Option<Tick>; 4],
        cold: Tick,
        dropped: bool,
        slo_ms: f64,
    ) -> Self {
        let ms = |t: Option<Tick>| t.map(ticks_to_ms);
        let ttft = first.map(|f| ticks_to_ms(f - arrival));
        let tpt = match (first, done) {
            (Some(f), Some(d)) if r.output_len > 1 => Some(ticks_to_ms(d - f) / (r.output_len - 1) as f64),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        };
        Self {
            id,
            arrival_ms: ticks_to_ms(arrival),
            sched_ms: ms(sched),
            prefill_start_ms: ms(prefill),
            first_token_ms: ms(first),
            done_ms: ms(done),
            output_len: r.output_len,
            ttft_ms: ttft,
            tpt_ms: tpt,
            latency_ms: done.map(|d| ticks_to_ms(d - arrival)),
            cold_ms: ticks_to_ms(cold),
            slo_met: !dropped && tpt.is_some_and(|t| t <= slo_ms),
            dropped,
        }
    }

    pub fn completed(&self) -> bool {
        self.done_ms.is_some()
    }
}

/// Fleet-level summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub generated: u64,
    pub completed: u64,
    pub in_flight: u64,
    pub queued: u64,
    pub dropped: u64,
    pub slo_ms: f64,
    /// Fraction of all generated requests that completed within the SLO.
    pub slo_attainment: f64,
    pub mean_ttft_ms: f64,
    pub mean_tpt_ms: f64,
    pub p50_tpt_ms: f64,
    pub p99_tpt_ms: f64,
    pub mean_latency_ms: f64,
    /// Share of total request latency spent waiting on adapter loads.
    pub cold_start_share: f64,
    pub prefill_iterations: u64,
    pub decode_iterations: u64,
    pub adapter_loads: u64,
    pub makespan_ms: f64,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl SimMetrics {
    pub(crate) fn from_records(
        records: &[RequestRecord],
        in_flight: u64,
        queued: u64,
        counts: IterationCounts,
        slo_ms: f64,
    ) -> Self {
        let done: Vec<&RequestRecord> = records.iter().filter(|r| r.completed()).collect();
        let ttft: Vec<f64> = done.iter().filter_map(|r| r.ttft_ms).collect();
        let mut tpt: Vec<f64> = done.iter().filter(|r| r.output_len > 1).filter_map(|r| r.tpt_ms).collect();
        tpt.sort_by(f64::total_cmp);
        let latency: Vec<f64> = done.iter().filter_map(|r| r.latency_ms).collect();
        let total_latency: f64 = latency.iter().sum();
        let total_cold: f64 = done.iter().map(|r| r.cold_ms).sum();
        let generated = records.len() as u64;
        Self {
            generated,
            completed: done.len() as u64,
            in_flight,
            queued,
            dropped: records.iter().filter(|r| r.dropped).count() as u64,
            slo_ms,
            slo_attainment: if generated == 0 {
                1.0
            } else {
                records.iter().filter(|r| r.slo_met).count() as f64 / generated as f64
            },
            mean_ttft_ms: mean(&ttft),
            mean_tpt_ms: mean(&tpt),
            p50_tpt_ms: percentile(&tpt, 50.0),
            p99_tpt_ms: percentile(&tpt, 99.0),
            mean_latency_ms: mean(&latency),
            cold_start_share: if total_latency > 0.0 { total_cold / total_latency } else { 0.0 },
            prefill_iterations: counts.prefill,
            decode_iterations: counts.decode,
            adapter_loads: counts.adapter_loads,
            makespan_ms: done.iter().filter_map(|r| r.done_ms).fold(0.0, f64::max),
        }
    }

    /// Every generated request is accounted for exactly once.
    pub fn conserved(&self) -> bool {
        self.completed + self.in_flight + self.queued + self.dropped == self.generated
    }
}

#[derive(Debug, Clone)]
pub struct SimResult {
    pub metrics: SimMetrics,
    pub records: Vec<RequestRecord>,
    pub decisions: Vec<Decision>,
}

impl SimResult {
    pub fn write_summary_json<W: Write>(&self, mut w: W) -> Result<(), SimError> {
        serde_json::to_writer_pretty(&mut w, &self.metrics)?;
        writeln!(w)?;
        Ok(())
    }

    /// Per-request CSV: `id,ttft_ms,tpt_ms,latency_ms,slo_met`; empty cells for
    /// requests that never produced the value.
    pub fn write_requests_csv<W: Write>(&self, w: W) -> Result<(), SimError> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["id", "ttft_ms", "tpt_ms", "latency_ms", "slo_met"])?;
        let cell = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        for r in &self.records {
            w.write_record([
                r.id.to_string(),
                cell(r.ttft_ms),
                cell(r.tpt_ms),
                cell(r.latency_ms),
                r.slo_met.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_decisions_csv<W: Write>(&self, w: W) -> Result<(), SimError> {
        write_decision_log(w, &self.decisions)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentile() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&xs, 50.0), 2.0);
        assert_eq!(percentile(&xs, 99.0), 4.0);
        assert_eq!(percentile(&[], 50.0), 0.0);
    }
}
