use std::io::{Read, Write};

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::core_math::AdapterId;

/// Token-length distribution for prompts or responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "lowercase")]
pub enum LengthDist {
    Fixed {
        tokens: u64,
    },
    /// Inclusive on both ends.
    Uniform {
        min: u64,
        max: u64,
    },
    /// Log-normal with the given median, clamped to `[min, max]`.
    LogNormal {
        median: f64,
        sigma: f64,
        min: u64,
        max: u64,
    },
}

impl LengthDist {
    fn validate(&self, what: &str) -> Result<(), SimError> {
        let ok = match *self {
            LengthDist::Fixed { tokens } => tokens >= 1,
            LengthDist::Uniform { min, max } => min >= 1 && min <= max,
            LengthDist::LogNormal { median, sigma, min, max } => {
                median > 0.0 && median.is_finite() && sigma >= 0.0 && sigma.is_finite() && min >= 1 && min <= max
            }
        };
        if ok {
            Ok(())
        } else {
            Err(SimError::Config(format!("invalid {what} length distribution {self:?}")))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match *self {
            LengthDist::Fixed { tokens } => tokens,
            LengthDist::Uniform { min, max } => rng.random_range(min..=max),
            LengthDist::LogNormal { median, sigma, min, max } => {
                let d = LogNormal::new(median.ln(), sigma).expect("validated parameters");
                (d.sample(rng).round() as u64).clamp(min, max)
            }
        }
    }

    pub fn mean_hint(&self) -> f64 {
        match *self {
            LengthDist::Fixed { tokens } => tokens as f64,
            LengthDist::Uniform { min, max } => (min + max) as f64 / 2.0,
            LengthDist::LogNormal { median, sigma, min, max } => {
                (median * (sigma * sigma / 2.0).exp()).clamp(min as f64, max as f64)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkloadKind {
    /// Uniform adapter choice.
    Poisson,
    /// Power-law adapter popularity, `p(k) ∝ (k + 1)^-skew`.
    Skewed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub aggregate_rps: f64,
    pub num_adapters: u32,
    /// Each adapter draws its rank uniformly from these.
    pub ranks: Vec<usize>,
    pub skew: f64,
    pub prompt_len: LengthDist,
    pub output_len: LengthDist,
    pub seed: u64,
    pub duration_s: f64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            kind: WorkloadKind::Skewed,
            aggregate_rps: 6.0,
            num_adapters: 128,
            ranks: vec![8, 16, 32, 64],
            skew: 1.0,
            prompt_len: LengthDist::LogNormal { median: 64.0, sigma: 0.8, min: 4, max: 512 },
            output_len: LengthDist::LogNormal { median: 96.0, sigma: 0.6, min: 2, max: 512 },
            seed: 0,
            duration_s: 60.0,
        }
    }
}

/// One row of a request trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRequest {
    pub arrival_ms: f64,
    pub adapter_id: AdapterId,
    pub rank: usize,
    pub prompt_len: u64,
    pub output_len: u64,
}

// independent RNG streams so changing one knob does not reshuffle the others
const STREAM_RANKS: u64 = 1;
const STREAM_ARRIVALS: u64 = 2;
const STREAM_ADAPTERS: u64 = 3;
const STREAM_LENGTHS: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.aggregate_rps > 0.0 && self.aggregate_rps.is_finite()) {
            return Err(SimError::Config(format!("aggregate_rps must be > 0, got {}", self.aggregate_rps)));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(SimError::Config(format!("duration_s must be > 0, got {}", self.duration_s)));
        }
        if self.num_adapters == 0 {
            return Err(SimError::Config("num_adapters must be >= 1".into()));
        }
        if self.ranks.is_empty() || self.ranks.contains(&0) {
            return Err(SimError::Config(format!("ranks must be non-empty and positive, got {:?}", self.ranks)));
        }
        if !(self.skew >= 0.0 && self.skew.is_finite()) {
            return Err(SimError::Config(format!("skew must be >= 0, got {}", self.skew)));
        }
        self.prompt_len.validate("prompt")?;
        self.output_len.validate("output")
    }

    /// Rank of every adapter, indexed by adapter id.
    pub fn adapter_ranks(&self) -> Vec<usize> {
        let mut rng = stream(self.seed, STREAM_RANKS);
        (0..self.num_adapters).map(|_| self.ranks[rng.random_range(0..self.ranks.len())]).collect()
    }

    /// Popularity mass of each adapter, summing to 1.
    pub fn popularity(&self) -> Vec<f64> {
        let skew = match self.kind {
            WorkloadKind::Poisson => 0.0,
            WorkloadKind::Skewed => self.skew,
        };
        let w: Vec<f64> = (0..self.num_adapters).map(|k| (k as f64 + 1.0).powf(-skew)).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect()
    }
}

pub fn generate_workload(spec: &WorkloadSpec) -> Result<Vec<TraceRequest>, SimError> {
    spec.validate()?;
    let ranks = spec.adapter_ranks();
    let pick = WeightedIndex::new(spec.popularity()).map_err(|e| SimError::Config(e.to_string()))?;
    let gap = Exp::new(spec.aggregate_rps / 1000.0).map_err(|e| SimError::Config(e.to_string()))?;
    let mut arrivals = stream(spec.seed, STREAM_ARRIVALS);
    let mut adapters = stream(spec.seed, STREAM_ADAPTERS);
    let mut lengths = stream(spec.seed, STREAM_LENGTHS);
    let horizon_ms = spec.duration_s * 1000.0;
    let mut t = 0.0;
    let mut out = Vec::new();
    loop {
        t += gap.sample(&mut arrivals);
        if t >= horizon_ms {
            break;
        }
        let k = pick.sample(&mut adapters);
        out.push(TraceRequest {
            arrival_ms: t,
            adapter_id: AdapterId(k as u32),
            rank: ranks[k],
            prompt_len: spec.prompt_len.sample(&mut lengths),
            output_len: spec.output_len.sample(&mut lengths),
        });
    }
    Ok(out)
}

pub fn write_trace_csv<W: Write>(w: W, trace: &[TraceRequest]) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["arrival_ms", "adapter_id", "rank", "prompt_len", "output_len"])?;
    for r in trace {
        w.write_record([
            r.arrival_ms.to_string(),
            r.adapter_id.0.to_string(),
            r.rank.to_string(),
            r.prompt_len.to_string(),
            r.output_len.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv<R: Read>(r: R) -> Result<Vec<TraceRequest>, SimError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let mut out: Vec<TraceRequest> = Vec::new();
    for (i, rec) in rdr.deserialize::<TraceRequest>().enumerate() {
        let req = rec?;
        let line = i + 2;
        if !(req.arrival_ms >= 0.0 && req.arrival_ms.is_finite()) || req.prompt_len == 0 || req.output_len == 0 {
            return Err(SimError::Config(format!("trace line {line}: invalid request {req:?}")));
        }
        if out.last().is_some_and(|p| p.arrival_ms > req.arrival_ms) {
            return Err(SimError::Config(format!("trace line {line}: arrivals must be non-decreasing")));
        }
        out.push(req);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_gap_near_one_second_at_one_rps() {
        let spec = WorkloadSpec { aggregate_rps: 1.0, duration_s: 100.0, seed: 7, ..WorkloadSpec::default() };
        let trace = generate_workload(&spec).unwrap();
        let mean_gap = trace.last().unwrap().arrival_ms / trace.len() as f64;
        assert!((mean_gap - 1000.0).abs() <= 100.0, "mean gap {mean_gap}");
    }

    #[test]
    fn zero_skew_is_uniform() {
        let spec = WorkloadSpec {
            aggregate_rps: 200.0,
            duration_s: 100.0,
            num_adapters: 10,
            skew: 0.0,
            seed: 3,
            ..WorkloadSpec::default()
        };
        let trace = generate_workload(&spec).unwrap();
        let mut counts = [0f64; 10];
        for r in &trace {
            counts[r.adapter_id.0 as usize] += 1.0;
        }
        let expected = trace.len() as f64 / 10.0;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        // 9 degrees of freedom, 99.9th percentile
        assert!(chi2 < 27.88, "chi2 {chi2}");
    }

    #[test]
    fn skew_favors_low_ids() {
        let spec =
            WorkloadSpec { aggregate_rps: 50.0, duration_s: 60.0, skew: 1.2, seed: 1, ..WorkloadSpec::default() };
        let trace = generate_workload(&spec).unwrap();
        let head = trace.iter().filter(|r| r.adapter_id.0 < 8).count();
        assert!(head * 2 > trace.len());
        let p = spec.popularity();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn deterministic_and_csv_round_trip() {
        let spec = WorkloadSpec { seed: 99, ..WorkloadSpec::default() };
        let a = generate_workload(&spec).unwrap();
        assert_eq!(a, generate_workload(&spec).unwrap());
        let ranks = spec.adapter_ranks();
        assert!(a.iter().all(|r| r.rank == ranks[r.adapter_id.0 as usize]));
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &a).unwrap();
        assert!(buf.starts_with(b"arrival_ms,adapter_id,rank,prompt_len,output_len\n"));
        assert_eq!(read_trace_csv(&buf[..]).unwrap(), a);
    }

    #[test]
    fn rejects_bad_specs() {
        for bad in [
            WorkloadSpec { aggregate_rps: 0.0, ..WorkloadSpec::default() },
            WorkloadSpec { duration_s: -1.0, ..WorkloadSpec::default() },
            WorkloadSpec { ranks: vec![], ..WorkloadSpec::default() },
            WorkloadSpec { output_len: LengthDist::Uniform { min: 5, max: 4 }, ..WorkloadSpec::default() },
        ] {
            assert!(generate_workload(&bad).is_err());
        }
    }
}
