//! Linear latency models for heterogeneous-rank batches.
//!
//! `BGMV` latency is linear in `|S| × max_rank`, `MBGMV` latency in
//! `sum_rank`. A [`PerfModel`] holds the fitted `(alpha, beta)` for one kernel;
//! an [`IterationModel`] adds the rank-independent base terms of a full serving
//! iteration on top of it.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core_math::{AdapterId, LoraPair, Matrix};
use crate::exec::Exec;
use crate::kernels::{batch_prefill_adapt_with, AdapterBatch, AdapterPool, KernelError, KernelKind};

#[derive(Debug, Error)]
pub enum PerfError {
    #[error("empty batch has no feature value")]
    EmptyBatch,
    #[error("cannot fit: {0}")]
    Degenerate(String),
    #[error("invalid profile point on line {line}: {reason}")]
    BadPoint { line: usize, reason: String },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Regressor of a batch under `kind`: `|S|·max_rank` for BGMV, `sum_rank` for MBGMV.
pub fn feature(kind: KernelKind, batch: &AdapterBatch) -> Result<u64, PerfError> {
    if batch.is_empty() {
        return Err(PerfError::EmptyBatch);
    }
    Ok(feature_or_zero(kind, batch))
}

fn feature_or_zero(kind: KernelKind, batch: &AdapterBatch) -> u64 {
    match kind {
        KernelKind::Bgmv => (batch.len() * batch.max_rank()) as u64,
        KernelKind::Mbgmv => batch.sum_rank() as u64,
    }
}

/// One profiled batch configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub kernel: KernelKind,
    pub batch_size: u64,
    pub max_rank: u64,
    pub sum_rank: u64,
    pub latency_ms: f64,
}

impl ProfilePoint {
    pub fn feature(&self, kind: KernelKind) -> u64 {
        match kind {
            KernelKind::Bgmv => self.batch_size * self.max_rank,
            KernelKind::Mbgmv => self.sum_rank,
        }
    }

    fn validate(&self) -> Result<(), String> {
        if !(self.latency_ms.is_finite() && self.latency_ms > 0.0) {
            return Err(format!("latency_ms must be > 0, got {}", self.latency_ms));
        }
        if self.max_rank > self.sum_rank || self.sum_rank > self.batch_size * self.max_rank {
            return Err(format!(
                "ranks violate max_rank <= sum_rank <= batch_size*max_rank ({} / {} / {})",
                self.max_rank, self.sum_rank, self.batch_size
            ));
        }
        Ok(())
    }
}

/// `latency = alpha · feature + beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerfModel {
    pub kind: KernelKind,
    pub alpha: f64,
    pub beta: f64,
    pub r_squared: f64,
}

impl PerfModel {
    pub fn new(kind: KernelKind, alpha: f64, beta: f64) -> Self {
        Self { kind, alpha, beta, r_squared: 1.0 }
    }

    /// Ordinary least squares of latency on the kind's feature.
    pub fn fit(points: &[ProfilePoint], kind: KernelKind) -> Result<Self, PerfError> {
        let pts: Vec<(f64, f64)> = points.iter().map(|p| (p.feature(kind) as f64, p.latency_ms)).collect();
        let (alpha, beta, r_squared) = ols(&pts)?;
        if alpha < 0.0 {
            return Err(PerfError::Degenerate(format!("negative slope {alpha}: latency falls with load")));
        }
        Ok(Self { kind, alpha, beta, r_squared })
    }

    /// Predicted latency; an empty batch predicts the intercept.
    pub fn predict(&self, batch: &AdapterBatch) -> f64 {
        self.predict_feature(feature_or_zero(self.kind, batch))
    }

    pub fn predict_feature(&self, feature: u64) -> f64 {
        self.alpha * feature as f64 + self.beta
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serializes")
    }

    pub fn read_json(path: &Path) -> Result<Self, PerfError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Returns `(slope, intercept, r²)`. R² is exactly 1 when every residual
/// vanishes at `f64` resolution.
pub fn ols(points: &[(f64, f64)]) -> Result<(f64, f64, f64), PerfError> {
    if points.len() < 2 {
        return Err(PerfError::Degenerate(format!("need at least 2 points, got {}", points.len())));
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (dx, dy) = (x - mean_x, y - mean_y);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(PerfError::Degenerate("all feature values are equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let y_scale = points.iter().fold(0.0f64, |m, p| m.max(p.1.abs())).max(f64::MIN_POSITIVE);
    let mut ss_res = 0.0;
    let mut exact = true;
    for &(x, y) in points {
        let e = y - (slope * x + intercept);
        exact &= e.abs() <= 1e-12 * y_scale;
        ss_res += e * e;
    }
    let r2 = if exact || syy == 0.0 { 1.0 } else { (1.0 - ss_res / syy).clamp(0.0, 1.0) };
    Ok((slope, intercept, r2))
}

/// Full-iteration latency: base terms plus the kernel model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationModel {
    pub fixed_ms: f64,
    pub per_request_ms: f64,
    pub per_token_ms: f64,
    pub kernel: PerfModel,
}

impl IterationModel {
    /// The kernel model alone, no base terms.
    pub fn kernel_only(kernel: PerfModel) -> Self {
        Self { fixed_ms: 0.0, per_request_ms: 0.0, per_token_ms: 0.0, kernel }
    }

    pub fn predict(&self, batch: &AdapterBatch, tokens: u64) -> f64 {
        self.fixed_ms
            + self.per_request_ms * batch.len() as f64
            + self.per_token_ms * tokens as f64
            + self.kernel.predict(batch)
    }
}

const CSV_HEADER: [&str; 5] = ["kernel", "batch_size", "max_rank", "sum_rank", "latency_ms"];

pub fn read_profile_csv<R: Read>(reader: R) -> Result<Vec<ProfilePoint>, PerfError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(PerfError::BadPoint { line: 1, reason: format!("expected header {}", CSV_HEADER.join(",")) });
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<ProfilePoint>().enumerate() {
        let line = i + 2;
        let p = rec.map_err(|e| PerfError::BadPoint { line, reason: e.to_string() })?;
        p.validate().map_err(|reason| PerfError::BadPoint { line, reason })?;
        out.push(p);
    }
    Ok(out)
}

pub fn write_profile_csv<W: Write>(writer: W, points: &[ProfilePoint]) -> Result<(), PerfError> {
    let mut w = csv::Writer::from_writer(writer);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// Profiles the batched kernels by executing them and converting counted work
/// units to milliseconds. Every point lies exactly on the kind's cost line.
pub fn instrumented_profile(
    exec: Exec,
    kind: KernelKind,
    hidden: usize,
    batches: &[Vec<usize>],
    ms_per_work_unit: f64,
) -> Result<Vec<ProfilePoint>, PerfError> {
    let mut ranks: Vec<usize> = batches.iter().flatten().copied().collect();
    ranks.sort_unstable();
    ranks.dedup();
    let mut pool = AdapterPool::new(hidden);
    for &r in &ranks {
        // deterministic non-zero weights; values do not affect work counts
        let a = Matrix::from_vec(hidden, r, (0..hidden * r).map(|i| ((i % 7) as f32 - 3.0) * 0.01).collect())
            .expect("finite");
        let b = Matrix::from_vec(r, hidden, (0..hidden * r).map(|i| ((i % 5) as f32 - 2.0) * 0.01).collect())
            .expect("finite");
        pool.register(AdapterId(r as u32), &LoraPair { a, b })?;
    }
    let x = Matrix::from_vec(1, hidden, (0..hidden).map(|i| (i as f32).sin()).collect()).expect("finite");
    let results = exec.map(batches, |ranks| -> Result<ProfilePoint, PerfError> {
        let ids: Vec<AdapterId> = ranks.iter().map(|&r| AdapterId(r as u32)).collect();
        let batch = pool.batch(&ids)?;
        let xs = vec![x.clone(); ids.len()];
        let out = batch_prefill_adapt_with(Exec::Sequential, kind, &xs, &batch, &pool)?;
        Ok(ProfilePoint {
            kernel: kind,
            batch_size: batch.len() as u64,
            max_rank: batch.max_rank() as u64,
            sum_rank: batch.sum_rank() as u64,
            latency_ms: out.work_units as f64 * ms_per_work_unit,
        })
    });
    results.into_iter().collect()
}

/// A deterministic grid of heterogeneous batches for profiling.
pub fn profile_grid(max_batch: usize, rank_choices: &[usize]) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for size in 1..=max_batch {
        for (i, _) in rank_choices.iter().enumerate() {
            let batch: Vec<usize> = (0..size).map(|j| rank_choices[(i + j * j) % rank_choices.len()]).collect();
            out.push(batch);
        }
    }
    out
}
