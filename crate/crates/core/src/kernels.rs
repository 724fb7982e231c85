//! CPU reference semantics of the two batched multi-rank LoRA kernels.
//!
//! Both kernels gather each request's adapter from an [`AdapterPool`] by id and
//! compute the adaptation term `x·A·B`. They differ only in how much work they
//! do for a heterogeneous batch:
//!
//! * [`bgmv`] pads every member to the batch's maximum rank, so a batch costs
//!   `|S| × max_rank × 2H` multiply-accumulates per token;
//! * [`mbgmv`] iterates each member's own rank, costing `sum_rank × 2H`.
//!
//! Work is counted by the loops themselves (one unit per multiply-accumulate,
//! padded ones included), not computed from the formula, so the cost laws are
//! checked rather than assumed.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core_math::{AdapterId, LoraPair, Matrix};
use crate::exec::Exec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("{0} is not registered in the adapter pool")]
    UnknownAdapter(AdapterId),
    #[error("{0} is already registered")]
    Duplicate(AdapterId),
    #[error("batch member {index} has rank {claimed}, pool holds rank {stored}")]
    RankMismatch { index: usize, claimed: usize, stored: usize },
    #[error("precondition failed: {0}")]
    Precondition(String),
}

/// Which batched kernel's cost law applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Bgmv,
    Mbgmv,
}

impl KernelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            KernelKind::Bgmv => "bgmv",
            KernelKind::Mbgmv => "mbgmv",
        }
    }
}

impl std::fmt::Display for KernelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for KernelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bgmv" => Ok(KernelKind::Bgmv),
            "mbgmv" => Ok(KernelKind::Mbgmv),
            other => Err(format!("unknown kernel '{other}' (expected bgmv or mbgmv)")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Slab {
    offset: usize,
    rank: usize,
}

/// Contiguous store of `(A, B)` slabs for one projection, keyed by adapter id.
///
/// Each slab is `A` (`H×r`, row-major) followed by `B` (`r×H`).
#[derive(Debug, Clone)]
pub struct AdapterPool {
    hidden: usize,
    data: Vec<f32>,
    slabs: HashMap<AdapterId, Slab>,
}

impl AdapterPool {
    pub fn new(hidden: usize) -> Self {
        Self { hidden, data: Vec::new(), slabs: HashMap::new() }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn len(&self) -> usize {
        self.slabs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slabs.is_empty()
    }

    pub fn register(&mut self, id: AdapterId, pair: &LoraPair) -> Result<(), KernelError> {
        if self.slabs.contains_key(&id) {
            return Err(KernelError::Duplicate(id));
        }
        let rank = pair.rank();
        if pair.a.shape() != (self.hidden, rank) || pair.b.shape() != (rank, self.hidden) {
            return Err(KernelError::Precondition(format!(
                "{id} has A {:?} / B {:?}, pool width is {}",
                pair.a.shape(),
                pair.b.shape(),
                self.hidden
            )));
        }
        let offset = self.data.len();
        self.data.extend_from_slice(pair.a.as_slice());
        self.data.extend_from_slice(pair.b.as_slice());
        self.slabs.insert(id, Slab { offset, rank });
        Ok(())
    }

    pub fn rank_of(&self, id: AdapterId) -> Result<usize, KernelError> {
        self.slabs.get(&id).map(|s| s.rank).ok_or(KernelError::UnknownAdapter(id))
    }

    /// Builds a batch for `ids`, reading each member's rank from the pool.
    pub fn batch(&self, ids: &[AdapterId]) -> Result<AdapterBatch, KernelError> {
        let members = ids
            .iter()
            .map(|&id| Ok(BatchMember { adapter: id, rank: self.rank_of(id)? }))
            .collect::<Result<Vec<_>, KernelError>>()?;
        Ok(AdapterBatch { members })
    }

    fn slab(&self, id: AdapterId) -> Result<(&[f32], &[f32], usize), KernelError> {
        let s = self.slabs.get(&id).ok_or(KernelError::UnknownAdapter(id))?;
        let h = self.hidden;
        let a = &self.data[s.offset..s.offset + h * s.rank];
        let b = &self.data[s.offset + h * s.rank..s.offset + 2 * h * s.rank];
        Ok((a, b, s.rank))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BatchMember {
    pub adapter: AdapterId,
    /// 0 means the request runs the base model only.
    pub rank: usize,
}

/// The multiset of adapters in a batch, one member per request.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AdapterBatch {
    pub members: Vec<BatchMember>,
}

impl AdapterBatch {
    pub fn new(members: Vec<BatchMember>) -> Self {
        Self { members }
    }

    /// Batch from raw ranks; adapter ids are positional placeholders.
    pub fn from_ranks(ranks: &[usize]) -> Self {
        Self {
            members: ranks
                .iter()
                .enumerate()
                .map(|(i, &rank)| BatchMember { adapter: AdapterId(i as u32), rank })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn max_rank(&self) -> usize {
        self.members.iter().map(|m| m.rank).max().unwrap_or(0)
    }

    pub fn sum_rank(&self) -> usize {
        self.members.iter().map(|m| m.rank).sum()
    }

    pub fn ranks(&self) -> impl Iterator<Item = usize> + '_ {
        self.members.iter().map(|m| m.rank)
    }

    pub fn push(&mut self, m: BatchMember) {
        self.members.push(m);
    }

    /// `self ∪ other` as a multiset.
    pub fn joined(&self, other: &AdapterBatch) -> AdapterBatch {
        let mut members = self.members.clone();
        members.extend_from_slice(&other.members);
        AdapterBatch { members }
    }

    pub fn with(&self, m: BatchMember) -> AdapterBatch {
        let mut out = self.clone();
        out.push(m);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelOutput {
    /// One matrix per batch member, shaped like that member's input.
    pub outputs: Vec<Matrix>,
    pub work_units: u64,
}

/// Adaptation term for one request's token rows, iterating `padded_rank`
/// rank columns. Columns at or beyond the adapter's own rank are zero padding:
/// they are visited and charged, and contribute exactly zero.
fn adapt_rows(x: &Matrix, a: &[f32], b: &[f32], rank: usize, padded_rank: usize, h: usize) -> (Matrix, u64) {
    let mut out = Matrix::zeros(x.rows(), h);
    let mut work = 0u64;
    let mut tmp = vec![0.0f32; padded_rank];
    for t in 0..x.rows() {
        let xr = x.row(t);
        tmp.iter_mut().for_each(|v| *v = 0.0);
        // x·A, one column of A per rank unit
        for (j, &xj) in xr.iter().enumerate() {
            let a_row = &a[j * rank..(j + 1) * rank];
            for (k, slot) in tmp.iter_mut().enumerate() {
                let a_jk = if k < rank { a_row[k] } else { 0.0 };
                *slot += xj * a_jk;
            }
        }
        work += (padded_rank * h) as u64;
        // (x·A)·B, one row of B per rank unit
        let out_row = out.row_mut(t);
        for (k, &v) in tmp.iter().enumerate() {
            if k < rank {
                let b_row = &b[k * h..(k + 1) * h];
                for (o, &bk) in out_row.iter_mut().zip(b_row) {
                    *o += v * bk;
                }
            }
        }
        work += (padded_rank * h) as u64;
    }
    (out, work)
}

fn check_inputs(xs: &[Matrix], batch: &AdapterBatch, pool: &AdapterPool) -> Result<(), KernelError> {
    if batch.is_empty() {
        return Err(KernelError::Precondition("empty batch".into()));
    }
    if xs.len() != batch.len() {
        return Err(KernelError::Precondition(format!("{} inputs for {} batch members", xs.len(), batch.len())));
    }
    for (i, (x, m)) in xs.iter().zip(&batch.members).enumerate() {
        if x.cols() != pool.hidden() {
            return Err(KernelError::Precondition(format!(
                "input {i} has {} columns, pool width is {}",
                x.cols(),
                pool.hidden()
            )));
        }
        if x.rows() == 0 {
            return Err(KernelError::Precondition(format!("input {i} has no tokens")));
        }
        let stored = pool.rank_of(m.adapter)?;
        if stored != m.rank {
            return Err(KernelError::RankMismatch { index: i, claimed: m.rank, stored });
        }
    }
    Ok(())
}

/// Multi-token batched adaptation under either kernel's padding rule.
pub fn batch_prefill_adapt_with(
    exec: Exec,
    kind: KernelKind,
    xs: &[Matrix],
    batch: &AdapterBatch,
    pool: &AdapterPool,
) -> Result<KernelOutput, KernelError> {
    check_inputs(xs, batch, pool)?;
    let max_rank = batch.max_rank();
    let h = pool.hidden();
    let idx: Vec<usize> = (0..xs.len()).collect();
    let per_request = exec.map(&idx, |&i| {
        let (a, b, rank) = pool.slab(batch.members[i].adapter)?;
        let padded = match kind {
            KernelKind::Bgmv => max_rank,
            KernelKind::Mbgmv => rank,
        };
        Ok(adapt_rows(&xs[i], a, b, rank, padded, h))
    });
    let mut outputs = Vec::with_capacity(xs.len());
    let mut work_units = 0;
    for r in per_request {
        let (m, w) = r?;
        outputs.push(m);
        work_units += w;
    }
    Ok(KernelOutput { outputs, work_units })
}

pub fn batch_prefill_adapt(
    kind: KernelKind,
    xs: &[Matrix],
    batch: &AdapterBatch,
    pool: &AdapterPool,
) -> Result<KernelOutput, KernelError> {
    batch_prefill_adapt_with(Exec::default(), kind, xs, batch, pool)
}

fn single_token(xs: &[Matrix]) -> Result<(), KernelError> {
    match xs.iter().position(|x| x.rows() != 1) {
        Some(i) => Err(KernelError::Precondition(format!("input {i} is not a single row"))),
        None => Ok(()),
    }
}

/// Padded batched gather matrix-vector multiply over one row per request.
pub fn bgmv_with(
    exec: Exec,
    xs: &[Matrix],
    batch: &AdapterBatch,
    pool: &AdapterPool,
) -> Result<KernelOutput, KernelError> {
    single_token(xs)?;
    batch_prefill_adapt_with(exec, KernelKind::Bgmv, xs, batch, pool)
}

pub fn bgmv(xs: &[Matrix], batch: &AdapterBatch, pool: &AdapterPool) -> Result<KernelOutput, KernelError> {
    bgmv_with(Exec::default(), xs, batch, pool)
}

/// Padding-free multi-size variant of [`bgmv`].
pub fn mbgmv_with(
    exec: Exec,
    xs: &[Matrix],
    batch: &AdapterBatch,
    pool: &AdapterPool,
) -> Result<KernelOutput, KernelError> {
    single_token(xs)?;
    batch_prefill_adapt_with(exec, KernelKind::Mbgmv, xs, batch, pool)
}

pub fn mbgmv(xs: &[Matrix], batch: &AdapterBatch, pool: &AdapterPool) -> Result<KernelOutput, KernelError> {
    mbgmv_with(Exec::default(), xs, batch, pool)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn pool_with(h: usize, ranks: &[usize], seed: u64) -> AdapterPool {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pool = AdapterPool::new(h);
        for (i, &r) in ranks.iter().enumerate() {
            let pair = LoraPair { a: Matrix::random(h, r, 0.5, &mut rng), b: Matrix::random(r, h, 0.5, &mut rng) };
            pool.register(AdapterId(i as u32), &pair).unwrap();
        }
        pool
    }

    fn rows(n: usize, h: usize, seed: u64) -> Vec<Matrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Matrix::random(1, h, 1.0, &mut rng)).collect()
    }

    #[test]
    fn stated_cost_laws() {
        let pool = pool_with(8, &[2, 2, 8], 1);
        let batch = pool.batch(&[AdapterId(0), AdapterId(1), AdapterId(2)]).unwrap();
        let xs = rows(3, 8, 2);
        assert_eq!(bgmv(&xs, &batch, &pool).unwrap().work_units, 384);
        assert_eq!(mbgmv(&xs, &batch, &pool).unwrap().work_units, 192);

        let homo = pool_with(8, &[8, 8, 8], 1);
        let batch = homo.batch(&[AdapterId(0), AdapterId(1), AdapterId(2)]).unwrap();
        assert_eq!(bgmv(&xs, &batch, &homo).unwrap().work_units, mbgmv(&xs, &batch, &homo).unwrap().work_units);
    }

    #[test]
    fn single_request_matches_core_math() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pair = LoraPair { a: Matrix::random(8, 4, 0.5, &mut rng), b: Matrix::random(4, 8, 0.5, &mut rng) };
        let mut pool = AdapterPool::new(8);
        pool.register(AdapterId(7), &pair).unwrap();
        let x = Matrix::random(1, 8, 1.0, &mut rng);
        let out = bgmv(std::slice::from_ref(&x), &pool.batch(&[AdapterId(7)]).unwrap(), &pool).unwrap();
        assert!(out.outputs[0].rel_diff(&pair.delta(&x).unwrap()) <= 1e-6);
    }

    #[test]
    fn zero_adapters_give_zero_outputs() {
        let mut pool = AdapterPool::new(4);
        for i in 0..3 {
            pool.register(AdapterId(i), &LoraPair { a: Matrix::zeros(4, 2), b: Matrix::zeros(2, 4) }).unwrap();
        }
        let batch = pool.batch(&[AdapterId(0), AdapterId(2), AdapterId(2)]).unwrap();
        let out = bgmv(&rows(3, 4, 0), &batch, &pool).unwrap();
        assert!(out.outputs.iter().all(|m| m.as_slice().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn errors() {
        let pool = pool_with(4, &[2], 0);
        let batch = AdapterBatch::new(vec![BatchMember { adapter: AdapterId(9), rank: 2 }]);
        assert_eq!(bgmv(&rows(1, 4, 0), &batch, &pool).unwrap_err(), KernelError::UnknownAdapter(AdapterId(9)));
        assert!(pool.batch(&[AdapterId(3)]).is_err());
        let empty = AdapterBatch::default();
        assert!(matches!(bgmv(&[], &empty, &pool), Err(KernelError::Precondition(_))));
        let ok = pool.batch(&[AdapterId(0)]).unwrap();
        assert!(matches!(
            batch_prefill_adapt(KernelKind::Bgmv, &[Matrix::zeros(0, 4)], &ok, &pool),
            Err(KernelError::Precondition(_))
        ));
        let wrong_rank = AdapterBatch::new(vec![BatchMember { adapter: AdapterId(0), rank: 3 }]);
        assert!(matches!(bgmv(&rows(1, 4, 0), &wrong_rank, &pool), Err(KernelError::RankMismatch { .. })));
        let mut dup = pool.clone();
        let pair = LoraPair { a: Matrix::zeros(4, 1), b: Matrix::zeros(1, 4) };
        assert_eq!(dup.register(AdapterId(0), &pair), Err(KernelError::Duplicate(AdapterId(0))));
    }

    #[test]
    fn prefill_variant_reduces_to_bgmv_and_scales_work() {
        let pool = pool_with(8, &[2, 6], 3);
        let batch = pool.batch(&[AdapterId(0), AdapterId(1)]).unwrap();
        let xs = rows(2, 8, 5);
        let a = batch_prefill_adapt(KernelKind::Bgmv, &xs, &batch, &pool).unwrap();
        assert_eq!(a, bgmv(&xs, &batch, &pool).unwrap());

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let multi = vec![Matrix::random(2, 8, 1.0, &mut rng), Matrix::random(3, 8, 1.0, &mut rng)];
        let out = batch_prefill_adapt(KernelKind::Mbgmv, &multi, &batch, &pool).unwrap();
        assert_eq!(out.work_units, ((2 * 2 + 3 * 6) * 16) as u64);
        let padded = batch_prefill_adapt(KernelKind::Bgmv, &multi, &batch, &pool).unwrap();
        assert_eq!(padded.work_units, ((2 + 3) * 6 * 16) as u64);
        assert_eq!(out.outputs, padded.outputs);
    }

    #[test]
    fn exec_modes_agree() {
        let pool = pool_with(16, &[1, 4, 9, 16], 6);
        let ids: Vec<_> = (0..4).map(AdapterId).collect();
        let batch = pool.batch(&ids).unwrap();
        let xs = rows(4, 16, 1);
        assert_eq!(
            bgmv_with(Exec::Sequential, &xs, &batch, &pool).unwrap(),
            bgmv_with(Exec::Parallel, &xs, &batch, &pool).unwrap()
        );
    }
}
