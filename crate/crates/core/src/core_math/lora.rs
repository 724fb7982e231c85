use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{MathError, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AdapterId(pub u32);

impl fmt::Display for AdapterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "adapter#{}", self.0)
    }
}

/// Attention projection an adapter can attach to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Target {
    Q,
    K,
    V,
}

impl Target {
    pub const ALL: [Target; 3] = [Target::Q, Target::K, Target::V];
}

/// The `(A, B)` factor pair for one projection: `A` is `H×r`, `B` is `r×H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraPair {
    pub a: Matrix,
    pub b: Matrix,
}

impl LoraPair {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self, MathError> {
        if a.cols() != b.rows() || a.cols() == 0 {
            return Err(MathError::Shape { operand: "B_lo", expected: (a.cols(), a.rows()), actual: b.shape() });
        }
        Ok(Self { a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    /// The adaptation term `(x·A)·B`. Never forms `A·B`.
    pub fn delta(&self, x: &Matrix) -> Result<Matrix, MathError> {
        let xa = x.matmul_named(&self.a, "A")?;
        xa.matmul_named(&self.b, "B_lo")
    }

    /// Dense `A·B`, used only by oracles.
    pub fn merged(&self) -> Matrix {
        self.a.matmul(&self.b).expect("pair shapes validated on construction")
    }
}

/// A rank-`r` adapter over a subset of the Q/K/V projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub id: AdapterId,
    rank: usize,
    hidden: usize,
    targets: Vec<(Target, LoraPair)>,
}

impl LoraAdapter {
    pub fn new(id: AdapterId, hidden: usize, mut targets: Vec<(Target, LoraPair)>) -> Result<Self, MathError> {
        let Some((_, first)) = targets.first() else {
            return Err(MathError::Invalid("adapter needs at least one target".into()));
        };
        let rank = first.rank();
        if rank == 0 || rank > hidden {
            return Err(MathError::Invalid(format!("rank {rank} outside 1..={hidden}")));
        }
        targets.sort_by_key(|(t, _)| *t);
        for w in targets.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(MathError::Invalid(format!("duplicate target {:?}", w[0].0)));
            }
        }
        for (_, pair) in &targets {
            if pair.a.shape() != (hidden, rank) {
                return Err(MathError::Shape { operand: "A", expected: (hidden, rank), actual: pair.a.shape() });
            }
            if pair.b.shape() != (rank, hidden) {
                return Err(MathError::Shape { operand: "B_lo", expected: (rank, hidden), actual: pair.b.shape() });
            }
        }
        Ok(Self { id, rank, hidden, targets })
    }

    /// Seeded adapter with entries uniform in `[-0.1, 0.1]`.
    pub fn random<R: Rng + ?Sized>(
        id: AdapterId,
        hidden: usize,
        rank: usize,
        targets: &[Target],
        rng: &mut R,
    ) -> Result<Self, MathError> {
        let pairs = targets
            .iter()
            .map(|&t| {
                let a = Matrix::random(hidden, rank, 0.1, rng);
                let b = Matrix::random(rank, hidden, 0.1, rng);
                (t, LoraPair { a, b })
            })
            .collect();
        Self::new(id, hidden, pairs)
    }

    /// All-zero adapter; a no-op on every target.
    pub fn zeros(id: AdapterId, hidden: usize, rank: usize, targets: &[Target]) -> Result<Self, MathError> {
        let pairs = targets
            .iter()
            .map(|&t| (t, LoraPair { a: Matrix::zeros(hidden, rank), b: Matrix::zeros(rank, hidden) }))
            .collect();
        Self::new(id, hidden, pairs)
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Targets in Q, K, V order.
    pub fn targets(&self) -> impl Iterator<Item = Target> + '_ {
        self.targets.iter().map(|(t, _)| *t)
    }

    pub fn target_count(&self) -> usize {
        self.targets.len()
    }

    pub fn pair(&self, target: Target) -> Option<&LoraPair> {
        self.targets.iter().find(|(t, _)| *t == target).map(|(_, p)| p)
    }

    pub fn pairs(&self) -> impl Iterator<Item = (Target, &LoraPair)> {
        self.targets.iter().map(|(t, p)| (*t, p))
    }

    /// Weight footprint in bytes: `Σ_targets (H·r + r·H) × 4`.
    pub fn byte_size(&self) -> u64 {
        byte_size_for(self.hidden, self.rank, self.targets.len())
    }
}

/// Footprint of an `f32` adapter of rank `rank` over `targets` projections.
pub fn byte_size_for(hidden: usize, rank: usize, targets: usize) -> u64 {
    (targets * 2 * hidden * rank * std::mem::size_of::<f32>()) as u64
}

/// `x·W + (x·A)·B_lo`, computed as a base product plus two low-rank products.
pub fn lora_apply(x: &Matrix, w: &Matrix, pair: &LoraPair) -> Result<Matrix, MathError> {
    if pair.a.rows() != w.rows() {
        return Err(MathError::Shape { operand: "A", expected: (w.rows(), pair.rank()), actual: pair.a.shape() });
    }
    if pair.b.cols() != w.cols() {
        return Err(MathError::Shape { operand: "B_lo", expected: (pair.rank(), w.cols()), actual: pair.b.shape() });
    }
    let mut y = x.matmul_named(w, "W")?;
    let delta = pair.delta(x)?;
    y.add_assign(&delta)?;
    Ok(y)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn hand_example() {
        let x = Matrix::from_rows(&[&[1.0, 2.0]]);
        let w = Matrix::zeros(2, 2);
        let pair = LoraPair::new(Matrix::from_rows(&[&[1.0], &[0.0]]), Matrix::from_rows(&[&[3.0, 4.0]])).unwrap();
        // naive: xA = [1*1 + 2*0] = [1]; (xA)B = [3, 4]
        assert_eq!(lora_apply(&x, &w, &pair).unwrap().as_slice(), &[3.0, 4.0]);
    }

    #[test]
    fn zero_a_is_exact_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Matrix::random(3, 8, 1.0, &mut rng);
        let w = Matrix::random(8, 8, 0.1, &mut rng);
        let pair = LoraPair { a: Matrix::zeros(8, 2), b: Matrix::random(2, 8, 5.0, &mut rng) };
        let base = x.matmul(&w).unwrap();
        assert_eq!(lora_apply(&x, &w, &pair).unwrap(), base);
    }

    #[test]
    fn matches_dense_merge() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Matrix::random(4, 8, 1.0, &mut rng);
        let w = Matrix::random(8, 8, 0.1, &mut rng);
        let pair = LoraPair { a: Matrix::random(8, 2, 0.5, &mut rng), b: Matrix::random(2, 8, 0.5, &mut rng) };
        let merged = w.add(&pair.merged()).unwrap();
        let oracle = x.matmul(&merged).unwrap();
        let got = lora_apply(&x, &w, &pair).unwrap();
        assert!(got.rel_diff(&oracle) <= 1e-5, "{}", got.rel_diff(&oracle));
    }

    #[test]
    fn shape_errors_name_operand() {
        let x = Matrix::zeros(1, 4);
        let w = Matrix::zeros(4, 4);
        let bad_a = LoraPair { a: Matrix::zeros(3, 2), b: Matrix::zeros(2, 4) };
        assert!(lora_apply(&x, &w, &bad_a).unwrap_err().to_string().contains("A"));
        let bad_b = LoraPair { a: Matrix::zeros(4, 2), b: Matrix::zeros(2, 5) };
        assert!(lora_apply(&x, &w, &bad_b).unwrap_err().to_string().contains("B_lo"));
        let bad_x = Matrix::zeros(1, 3);
        let ok = LoraPair { a: Matrix::zeros(4, 2), b: Matrix::zeros(2, 4) };
        assert!(lora_apply(&bad_x, &w, &ok).unwrap_err().to_string().contains("W"));
    }

    #[test]
    fn byte_size_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ad = LoraAdapter::random(AdapterId(1), 16, 4, &Target::ALL, &mut rng).unwrap();
        assert_eq!(ad.byte_size(), 3 * (16 * 4 + 4 * 16) * 4);
        assert!(LoraAdapter::zeros(AdapterId(2), 4, 5, &[Target::Q]).is_err());
        assert!(LoraAdapter::zeros(AdapterId(2), 4, 0, &[Target::Q]).is_err());
    }
}
