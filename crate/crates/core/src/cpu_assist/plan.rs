use serde::{Deserialize, Serialize};

use super::AssistError;

/// A contiguous run of prompt tokens handled by one CPU worker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSlice {
    pub start: usize,
    pub len: usize,
}

impl TokenSlice {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelPlan {
    /// Profiled per-core capacity `c`, in tokens.
    pub capacity: usize,
    pub slices: Vec<TokenSlice>,
}

impl ParallelPlan {
    pub fn total_tokens(&self) -> usize {
        self.slices.iter().map(|s| s.len).sum()
    }

    pub fn workers(&self) -> usize {
        self.slices.len()
    }
}

/// Splits `tokens` into `⌈tokens / capacity⌉` ordered slices of at most
/// `capacity` tokens; only the last slice may be short.
pub fn plan_parallelization(tokens: usize, capacity: usize) -> Result<ParallelPlan, AssistError> {
    if tokens == 0 || capacity == 0 {
        return Err(AssistError::Precondition(format!(
            "token count ({tokens}) and per-core capacity ({capacity}) must be >= 1"
        )));
    }
    let slices =
        (0..tokens).step_by(capacity).map(|start| TokenSlice { start, len: capacity.min(tokens - start) }).collect();
    Ok(ParallelPlan { capacity, slices })
}
