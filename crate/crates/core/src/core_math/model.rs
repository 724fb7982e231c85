use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{lora_apply, LoraAdapter, MathError, Matrix, Target};

const WEIGHT_SCALE: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub num_layers: usize,
    pub head_count: usize,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self { hidden_size: 8, intermediate_size: 16, num_layers: 2, head_count: 1 }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<(), MathError> {
        if self.hidden_size == 0 || self.intermediate_size == 0 || self.num_layers == 0 {
            return Err(MathError::Invalid("hidden, intermediate and layer counts must be >= 1".into()));
        }
        if self.head_count == 0 || !self.hidden_size.is_multiple_of(self.head_count) {
            return Err(MathError::Invalid(format!(
                "hidden size {} not divisible by head count {}",
                self.hidden_size, self.head_count
            )));
        }
        Ok(())
    }
}

/// Base weights of one transformer layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub w_1: Matrix,
    pub w_2: Matrix,
    /// Attention heads; 1 reproduces the single-head `softmax(QKᵀ/√H)` form.
    pub head_count: usize,
}

impl LayerWeights {
    pub fn zeros(cfg: &ToyModelConfig) -> Self {
        let (h, hi) = (cfg.hidden_size, cfg.intermediate_size);
        Self {
            w_q: Matrix::zeros(h, h),
            w_k: Matrix::zeros(h, h),
            w_v: Matrix::zeros(h, h),
            w_o: Matrix::zeros(h, h),
            w_1: Matrix::zeros(h, hi),
            w_2: Matrix::zeros(hi, h),
            head_count: cfg.head_count,
        }
    }

    pub fn random<R: Rng + ?Sized>(cfg: &ToyModelConfig, rng: &mut R) -> Self {
        let (h, hi) = (cfg.hidden_size, cfg.intermediate_size);
        Self {
            w_q: Matrix::random(h, h, WEIGHT_SCALE, rng),
            w_k: Matrix::random(h, h, WEIGHT_SCALE, rng),
            w_v: Matrix::random(h, h, WEIGHT_SCALE, rng),
            w_o: Matrix::random(h, h, WEIGHT_SCALE, rng),
            w_1: Matrix::random(h, hi, WEIGHT_SCALE, rng),
            w_2: Matrix::random(hi, h, WEIGHT_SCALE, rng),
            head_count: cfg.head_count,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_q.rows()
    }

    pub fn projection(&self, target: Target) -> &Matrix {
        match target {
            Target::Q => &self.w_q,
            Target::K => &self.w_k,
            Target::V => &self.w_v,
        }
    }

    pub fn check(&self) -> Result<(), MathError> {
        let h = self.hidden();
        let hi = self.w_1.cols();
        for (name, m, want) in [
            ("W_Q", &self.w_q, (h, h)),
            ("W_K", &self.w_k, (h, h)),
            ("W_V", &self.w_v, (h, h)),
            ("W_O", &self.w_o, (h, h)),
            ("W_1", &self.w_1, (h, hi)),
            ("W_2", &self.w_2, (hi, h)),
        ] {
            if m.shape() != want {
                return Err(MathError::Shape { operand: name, expected: want, actual: m.shape() });
            }
        }
        if self.head_count == 0 || !h.is_multiple_of(self.head_count) {
            return Err(MathError::Invalid(format!("head count {} does not divide {h}", self.head_count)));
        }
        Ok(())
    }
}

/// Cached keys and values of one layer.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerCache {
    pub keys: Matrix,
    pub values: Matrix,
}

impl LayerCache {
    pub fn len(&self) -> usize {
        debug_assert_eq!(self.keys.rows(), self.values.rows());
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct KvCache {
    pub layers: Vec<LayerCache>,
}

impl KvCache {
    /// Cached token count; identical across layers.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, LayerCache::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &mut Matrix) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Causal scaled-dot-product attention. Query row `i` sits at absolute
/// position `offset + i` and sees keys `0..=offset + i`.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix, offset: usize, heads: usize) -> Result<Matrix, MathError> {
    let h = q.cols();
    if k.cols() != h || v.cols() != h || k.rows() != v.rows() {
        return Err(MathError::Shape { operand: "keys/values", expected: (k.rows(), h), actual: v.shape() });
    }
    if offset + q.rows() > k.rows() {
        return Err(MathError::State(format!(
            "{} queries at offset {offset} exceed {} cached keys",
            q.rows(),
            k.rows()
        )));
    }
    let d = h / heads;
    let scale = 1.0 / (d as f32).sqrt();
    let mut out = Matrix::zeros(q.rows(), h);
    for head in 0..heads {
        let cols = head * d..(head + 1) * d;
        for i in 0..q.rows() {
            let visible = offset + i + 1;
            let qi = &q.row(i)[cols.clone()];
            let mut scores = Matrix::zeros(1, visible);
            for j in 0..visible {
                let kj = &k.row(j)[cols.clone()];
                let dot: f32 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                scores.set(0, j, dot * scale);
            }
            softmax_rows(&mut scores);
            let out_row = &mut out.row_mut(i)[cols.clone()];
            for j in 0..visible {
                let p = scores.get(0, j);
                for (o, &vv) in out_row.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *o += p * vv;
                }
            }
        }
    }
    Ok(out)
}

fn ensure_finite(m: &Matrix, layer: usize, stage: &'static str) -> Result<(), MathError> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(MathError::Numeric { layer, stage })
    }
}

fn project(x: &Matrix, w: &LayerWeights, target: Target, adapter: Option<&LoraAdapter>) -> Result<Matrix, MathError> {
    let base = w.projection(target);
    match adapter.and_then(|a| a.pair(target)) {
        Some(pair) => lora_apply(x, base, pair),
        None => x.matmul_named(
            base,
            match target {
                Target::Q => "W_Q",
                Target::K => "W_K",
                Target::V => "W_V",
            },
        ),
    }
}

/// `(x_Q, x_K, x_V)`, each through [`lora_apply`] when the adapter targets it.
pub fn project_qkv(
    x: &Matrix,
    w: &LayerWeights,
    adapter: Option<&LoraAdapter>,
) -> Result<(Matrix, Matrix, Matrix), MathError> {
    Ok((project(x, w, Target::Q, adapter)?, project(x, w, Target::K, adapter)?, project(x, w, Target::V, adapter)?))
}

/// Everything after the Q/K/V projections: attention over `cache`, output
/// projection, both residuals and the relu MLP.
pub fn attend_and_mlp(
    x: &Matrix,
    q: &Matrix,
    cache: &LayerCache,
    offset: usize,
    w: &LayerWeights,
    layer: usize,
) -> Result<Matrix, MathError> {
    let attn = attention(q, &cache.keys, &cache.values, offset, w.head_count)?;
    ensure_finite(&attn, layer, "attention")?;
    let mut out = attn.matmul_named(&w.w_o, "W_O")?;
    out.add_assign(x)?;
    let hidden = out.matmul_named(&w.w_1, "W_1")?.map(|v| v.max(0.0));
    let mut next = hidden.matmul_named(&w.w_2, "W_2")?;
    next.add_assign(&out)?;
    ensure_finite(&next, layer, "mlp")?;
    Ok(next)
}

/// One prefill layer over an `L×H` prompt block; returns the layer output and its KV cache.
pub fn prefill_layer(
    x: &Matrix,
    w: &LayerWeights,
    adapter: Option<&LoraAdapter>,
    layer: usize,
) -> Result<(Matrix, LayerCache), MathError> {
    w.check()?;
    if x.rows() == 0 {
        return Err(MathError::Invalid("prefill needs at least one token".into()));
    }
    let (q, k, v) = project_qkv(x, w, adapter)?;
    ensure_finite(&q, layer, "projection")?;
    let cache = LayerCache { keys: k, values: v };
    let out = attend_and_mlp(x, &q, &cache, 0, w, layer)?;
    Ok((out, cache))
}

/// One decode step for a single token `t` (`1×H`); grows `cache` by one row.
pub fn decode_step(
    t: &Matrix,
    cache: &mut LayerCache,
    w: &LayerWeights,
    adapter: Option<&LoraAdapter>,
    layer: usize,
) -> Result<Matrix, MathError> {
    w.check()?;
    if t.rows() != 1 {
        return Err(MathError::Shape { operand: "token", expected: (1, w.hidden()), actual: t.shape() });
    }
    if cache.is_empty() {
        return Err(MathError::State(format!("layer {layer} cache is empty")));
    }
    if cache.keys.cols() != w.hidden() || cache.keys.rows() != cache.values.rows() {
        return Err(MathError::State(format!(
            "layer {layer} cache is {:?}/{:?}, weights expect width {}",
            cache.keys.shape(),
            cache.values.shape(),
            w.hidden()
        )));
    }
    let (q, k, v) = project_qkv(t, w, adapter)?;
    ensure_finite(&q, layer, "projection")?;
    cache.keys.append_rows(&k)?;
    cache.values.append_rows(&v)?;
    let offset = cache.len() - 1;
    attend_and_mlp(t, &q, cache, offset, w, layer)
}

/// A stack of layers with seeded weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub config: ToyModelConfig,
    pub layers: Vec<LayerWeights>,
}

impl ToyModel {
    /// Weights uniform in `[-0.1, 0.1]` from a ChaCha8 stream.
    pub fn seeded(config: ToyModelConfig, seed: u64) -> Result<Self, MathError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..config.num_layers).map(|_| LayerWeights::random(&config, &mut rng)).collect();
        Ok(Self { config, layers })
    }

    pub fn zeros(config: ToyModelConfig) -> Result<Self, MathError> {
        config.validate()?;
        Ok(Self { config, layers: (0..config.num_layers).map(|_| LayerWeights::zeros(&config)).collect() })
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden_size
    }

    pub fn prefill(&self, x: &Matrix, adapter: Option<&LoraAdapter>) -> Result<(Matrix, KvCache), MathError> {
        let mut cache = KvCache::default();
        let mut h = x.clone();
        for (i, w) in self.layers.iter().enumerate() {
            let (next, layer_cache) = prefill_layer(&h, w, adapter, i)?;
            cache.layers.push(layer_cache);
            h = next;
        }
        Ok((h, cache))
    }

    pub fn decode(&self, t: &Matrix, cache: &mut KvCache, adapter: Option<&LoraAdapter>) -> Result<Matrix, MathError> {
        if cache.layers.len() != self.layers.len() {
            return Err(MathError::State(format!(
                "cache has {} layers, model has {}",
                cache.layers.len(),
                self.layers.len()
            )));
        }
        let mut h = t.clone();
        for (i, (w, lc)) in self.layers.iter().zip(cache.layers.iter_mut()).enumerate() {
            h = decode_step(&h, lc, w, adapter, i)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct Generation {
    /// One `1×H` output per generated token; the first comes from prefill.
    pub outputs: Vec<Matrix>,
    pub cache: KvCache,
    pub prefill_steps: usize,
    pub decode_steps: usize,
}

/// Prefill a seeded random prompt, then run `out_len - 1` decode steps,
/// feeding each output embedding back in as the next token.
pub fn generate(
    prompt_len: usize,
    out_len: usize,
    model: &ToyModel,
    adapter: Option<&LoraAdapter>,
    seed: u64,
) -> Result<Generation, MathError> {
    if out_len == 0 || prompt_len == 0 {
        return Err(MathError::Invalid("prompt_len and out_len must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prompt = Matrix::random(prompt_len, model.hidden(), 1.0, &mut rng);
    let (h, mut cache) = model.prefill(&prompt, adapter)?;
    let mut outputs = vec![h.row_slice(prompt_len - 1, 1)];
    let mut decode_steps = 0;
    while outputs.len() < out_len {
        let next = model.decode(outputs.last().expect("non-empty"), &mut cache, adapter)?;
        outputs.push(next);
        decode_steps += 1;
    }
    Ok(Generation { outputs, cache, prefill_steps: 1, decode_steps })
}
