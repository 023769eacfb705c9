//! Single-query multi-head attention over exact and compressed caches, a
//! synthetic KV generator, and a per-step deviation harness.
//!
//! The compressed path never materializes the cache: backbone logits come
//! from dequantized blocks, the low-rank term goes through a down projection
//! `B_h^T q_h` followed by an up projection against `A_h`, and outliers
//! contribute sparse dot products. Buffered rows participate exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::cache::{CacheError, KvCache};
use crate::gear::{CompressedBlock, GearConfig};
use crate::quant::{dequantize, QuantError};
use crate::tensor::{DenseMatrix, HeadLayout, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum AttentionError {
    #[error("query has {got} entries, expected {expected}")]
    QueryLength { expected: usize, got: usize },
    #[error("query contains a non-finite value")]
    NonFiniteQuery,
    #[error("attention needs at least one cached token")]
    EmptyCache,
    #[error("key and value caches disagree: {k_rows}x{k_cols} vs {v_rows}x{v_cols}")]
    KvShapeMismatch {
        k_rows: usize,
        k_cols: usize,
        v_rows: usize,
        v_cols: usize,
    },
    #[error("deviation run needs at least one step")]
    InvalidSteps,
    #[error("synthetic spec invalid: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

/// Exact single-query attention: per head, softmax-weighted value rows with
/// `1/sqrt(head_dim)` scaling and max-subtracted softmax.
pub fn attention_step(
    query: &[f32],
    keys: &DenseMatrix,
    values: &DenseMatrix,
    layout: HeadLayout,
) -> Result<Vec<f32>, AttentionError> {
    check_query(query, layout)?;
    if keys.rows() != values.rows() || keys.cols() != values.cols() {
        return Err(AttentionError::KvShapeMismatch {
            k_rows: keys.rows(),
            k_cols: keys.cols(),
            v_rows: values.rows(),
            v_cols: values.cols(),
        });
    }
    if keys.cols() != layout.total_channels() {
        return Err(AttentionError::QueryLength {
            expected: keys.cols(),
            got: layout.total_channels(),
        });
    }
    if keys.rows() == 0 {
        return Err(AttentionError::EmptyCache);
    }
    let n = keys.rows();
    let d_h = layout.head_dim();
    let scale = 1.0 / (d_h as f32).sqrt();
    let mut out = vec![0.0f32; layout.total_channels()];
    for h in 0..layout.head_count() {
        let cols = layout.head_range(h);
        let q_h = &query[cols.clone()];
        let mut logits = vec![0.0f32; n];
        for (i, logit) in logits.iter_mut().enumerate() {
            let row = &keys.row(i)[cols.clone()];
            *logit = dot(q_h, row) * scale;
        }
        let weights = softmax(&logits);
        let out_h = &mut out[cols.clone()];
        for (i, &w) in weights.iter().enumerate() {
            let row = &values.row(i)[cols.clone()];
            for (o, &v) in out_h.iter_mut().zip(row) {
                *o += w * v;
            }
        }
    }
    Ok(out)
}

/// Single-query attention against a compressed cache, assembling logits and
/// outputs per block without materializing the cache.
pub fn attention_step_compressed(
    query: &[f32],
    cache: &KvCache,
) -> Result<Vec<f32>, AttentionError> {
    let layout = cache.layout();
    check_query(query, layout)?;
    if cache.total_tokens() == 0 {
        return Err(AttentionError::EmptyCache);
    }
    let n = cache.total_tokens();
    let d_h = layout.head_dim();
    let scale = 1.0 / (d_h as f32).sqrt();

    let key_dequant: Vec<DenseMatrix> = cache
        .key_blocks()
        .iter()
        .map(|b| dequantize(b.backbone()))
        .collect::<Result<_, _>>()?;
    let value_dequant: Vec<DenseMatrix> = cache
        .value_blocks()
        .iter()
        .map(|b| dequantize(b.backbone()))
        .collect::<Result<_, _>>()?;

    let mut out = vec![0.0f32; layout.total_channels()];
    for h in 0..layout.head_count() {
        let cols = layout.head_range(h);
        let q_h = &query[cols.clone()];
        let mut logits = vec![0.0f32; n];

        for (block, dequant) in cache.key_blocks().iter().zip(&key_dequant) {
            let start = block.token_range().start;
            for i in 0..dequant.rows() {
                logits[start + i] = dot(q_h, &dequant.row(i)[cols.clone()]);
            }
            add_lowrank_logits(block, h, q_h, start, &mut logits);
            for e in block.outliers().entries() {
                let c = e.col as usize;
                if cols.contains(&c) {
                    logits[start + e.row as usize] += e.value * query[c];
                }
            }
        }
        let buffer_start = n - cache.buffered_tokens();
        for i in 0..cache.buffered_tokens() {
            logits[buffer_start + i] = dot(q_h, &cache.key_buffer_row(i)[cols.clone()]);
        }
        for logit in &mut logits {
            *logit *= scale;
        }
        let weights = softmax(&logits);

        let out_h = &mut out[cols.clone()];
        for (block, dequant) in cache.value_blocks().iter().zip(&value_dequant) {
            let start = block.token_range().start;
            for i in 0..dequant.rows() {
                let w = weights[start + i];
                for (o, &v) in out_h.iter_mut().zip(&dequant.row(i)[cols.clone()]) {
                    *o += w * v;
                }
            }
            add_lowrank_output(block, h, &weights, start, out_h);
            for e in block.outliers().entries() {
                let c = e.col as usize;
                if cols.contains(&c) {
                    out_h[c - cols.start] += weights[start + e.row as usize] * e.value;
                }
            }
        }
        for i in 0..cache.buffered_tokens() {
            let w = weights[buffer_start + i];
            for (o, &v) in out_h.iter_mut().zip(&cache.value_buffer_row(i)[cols.clone()]) {
                *o += w * v;
            }
        }
    }
    Ok(out)
}

/// Key-side low-rank logits: down projection `s = B_h^T q_h`, then
/// `A_h s` added to the covered rows.
fn add_lowrank_logits(
    block: &CompressedBlock,
    head: usize,
    q_h: &[f32],
    block_start: usize,
    logits: &mut [f32],
) {
    let lowrank = block.lowrank();
    if lowrank.is_empty() {
        return;
    }
    let factors = &lowrank.heads()[head];
    let b = factors.b();
    let rank = lowrank.rank();
    let mut s = vec![0.0f32; rank];
    for (j, &q) in q_h.iter().enumerate() {
        if q == 0.0 {
            continue;
        }
        for (r, sv) in s.iter_mut().enumerate() {
            *sv += q * b.get(j, r);
        }
    }
    let a = factors.a();
    let offset = block_start + lowrank.row_offset();
    for i in 0..a.rows() {
        logits[offset + i] += dot(a.row(i), &s);
    }
}

/// Value-side low-rank output: weights folded through `A_h` first, then
/// expanded with `B_h`.
fn add_lowrank_output(
    block: &CompressedBlock,
    head: usize,
    weights: &[f32],
    block_start: usize,
    out_h: &mut [f32],
) {
    let lowrank = block.lowrank();
    if lowrank.is_empty() {
        return;
    }
    let factors = &lowrank.heads()[head];
    let a = factors.a();
    let b = factors.b();
    let rank = lowrank.rank();
    let offset = block_start + lowrank.row_offset();
    let mut t = vec![0.0f32; rank];
    for i in 0..a.rows() {
        let w = weights[offset + i];
        if w == 0.0 {
            continue;
        }
        for (r, tv) in t.iter_mut().enumerate() {
            *tv += w * a.get(i, r);
        }
    }
    for (j, o) in out_h.iter_mut().enumerate() {
        let mut acc = 0.0f32;
        for (r, &tv) in t.iter().enumerate() {
            acc += tv * b.get(j, r);
        }
        *o += acc;
    }
}

fn check_query(query: &[f32], layout: HeadLayout) -> Result<(), AttentionError> {
    if query.len() != layout.total_channels() {
        return Err(AttentionError::QueryLength {
            expected: layout.total_channels(),
            got: query.len(),
        });
    }
    if query.iter().any(|v| !v.is_finite()) {
        return Err(AttentionError::NonFiniteQuery);
    }
    Ok(())
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let mut weights: Vec<f32> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f32 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    weights
}

/// Parameters of the synthetic KV generator.
///
/// Rows follow an AR(1) process with blending coefficient `token_correlation`;
/// the first `outlier_channels` channels are magnified by `outlier_scale`,
/// mimicking the fixed high-magnitude channels of real Key caches.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticKvSpec {
    pub tokens: usize,
    pub channels: usize,
    pub heads: usize,
    pub seed: u64,
    pub outlier_channels: usize,
    pub outlier_scale: f32,
    pub token_correlation: f32,
}

impl SyntheticKvSpec {
    pub fn validate(&self) -> Result<HeadLayout, AttentionError> {
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(AttentionError::InvalidSpec(format!(
                "channels {} must be a positive multiple of heads {}",
                self.channels, self.heads
            )));
        }
        if self.outlier_channels > self.channels {
            return Err(AttentionError::InvalidSpec(format!(
                "outlier channel count {} exceeds {} channels",
                self.outlier_channels, self.channels
            )));
        }
        if !(0.0..1.0).contains(&self.token_correlation) {
            return Err(AttentionError::InvalidSpec(format!(
                "token correlation {} outside [0, 1)",
                self.token_correlation
            )));
        }
        if !self.outlier_scale.is_finite() || self.outlier_scale < 0.0 {
            return Err(AttentionError::InvalidSpec(format!(
                "outlier scale {} must be finite and non-negative",
                self.outlier_scale
            )));
        }
        Ok(HeadLayout::new(self.heads, self.channels / self.heads)?)
    }

    pub fn layout(&self) -> HeadLayout {
        HeadLayout::new(self.heads, self.channels / self.heads).expect("validated spec")
    }
}

/// Deterministic synthetic prefill matrices plus decode-step streams.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticKv {
    pub key_prefill: DenseMatrix,
    pub value_prefill: DenseMatrix,
    /// One row per decode step.
    pub decode_keys: DenseMatrix,
    pub decode_values: DenseMatrix,
    /// One query vector per decode step, drawn independently of K/V.
    pub queries: DenseMatrix,
}

/// Generates `spec.tokens` prefill rows and `decode_steps` decode triples.
/// The K and V chains continue across the prefill/decode boundary.
pub fn generate_synthetic_kv(
    spec: &SyntheticKvSpec,
    decode_steps: usize,
) -> Result<SyntheticKv, AttentionError> {
    spec.validate()?;
    let total = spec.tokens + decode_steps;
    let keys = ar1_stream(spec, derive_stream_seed(spec.seed, 1), total);
    let values = ar1_stream(spec, derive_stream_seed(spec.seed, 2), total);
    let mut q_rng = ChaCha8Rng::seed_from_u64(derive_stream_seed(spec.seed, 3));
    let queries: Vec<f32> = (0..decode_steps * spec.channels)
        .map(|_| q_rng.sample::<f32, _>(StandardNormal))
        .collect();

    let d = spec.channels;
    let split = spec.tokens * d;
    Ok(SyntheticKv {
        key_prefill: DenseMatrix::new(spec.tokens, d, keys[..split].to_vec())?,
        value_prefill: DenseMatrix::new(spec.tokens, d, values[..split].to_vec())?,
        decode_keys: DenseMatrix::new(decode_steps, d, keys[split..].to_vec())?,
        decode_values: DenseMatrix::new(decode_steps, d, values[split..].to_vec())?,
        queries: DenseMatrix::new(decode_steps, d, queries)?,
    })
}

fn derive_stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

fn ar1_stream(spec: &SyntheticKvSpec, seed: u64, rows: usize) -> Vec<f32> {
    let d = spec.channels;
    let rho = spec.token_correlation;
    let innovation = (1.0 - rho * rho).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prev = vec![0.0f32; d];
    let mut out = Vec::with_capacity(rows * d);
    for t in 0..rows {
        for c in 0..d {
            let eps: f32 = rng.sample(StandardNormal);
            let base = if t == 0 {
                eps
            } else {
                rho * prev[c] + innovation * eps
            };
            prev[c] = base;
            let scaled = if c < spec.outlier_channels {
                base * spec.outlier_scale
            } else {
                base
            };
            out.push(scaled);
        }
    }
    out
}

/// Cache strategy evaluated by the deviation harness.
#[derive(Debug, Clone, PartialEq)]
pub enum CacheMode {
    /// Uncompressed reference; deviates from itself by exactly zero.
    PassThrough,
    Gear(GearConfig),
}

/// A labelled configuration in a deviation run.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationCase {
    pub id: String,
    pub mode: CacheMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviationPoint {
    pub step: usize,
    pub l2_deviation: f64,
    pub cosine: f64,
}

/// Per-step attention-output deviation of one case against the exact path.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationTrace {
    pub case_id: String,
    pub points: Vec<DeviationPoint>,
}

impl DeviationTrace {
    pub fn mean_l2(&self) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        self.points.iter().map(|p| p.l2_deviation).sum::<f64>() / self.points.len() as f64
    }
}

/// Replays one synthetic stream through an exact cache and each configured
/// cache, recording attention-output deviation at every decode step.
pub fn run_deviation(
    spec: &SyntheticKvSpec,
    cases: &[DeviationCase],
    steps: usize,
) -> Result<Vec<DeviationTrace>, AttentionError> {
    if steps == 0 {
        return Err(AttentionError::InvalidSteps);
    }
    let layout = spec.validate()?;
    let data = generate_synthetic_kv(spec, steps)?;
    let mut traces = Vec::with_capacity(cases.len());
    for case in cases {
        let mut compressed = match &case.mode {
            CacheMode::PassThrough => None,
            CacheMode::Gear(cfg) => Some(KvCache::prefill(
                &data.key_prefill,
                &data.value_prefill,
                cfg.clone(),
                layout,
            )?),
        };
        let d = spec.channels;
        let mut exact_k = data.key_prefill.values().to_vec();
        let mut exact_v = data.value_prefill.values().to_vec();
        let mut points = Vec::with_capacity(steps);
        for t in 0..steps {
            exact_k.extend_from_slice(data.decode_keys.row(t));
            exact_v.extend_from_slice(data.decode_values.row(t));
            if let Some(cache) = compressed.as_mut() {
                cache.append_token(data.decode_keys.row(t), data.decode_values.row(t))?;
            }
            let rows = spec.tokens + t + 1;
            let keys = DenseMatrix::new(rows, d, exact_k.clone())?;
            let values = DenseMatrix::new(rows, d, exact_v.clone())?;
            let query = data.queries.row(t);
            let exact_out = attention_step(query, &keys, &values, layout)?;
            let cfg_out = match compressed.as_ref() {
                None => attention_step(query, &keys, &values, layout)?,
                Some(cache) => attention_step_compressed(query, cache)?,
            };
            points.push(DeviationPoint {
                step: t + 1,
                l2_deviation: l2_distance(&exact_out, &cfg_out),
                cosine: cosine_similarity(&exact_out, &cfg_out),
            });
        }
        traces.push(DeviationTrace {
            case_id: case.id.clone(),
            points,
        });
    }
    Ok(traces)
}

fn l2_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn cosine_similarity(a: &[f32], b: &[f32]) -> f64 {
    if a == b {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        return 1.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}
