//! Dual bag-of-embeddings encoder with hand-derived gradients.
//!
//! Each side (question, passage) owns an independent tower:
//! mean-pooled token embeddings, optional dropout on the pooled vector,
//! `tanh(W1ᵀx + b1)`, then `W2ᵀh + b2`. Parameters are `f64` so that central
//! finite differences can check the analytic gradients tightly.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TokenId;
use crate::util::{self, read_f64s, read_u32, read_u64, write_f64s, write_u32, write_u64};

pub const PARAM_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_DROPOUT: f64 = 0.1;
pub const DEFAULT_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("empty token sequence")]
    EmptyInput,
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: TokenId, vocab_size: usize },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("forward cache is from parameter generation {cached}, parameters are at {current}")]
    StaleCache { cached: u64, current: u64 },
    #[error("parameter format version {found} is not supported (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },
    #[error("parameter i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub vocab_size: usize,
    pub d_emb: usize,
    pub d_hidden: usize,
    pub d_out: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Question,
    Passage,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Eval,
    /// Dropout on the pooled vector with a mask drawn from `seed`.
    Train { seed: u64, rate: f64 },
}

/// One tower's tensors. Also used as the shape for gradients and optimizer
/// moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Tower {
    /// `vocab_size × d_emb`, row-major.
    pub embeddings: Vec<f64>,
    /// `d_emb × d_hidden`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `d_hidden × d_out`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Tower {
    pub fn zeros(dims: &EncoderDims) -> Self {
        Tower {
            embeddings: vec![0.0; dims.vocab_size * dims.d_emb],
            w1: vec![0.0; dims.d_emb * dims.d_hidden],
            b1: vec![0.0; dims.d_hidden],
            w2: vec![0.0; dims.d_hidden * dims.d_out],
            b2: vec![0.0; dims.d_out],
        }
    }

    fn init(dims: &EncoderDims, scale: f64, rng: &mut impl Rng) -> Self {
        let mut t = Tower::zeros(dims);
        for v in &mut t.embeddings {
            *v = rng.gen_range(-scale..scale);
        }
        let a1 = (6.0 / (dims.d_emb + dims.d_hidden) as f64).sqrt();
        for v in &mut t.w1 {
            *v = rng.gen_range(-a1..a1);
        }
        let a2 = (6.0 / (dims.d_hidden + dims.d_out) as f64).sqrt();
        for v in &mut t.w2 {
            *v = rng.gen_range(-a2..a2);
        }
        t
    }

    pub fn tensors(&self) -> [&[f64]; 5] {
        [&self.embeddings, &self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [
            &mut self.embeddings,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// Question tower, passage tower, in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct TowerPair {
    pub question: Tower,
    pub passage: Tower,
}

impl TowerPair {
    pub fn zeros(dims: &EncoderDims) -> Self {
        TowerPair {
            question: Tower::zeros(dims),
            passage: Tower::zeros(dims),
        }
    }

    pub fn side(&self, side: Side) -> &Tower {
        match side {
            Side::Question => &self.question,
            Side::Passage => &self.passage,
        }
    }

    pub fn side_mut(&mut self, side: Side) -> &mut Tower {
        match side {
            Side::Question => &mut self.question,
            Side::Passage => &mut self.passage,
        }
    }

    /// All ten tensors, question tower first.
    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.question
            .tensors()
            .into_iter()
            .chain(self.passage.tensors())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.question
            .tensors_mut()
            .into_iter()
            .chain(self.passage.tensors_mut())
    }

    pub fn fill(&mut self, value: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = value);
        }
    }

    /// `self += other`, element-wise.
    pub fn add_assign(&mut self, other: &TowerPair) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().flat_map(|t| t.iter()).all(|v| v.is_finite())
    }

    pub fn num_values(&self) -> usize {
        self.tensors().map(<[f64]>::len).sum()
    }

    pub(crate) fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        for t in self.tensors() {
            write_f64s(w, t)?;
        }
        Ok(())
    }

    pub(crate) fn read_from(r: &mut impl Read, dims: &EncoderDims) -> std::io::Result<Self> {
        let mut pair = TowerPair::zeros(dims);
        for t in pair.tensors_mut() {
            let n = t.len();
            *t = read_f64s(r, n)?;
        }
        Ok(pair)
    }
}

/// Accumulates ∂L/∂Φ for both towers.
pub type GradientBuffer = TowerPair;

/// Retriever parameters Φ = [Φ_q, Φ_d].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    pub towers: TowerPair,
    /// Bumped on every optimizer write; forward caches record it.
    pub generation: u64,
}

impl EncoderParams {
    /// Uniform(-0.1, 0.1) embeddings, Xavier-uniform projections, zero biases.
    pub fn init(dims: EncoderDims, seed: u64) -> Self {
        Self::init_scaled(dims, seed, DEFAULT_INIT_SCALE)
    }

    /// As [`EncoderParams::init`] with embeddings drawn from
    /// Uniform(-scale, scale).
    pub fn init_scaled(dims: EncoderDims, seed: u64, scale: f64) -> Self {
        let mut rng = util::rng(seed);
        let question = Tower::init(&dims, scale, &mut rng);
        let passage = Tower::init(&dims, scale, &mut rng);
        EncoderParams {
            dims,
            towers: TowerPair { question, passage },
            generation: 0,
        }
    }

    pub fn zeros(dims: EncoderDims) -> Self {
        EncoderParams {
            dims,
            towers: TowerPair::zeros(&dims),
            generation: 0,
        }
    }

    pub fn gradient_buffer(&self) -> GradientBuffer {
        TowerPair::zeros(&self.dims)
    }

    /// Header `(format, |V|, d_emb, d_h, d)` then every tensor as LE `f64`.
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), EncoderError> {
        write_u32(w, PARAM_FORMAT_VERSION)?;
        for v in [
            self.dims.vocab_size,
            self.dims.d_emb,
            self.dims.d_hidden,
            self.dims.d_out,
        ] {
            write_u64(w, v as u64)?;
        }
        self.towers.write_to(w)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, EncoderError> {
        let found = read_u32(r)?;
        if found != PARAM_FORMAT_VERSION {
            return Err(EncoderError::FormatVersion {
                found,
                expected: PARAM_FORMAT_VERSION,
            });
        }
        let mut d = [0usize; 4];
        for v in &mut d {
            *v = read_u64(r)? as usize;
        }
        let dims = EncoderDims {
            vocab_size: d[0],
            d_emb: d[1],
            d_hidden: d[2],
            d_out: d[3],
        };
        let towers = TowerPair::read_from(r, &dims)?;
        Ok(EncoderParams {
            dims,
            towers,
            generation: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Activations kept from a forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub side: Side,
    tokens: Vec<TokenId>,
    /// Pooled vector after dropout.
    pooled: Vec<f64>,
    mask: Option<Vec<f64>>,
    hidden: Vec<f64>,
    generation: u64,
    pub output: Embedding,
}

fn check_tokens(tokens: &[TokenId], dims: &EncoderDims) -> Result<(), EncoderError> {
    if tokens.is_empty() {
        return Err(EncoderError::EmptyInput);
    }
    if let Some(&id) = tokens.iter().find(|&&t| t as usize >= dims.vocab_size) {
        return Err(EncoderError::TokenOutOfRange {
            id,
            vocab_size: dims.vocab_size,
        });
    }
    Ok(())
}

fn dropout_mask(dim: usize, seed: u64, rate: f64) -> Vec<f64> {
    let mut rng = util::rng(seed);
    let keep = 1.0 - rate;
    (0..dim)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect()
}

/// Forward pass keeping the activations needed for [`backward`].
pub fn forward(
    tokens: &[TokenId],
    side: Side,
    params: &EncoderParams,
    mode: Mode,
) -> Result<ForwardCache, EncoderError> {
    let dims = &params.dims;
    check_tokens(tokens, dims)?;
    let tower = params.towers.side(side);
    let (d_emb, d_h, d_out) = (dims.d_emb, dims.d_hidden, dims.d_out);

    let mut pooled = vec![0.0; d_emb];
    for &t in tokens {
        let row = &tower.embeddings[t as usize * d_emb..(t as usize + 1) * d_emb];
        for (p, e) in pooled.iter_mut().zip(row) {
            *p += e;
        }
    }
    let inv = 1.0 / tokens.len() as f64;
    pooled.iter_mut().for_each(|p| *p *= inv);

    let mask = match mode {
        Mode::Train { seed, rate } if rate > 0.0 => {
            let m = dropout_mask(d_emb, seed, rate);
            for (p, k) in pooled.iter_mut().zip(&m) {
                *p *= k;
            }
            Some(m)
        }
        _ => None,
    };

    let mut hidden = tower.b1.clone();
    for (i, &x) in pooled.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        let row = &tower.w1[i * d_h..(i + 1) * d_h];
        for (h, w) in hidden.iter_mut().zip(row) {
            *h += x * w;
        }
    }
    hidden.iter_mut().for_each(|h| *h = h.tanh());

    let mut out = tower.b2.clone();
    for (j, &h) in hidden.iter().enumerate() {
        let row = &tower.w2[j * d_out..(j + 1) * d_out];
        for (o, w) in out.iter_mut().zip(row) {
            *o += h * w;
        }
    }

    Ok(ForwardCache {
        side,
        tokens: tokens.to_vec(),
        pooled,
        mask,
        hidden,
        generation: params.generation,
        output: Embedding(out),
    })
}

/// Forward pass returning only the embedding.
pub fn encode(
    tokens: &[TokenId],
    side: Side,
    params: &EncoderParams,
    mode: Mode,
) -> Result<Embedding, EncoderError> {
    forward(tokens, side, params, mode).map(|c| c.output)
}

/// Retrieval score: inner product of question and passage embeddings.
pub fn score_pair(q: &Embedding, p: &Embedding) -> Result<f64, EncoderError> {
    if q.dim() != p.dim() {
        return Err(EncoderError::DimensionMismatch {
            left: q.dim(),
            right: p.dim(),
        });
    }
    Ok(q.0.iter().zip(&p.0).map(|(a, b)| a * b).sum())
}

/// Accumulates `upstreamᵀ · ∂embedding/∂Φ_side` into `grads`.
pub fn backward(
    cache: &ForwardCache,
    params: &EncoderParams,
    upstream: &[f64],
    grads: &mut GradientBuffer,
) -> Result<(), EncoderError> {
    if cache.generation != params.generation {
        return Err(EncoderError::StaleCache {
            cached: cache.generation,
            current: params.generation,
        });
    }
    let dims = &params.dims;
    if upstream.len() != dims.d_out {
        return Err(EncoderError::DimensionMismatch {
            left: upstream.len(),
            right: dims.d_out,
        });
    }
    if upstream.iter().all(|&g| g == 0.0) {
        return Ok(());
    }
    let (d_emb, d_h, d_out) = (dims.d_emb, dims.d_hidden, dims.d_out);
    let tower = params.towers.side(cache.side);
    let g = grads.side_mut(cache.side);

    for (b, u) in g.b2.iter_mut().zip(upstream) {
        *b += u;
    }
    let mut d_hidden = vec![0.0; d_h];
    for j in 0..d_h {
        let h = cache.hidden[j];
        let w_row = &tower.w2[j * d_out..(j + 1) * d_out];
        let gw_row = &mut g.w2[j * d_out..(j + 1) * d_out];
        let mut acc = 0.0;
        for k in 0..d_out {
            gw_row[k] += h * upstream[k];
            acc += w_row[k] * upstream[k];
        }
        d_hidden[j] = acc * (1.0 - h * h);
    }
    for (b, d) in g.b1.iter_mut().zip(&d_hidden) {
        *b += d;
    }
    let mut d_pooled = vec![0.0; d_emb];
    for i in 0..d_emb {
        let x = cache.pooled[i];
        let w_row = &tower.w1[i * d_h..(i + 1) * d_h];
        let gw_row = &mut g.w1[i * d_h..(i + 1) * d_h];
        let mut acc = 0.0;
        for j in 0..d_h {
            gw_row[j] += x * d_hidden[j];
            acc += w_row[j] * d_hidden[j];
        }
        d_pooled[i] = acc;
    }
    if let Some(mask) = &cache.mask {
        for (d, m) in d_pooled.iter_mut().zip(mask) {
            *d *= m;
        }
    }
    let inv = 1.0 / cache.tokens.len() as f64;
    for &t in &cache.tokens {
        let row = &mut g.embeddings[t as usize * d_emb..(t as usize + 1) * d_emb];
        for (r, d) in row.iter_mut().zip(&d_pooled) {
            *r += d * inv;
        }
    }
    Ok(())
}
