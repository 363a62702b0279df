//! Deterministic toy transformer blocks hosting merging and restoration.
//!
//! Weights are drawn from the SplitMix64 normal stream scaled by
//! `1/sqrt(d_model)`; layer norms start at gain 1 and bias 0. Blocks come in
//! two flavours:
//!
//! - perception: `x' = MSA(LN(x)) + x`, `x'' = MaMe(x')`, `out = MLP(LN(x'')) + x''`.
//!   The sequence gets shorter.
//! - synthesis: `x' = MaRe(MSA(MaMe(LN(x)))) + x`, `out = MLP(LN(x')) + x'`.
//!   Attention runs on the reduced sequence, the output keeps its length.

use alloc::format;
use alloc::vec::Vec;

use crate::merge::{mame_with_metric, FusionState, MetricSource, SimilarityConfig};
use crate::partition::{make_plan, PartitionStyle};
use crate::restore::restore;
use crate::rng::SplitMix64;
use crate::tensor::{dot, Matrix, TokenMatrix};
use crate::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockMode {
    Perception,
    Synthesis,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockConfig {
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
    pub mode: BlockMode,
    pub merge: SimilarityConfig,
    pub plan_style: PartitionStyle,
    pub ratio_src: f64,
    pub plan_seed: u64,
}

impl BlockConfig {
    pub fn new(d_model: usize, heads: usize) -> Self {
        Self {
            d_model,
            heads,
            mlp_ratio: 4,
            seed: 0,
            mode: BlockMode::Perception,
            merge: SimilarityConfig::default(),
            plan_style: PartitionStyle::Alternating,
            ratio_src: 0.5,
            plan_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Parameter(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Parameter("mlp_ratio must be >= 1".into()));
        }
        self.merge.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl BlockWeights {
    /// Draw order: Q, K, V, O, MLP-in weights, MLP-in bias, MLP-out weights,
    /// MLP-out bias.
    pub fn init(d_model: usize, mlp_ratio: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let scale = 1.0 / libm::sqrt(d_model as f64);
        let hidden = mlp_ratio * d_model;
        let mut draw = |rows: usize, cols: usize| {
            let data = (0..rows * cols)
                .map(|_| scale * rng.next_normal())
                .collect();
            Matrix::from_vec(rows, cols, data).expect("weight shape")
        };
        let wq = draw(d_model, d_model);
        let wk = draw(d_model, d_model);
        let wv = draw(d_model, d_model);
        let wo = draw(d_model, d_model);
        let w1 = draw(d_model, hidden);
        let b1 = draw(1, hidden).into_vec();
        let w2 = draw(hidden, d_model);
        let b2 = draw(1, d_model).into_vec();
        Self {
            ln1_gain: alloc::vec![1.0; d_model],
            ln1_bias: alloc::vec![0.0; d_model],
            ln2_gain: alloc::vec![1.0; d_model],
            ln2_bias: alloc::vec![0.0; d_model],
            wq,
            wk,
            wv,
            wo,
            w1,
            b1,
            w2,
            b2,
        }
    }
}

/// Per-token layer norm over the feature dimension (population variance).
pub fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64]) -> Matrix {
    let d = x.cols();
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / libm::sqrt(var + LN_EPS);
        for ((v, g), b) in row.iter_mut().zip(gain).zip(bias) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    out
}

/// Row-stochastic `softmax(q k^T * scale)`.
pub fn attention_probs(q: &Matrix, k: &Matrix, scale: f64) -> Matrix {
    let mut p = Matrix::zeros(q.rows(), k.rows());
    for i in 0..q.rows() {
        let qi = q.row(i);
        let row = p.row_mut(i);
        for (j, s) in row.iter_mut().enumerate() {
            *s = dot(qi, k.row(j)) * scale;
        }
        crate::merge::softmax_in_place(row);
    }
    p
}

/// Scaled dot-product attention for one head, `softmax(q k^T / sqrt(d)) v`.
/// Scores are formed one query row at a time.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Matrix {
    let scale = 1.0 / libm::sqrt(q.cols() as f64);
    let mut out = Matrix::zeros(q.rows(), v.cols());
    let mut scores = alloc::vec![0.0; k.rows()];
    for i in 0..q.rows() {
        let qi = q.row(i);
        for (j, s) in scores.iter_mut().enumerate() {
            *s = dot(qi, k.row(j)) * scale;
        }
        crate::merge::softmax_in_place(&mut scores);
        let row = out.row_mut(i);
        for (j, &a) in scores.iter().enumerate() {
            for (o, &x) in row.iter_mut().zip(v.row(j)) {
                *o += a * x;
            }
        }
    }
    out
}

fn head_columns(m: &Matrix, head: usize, head_dim: usize) -> Matrix {
    let mut data = Vec::with_capacity(m.rows() * head_dim);
    for r in 0..m.rows() {
        data.extend_from_slice(&m.row(r)[head * head_dim..(head + 1) * head_dim]);
    }
    Matrix::from_vec(m.rows(), head_dim, data).expect("head shape")
}

/// Multi-head self-attention. Returns the projected output and the key
/// matrix (heads concatenated along features).
pub fn msa(x: &Matrix, w: &BlockWeights, heads: usize) -> (Matrix, Matrix) {
    let d = x.cols();
    let head_dim = d / heads;
    let q = x.matmul(&w.wq);
    let k = x.matmul(&w.wk);
    let v = x.matmul(&w.wv);
    let mut concat = Matrix::zeros(x.rows(), d);
    for h in 0..heads {
        let out = attention(
            &head_columns(&q, h, head_dim),
            &head_columns(&k, h, head_dim),
            &head_columns(&v, h, head_dim),
        );
        for r in 0..x.rows() {
            concat.row_mut(r)[h * head_dim..(h + 1) * head_dim].copy_from_slice(out.row(r));
        }
    }
    (concat.matmul(&w.wo), k)
}

/// Keys averaged over heads: `L x head_dim`.
pub fn keys_head_mean(keys: &Matrix, heads: usize) -> Matrix {
    let head_dim = keys.cols() / heads;
    let mut out = Matrix::zeros(keys.rows(), head_dim);
    for r in 0..keys.rows() {
        let src = keys.row(r);
        let dst = out.row_mut(r);
        for h in 0..heads {
            for (o, &v) in dst.iter_mut().zip(&src[h * head_dim..(h + 1) * head_dim]) {
                *o += v;
            }
        }
        dst.iter_mut().for_each(|v| *v /= heads as f64);
    }
    out
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + libm::tanh(C * (x + 0.044715 * x * x * x)))
}

/// `GELU(x W1 + b1) W2 + b2`.
pub fn mlp(x: &Matrix, w: &BlockWeights) -> Matrix {
    let mut h = x.matmul(&w.w1);
    for r in 0..h.rows() {
        for (v, b) in h.row_mut(r).iter_mut().zip(&w.b1) {
            *v = gelu(*v + b);
        }
    }
    let mut y = h.matmul(&w.w2);
    for r in 0..y.rows() {
        for (v, b) in y.row_mut(r).iter_mut().zip(&w.b2) {
            *v += b;
        }
    }
    y
}

fn add_into(acc: &mut Matrix, other: &Matrix) {
    for (a, b) in acc.as_mut_slice().iter_mut().zip(other.as_slice()) {
        *a += b;
    }
}

fn map_samples(x: &TokenMatrix, f: impl Fn(&Matrix) -> Matrix) -> Result<TokenMatrix> {
    let out: Vec<Matrix> = x.samples().iter().map(f).collect();
    TokenMatrix::from_samples(&out, x.l_spec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockOutput {
    pub tokens: TokenMatrix,
    /// Fusion state of the merge inside the block, if one ran.
    pub state: Option<FusionState>,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub config: BlockConfig,
    pub weights: BlockWeights,
}

impl Block {
    pub fn new(config: BlockConfig) -> Result<Self> {
        config.validate()?;
        let weights = BlockWeights::init(config.d_model, config.mlp_ratio, config.seed);
        Ok(Self { config, weights })
    }

    fn check_input(&self, x: &TokenMatrix) -> Result<()> {
        if x.dim() != self.config.d_model {
            return Err(Error::Contract(format!(
                "block expects d_model {} but tokens have dim {}",
                self.config.d_model,
                x.dim()
            )));
        }
        Ok(())
    }

    fn ln1(&self, x: &Matrix) -> Matrix {
        layer_norm(x, &self.weights.ln1_gain, &self.weights.ln1_bias)
    }

    fn ln2(&self, x: &Matrix) -> Matrix {
        layer_norm(x, &self.weights.ln2_gain, &self.weights.ln2_bias)
    }

    /// `x + MLP(LN(x))` per sample.
    fn mlp_residual(&self, x: &TokenMatrix) -> Result<TokenMatrix> {
        map_samples(x, |s| {
            let mut out = mlp(&self.ln2(s), &self.weights);
            add_into(&mut out, s);
            out
        })
    }

    fn metric_from_keys(&self, keys: &[Matrix], l_spec: usize) -> Result<Option<TokenMatrix>> {
        let heads = self.config.heads;
        Ok(match self.config.merge.metric_source {
            MetricSource::Hidden => None,
            MetricSource::Keys => Some(TokenMatrix::from_samples(keys, l_spec)?),
            MetricSource::KeysHeadMean => {
                let mean: Vec<Matrix> = keys.iter().map(|k| keys_head_mean(k, heads)).collect();
                Some(TokenMatrix::from_samples(&mean, l_spec)?)
            }
        })
    }

    fn merge(
        &self,
        x: &TokenMatrix,
        metric: Option<&TokenMatrix>,
    ) -> Result<crate::MergedSequence> {
        let c = &self.config;
        let plan = make_plan(
            x.length(),
            x.l_spec(),
            c.plan_style,
            c.ratio_src,
            c.plan_seed,
        )?;
        mame_with_metric(x, metric.unwrap_or(x), &plan, &c.merge)
    }

    /// Vanilla pre-norm block.
    pub fn forward_plain(&self, x: &TokenMatrix) -> Result<TokenMatrix> {
        self.check_input(x)?;
        let attended = map_samples(x, |s| {
            let (mut out, _) = msa(&self.ln1(s), &self.weights, self.config.heads);
            add_into(&mut out, s);
            out
        })?;
        self.mlp_residual(&attended)
    }

    pub fn forward_perception(&self, x: &TokenMatrix) -> Result<BlockOutput> {
        self.check_input(x)?;
        let mut attended = Vec::with_capacity(x.batch());
        let mut keys = Vec::with_capacity(x.batch());
        for s in x.samples() {
            let (mut out, k) = msa(&self.ln1(&s), &self.weights, self.config.heads);
            add_into(&mut out, &s);
            attended.push(out);
            keys.push(k);
        }
        let attended = TokenMatrix::from_samples(&attended, x.l_spec())?;
        let metric = self.metric_from_keys(&keys, x.l_spec())?;
        let merged = self.merge(&attended, metric.as_ref())?;
        let tokens = self.mlp_residual(&merged.tokens)?;
        Ok(BlockOutput {
            tokens,
            state: Some(merged.state),
        })
    }

    pub fn forward_synthesis(&self, x: &TokenMatrix) -> Result<BlockOutput> {
        self.check_input(x)?;
        let normed = map_samples(x, |s| self.ln1(s))?;
        let keys: Vec<Matrix> = normed
            .samples()
            .iter()
            .map(|s| s.matmul(&self.weights.wk))
            .collect();
        let metric = self.metric_from_keys(&keys, x.l_spec())?;
        let merged = self.merge(&normed, metric.as_ref())?;
        let attended = map_samples(&merged.tokens, |s| {
            msa(s, &self.weights, self.config.heads).0
        })?;
        let restored = restore(&attended, &merged.state)?;
        let residual = TokenMatrix::new(
            x.batch(),
            x.length(),
            x.dim(),
            x.l_spec(),
            restored
                .as_slice()
                .iter()
                .zip(x.as_slice())
                .map(|(a, b)| a + b)
                .collect(),
        )?;
        let tokens = self.mlp_residual(&residual)?;
        Ok(BlockOutput {
            tokens,
            state: Some(merged.state),
        })
    }

    /// Runs the configured mode, or the plain block when `merge` is false.
    pub fn forward(&self, x: &TokenMatrix, merge: bool) -> Result<BlockOutput> {
        if !merge {
            return Ok(BlockOutput {
                tokens: self.forward_plain(x)?,
                state: None,
            });
        }
        match self.config.mode {
            BlockMode::Perception => self.forward_perception(x),
            BlockMode::Synthesis => self.forward_synthesis(x),
        }
    }
}

/// A stack of blocks sharing one configuration; block `k` gets its own weight
/// seed forked from `config.seed`.
#[derive(Debug, Clone)]
pub struct Stack {
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackOutput {
    pub tokens: TokenMatrix,
    /// Sequence length after each block.
    pub lengths: Vec<usize>,
}

impl Stack {
    pub fn new(depth: usize, config: BlockConfig) -> Result<Self> {
        let mut seeds = SplitMix64::new(config.seed);
        let blocks = (0..depth)
            .map(|_| {
                Block::new(BlockConfig {
                    seed: seeds.next_u64(),
                    ..config
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    /// Runs all blocks; `merge_layers` holds 1-based block numbers that merge.
    pub fn run(&self, x: &TokenMatrix, merge_layers: &[usize]) -> Result<StackOutput> {
        if let Some(&bad) = merge_layers
            .iter()
            .find(|&&l| l == 0 || l > self.blocks.len())
        {
            return Err(Error::Parameter(format!(
                "merge layer {bad} outside 1..={}",
                self.blocks.len()
            )));
        }
        let mut tokens = x.clone();
        let mut lengths = Vec::with_capacity(self.blocks.len());
        for (k, block) in self.blocks.iter().enumerate() {
            tokens = block
                .forward(&tokens, merge_layers.contains(&(k + 1)))?
                .tokens;
            lengths.push(tokens.length());
        }
        Ok(StackOutput { tokens, lengths })
    }
}

/// Convenience wrapper over [`Stack`].
pub fn run_stack(
    x: &TokenMatrix,
    depth: usize,
    merge_layers: &[usize],
    config: BlockConfig,
) -> Result<StackOutput> {
    Stack::new(depth, config)?.run(x, merge_layers)
}
