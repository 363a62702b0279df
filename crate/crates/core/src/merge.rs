//! Matrix-based token merging.
//!
//! Per sample the pipeline is: similarity between destinations and sources,
//! ReLU with a shifted threshold, column normalization, adaptive weight
//! refining (prune each column below the mean of its nonzero weights and
//! re-normalize), and aggregation of sources into destinations. Sources whose
//! final fusion column is all-zero are preserved verbatim. In a batch a source
//! preserved in any sample is preserved in every sample and its column is
//! zeroed everywhere.
//!
//! The reduced sequence is laid out as `[specials, fused destinations, preserved
//! sources]`; [`FusionState`] records enough to put every token back.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::partition::{check_plan, split, PartitionPlan, PartitionStyle};
use crate::tensor::{dot, norm, Matrix, TokenMatrix};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityFunction {
    /// `x·y / (|x||y| + eps)`, clamped to [-1, 1].
    Cosine,
    /// Negative Euclidean distance.
    Euclidean,
    /// Plain inner product.
    Dot,
    /// Inner products soft-maxed over the sources of each destination row.
    Softmax,
}

/// Which features feed the similarity. Only the transformer blocks look at
/// this; [`mame_with_metric`] takes the features explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricSource {
    Hidden,
    /// Attention keys, heads concatenated.
    Keys,
    /// Attention keys averaged over heads.
    KeysHeadMean,
}

/// How the nonzero count `C_j` of a weight column is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountMode {
    /// Exact count of positive entries. `zeta_j` is then the exact mean of the
    /// nonzero weights.
    Indicator,
    /// Smooth surrogate `sum_i W_ij / (W_ij + eps)`, with `zeta_j = sum / (C_j + eps)`.
    Soft,
}

/// How the final fusion weights are formed from the pruned weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionRule {
    /// `W^F = W~ / sum_i W~`, zero for an empty column. The column sum is
    /// exactly positive whenever the column is nonempty, so `eps` is not needed
    /// as a guard and leaving it out keeps columns stochastic even when the
    /// pruned mass is tiny.
    Renormalized,
    /// `W^F = W / (sum_i W~ + eps)`: unpruned weights over the pruned column
    /// sum. Blows up as `1/eps` on fully pruned columns; kept for comparison only.
    UnprunedOverPrunedSum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityConfig {
    pub function: SimilarityFunction,
    pub tau: f64,
    pub epsilon: f64,
    pub refine: bool,
    pub causal: bool,
    pub metric_source: MetricSource,
    pub count_mode: CountMode,
    pub fusion_rule: FusionRule,
}

impl SimilarityConfig {
    pub const EPSILON_F64: f64 = 1e-12;
    pub const EPSILON_F32: f64 = 1e-6;

    pub fn with_tau(tau: f64) -> Self {
        Self {
            tau,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Parameter(format!(
                "epsilon {} must be > 0",
                self.epsilon
            )));
        }
        if self.tau.is_nan() {
            return Err(Error::Parameter("tau is NaN".into()));
        }
        Ok(())
    }
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            function: SimilarityFunction::Cosine,
            tau: 0.8,
            epsilon: Self::EPSILON_F64,
            refine: true,
            causal: false,
            metric_source: MetricSource::Hidden,
            count_mode: CountMode::Indicator,
            fusion_rule: FusionRule::Renormalized,
        }
    }
}

/// Deterministic operation counts gathered while merging. Multiply-add counts
/// as two FLOPs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounters {
    /// Destination-source inner products: `2 d` per pair.
    pub sim_flops: u64,
    /// Elementwise work of normalization, refining and re-normalization.
    pub refine_flops: u64,
    /// Column sums of the final fusion weights.
    pub preserve_flops: u64,
    /// Dense `W^F X_src` product as a matmul kernel would count it: `2 d` per
    /// weight entry visited.
    pub aggregate_flops: u64,
    /// Multiply-adds actually executed on nonzero weights.
    pub aggregate_nonzero_macs: u64,
}

impl OpCounters {
    fn add(&mut self, other: &OpCounters) {
        self.sim_flops += other.sim_flops;
        self.refine_flops += other.refine_flops;
        self.preserve_flops += other.preserve_flops;
        self.aggregate_flops += other.aggregate_flops;
        self.aggregate_nonzero_macs += other.aggregate_nonzero_macs;
    }
}

// ---------------------------------------------------------------------------
// Similarity and sparsification

/// `M x N` similarity between destination rows and source rows.
pub fn similarity_matrix(x_dst: &Matrix, x_src: &Matrix, cfg: &SimilarityConfig) -> Matrix {
    similarity_counted(x_dst, x_src, cfg, &mut OpCounters::default())
}

fn similarity_counted(
    x_dst: &Matrix,
    x_src: &Matrix,
    cfg: &SimilarityConfig,
    counters: &mut OpCounters,
) -> Matrix {
    assert_eq!(x_dst.cols(), x_src.cols(), "feature dimensions differ");
    let (m, n, d) = (x_dst.rows(), x_src.rows(), x_dst.cols());
    let mut s = Matrix::zeros(m, n);
    match cfg.function {
        SimilarityFunction::Cosine => {
            let src_norms: Vec<f64> = (0..n).map(|j| norm(x_src.row(j))).collect();
            for i in 0..m {
                let a = x_dst.row(i);
                let na = norm(a);
                let row = s.row_mut(i);
                for j in 0..n {
                    let v = dot(a, x_src.row(j)) / (na * src_norms[j] + cfg.epsilon);
                    row[j] = v.clamp(-1.0, 1.0);
                }
            }
        }
        SimilarityFunction::Euclidean => {
            for i in 0..m {
                let a = x_dst.row(i);
                let row = s.row_mut(i);
                for j in 0..n {
                    let sq: f64 = a
                        .iter()
                        .zip(x_src.row(j))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    row[j] = -libm::sqrt(sq);
                }
            }
        }
        SimilarityFunction::Dot | SimilarityFunction::Softmax => {
            for i in 0..m {
                let a = x_dst.row(i);
                let row = s.row_mut(i);
                for j in 0..n {
                    row[j] = dot(a, x_src.row(j));
                }
                if cfg.function == SimilarityFunction::Softmax {
                    softmax_in_place(row);
                }
            }
        }
    }
    counters.sim_flops += 2 * (m * n * d) as u64;
    s
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `max(S - tau, 0)` elementwise. Produces exact zeros.
pub fn sparsify(s: &Matrix, tau: f64) -> Matrix {
    let mut out = s.clone();
    out.as_mut_slice()
        .iter_mut()
        .for_each(|v| *v = relu(*v - tau));
    out
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// Column-wise weight refinement. The matrix-level functions and the pipeline
// share these helpers so both produce identical bits.

fn normalize_column(col: &mut [f64], eps: f64) {
    let denom = col.iter().sum::<f64>() + eps;
    col.iter_mut().for_each(|v| *v /= denom);
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ColumnStats {
    count: f64,
    zeta: f64,
    pruned_sum: f64,
}

/// Writes `max(W - zeta, 0)` into `pruned`. Values within a few ulps of the
/// threshold count as ties and prune to zero: a uniform column equals its own
/// mean, but the rounded mean can sit one ulp below the entries.
fn prune_column(w: &[f64], pruned: &mut [f64], eps: f64, mode: CountMode) -> ColumnStats {
    let total: f64 = w.iter().sum();
    let (count, zeta) = match mode {
        CountMode::Indicator => {
            let count = w.iter().filter(|&&v| v > 0.0).count() as f64;
            let zeta = if count > 0.0 { total / count } else { 0.0 };
            (count, zeta)
        }
        CountMode::Soft => {
            let count: f64 = w.iter().map(|&v| v / (v + eps)).sum();
            (count, total / (count + eps))
        }
    };
    let slack = zeta * 4.0 * (count + 1.0) * f64::EPSILON;
    let mut pruned_sum = 0.0;
    for (p, &v) in pruned.iter_mut().zip(w) {
        let excess = v - zeta;
        *p = if excess > slack { excess } else { 0.0 };
        pruned_sum += *p;
    }
    ColumnStats {
        count,
        zeta,
        pruned_sum,
    }
}

/// Writes `col / total` into `out` so that the result sums to at most 1 in any
/// summation order.
///
/// Plain division can land a few ulps above 1, so columns with two or more
/// nonzero entries divide by `total` inflated by a bound on the rounding error
/// of the sum, division and re-summation (`(2M + 2) * 2^-52` relative). That
/// keeps the sum within ~`M * 1e-15` of 1. A single nonzero entry divides
/// exactly and gives 1.
fn divide_stochastic(col: &[f64], total: f64, out: &mut [f64]) {
    if !(total > 0.0) {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let divisor = if col.iter().filter(|&&v| v != 0.0).count() > 1 {
        total * (1.0 + (2 * col.len() + 2) as f64 * f64::EPSILON)
    } else {
        total
    };
    for (o, &v) in out.iter_mut().zip(col) {
        *o = v / divisor;
    }
}

fn fuse_column(
    w: &[f64],
    pruned: &[f64],
    fused: &mut [f64],
    pruned_sum: f64,
    eps: f64,
    rule: FusionRule,
) {
    match rule {
        FusionRule::Renormalized => divide_stochastic(pruned, pruned_sum, fused),
        FusionRule::UnprunedOverPrunedSum => {
            let denom = pruned_sum + eps;
            for (f, &v) in fused.iter_mut().zip(w) {
                *f = v / denom;
            }
        }
    }
}

fn gather_column(m: &Matrix, j: usize, out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = m.get(i, j);
    }
}

fn scatter_column(m: &mut Matrix, j: usize, col: &[f64]) {
    for (i, &v) in col.iter().enumerate() {
        m.set(i, j, v);
    }
}

/// `W_ij = S~_ij / (sum_i S~_ij + eps)`.
pub fn column_normalize(s_sparse: &Matrix, eps: f64) -> Matrix {
    let mut out = s_sparse.clone();
    let mut col = vec![0.0; s_sparse.rows()];
    for j in 0..s_sparse.cols() {
        gather_column(s_sparse, j, &mut col);
        normalize_column(&mut col, eps);
        scatter_column(&mut out, j, &col);
    }
    out
}

/// Output of adaptive weight refining for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    /// `C_j` per source column.
    pub counts: Vec<f64>,
    /// `zeta_j` per source column.
    pub zeta: Vec<f64>,
    /// `W~`.
    pub pruned: Matrix,
    /// `sum_i W~_ij` per column.
    pub pruned_sums: Vec<f64>,
    /// `W^F`.
    pub fused: Matrix,
}

/// Refining with the default indicator count and renormalized fusion.
pub fn refine_weights(w: &Matrix, eps: f64) -> Refined {
    refine_weights_with(w, eps, CountMode::Indicator, FusionRule::Renormalized)
}

pub fn refine_weights_with(w: &Matrix, eps: f64, mode: CountMode, rule: FusionRule) -> Refined {
    let (m, n) = (w.rows(), w.cols());
    let mut out = Refined {
        counts: Vec::with_capacity(n),
        zeta: Vec::with_capacity(n),
        pruned: Matrix::zeros(m, n),
        pruned_sums: Vec::with_capacity(n),
        fused: Matrix::zeros(m, n),
    };
    let mut col = vec![0.0; m];
    let mut pruned = vec![0.0; m];
    let mut fused = vec![0.0; m];
    for j in 0..n {
        gather_column(w, j, &mut col);
        let stats = prune_column(&col, &mut pruned, eps, mode);
        fuse_column(&col, &pruned, &mut fused, stats.pruned_sum, eps, rule);
        out.counts.push(stats.count);
        out.zeta.push(stats.zeta);
        out.pruned_sums.push(stats.pruned_sum);
        scatter_column(&mut out.pruned, j, &pruned);
        scatter_column(&mut out.fused, j, &fused);
    }
    out
}

/// Every intermediate of the fusion computation for one sample, before any
/// causal or batch correction.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionComputation {
    pub similarity: Matrix,
    pub sparse: Matrix,
    pub weights: Matrix,
    pub counts: Vec<f64>,
    pub zeta: Vec<f64>,
    pub pruned: Matrix,
    pub pruned_sums: Vec<f64>,
    pub fused: Matrix,
}

impl FusionComputation {
    /// Per-sample preservation flags. Under [`FusionRule::UnprunedOverPrunedSum`]
    /// a column whose pruned sum is zero is preserved even though its fused
    /// column is not.
    pub fn sample_mask(&self) -> Vec<bool> {
        sample_mask(&self.fused, &self.pruned_sums)
    }
}

/// Runs similarity through refining for one sample, keeping every matrix.
pub fn fusion_computation(
    x_dst: &Matrix,
    x_src: &Matrix,
    cfg: &SimilarityConfig,
) -> FusionComputation {
    let similarity = similarity_matrix(x_dst, x_src, cfg);
    let sparse = sparsify(&similarity, cfg.tau);
    let weights = column_normalize(&sparse, cfg.epsilon);
    let refined = if cfg.refine {
        refine_weights_with(&weights, cfg.epsilon, cfg.count_mode, cfg.fusion_rule)
    } else {
        unrefined(&weights)
    };
    FusionComputation {
        similarity,
        sparse,
        weights,
        counts: refined.counts,
        zeta: refined.zeta,
        pruned: refined.pruned,
        pruned_sums: refined.pruned_sums,
        fused: refined.fused,
    }
}

/// Refining switched off: the normalized weights are the fusion weights.
fn unrefined(w: &Matrix) -> Refined {
    let n = w.cols();
    let counts = (0..n)
        .map(|j| (0..w.rows()).filter(|&i| w.get(i, j) > 0.0).count() as f64)
        .collect();
    let pruned_sums = (0..n).map(|j| w.column_sum(j)).collect();
    Refined {
        counts,
        zeta: vec![0.0; n],
        pruned: w.clone(),
        pruned_sums,
        fused: w.clone(),
    }
}

/// Compact per-sample path: one `M x N` buffer transformed column by column
/// into `W^F`. Same arithmetic as [`fusion_computation`].
fn fused_weights(
    x_dst: &Matrix,
    x_src: &Matrix,
    cfg: &SimilarityConfig,
    counters: &mut OpCounters,
) -> (Matrix, Vec<f64>) {
    let mut s = similarity_counted(x_dst, x_src, cfg, counters);
    let (m, n) = (s.rows(), s.cols());
    let mut col = vec![0.0; m];
    let mut pruned = vec![0.0; m];
    let mut fused = vec![0.0; m];
    let mut pruned_sums = Vec::with_capacity(n);
    for j in 0..n {
        gather_column(&s, j, &mut col);
        col.iter_mut().for_each(|v| *v = relu(*v - cfg.tau));
        normalize_column(&mut col, cfg.epsilon);
        if cfg.refine {
            let stats = prune_column(&col, &mut pruned, cfg.epsilon, cfg.count_mode);
            fuse_column(
                &col,
                &pruned,
                &mut fused,
                stats.pruned_sum,
                cfg.epsilon,
                cfg.fusion_rule,
            );
            pruned_sums.push(stats.pruned_sum);
            scatter_column(&mut s, j, &fused);
        } else {
            pruned_sums.push(col.iter().sum());
            scatter_column(&mut s, j, &col);
        }
    }
    // normalize 2, count 1 (soft 3), sum 1, prune 2, pruned sum 1, fuse 1
    let per_entry = match (cfg.refine, cfg.count_mode) {
        (false, _) => 2,
        (true, CountMode::Indicator) => 8,
        (true, CountMode::Soft) => 10,
    };
    counters.refine_flops += (per_entry * m * n) as u64;
    (s, pruned_sums)
}

// ---------------------------------------------------------------------------
// Preservation, batch consistency, causality

/// `m_j = 1` exactly when column `j` of `W^F` sums to zero.
pub fn preservation_mask(w_fused: &Matrix) -> Vec<bool> {
    (0..w_fused.cols())
        .map(|j| w_fused.column_sum(j) == 0.0)
        .collect()
}

fn sample_mask(fused: &Matrix, pruned_sums: &[f64]) -> Vec<bool> {
    preservation_mask(fused)
        .into_iter()
        .zip(pruned_sums)
        .map(|(zero, &ps)| zero || ps == 0.0)
        .collect()
}

/// Source preserved in any sample is preserved in all of them.
pub fn batch_consistent_mask(masks: &[Vec<bool>]) -> Vec<bool> {
    let n = masks.first().map_or(0, Vec::len);
    (0..n).map(|j| masks.iter().any(|m| m[j])).collect()
}

/// Zeroes every column flagged in `mask_final`, in every sample.
pub fn correct_fusion(w_fused: &mut [Matrix], mask_final: &[bool]) {
    for w in w_fused.iter_mut() {
        for (j, &preserved) in mask_final.iter().enumerate() {
            if preserved {
                for i in 0..w.rows() {
                    w.set(i, j, 0.0);
                }
            }
        }
    }
}

/// Forbids merging a source into a destination that precedes it, then
/// re-normalizes the columns that lost weight so they stay column-stochastic.
/// Columns left empty become preserved once masks are recomputed.
pub fn causal_mask(w_fused: &mut Matrix, plan: &PartitionPlan) -> Result<()> {
    if plan.style() != PartitionStyle::Causal {
        return Err(Error::Contract(format!(
            "causal masking needs a causal partition, got {:?}",
            plan.style()
        )));
    }
    if w_fused.rows() != plan.num_dst() || w_fused.cols() != plan.num_src() {
        return Err(Error::Contract(
            "fusion matrix does not match the plan".into(),
        ));
    }
    for (j, &src_pos) in plan.src_index().iter().enumerate() {
        let mut removed = false;
        for (i, &dst_pos) in plan.dst_index().iter().enumerate() {
            if src_pos > dst_pos && w_fused.get(i, j) != 0.0 {
                w_fused.set(i, j, 0.0);
                removed = true;
            }
        }
        if removed {
            let total = w_fused.column_sum(j);
            if total > 0.0 {
                let mut col = vec![0.0; w_fused.rows()];
                gather_column(w_fused, j, &mut col);
                let mut out = vec![0.0; col.len()];
                divide_stochastic(&col, total, &mut out);
                scatter_column(w_fused, j, &out);
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Aggregation

/// Fused destinations `y_i = (x_i + sum_j W^F_ij x_j) / R_i` with
/// `R_i = 1 + sum_j W^F_ij`. Returns `(y, R)`.
pub fn aggregate(x_dst: &Matrix, x_src: &Matrix, w_fused: &Matrix) -> (Matrix, Vec<f64>) {
    aggregate_counted(x_dst, x_src, w_fused, &mut OpCounters::default())
}

fn aggregate_counted(
    x_dst: &Matrix,
    x_src: &Matrix,
    w_fused: &Matrix,
    counters: &mut OpCounters,
) -> (Matrix, Vec<f64>) {
    let (m, n, d) = (x_dst.rows(), x_src.rows(), x_dst.cols());
    let mut y = x_dst.clone();
    let mut scale = Vec::with_capacity(m);
    for i in 0..m {
        let row = y.row_mut(i);
        let mut r = 1.0;
        for j in 0..n {
            let w = w_fused.get(i, j);
            if w != 0.0 {
                r += w;
                for (acc, &x) in row.iter_mut().zip(x_src.row(j)) {
                    *acc += w * x;
                }
                counters.aggregate_nonzero_macs += d as u64;
            }
            counters.aggregate_flops += 2 * d as u64;
        }
        if r != 1.0 {
            row.iter_mut().for_each(|v| *v /= r);
        }
        scale.push(r);
    }
    (y, scale)
}

// ---------------------------------------------------------------------------
// Fusion state and merged sequence

/// One nonzero `W^F[b][i][j]`, stored as `[b, i, j, value]`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FusionWeight(pub usize, pub usize, pub usize, pub f64);

impl FusionWeight {
    pub fn batch(&self) -> usize {
        self.0
    }
    pub fn dst(&self) -> usize {
        self.1
    }
    pub fn src(&self) -> usize {
        self.2
    }
    pub fn value(&self) -> f64 {
        self.3
    }
}

/// Everything restoration needs besides the merged tokens.
///
/// `layout_order` is a permutation of `0..L`: slot `s < L'` of the merged
/// sequence came from original position `layout_order[s]`, and the remaining
/// entries list the merged (non-preserved) sources in source order.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FusionState {
    pub version: u16,
    pub batch: usize,
    #[cfg_attr(feature = "serde", serde(rename = "M"))]
    pub m: usize,
    #[cfg_attr(feature = "serde", serde(rename = "N"))]
    pub n: usize,
    pub l_spec: usize,
    pub dst_index: Vec<usize>,
    pub src_index: Vec<usize>,
    /// Final batch-wide mask, one 0/1 flag per source.
    pub preserved_mask: Vec<u8>,
    /// Nonzero weights sorted by `(b, i, j)`.
    pub weights: Vec<FusionWeight>,
    pub layout_order: Vec<usize>,
}

impl FusionState {
    pub const VERSION: u16 = 1;

    pub fn length(&self) -> usize {
        self.l_spec + self.m + self.n
    }

    pub fn preserved_count(&self) -> usize {
        self.preserved_mask.iter().filter(|&&f| f == 1).count()
    }

    /// `L' = l_spec + M + r`.
    pub fn reduced_length(&self) -> usize {
        self.l_spec + self.m + self.preserved_count()
    }

    pub fn mask_final(&self) -> Vec<bool> {
        self.preserved_mask.iter().map(|&f| f == 1).collect()
    }

    /// Original positions of preserved sources, ascending.
    pub fn preserved_src(&self) -> Vec<usize> {
        self.src_index
            .iter()
            .zip(&self.preserved_mask)
            .filter(|(_, &f)| f == 1)
            .map(|(&p, _)| p)
            .collect()
    }

    /// Dense `M x N` fusion matrix of sample `b`.
    pub fn fused_dense(&self, b: usize) -> Matrix {
        let mut w = Matrix::zeros(self.m, self.n);
        for t in self.weights.iter().filter(|t| t.batch() == b) {
            w.set(t.dst(), t.src(), t.value());
        }
        w
    }

    /// `R_i = 1 + sum_j W^F_ij` of sample `b`, summed in source order.
    pub fn row_scale(&self, b: usize) -> Vec<f64> {
        let mut r = vec![1.0; self.m];
        for t in self.weights.iter().filter(|t| t.batch() == b) {
            r[t.dst()] += t.value();
        }
        r
    }

    /// Checks every structural invariant, naming the first one violated.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: alloc::string::String| Err(Error::State(msg));
        if self.version != Self::VERSION {
            return fail(format!("unsupported version {}", self.version));
        }
        if self.batch == 0 {
            return fail("batch must be >= 1".into());
        }
        if self.dst_index.len() != self.m || self.src_index.len() != self.n {
            return fail(format!(
                "index sets have {} / {} entries but M={} N={}",
                self.dst_index.len(),
                self.src_index.len(),
                self.m,
                self.n
            ));
        }
        PartitionPlan::from_indices(
            PartitionStyle::Alternating,
            self.l_spec,
            self.dst_index.clone(),
            self.src_index.clone(),
        )
        .map_err(|e| match e {
            Error::State(msg) => Error::State(format!("partition: {msg}")),
            other => other,
        })?;
        if self.preserved_mask.len() != self.n {
            return fail(format!(
                "preserved_mask has {} flags, expected N={}",
                self.preserved_mask.len(),
                self.n
            ));
        }
        if let Some(f) = self.preserved_mask.iter().find(|&&f| f > 1) {
            return fail(format!("preserved_mask flag {f} is not 0 or 1"));
        }
        let mut column_hit = vec![vec![false; self.n]; self.batch];
        let mut prev: Option<(usize, usize, usize)> = None;
        for t in &self.weights {
            let key = (t.0, t.1, t.2);
            if t.0 >= self.batch || t.1 >= self.m || t.2 >= self.n {
                return fail(format!("weight {key:?} out of range"));
            }
            if !(t.3 > 0.0 && t.3.is_finite()) {
                return fail(format!("weight {key:?} has non-positive value {}", t.3));
            }
            if self.preserved_mask[t.2] == 1 {
                return fail(format!(
                    "weight {key:?} references preserved column {}",
                    t.2
                ));
            }
            if prev.is_some_and(|p| p >= key) {
                return fail(format!(
                    "weights not strictly sorted by (b, i, j) at {key:?}"
                ));
            }
            prev = Some(key);
            column_hit[t.0][t.2] = true;
        }
        for (b, hits) in column_hit.iter().enumerate() {
            for (j, &hit) in hits.iter().enumerate() {
                if self.preserved_mask[j] == 0 && !hit {
                    return fail(format!(
                        "source column {j} is not preserved but has no weight in sample {b}"
                    ));
                }
            }
        }
        let expected = self.expected_layout();
        if self.layout_order != expected {
            return fail(
                "layout_order does not match [specials, dst, preserved src, merged src]".into(),
            );
        }
        Ok(())
    }

    fn expected_layout(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.l_spec).collect();
        order.extend_from_slice(&self.dst_index);
        let flagged = |want: u8| {
            self.src_index
                .iter()
                .zip(&self.preserved_mask)
                .filter(move |(_, &f)| f == want)
                .map(|(&p, _)| p)
        };
        order.extend(flagged(1));
        order.extend(flagged(0));
        order
    }
}

/// Reduced sequence plus what is needed to restore it.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedSequence {
    /// `B x L' x d`, laid out `[specials, fused destinations, preserved sources]`.
    pub tokens: TokenMatrix,
    pub state: FusionState,
    /// `R[b][i]`.
    pub row_scale: Vec<Vec<f64>>,
    pub counters: OpCounters,
}

impl MergedSequence {
    pub fn l_spec(&self) -> usize {
        self.state.l_spec
    }

    pub fn num_dst(&self) -> usize {
        self.state.m
    }

    pub fn preserved_src(&self) -> Vec<usize> {
        self.state.preserved_src()
    }

    pub fn reduced_length(&self) -> usize {
        self.tokens.length()
    }
}

/// Merges `t` with similarities computed on `t` itself.
pub fn mame(
    t: &TokenMatrix,
    plan: &PartitionPlan,
    cfg: &SimilarityConfig,
) -> Result<MergedSequence> {
    mame_with_metric(t, t, plan, cfg)
}

/// Merges `t`, computing similarities on `metric` (same batch and length, any
/// feature width). Fusion weights then act on the rows of `t`.
pub fn mame_with_metric(
    t: &TokenMatrix,
    metric: &TokenMatrix,
    plan: &PartitionPlan,
    cfg: &SimilarityConfig,
) -> Result<MergedSequence> {
    check_plan(t, plan)?;
    cfg.validate()?;
    if metric.batch() != t.batch() || metric.length() != t.length() {
        return Err(Error::Contract(format!(
            "metric is {}x{} but tokens are {}x{}",
            metric.batch(),
            metric.length(),
            t.batch(),
            t.length()
        )));
    }
    if cfg.causal && plan.style() != PartitionStyle::Causal {
        return Err(Error::Contract(format!(
            "causal merging needs a causal partition, got {:?}",
            plan.style()
        )));
    }
    let (m, n) = (plan.num_dst(), plan.num_src());
    let parts = split(t, plan)?;
    let metric_parts = if core::ptr::eq(t, metric) {
        None
    } else {
        Some(split(&metric.clone().with_l_spec(t.l_spec())?, plan)?)
    };

    let mut counters = OpCounters::default();
    let mut fused = Vec::with_capacity(t.batch());
    let mut masks = Vec::with_capacity(t.batch());
    for b in 0..t.batch() {
        let (fd, fs) = match &metric_parts {
            Some(mp) => (&mp.dst[b], &mp.src[b]),
            None => (&parts.dst[b], &parts.src[b]),
        };
        let mut sample = OpCounters::default();
        let (mut w, pruned_sums) = fused_weights(fd, fs, cfg, &mut sample);
        if cfg.causal {
            causal_mask(&mut w, plan)?;
        }
        masks.push(sample_mask(&w, &pruned_sums));
        sample.preserve_flops += (m * n) as u64;
        counters.add(&sample);
        fused.push(w);
    }
    let mask_final = batch_consistent_mask(&masks);
    correct_fusion(&mut fused, &mask_final);

    let d = t.dim();
    let r = mask_final.iter().filter(|&&p| p).count();
    let reduced = plan.l_spec() + m + r;
    let mut data = Vec::with_capacity(t.batch() * reduced * d);
    let mut row_scale = Vec::with_capacity(t.batch());
    let mut weights = Vec::new();
    for b in 0..t.batch() {
        let (y, scale) = aggregate_counted(&parts.dst[b], &parts.src[b], &fused[b], &mut counters);
        data.extend_from_slice(parts.spec[b].as_slice());
        data.extend_from_slice(y.as_slice());
        for (j, _) in mask_final.iter().enumerate().filter(|(_, &p)| p) {
            data.extend_from_slice(parts.src[b].row(j));
        }
        row_scale.push(scale);
        for i in 0..m {
            for j in 0..n {
                let v = fused[b].get(i, j);
                if v != 0.0 {
                    weights.push(FusionWeight(b, i, j, v));
                }
            }
        }
    }

    let mut state = FusionState {
        version: FusionState::VERSION,
        batch: t.batch(),
        m,
        n,
        l_spec: plan.l_spec(),
        dst_index: plan.dst_index().to_vec(),
        src_index: plan.src_index().to_vec(),
        preserved_mask: mask_final.iter().map(|&p| u8::from(p)).collect(),
        weights,
        layout_order: Vec::new(),
    };
    state.layout_order = state.expected_layout();
    let tokens = TokenMatrix::new(t.batch(), reduced, d, plan.l_spec(), data)?;
    Ok(MergedSequence {
        tokens,
        state,
        row_scale,
        counters,
    })
}
