//! Wall-clock comparison of merge cost against the attention it saves.
//!
//! For every `(L, tau)` pair one synthetic sample is generated, merged with an
//! alternating split, and single-head attention (`q = k = v`) is timed at the
//! full and at the reduced length. Only the timing columns vary between runs.

use std::io::Write;
use std::time::Instant;

use mame_core::complexity::{flop_report, FlopReport};
use mame_core::transformer::attention;
use mame_core::{gen_synthetic, make_plan, mame, PartitionStyle, Pattern, SimilarityConfig};
use serde::Serialize;

use crate::Result;

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub dim: usize,
    pub taus: Vec<f64>,
    pub repeat: usize,
    pub pattern: Pattern,
    pub l_spec: usize,
    pub seed: u64,
    pub epsilon: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![256, 1024, 4096],
            dim: 64,
            taus: vec![0.5, 0.8],
            repeat: 5,
            pattern: Pattern::Clustered {
                k: 5,
                noise_scale: 0.05,
            },
            l_spec: 1,
            seed: 0,
            epsilon: SimilarityConfig::EPSILON_F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    #[serde(rename = "L")]
    pub length: usize,
    #[serde(rename = "d")]
    pub dim: usize,
    pub tau: f64,
    #[serde(rename = "L_prime")]
    pub reduced: usize,
    pub beta: f64,
    pub merge_ms: f64,
    pub attention_ms_baseline: f64,
    pub attention_ms_merged: f64,
    pub total_speedup: f64,
}

/// One `(L, tau)` cell: a row per repeat plus the cost-model view of it.
#[derive(Debug, Clone)]
pub struct BenchCell {
    pub rows: Vec<BenchRow>,
    pub model: FlopReport,
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchCell>> {
    let mut cells = Vec::new();
    for &length in &cfg.lengths {
        let x = gen_synthetic(1, length, cfg.dim, cfg.l_spec, cfg.seed, cfg.pattern)?;
        let plan = make_plan(
            length,
            cfg.l_spec,
            PartitionStyle::Alternating,
            0.5,
            cfg.seed,
        )?;
        let full = x.sample(0);
        for &tau in &cfg.taus {
            let sim = SimilarityConfig {
                tau,
                epsilon: cfg.epsilon,
                ..SimilarityConfig::default()
            };
            let mut rows = Vec::with_capacity(cfg.repeat);
            let mut reduced = length;
            for _ in 0..cfg.repeat {
                let start = Instant::now();
                let merged = mame(&x, &plan, &sim)?;
                let merge_ms = ms(start);
                reduced = merged.reduced_length();

                let start = Instant::now();
                std::hint::black_box(attention(&full, &full, &full));
                let attention_ms_baseline = ms(start);

                let short = merged.tokens.sample(0);
                let start = Instant::now();
                std::hint::black_box(attention(&short, &short, &short));
                let attention_ms_merged = ms(start);

                rows.push(BenchRow {
                    length,
                    dim: cfg.dim,
                    tau,
                    reduced,
                    beta: reduced as f64 / length as f64,
                    merge_ms,
                    attention_ms_baseline,
                    attention_ms_merged,
                    total_speedup: attention_ms_baseline / (merge_ms + attention_ms_merged),
                });
            }
            let model = flop_report(length, cfg.dim, plan.num_dst(), plan.num_src(), reduced)?;
            cells.push(BenchCell { rows, model });
        }
    }
    Ok(cells)
}

pub fn write_csv<W: Write>(cells: &[BenchCell], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if cells.is_empty() {
        w.write_record([
            "L",
            "d",
            "tau",
            "L_prime",
            "beta",
            "merge_ms",
            "attention_ms_baseline",
            "attention_ms_merged",
            "total_speedup",
        ])?;
    }
    for row in cells.iter().flat_map(|c| &c.rows) {
        w.serialize(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// One line of cost-model prediction for a cell, for stderr.
pub fn describe_model(cell: &BenchCell) -> String {
    let m = &cell.model;
    format!(
        "model L={} d={}: alpha={:.4} beta={:.4} bound={:.4} efficient={} overhead_flops={} attention_saved={}",
        m.length,
        m.dim,
        m.alpha,
        m.beta,
        mame_core::complexity::efficiency_bound(m.alpha),
        m.efficient,
        m.overhead_flops(),
        m.attention_saved(),
    )
}
