//! Sweep of the analytic cost model over the `(alpha, beta)` triangle.

use std::io::Write;

use mame_core::complexity::{
    condition_integral, condition_integral_closed_form, condition_probability,
    condition_probability_closed_form, efficiency_bound, efficiency_condition, flop_report,
};
use serde::Serialize;

use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyzeRow {
    pub alpha: f64,
    pub beta: f64,
    pub bound: f64,
    pub efficient: bool,
    pub overhead_flops: u64,
    pub attention_saved: u64,
}

/// Grid points `alpha = a/steps <= beta = b/steps` for `1 <= a <= b <= steps`.
/// FLOP columns use `M = round(alpha L)` destinations, the remaining `L - M`
/// tokens as sources, and `L' = max(round(beta L), M)`.
pub fn sweep(steps: usize, length: usize, dim: usize) -> Result<Vec<AnalyzeRow>> {
    let mut rows = Vec::new();
    for a in 1..=steps {
        for b in a..=steps {
            let alpha = a as f64 / steps as f64;
            let beta = b as f64 / steps as f64;
            let m = ((alpha * length as f64).round() as usize).clamp(1, length);
            let reduced = ((beta * length as f64).round() as usize).clamp(m, length);
            let report = flop_report(length, dim, m, length - m, reduced)?;
            rows.push(AnalyzeRow {
                alpha,
                beta,
                bound: efficiency_bound(alpha),
                efficient: efficiency_condition(alpha, beta),
                overhead_flops: report.overhead_flops(),
                attention_saved: report.attention_saved(),
            });
        }
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[AnalyzeRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record([
            "alpha",
            "beta",
            "bound",
            "efficient",
            "overhead_flops",
            "attention_saved",
        ])?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantsSummary {
    pub integral: f64,
    pub integral_closed_form: f64,
    pub probability: f64,
    pub probability_closed_form: f64,
}

pub fn constants(samples: usize, grid: usize, seed: u64) -> Result<ConstantsSummary> {
    Ok(ConstantsSummary {
        integral: condition_integral(grid)?,
        integral_closed_form: condition_integral_closed_form(),
        probability: condition_probability(samples, seed)?,
        probability_closed_form: condition_probability_closed_form(),
    })
}
