//! Analytic cost model of merging versus attention.
//!
//! Conventions: a multiply-add is two FLOPs, attention counts only the two
//! quadratic products (`QK^T` and `AV`), and refining costs a fixed eight
//! elementwise operations per weight entry.

use alloc::format;

use crate::rng::SplitMix64;
use crate::{Error, Result};

/// Elementwise operations per weight entry for normalization plus refining.
pub const REFINE_OPS_PER_ENTRY: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlopReport {
    pub length: usize,
    pub dim: usize,
    /// `M / L`.
    pub alpha: f64,
    /// `L' / L`.
    pub beta: f64,
    pub sim_flops: u64,
    pub refine_flops: u64,
    pub aggregate_flops: u64,
    pub preserve_flops: u64,
    pub attention_flops_baseline: u64,
    pub attention_flops_merged: u64,
    pub efficient: bool,
}

impl FlopReport {
    pub fn overhead_flops(&self) -> u64 {
        self.sim_flops + self.refine_flops + self.aggregate_flops + self.preserve_flops
    }

    pub fn attention_saved(&self) -> u64 {
        self.attention_flops_baseline - self.attention_flops_merged
    }
}

pub fn flop_report(
    length: usize,
    dim: usize,
    m: usize,
    n: usize,
    reduced: usize,
) -> Result<FlopReport> {
    if length == 0 {
        return Err(Error::Parameter("length must be >= 1".into()));
    }
    if m + n > length {
        return Err(Error::Parameter(format!(
            "M + N = {} exceeds L = {length}",
            m + n
        )));
    }
    if reduced > length || reduced < m {
        return Err(Error::Parameter(format!(
            "L' = {reduced} must lie in M..=L = {m}..={length}"
        )));
    }
    let (l, d, m64, n64, lp) = (
        length as u64,
        dim as u64,
        m as u64,
        n as u64,
        reduced as u64,
    );
    let alpha = m as f64 / length as f64;
    let beta = reduced as f64 / length as f64;
    Ok(FlopReport {
        length,
        dim,
        alpha,
        beta,
        sim_flops: 2 * m64 * n64 * d,
        refine_flops: REFINE_OPS_PER_ENTRY * m64 * n64,
        aggregate_flops: 2 * m64 * n64 * d,
        preserve_flops: m64 * n64,
        attention_flops_baseline: 4 * l * l * d,
        attention_flops_merged: 4 * lp * lp * d,
        efficient: efficiency_condition(alpha, beta),
    })
}

/// Upper bound on `beta` for which merging beats plain attention.
pub fn efficiency_bound(alpha: f64) -> f64 {
    libm::sqrt(alpha * alpha - alpha + 1.0)
}

/// `beta < sqrt(alpha^2 - alpha + 1)`.
pub fn efficiency_condition(alpha: f64, beta: f64) -> bool {
    beta < efficiency_bound(alpha)
}

/// `(3/8) ln 3`.
pub fn condition_integral_closed_form() -> f64 {
    0.375 * libm::log(3.0)
}

/// `(3/4) ln 3`.
pub fn condition_probability_closed_form() -> f64 {
    0.75 * libm::log(3.0)
}

/// Composite Simpson estimate of `int_0^1 (sqrt(a^2 - a + 1) - a) da`, the
/// area of the efficient part of the triangle `0 < alpha <= beta <= 1`.
/// Odd `grid` values are rounded up to the next even count.
pub fn condition_integral(grid: usize) -> Result<f64> {
    if grid < 2 {
        return Err(Error::Parameter(format!("grid {grid} must be >= 2")));
    }
    let n = grid + grid % 2;
    let h = 1.0 / n as f64;
    let f = |a: f64| efficiency_bound(a) - a;
    let mut acc = f(0.0) + f(1.0);
    for k in 1..n {
        let weight = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += weight * f(k as f64 * h);
    }
    Ok(acc * h / 3.0)
}

/// The triangle has area 1/2, so the probability is twice the integral.
pub fn condition_ratio(grid: usize) -> Result<f64> {
    Ok(condition_integral(grid)? / 0.5)
}

/// Monte Carlo estimate of `P(beta < sqrt(alpha^2 - alpha + 1))` for
/// `(alpha, beta)` uniform on `0 < alpha <= beta <= 1`. Each sample takes two
/// uniforms and orders them.
pub fn condition_probability(samples: usize, seed: u64) -> Result<f64> {
    if samples == 0 {
        return Err(Error::Parameter("samples must be >= 1".into()));
    }
    let mut rng = SplitMix64::new(seed);
    let mut hits = 0usize;
    for _ in 0..samples {
        let (u, v) = (rng.next_f64(), rng.next_f64());
        let (alpha, beta) = if u <= v { (u, v) } else { (v, u) };
        if efficiency_condition(alpha, beta) {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sim_flops_vit_b() {
        let r = flop_report(197, 768, 98, 98, 197).unwrap();
        assert_eq!(r.sim_flops, 14_751_744);
        assert_eq!(r.attention_flops_merged, r.attention_flops_baseline);
        assert_eq!(r.attention_saved(), 0);
    }

    #[test]
    fn empty_side_has_no_overhead() {
        let r = flop_report(10, 4, 0, 10, 10).unwrap();
        assert_eq!(r.overhead_flops(), 0);
        let r = flop_report(10, 4, 10, 0, 10).unwrap();
        assert_eq!(r.overhead_flops(), 0);
    }

    #[test]
    fn rejects_inconsistent_counts() {
        assert!(flop_report(10, 4, 6, 6, 10).is_err());
        assert!(flop_report(10, 4, 5, 5, 11).is_err());
        assert!(flop_report(10, 4, 5, 5, 4).is_err());
    }

    #[test]
    fn condition_examples() {
        assert!((efficiency_bound(0.5) - 0.8660254037844386).abs() < 1e-15);
        assert!(efficiency_condition(0.5, 0.5));
        assert!(!efficiency_condition(0.5, 0.9));
        for k in 1..1000 {
            let a = k as f64 / 1000.0;
            assert!(efficiency_condition(a, a));
        }
    }

    #[test]
    fn monotone_in_beta() {
        for i in 0..=50 {
            let a = i as f64 / 50.0;
            let mut seen_false = false;
            for j in 0..=200 {
                let b = j as f64 / 200.0;
                let ok = efficiency_condition(a, b);
                assert!(!(seen_false && ok));
                seen_false |= !ok;
            }
        }
    }

    #[test]
    fn simpson_matches_closed_form() {
        let exact = condition_integral_closed_form();
        assert!((exact - 0.4119796).abs() < 1e-6);
        assert!((condition_integral(10_000).unwrap() - exact).abs() < 1e-6);
        assert!((condition_integral(2).unwrap() - exact).abs() < 0.01);
        assert!(
            (condition_ratio(1000).unwrap() - condition_probability_closed_form()).abs() < 1e-9
        );
        assert!(condition_integral(1).is_err());
    }

    #[test]
    fn monte_carlo_close_to_closed_form() {
        let p = condition_probability(200_000, 1).unwrap();
        assert!(
            (p - condition_probability_closed_form()).abs() < 0.005,
            "{p}"
        );
    }
}
