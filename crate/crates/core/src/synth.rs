//! Deterministic synthetic token generation.

use alloc::format;
use alloc::vec::Vec;

use crate::rng::SplitMix64;
use crate::tensor::{norm, TokenMatrix};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pattern {
    /// i.i.d. standard normals.
    Gaussian,
    /// `k` random unit centers; non-special token with ordinal `t` is
    /// `center[t % k] + noise_scale * N(0, I)`.
    Clustered { k: usize, noise_scale: f64 },
}

/// Generates a `batch x length x dim` tensor from the SplitMix64 stream.
///
/// Draw order is fixed: for the clustered pattern the `k * dim` center
/// coordinates come first, then tokens in `[b][l][k]` order. Special tokens are
/// always standard normal.
pub fn gen_synthetic(
    batch: usize,
    length: usize,
    dim: usize,
    l_spec: usize,
    seed: u64,
    pattern: Pattern,
) -> Result<TokenMatrix> {
    let mut rng = SplitMix64::new(seed);
    let total = batch * length * dim;
    let data = match pattern {
        Pattern::Gaussian => (0..total).map(|_| rng.next_normal()).collect(),
        Pattern::Clustered { k, noise_scale } => {
            if k == 0 || k > length {
                return Err(Error::Parameter(format!(
                    "cluster count k={k} must be in 1..={length}"
                )));
            }
            if !noise_scale.is_finite() || noise_scale < 0.0 {
                return Err(Error::Parameter(format!(
                    "noise scale {noise_scale} must be finite and >= 0"
                )));
            }
            let centers: Vec<Vec<f64>> = (0..k)
                .map(|_| {
                    let mut c: Vec<f64> = (0..dim).map(|_| rng.next_normal()).collect();
                    let n = norm(&c);
                    if n > 0.0 {
                        c.iter_mut().for_each(|v| *v /= n);
                    } else {
                        c[0] = 1.0;
                    }
                    c
                })
                .collect();
            let mut data = Vec::with_capacity(total);
            for _ in 0..batch {
                for l in 0..length {
                    if l < l_spec {
                        data.extend((0..dim).map(|_| rng.next_normal()));
                    } else {
                        let center = &centers[(l - l_spec) % k];
                        data.extend(center.iter().map(|c| c + noise_scale * rng.next_normal()));
                    }
                }
            }
            data
        }
    };
    TokenMatrix::new(batch, length, dim, l_spec, data)
}
