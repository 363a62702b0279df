//! Restoration of a full-length sequence from a merged one.
//!
//! The merged sequence stores each fused destination already divided by its
//! row scale `R_i`, so destinations come back unchanged. A merged source is
//! rebuilt as the `W^F`-weighted average of the fused destinations it joined,
//! and every token is scattered back through the recorded layout.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::merge::{FusionState, MergedSequence};
use crate::tensor::{Matrix, TokenMatrix};
use crate::{Error, Result};

/// Rows of one sample of a merged sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedParts {
    pub spec: Matrix,
    pub dst: Matrix,
    pub pres: Matrix,
}

/// Slices each sample into specials, fused destinations and preserved sources.
pub fn split_merged(tokens: &TokenMatrix, state: &FusionState) -> Result<Vec<MergedParts>> {
    let expected = state.reduced_length();
    if tokens.length() != expected {
        return Err(Error::State(format!(
            "merged sequence has {} tokens but the state expects l_spec + M + r = {expected}",
            tokens.length()
        )));
    }
    if tokens.batch() != state.batch {
        return Err(Error::State(format!(
            "merged sequence has batch {} but the state has {}",
            tokens.batch(),
            state.batch
        )));
    }
    let (l_spec, m) = (state.l_spec, state.m);
    let d = tokens.dim();
    Ok((0..tokens.batch())
        .map(|b| {
            let s = tokens.sample_slice(b);
            let take = |from: usize, to: usize| {
                Matrix::from_vec(to - from, d, s[from * d..to * d].to_vec()).expect("slice shape")
            };
            MergedParts {
                spec: take(0, l_spec),
                dst: take(l_spec, l_spec + m),
                pres: take(l_spec + m, expected),
            }
        })
        .collect())
}

/// Destinations are stored normalized, so this only checks the row scales and
/// returns the rows as they are.
pub fn reconstruct_dst(y_dst: &Matrix, row_scale: &[f64]) -> Result<Matrix> {
    if row_scale.len() != y_dst.rows() {
        return Err(Error::State(format!(
            "{} row scales for {} destinations",
            row_scale.len(),
            y_dst.rows()
        )));
    }
    if let Some(r) = row_scale.iter().find(|r| !(**r >= 1.0)) {
        return Err(Error::State(format!("row scale {r} below 1")));
    }
    Ok(y_dst.clone())
}

/// Preserved sources are copied from `x_pres` in source order; merged source
/// `j` becomes `sum_i W^F_ij y_i / sum_i W^F_ij`.
pub fn reconstruct_src(
    w_fused: &Matrix,
    x_dst_rec: &Matrix,
    mask_final: &[bool],
    x_pres: &Matrix,
) -> Result<Matrix> {
    let n = mask_final.len();
    let preserved = mask_final.iter().filter(|&&p| p).count();
    if preserved != x_pres.rows() {
        return Err(Error::State(format!(
            "mask preserves {preserved} sources but {} preserved rows were given",
            x_pres.rows()
        )));
    }
    if w_fused.rows() != x_dst_rec.rows() || w_fused.cols() != n {
        return Err(Error::State(
            "fusion matrix does not match destinations and mask".into(),
        ));
    }
    let d = x_dst_rec.cols();
    let mut out = Matrix::zeros(n, d);
    let mut next_pres = 0;
    for (j, &keep) in mask_final.iter().enumerate() {
        if keep {
            out.row_mut(j).copy_from_slice(x_pres.row(next_pres));
            next_pres += 1;
            continue;
        }
        let total = w_fused.column_sum(j);
        if !(total > 0.0) {
            return Err(Error::State(format!(
                "merged source {j} has an empty fusion column"
            )));
        }
        let row = out.row_mut(j);
        for i in 0..w_fused.rows() {
            let w = w_fused.get(i, j);
            if w != 0.0 {
                for (acc, &y) in row.iter_mut().zip(x_dst_rec.row(i)) {
                    *acc += w * y;
                }
            }
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}

/// Restores a merged sequence produced by [`crate::mame`].
pub fn mare(merged: &MergedSequence) -> Result<TokenMatrix> {
    restore(&merged.tokens, &merged.state)
}

/// Restores `tokens` (laid out `[specials, fused dst, preserved src]`) to the
/// original length using `state`. Special tokens pass through untouched.
pub fn restore(tokens: &TokenMatrix, state: &FusionState) -> Result<TokenMatrix> {
    state.validate()?;
    let parts = split_merged(tokens, state)?;
    let mask = state.mask_final();
    let length = state.length();
    let d = tokens.dim();
    let mut data = vec![0.0; tokens.batch() * length * d];
    for (b, part) in parts.iter().enumerate() {
        let w = state.fused_dense(b);
        let dst = reconstruct_dst(&part.dst, &state.row_scale(b))?;
        let src = reconstruct_src(&w, &dst, &mask, &part.pres)?;
        let out = &mut data[b * length * d..(b + 1) * length * d];
        let mut written = vec![false; length];
        let mut put = |pos: usize, row: &[f64]| -> Result<()> {
            if core::mem::replace(&mut written[pos], true) {
                return Err(Error::State(format!("position {pos} written twice")));
            }
            out[pos * d..(pos + 1) * d].copy_from_slice(row);
            Ok(())
        };
        for l in 0..state.l_spec {
            put(l, part.spec.row(l))?;
        }
        for (i, &pos) in state.dst_index.iter().enumerate() {
            put(pos, dst.row(i))?;
        }
        for (j, &pos) in state.src_index.iter().enumerate() {
            put(pos, src.row(j))?;
        }
        if let Some(pos) = written.iter().position(|w| !w) {
            return Err(Error::State(format!("position {pos} never written")));
        }
    }
    TokenMatrix::new(tokens.batch(), length, d, state.l_spec, data)
}
