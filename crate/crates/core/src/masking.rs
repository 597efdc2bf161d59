//! Random visible/masked partitions of a patch sequence.

use rand::seq::index;
use rand::Rng;

use crate::error::{invalid, Result};
use crate::frontend::PositionalEncoding;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPartition {
    pub visible_idx: Vec<usize>,
    pub masked_idx: Vec<usize>,
    pub n: usize,
}

impl MaskPartition {
    pub fn all_visible(n: usize) -> Self {
        Self {
            visible_idx: (0..n).collect(),
            masked_idx: Vec::new(),
            n,
        }
    }

    pub fn ratio(&self) -> f64 {
        self.masked_idx.len() as f64 / self.n as f64
    }
}

/// Number of masked patches: `ratio · n` rounded half away from zero.
///
/// Halves are detected with a small tolerance so decimal ratios round as
/// written: `0.7 · 45` is `31.499999999999996` in binary but counts 32.
pub fn masked_count(n: usize, ratio: f64) -> usize {
    let x = ratio * n as f64;
    (x + 0.5 + 1e-9 * x.max(1.0)).floor() as usize
}

/// Uniformly random subset of `masked_count(n, ratio)` masked positions.
pub fn sample_partition<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Result<MaskPartition> {
    if n == 0 {
        return invalid("partition needs at least one patch");
    }
    if !(0.0..=1.0).contains(&ratio) {
        return invalid(format!("masking ratio {ratio} outside [0, 1]"));
    }
    let m = masked_count(n, ratio);
    let mut is_masked = vec![false; n];
    for i in index::sample(rng, n, m) {
        is_masked[i] = true;
    }
    let (masked_idx, visible_idx) = (0..n).partition(|&i| is_masked[i]);
    Ok(MaskPartition {
        visible_idx,
        masked_idx,
        n,
    })
}

/// Places visible features and mask tokens back into grid order and adds
/// the positional encoding.
pub fn assemble_predictor_input(
    z_v: &Matrix,
    mask_token: &[f64],
    pe: &PositionalEncoding,
    part: &MaskPartition,
) -> Result<Matrix> {
    if z_v.rows() != part.visible_idx.len() {
        return invalid(format!(
            "{} visible features for {} visible positions",
            z_v.rows(),
            part.visible_idx.len()
        ));
    }
    let d = mask_token.len();
    if (z_v.rows() > 0 && z_v.cols() != d) || pe.table.cols() != d || pe.table.rows() != part.n {
        return invalid("feature, mask token and positional encoding widths disagree");
    }
    let mut out = pe.table.clone();
    for (src, &dst) in part.visible_idx.iter().enumerate() {
        for (o, v) in out.row_mut(dst).iter_mut().zip(z_v.row(src)) {
            *o += v;
        }
    }
    for &dst in &part.masked_idx {
        for (o, v) in out.row_mut(dst).iter_mut().zip(mask_token) {
            *o += v;
        }
    }
    Ok(out)
}

pub fn gather(seq: &Matrix, idx: &[usize]) -> Result<Matrix> {
    if let Some(&bad) = idx.iter().find(|&&i| i >= seq.rows()) {
        return invalid(format!("index {bad} out of range for {} rows", seq.rows()));
    }
    Ok(seq.select_rows(idx))
}
