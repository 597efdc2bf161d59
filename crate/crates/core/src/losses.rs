//! Masked-prediction and contrastive losses.
//!
//! Each loss has a plain evaluator over [`Matrix`] values and a graph
//! builder used during training; tests check that the two agree.

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Result};
use crate::tensor::{matmul, Matrix};

/// Lower bound on the temperature; the logit scale `1/τ` never exceeds 100.
pub const TAU_MIN: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_m2d: f64,
    pub lambda_clap: f64,
}

impl LossWeights {
    pub const STAGE1: Self = Self {
        lambda_m2d: 1.0,
        lambda_clap: 0.01,
    };
    pub const CLAP_ONLY: Self = Self {
        lambda_m2d: 0.0,
        lambda_clap: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        if self.lambda_m2d < 0.0 || self.lambda_clap < 0.0 {
            return invalid("loss weights must be nonnegative");
        }
        if self.lambda_m2d == 0.0 && self.lambda_clap == 0.0 {
            return invalid("loss weights must not both be zero");
        }
        Ok(())
    }
}

/// Paired audio/text semantic features; row `i` of each side belongs together.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticBatch {
    pub audio: Matrix,
    pub text: Matrix,
}

impl SemanticBatch {
    pub fn new(audio: Matrix, text: Matrix) -> Result<Self> {
        if audio.rows() != text.rows() || audio.cols() != text.cols() {
            return invalid(format!(
                "audio batch {:?} and text batch {:?} differ",
                audio.shape(),
                text.shape()
            ));
        }
        check_nonzero_rows(&audio, "audio")?;
        check_nonzero_rows(&text, "text")?;
        Ok(Self { audio, text })
    }
}

fn check_nonzero_rows(m: &Matrix, what: &str) -> Result<()> {
    match m.row_norms().iter().position(|&n| n == 0.0 || !n.is_finite()) {
        Some(r) => invalid(format!("{what} row {r} has zero or non-finite norm")),
        None => Ok(()),
    }
}

/// Mean over rows of `2 - 2·cos(pred_i, target_i)`.
pub fn m2d_loss(pred: &Matrix, target: &Matrix) -> Result<f64> {
    if pred.shape() != target.shape() || pred.rows() == 0 {
        return invalid(format!("m2d loss shapes {:?} vs {:?}", pred.shape(), target.shape()));
    }
    check_nonzero_rows(pred, "prediction")?;
    check_nonzero_rows(target, "target")?;
    let (pn, tn) = (pred.row_norms(), target.row_norms());
    let total: f64 = (0..pred.rows())
        .map(|r| {
            let dot: f64 = pred.row(r).iter().zip(target.row(r)).map(|(a, b)| a * b).sum();
            2.0 - 2.0 * dot / (pn[r] * tn[r])
        })
        .sum();
    Ok(total / pred.rows() as f64)
}

/// `S[m][n] = cos(audio_m, text_n)`.
pub fn similarity_matrix(b: &SemanticBatch) -> Matrix {
    let a = normalize_rows(&b.audio);
    let t = normalize_rows(&b.text);
    matmul(&a, false, &t, true)
}

pub fn normalize_rows(m: &Matrix) -> Matrix {
    let norms = m.row_norms();
    let mut out = m.clone();
    for (r, n) in norms.iter().enumerate() {
        out.row_mut(r).iter_mut().for_each(|v| *v /= n);
    }
    out
}

/// Symmetric NT-Xent over a similarity matrix: the mean of the
/// column-softmax and row-softmax cross-entropies of the diagonal.
pub fn clap_loss(s: &Matrix, tau: f64) -> Result<f64> {
    if s.rows() != s.cols() || s.rows() == 0 {
        return invalid(format!("similarity matrix must be square and non-empty, got {:?}", s.shape()));
    }
    if !(tau >= TAU_MIN) {
        return invalid(format!("temperature {tau} below {TAU_MIN}"));
    }
    let b = s.rows();
    let logits = s.scale(1.0 / tau);
    let by_row = crate::autodiff::log_softmax_rows(&logits);
    let by_col = crate::autodiff::log_softmax_rows(&logits.transpose());
    let total: f64 = (0..b).map(|i| by_col.get(i, i) + by_row.get(i, i)).sum();
    Ok((-total / (2 * b) as f64).max(0.0))
}

pub fn clip_temperature(tau: f64) -> f64 {
    tau.max(TAU_MIN)
}

pub fn combined_loss(l_m2d: f64, l_clap: f64, w: LossWeights) -> f64 {
    w.lambda_m2d * l_m2d + w.lambda_clap * l_clap
}

/// Graph form of [`m2d_loss`] summed (not averaged) over rows, so callers
/// can normalize by the total masked-patch count of a batch.
pub fn m2d_loss_sum_graph(g: &mut Graph, pred: Var, target: Var) -> Var {
    let p = g.l2_normalize_rows(pred);
    let t = g.l2_normalize_rows(target);
    let prod = g.mul(p, t);
    let dots = g.sum_all(prod);
    let rows = g.value(pred).rows() as f64;
    let s = g.scale(dots, -2.0);
    g.add_scalar(s, 2.0 * rows)
}

pub fn m2d_loss_graph(g: &mut Graph, pred: Var, target: Var) -> Var {
    let rows = g.value(pred).rows() as f64;
    let s = m2d_loss_sum_graph(g, pred, target);
    g.scale(s, 1.0 / rows)
}

pub fn similarity_graph(g: &mut Graph, audio: Var, text: Var) -> Var {
    let a = g.l2_normalize_rows(audio);
    let t = g.l2_normalize_rows(text);
    g.matmul_t(a, false, t, true)
}

/// Graph form of [`clap_loss`] with a `[1 × 1]` temperature node.
pub fn clap_loss_graph(g: &mut Graph, s: Var, tau: Var) -> Var {
    let b = g.value(s).rows();
    let inv = g.recip(tau);
    let logits = g.mul_scalar_var(s, inv);
    let by_row = g.log_softmax_rows(logits);
    let lt = g.transpose(logits);
    let by_col = g.log_softmax_rows(lt);
    let both = g.add(by_row, by_col);
    let d = g.diag(both);
    let total = g.sum_all(d);
    g.scale(total, -1.0 / (2 * b) as f64)
}
