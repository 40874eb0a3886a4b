//! Training objectives, as plain functions over numbers and as graph
//! versions used by the trainer.

use ndarray::Array2;
use paragen_autodiff::Tensor;

use crate::corpus::{TokenId, PAD};
use crate::error::{Error, Result};
use crate::seqnets::TeacherForced;

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 0.5;

/// Margin `alpha`, negative-class weight `beta`, penalty weight `lambda`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            lambda: crate::critic::DEFAULT_LAMBDA,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

fn log_softmax(row: ndarray::ArrayView1<f64>) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Summed token cross-entropy of one sentence; `logits` has one row per
/// non-PAD target token.
pub fn sentence_nll(logits: &Array2<f64>, target: &[TokenId], pad_id: TokenId) -> Result<f64> {
    let ids: Vec<TokenId> = target.iter().copied().filter(|&t| t != pad_id).collect();
    if logits.nrows() != ids.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} target tokens",
            logits.nrows(),
            ids.len()
        )));
    }
    let mut total = 0.0;
    for (row, &id) in logits.rows().into_iter().zip(&ids) {
        let id = id as usize;
        if id >= row.len() {
            return Err(Error::Shape(format!("target id {id} outside {} logits", row.len())));
        }
        total -= log_softmax(row)[id];
    }
    Ok(total)
}

/// Batch mean of the summed cross-entropy of `x` plus that of `y`.
pub fn reconstruction_loss(
    logits_x: &[Array2<f64>],
    logits_y: &[Array2<f64>],
    targets_x: &[Vec<TokenId>],
    targets_y: &[Vec<TokenId>],
    pad_id: TokenId,
) -> Result<f64> {
    let n = logits_x.len();
    if n == 0 || logits_y.len() != n || targets_x.len() != n || targets_y.len() != n {
        return Err(Error::Shape("reconstruction batch sizes differ or are zero".into()));
    }
    let mut total = 0.0;
    for k in 0..n {
        total += sentence_nll(&logits_x[k], &targets_x[k], pad_id)?;
        total += sentence_nll(&logits_y[k], &targets_y[k], pad_id)?;
    }
    Ok(total / n as f64)
}

/// Per-example summed cross-entropy (`batch × 1`) of time-major logits
/// against one target id per row. Rows whose target is PAD contribute nothing.
pub fn token_nll(logits: &Tensor, targets: &[TokenId], batch: usize) -> Tensor {
    let (rows, vocab) = logits.shape();
    assert_eq!(rows, targets.len(), "one target per logit row");
    let pick = Array2::from_shape_fn((rows, vocab), |(r, v)| {
        if targets[r] != PAD && targets[r] as usize == v { 1.0 } else { 0.0 }
    });
    let per_row = logits
        .log_softmax_rows()
        .mul(&Tensor::constant(pick))
        .sum_cols();
    let per_example = Array2::from_shape_fn((batch, rows), |(b, r)| {
        if r % batch == b { -1.0 } else { 0.0 }
    });
    Tensor::constant(per_example).matmul(&per_row)
}

/// [`token_nll`] of teacher-forced decoding.
pub fn sequence_nll(decoded: &TeacherForced) -> Tensor {
    token_nll(&decoded.logits, &decoded.targets, decoded.hidden.batch)
}

/// Graph version of [`reconstruction_loss`] for one class.
pub fn reconstruction_loss_tensor(x: &TeacherForced, y: &TeacherForced) -> Tensor {
    sequence_nll(x).add(&sequence_nll(y)).mean()
}

/// Number of predicted (non-PAD) tokens.
pub fn token_count(decoded: &TeacherForced) -> usize {
    decoded.targets.iter().filter(|&&t| t != PAD).count()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `mean(real) − mean(fake)`.
pub fn wasserstein_estimate(scores_real: &[f64], scores_fake: &[f64]) -> Result<f64> {
    if scores_real.is_empty() || scores_fake.is_empty() {
        return Err(Error::InvalidArgument("empty score batch".into()));
    }
    Ok(mean(scores_real) - mean(scores_fake))
}

/// `mean(fake) − mean(real) + λ·penalty`.
pub fn critic_loss(scores_real: &[f64], scores_fake: &[f64], penalty: f64, lambda: f64) -> Result<f64> {
    if penalty < 0.0 {
        return Err(Error::InvalidArgument(format!("penalty must be >= 0, got {penalty}")));
    }
    Ok(-wasserstein_estimate(scores_real, scores_fake)? + lambda * penalty)
}

/// `(1−β)·W_i + β/(N−1) · Σ_{j≠i} max(0, W_i − W_j + α)`; `target` is 0-based.
pub fn multiclass_generator_loss(w: &[f64], target: usize, alpha: f64, beta: f64) -> Result<f64> {
    if w.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {}", w.len())));
    }
    if target >= w.len() {
        return Err(Error::InvalidArgument(format!("class {target} out of range")));
    }
    let wi = w[target];
    let hinge: f64 = w
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != target)
        .map(|(_, wj)| (wi - wj + alpha).max(0.0))
        .sum();
    Ok((1.0 - beta) * wi + beta / (w.len() - 1) as f64 * hinge)
}

/// `(1−β)·W_pos + β·max(0, W_pos − W_neg + α)`.
pub fn generator_loss(w_pos: f64, w_neg: f64, alpha: f64, beta: f64) -> f64 {
    (1.0 - beta) * w_pos + beta * (w_pos - w_neg + alpha).max(0.0)
}

/// Graph version of [`generator_loss`]; the hinge has zero slope at its kink.
pub fn generator_loss_tensor(w_pos: &Tensor, w_neg: &Tensor, alpha: f64, beta: f64) -> Tensor {
    w_pos
        .scale(1.0 - beta)
        .add(&w_pos.sub(w_neg).offset(alpha).relu().scale(beta))
}

/// `L_g + ½(L_AE_p + L_AE_n)`.
pub fn combined_generator_objective(l_g: f64, l_ae_p: f64, l_ae_n: f64) -> f64 {
    l_g + 0.5 * (l_ae_p + l_ae_n)
}

pub fn combined_generator_objective_tensor(l_g: &Tensor, l_ae_p: &Tensor, l_ae_n: &Tensor) -> Tensor {
    l_g.add(&l_ae_p.add(l_ae_n).scale(0.5))
}
