use super::layers::sigmoid;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const BCE_CLAMP: f64 = 1e-7;

/// Masked binary cross-entropy over probabilities.
///
/// `loss = -sum_{mask} [y ln p + (1-y) ln(1-p)] / max(1, sum mask)` with `p`
/// clamped to `[1e-7, 1 - 1e-7]`. Returns the loss and `d loss / d p`;
/// masked-out positions get exactly zero gradient.
pub fn masked_bce<F: Scalar>(probs: &[F], labels: &[bool], mask: &[bool]) -> Result<(F, Vec<F>)> {
    if probs.len() != labels.len() || probs.len() != mask.len() {
        return Err(Error::Shape(format!(
            "masked_bce lengths: probs {}, labels {}, mask {}",
            probs.len(),
            labels.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count().max(1);
    let norm = F::from_usize(count).unwrap();
    let lo = F::lit(BCE_CLAMP);
    let hi = F::one() - lo;
    let mut loss = F::zero();
    let mut grad = vec![F::zero(); probs.len()];
    for (k, ((&p, &y), &m)) in probs.iter().zip(labels).zip(mask).enumerate() {
        if !m {
            continue;
        }
        let p = p.max(lo).min(hi);
        if y {
            loss -= p.ln();
            grad[k] = -F::one() / (p * norm);
        } else {
            loss -= (F::one() - p).ln();
            grad[k] = F::one() / ((F::one() - p) * norm);
        }
    }
    Ok((loss / norm, grad))
}

/// Masked BCE on logits. Same loss as [`masked_bce`] on `sigmoid(logits)`;
/// the gradient is taken through the sigmoid, `(p - y) / count`.
pub fn masked_bce_logits<F: Scalar>(logits: &[F], labels: &[bool], mask: &[bool], norm: usize) -> (F, Vec<F>) {
    let n = F::from_usize(norm.max(1)).unwrap();
    let lo = F::lit(BCE_CLAMP);
    let hi = F::one() - lo;
    let mut loss = F::zero();
    let mut grad = vec![F::zero(); logits.len()];
    for (k, ((&z, &y), &m)) in logits.iter().zip(labels).zip(mask).enumerate() {
        if !m {
            continue;
        }
        let p = sigmoid(z);
        let pc = p.max(lo).min(hi);
        let target = if y { F::one() } else { F::zero() };
        loss -= if y { pc.ln() } else { (F::one() - pc).ln() };
        grad[k] = (p - target) / n;
    }
    (loss / n, grad)
}

/// Mean softmax cross-entropy of `logits: [T, V]` at the listed positions.
/// Returns the loss and `d loss / d logits`.
pub fn softmax_cross_entropy<F: Scalar>(
    logits: &Tensor<F>,
    targets: &[usize],
    positions: &[usize],
) -> Result<(F, Tensor<F>)> {
    let v = logits.cols();
    let mut grad = Tensor::zeros(&[logits.rows(), v]);
    if positions.is_empty() {
        return Ok((F::zero(), grad));
    }
    let norm = F::from_usize(positions.len()).unwrap();
    let mut loss = F::zero();
    for &t in positions {
        let target = targets[t];
        if target >= v {
            return Err(Error::OutOfRange { index: target, len: v });
        }
        let row = logits.row(t);
        let max = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let sum = row.iter().fold(F::zero(), |a, &b| a + (b - max).exp());
        let log_z = max + sum.ln();
        loss += log_z - row[target];
        let g = grad.row_mut(t);
        for (gj, &zj) in g.iter_mut().zip(row) {
            *gj = (zj - log_z).exp() / norm;
        }
        g[target] -= F::one() / norm;
    }
    Ok((loss / norm, grad))
}
