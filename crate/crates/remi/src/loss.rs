//! Cross-entropy on probability rows.
//!
//! The network's softmax tail already produced probabilities, so the loss
//! here is plain negative log-likelihood with a clamp:
//!     L = -(1/b) sum_i ln(max(p_i[y_i], EPS))
//! Its gradient w.r.t. the probability matrix feeds the softmax backward,
//! which together reproduce the usual fused (p - onehot)/b logit gradient.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probability floor used by every log in the workbench.
pub const EPS: f64 = 1e-12;

fn check_labels(probs: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let (b, k) = (probs.rows(), probs.row_len());
    if labels.len() != b {
        return Err(Error::Input(format!("{} labels for {} probability rows", labels.len(), b)));
    }
    if b == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
    }
    Ok((b, k))
}

/// Mean negative log-likelihood of the true labels.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (b, _) = check_labels(probs, labels)?;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        total -= probs.row(i)[y].max(EPS).ln();
    }
    Ok(total / b as f64)
}

/// Per-sample negative log-likelihood (the loss attack feature).
pub fn per_sample_cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    check_labels(probs, labels)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs.row(i)[y].max(EPS).ln())
        .collect())
}

/// Gradient of `cross_entropy` w.r.t. the probability matrix. Zero where the
/// clamp is active (p <= EPS), so gradients stay finite.
pub fn cross_entropy_grad(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, k) = check_labels(probs, labels)?;
    let mut d = Tensor::zeros(&[b, k]);
    for (i, &y) in labels.iter().enumerate() {
        let p = probs.row(i)[y];
        if p > EPS {
            d.data[i * k + y] = -1.0 / (b as f64 * p);
        }
    }
    Ok(d)
}
