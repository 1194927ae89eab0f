use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

/// Max-subtracted softmax over rows of `[N x C]` logits.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    logits.expect_rank("softmax logits", 2)?;
    let c = logits.dim(1);
    let mut probs = logits.clone();
    for row in probs.data_mut().chunks_exact_mut(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Ok(probs)
}

/// Mean cross-entropy and softmax probabilities. The loss is computed from
/// log-sum-exp so saturated rows stay finite.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    logits.expect_rank("softmax logits", 2)?;
    let (n, c) = (logits.dim(0), logits.dim(1));
    if labels.len() != n {
        return Err(Error::Argument(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Argument(format!("label {bad} outside 0..{c}")));
    }
    let probs = softmax(logits)?;
    let mut total = T::zero();
    for (row, &label) in logits.data().chunks_exact(c).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        total += lse - row[label];
    }
    Ok((total / T::from_f64(n as f64), probs))
}

/// Gradient of the mean cross-entropy with respect to the logits.
pub fn softmax_cross_entropy_backward<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Tensor<T> {
    let (n, c) = (probs.dim(0), probs.dim(1));
    let scale = T::one() / T::from_f64(n as f64);
    let mut grad = probs.clone();
    for (row, &label) in grad.data_mut().chunks_exact_mut(c).zip(labels) {
        row[label] -= T::one();
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    grad
}
