use crate::nn::{Scalar, Tensor};

/// `lambda * sum(w^2)` over the given kernels.
pub fn l2_penalty<T: Scalar>(weights: &[&Tensor<T>], lambda: f64) -> T {
    let total: T = weights.iter().map(|w| w.sum_squares()).sum();
    T::from_f64(lambda) * total
}

/// Adds `2 * lambda * w` to the matching gradient.
pub fn l2_backward<T: Scalar>(weights: &Tensor<T>, grad: &mut Tensor<T>, lambda: f64) {
    let two_lambda = T::from_f64(2.0 * lambda);
    for (g, &w) in grad.data_mut().iter_mut().zip(weights.data()) {
        *g += two_lambda * w;
    }
}
