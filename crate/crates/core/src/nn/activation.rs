use crate::nn::{Scalar, Tensor};

pub fn relu_in_place<T: Scalar>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes gradient entries whose ReLU output was not positive.
pub fn relu_backward_in_place<T: Scalar>(relu_out: &[T], grad: &mut [T]) {
    for (g, &y) in grad.iter_mut().zip(relu_out) {
        if y <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Sparse variant for pooled activations: only the positions named by
/// `indices` carry gradient, so only they are checked.
pub fn relu_backward_at<T: Scalar>(relu_out: &[T], grad: &mut [T], indices: &[u32]) {
    for &i in indices {
        let i = i as usize;
        if relu_out[i] <= T::zero() {
            grad[i] = T::zero();
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
