//! Fully connected layer, `out = input * weights + bias`.

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

fn dims<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize, usize)> {
    input.expect_rank("dense input", 2)?;
    weights.expect_rank("dense weights", 2)?;
    let (n, d) = (input.dim(0), input.dim(1));
    let (wd, u) = (weights.dim(0), weights.dim(1));
    if wd != d {
        return Err(Error::Shape(format!(
            "dense: input has {d} features, weights expect {wd}"
        )));
    }
    bias.expect_shape("dense bias", &[u])?;
    Ok((n, d, u))
}

pub fn dense_forward<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d, u) = dims(input, weights, bias)?;
    let mut out = Tensor::zeros(&[n, u]);
    for row in out.data_mut().chunks_exact_mut(u) {
        row.copy_from_slice(bias.data());
    }
    T::gemm(false, false, n, u, d, T::one(), input.data(), weights.data(), T::one(), out.data_mut());
    Ok(out)
}

/// Accumulates parameter gradients and returns the input gradient.
pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    grad_weights: &mut Tensor<T>,
    grad_bias: &mut Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, d, u) = dims(input, weights, grad_bias)?;
    grad_out.expect_shape("dense grad_out", &[n, u])?;
    grad_weights.expect_shape("dense grad_weights", &[d, u])?;
    T::gemm(true, false, d, u, n, T::one(), input.data(), grad_out.data(), T::one(), grad_weights.data_mut());
    for row in grad_out.data().chunks_exact(u) {
        for (b, &g) in grad_bias.data_mut().iter_mut().zip(row) {
            *b += g;
        }
    }
    let mut grad_in = Tensor::zeros(&[n, d]);
    T::gemm(false, true, n, d, u, T::one(), grad_out.data(), weights.data(), T::zero(), grad_in.data_mut());
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights_pass_input_through() {
        let x = Tensor::<f64>::from_f64(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap();
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let y = dense_forward(&x, &eye, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_input_gives_bias() {
        let x = Tensor::<f32>::zeros(&[4, 5]);
        let w = Tensor::full(&[5, 2], 3.0);
        let b = Tensor::from_f64(&[2], &[1.5, -2.5]).unwrap();
        let y = dense_forward(&x, &w, &b).unwrap();
        for row in y.data().chunks(2) {
            assert_eq!(row, b.data());
        }
    }

    #[test]
    fn mismatched_shapes_fail() {
        let x = Tensor::<f32>::zeros(&[1, 4]);
        let err = dense_forward(&x, &Tensor::zeros(&[5, 2]), &Tensor::zeros(&[2])).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        let err = dense_forward(&x, &Tensor::zeros(&[4, 2]), &Tensor::zeros(&[3])).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }
}
