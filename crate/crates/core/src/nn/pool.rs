//! Non-overlapping max pooling (stride equals width, trailing remainder dropped).

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

/// Returns pooled values and, per output, the flat input index of the
/// window maximum (first occurrence on ties).
pub fn maxpool1d_forward<T: Scalar>(input: &Tensor<T>, width: usize) -> Result<(Tensor<T>, Vec<u32>)> {
    input.expect_rank("maxpool1d input", 3)?;
    let (n, c, len) = (input.dim(0), input.dim(1), input.dim(2));
    if width == 0 || len < width {
        return Err(Error::Shape(format!(
            "maxpool1d: input length {len} shorter than pool width {width}"
        )));
    }
    let out_len = len / width;
    let mut out = Tensor::zeros(&[n, c, out_len]);
    let mut argmax = Vec::with_capacity(n * c * out_len);
    let x = input.data();
    for (row_idx, (src, dst)) in x.chunks_exact(len).zip(out.data_mut().chunks_exact_mut(out_len)).enumerate() {
        for (t, d) in dst.iter_mut().enumerate() {
            let window = &src[t * width..(t + 1) * width];
            let mut best = 0;
            for (i, &v) in window.iter().enumerate().skip(1) {
                if v > window[best] {
                    best = i;
                }
            }
            *d = window[best];
            argmax.push((row_idx * len + t * width + best) as u32);
        }
    }
    Ok((out, argmax))
}

pub fn maxpool1d_backward<T: Scalar>(grad_out: &Tensor<T>, argmax: &[u32], input_shape: &[usize]) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len() {
        return Err(Error::Shape(format!(
            "maxpool1d backward: {} gradients for {} windows",
            grad_out.len(),
            argmax.len()
        )));
    }
    let mut grad_in = Tensor::zeros(input_shape);
    let gx = grad_in.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        gx[idx as usize] += g;
    }
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_window() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 5], &[1.0, 3.0, 2.0, 5.0, 4.0]).unwrap();
        let (y, arg) = maxpool1d_forward(&x, 5).unwrap();
        assert_eq!(y.data(), &[5.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn remainder_is_dropped() {
        let x = Tensor::<f32>::zeros(&[1, 2, 9_994]);
        let (y, _) = maxpool1d_forward(&x, 5).unwrap();
        assert_eq!(y.shape(), &[1, 2, 1_998]);
    }

    #[test]
    fn ties_route_gradient_to_first_index() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2], &[2.0, 2.0]).unwrap();
        let (y, arg) = maxpool1d_forward(&x, 2).unwrap();
        let g = maxpool1d_backward(&Tensor::full(y.shape(), 1.0), &arg, x.shape()).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0]);
    }

    #[test]
    fn too_short_is_a_shape_error() {
        let x = Tensor::<f64>::zeros(&[1, 1, 4]);
        assert!(matches!(maxpool1d_forward(&x, 5), Err(Error::Shape(_))));
    }
}
