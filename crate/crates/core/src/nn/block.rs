//! Convolution, ReLU and max pooling fused per sample, so the
//! full-resolution activation is never held for the whole batch.
//!
//! ReLU and max commute, so the block pools the raw convolution output and
//! applies ReLU to the pooled values. The ReLU derivative at a pooled
//! position is then `pooled > 0`.

use crate::error::{Error, Result};
use crate::nn::conv::{backward_sample, forward_sample, ConvDims};
use crate::nn::{Scalar, Tensor};

/// Output of [`conv_relu_pool_forward`].
#[derive(Debug, Clone)]
pub struct BlockOutput<T> {
    /// `[N x c_out x conv_len / pool]`, after ReLU.
    pub pooled: Tensor<T>,
    /// Per pooled value, the index of its window maximum within the
    /// sample's `[c_out x conv_len]` convolution output.
    pub argmax: Vec<u32>,
}

pub fn conv_relu_pool_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    pool: usize,
) -> Result<BlockOutput<T>> {
    let (n, d) = ConvDims::of(input, weights, bias)?;
    if pool == 0 || d.out_len < pool {
        return Err(Error::Shape(format!(
            "conv block: conv output length {} shorter than pool width {pool}",
            d.out_len
        )));
    }
    let p_len = d.out_len / pool;
    let mut pooled = Tensor::zeros(&[n, d.c_out, p_len]);
    let mut argmax = vec![0u32; n * d.c_out * p_len];
    let mut cols = vec![T::zero(); d.cols_size()];
    let mut y = vec![T::zero(); d.out_size()];
    let per_sample = d.c_out * p_len;
    for (s, x) in input.data().chunks_exact(d.in_size()).enumerate() {
        forward_sample(x, weights.data(), bias.data(), &d, &mut cols, &mut y);
        let out = &mut pooled.data_mut()[s * per_sample..(s + 1) * per_sample];
        let arg = &mut argmax[s * per_sample..(s + 1) * per_sample];
        for o in 0..d.c_out {
            let row = &y[o * d.out_len..(o + 1) * d.out_len];
            for t in 0..p_len {
                let window = &row[t * pool..(t + 1) * pool];
                let mut best = 0;
                for (i, &v) in window.iter().enumerate().skip(1) {
                    if v > window[best] {
                        best = i;
                    }
                }
                let m = window[best];
                out[o * p_len + t] = if m > T::zero() { m } else { T::zero() };
                arg[o * p_len + t] = (o * d.out_len + t * pool + best) as u32;
            }
        }
    }
    Ok(BlockOutput { pooled, argmax })
}

/// Accumulates parameter gradients and returns the input gradient when
/// requested.
#[allow(clippy::too_many_arguments)]
pub fn conv_relu_pool_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    output: &BlockOutput<T>,
    grad_pooled: &Tensor<T>,
    grad_weights: &mut Tensor<T>,
    grad_bias: &mut Tensor<T>,
    need_input_grad: bool,
) -> Result<Option<Tensor<T>>> {
    let (n, d) = ConvDims::of(input, weights, grad_bias)?;
    grad_pooled.expect_shape("conv block grad", output.pooled.shape())?;
    grad_weights.expect_shape("conv block grad_weights", weights.shape())?;
    let per_sample = output.pooled.len() / n;
    let mut cols = vec![T::zero(); d.cols_size()];
    let mut gcols = vec![T::zero(); d.cols_size()];
    let mut gy = vec![T::zero(); d.out_size()];
    let mut grad_in = need_input_grad.then(|| input.zeros_like());
    for s in 0..n {
        gy.fill(T::zero());
        let range = s * per_sample..(s + 1) * per_sample;
        for ((&idx, &g), &p) in output.argmax[range.clone()]
            .iter()
            .zip(&grad_pooled.data()[range.clone()])
            .zip(&output.pooled.data()[range])
        {
            if p > T::zero() {
                gy[idx as usize] += g;
            }
        }
        let x = &input.data()[s * d.in_size()..(s + 1) * d.in_size()];
        let gx = grad_in.as_mut().map(|g| &mut g.data_mut()[s * d.in_size()..(s + 1) * d.in_size()]);
        backward_sample(
            x,
            weights.data(),
            &gy,
            grad_weights.data_mut(),
            grad_bias.data_mut(),
            &d,
            &mut cols,
            &mut gcols,
            gx,
        );
    }
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::activation::{relu_backward_in_place, relu_in_place};
    use crate::nn::conv::{conv1d_backward, conv1d_forward};
    use crate::nn::pool::{maxpool1d_backward, maxpool1d_forward};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matches_the_unfused_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[3, 4, 40], &mut rng);
        let w = random(&[5, 4, 7], &mut rng);
        let b = random(&[5], &mut rng);
        let g = random(&[3, 5, 6], &mut rng);

        let mut y = conv1d_forward(&x, &w, &b).unwrap();
        relu_in_place(&mut y);
        let (p, arg) = maxpool1d_forward(&y, 5).unwrap();
        let mut gy = maxpool1d_backward(&g, &arg, y.shape()).unwrap();
        relu_backward_in_place(y.data(), gy.data_mut());
        let (mut gw, mut gb) = (w.zeros_like(), b.zeros_like());
        let gx = conv1d_backward(&x, &w, &gy, &mut gw, &mut gb, true).unwrap().unwrap();

        let out = conv_relu_pool_forward(&x, &w, &b, 5).unwrap();
        assert_eq!(out.pooled, p);
        let (mut fw, mut fb) = (w.zeros_like(), b.zeros_like());
        let fx = conv_relu_pool_backward(&x, &w, &out, &g, &mut fw, &mut fb, true).unwrap().unwrap();
        for (a, b) in [(&gx, &fx), (&gw, &fw), (&gb, &fb)] {
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reference_length_chain() {
        let x = Tensor::<f32>::zeros(&[1, 1, 10_000]);
        let out = conv_relu_pool_forward(&x, &Tensor::zeros(&[2, 1, 7]), &Tensor::zeros(&[2]), 5).unwrap();
        assert_eq!(out.pooled.shape(), &[1, 2, 1998]);
    }
}
