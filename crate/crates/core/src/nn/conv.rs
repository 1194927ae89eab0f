//! Valid (unpadded), stride-1 one-dimensional convolution via im2col + GEMM.

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

fn dims<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize)> {
    input.expect_rank("conv1d input", 3)?;
    weights.expect_rank("conv1d weights", 3)?;
    let (n, c_in, len) = (input.dim(0), input.dim(1), input.dim(2));
    let (c_out, w_in, k) = (weights.dim(0), weights.dim(1), weights.dim(2));
    if w_in != c_in {
        return Err(Error::Shape(format!(
            "conv1d: input has {c_in} channels, weights expect {w_in}"
        )));
    }
    bias.expect_shape("conv1d bias", &[c_out])?;
    if len < k {
        return Err(Error::Shape(format!(
            "conv1d: input length {len} shorter than kernel width {k}"
        )));
    }
    Ok((n, c_in, len, c_out, k))
}

/// `cols[(c*k + j) * out_len + t] = x[c, t + j]`
fn im2col<T: Scalar>(x: &[T], c_in: usize, len: usize, k: usize, cols: &mut [T]) {
    let out_len = len - k + 1;
    for c in 0..c_in {
        let row = &x[c * len..(c + 1) * len];
        for j in 0..k {
            let dst = &mut cols[(c * k + j) * out_len..(c * k + j + 1) * out_len];
            dst.copy_from_slice(&row[j..j + out_len]);
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], c_in: usize, len: usize, k: usize, gx: &mut [T]) {
    let out_len = len - k + 1;
    for c in 0..c_in {
        let row = &mut gx[c * len..(c + 1) * len];
        for j in 0..k {
            let src = &cols[(c * k + j) * out_len..(c * k + j + 1) * out_len];
            for (dst, &s) in row[j..j + out_len].iter_mut().zip(src) {
                *dst += s;
            }
        }
    }
}

pub(crate) struct ConvDims {
    pub c_in: usize,
    pub len: usize,
    pub c_out: usize,
    pub k: usize,
    pub out_len: usize,
}

impl ConvDims {
    pub(crate) fn of<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, Self)> {
        let (n, c_in, len, c_out, k) = dims(input, weights, bias)?;
        Ok((
            n,
            ConvDims {
                c_in,
                len,
                c_out,
                k,
                out_len: len - k + 1,
            },
        ))
    }

    pub(crate) fn in_size(&self) -> usize {
        self.c_in * self.len
    }

    pub(crate) fn out_size(&self) -> usize {
        self.c_out * self.out_len
    }

    pub(crate) fn cols_size(&self) -> usize {
        self.c_in * self.k * self.out_len
    }
}

/// One sample: `y = bias + W * im2col(x)`, `y` is `[c_out x out_len]`.
pub(crate) fn forward_sample<T: Scalar>(x: &[T], weights: &[T], bias: &[T], d: &ConvDims, cols: &mut [T], y: &mut [T]) {
    im2col(x, d.c_in, d.len, d.k, cols);
    for (o, row) in y.chunks_exact_mut(d.out_len).enumerate() {
        row.fill(bias[o]);
    }
    T::gemm(false, false, d.c_out, d.out_len, d.c_in * d.k, T::one(), weights, cols, T::one(), y);
}

/// One sample: accumulates `dW`, `db` and, when `gx` is given, writes the
/// input gradient into it (which must be zeroed).
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_sample<T: Scalar>(
    x: &[T],
    weights: &[T],
    gy: &[T],
    grad_weights: &mut [T],
    grad_bias: &mut [T],
    d: &ConvDims,
    cols: &mut [T],
    gcols: &mut [T],
    gx: Option<&mut [T]>,
) {
    im2col(x, d.c_in, d.len, d.k, cols);
    // dW += dY * cols^T
    T::gemm(false, true, d.c_out, d.c_in * d.k, d.out_len, T::one(), gy, cols, T::one(), grad_weights);
    for (o, row) in gy.chunks_exact(d.out_len).enumerate() {
        grad_bias[o] += row.iter().copied().sum::<T>();
    }
    if let Some(gx) = gx {
        T::gemm(true, false, d.c_in * d.k, d.out_len, d.c_out, T::one(), weights, gy, T::zero(), gcols);
        col2im(gcols, d.c_in, d.len, d.k, gx);
    }
}

/// `out[n, o, t] = bias[o] + sum_{c, j} input[n, c, t + j] * weights[o, c, j]`
pub fn conv1d_forward<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = ConvDims::of(input, weights, bias)?;
    let mut out = Tensor::zeros(&[n, d.c_out, d.out_len]);
    let mut cols = vec![T::zero(); d.cols_size()];
    for (x, y) in input.data().chunks_exact(d.in_size()).zip(out.data_mut().chunks_exact_mut(d.out_size())) {
        forward_sample(x, weights.data(), bias.data(), &d, &mut cols, y);
    }
    Ok(out)
}

/// Accumulates weight and bias gradients into `grad_weights` / `grad_bias`
/// and returns the input gradient when `need_input_grad` is set.
pub fn conv1d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    grad_weights: &mut Tensor<T>,
    grad_bias: &mut Tensor<T>,
    need_input_grad: bool,
) -> Result<Option<Tensor<T>>> {
    let (n, d) = ConvDims::of(input, weights, grad_bias)?;
    grad_out.expect_shape("conv1d grad_out", &[n, d.c_out, d.out_len])?;
    grad_weights.expect_shape("conv1d grad_weights", weights.shape())?;
    let mut cols = vec![T::zero(); d.cols_size()];
    let mut gcols = vec![T::zero(); d.cols_size()];
    let mut grad_in = need_input_grad.then(|| input.zeros_like());
    for s in 0..n {
        let x = &input.data()[s * d.in_size()..(s + 1) * d.in_size()];
        let gy = &grad_out.data()[s * d.out_size()..(s + 1) * d.out_size()];
        let gx = grad_in.as_mut().map(|g| &mut g.data_mut()[s * d.in_size()..(s + 1) * d.in_size()]);
        backward_sample(
            x,
            weights.data(),
            gy,
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
