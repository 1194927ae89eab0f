use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Head, ModelParams};
use crate::error::{Error, Result};
use crate::nn::activation::relu_in_place;
use crate::nn::block::{conv_relu_pool_backward, conv_relu_pool_forward, BlockOutput};
use crate::nn::dense::{dense_backward, dense_forward};
use crate::nn::dropout::{dropout, dropout_backward};
use crate::nn::loss::{softmax, softmax_cross_entropy, softmax_cross_entropy_backward};
use crate::nn::lstm::{lstm_backward, lstm_forward, LstmCache};
use crate::nn::regularization::{l2_backward, l2_penalty};
use crate::nn::{Direction, DropoutMode, Scalar, Tensor};

/// Rows per forward pass during inference.
const PREDICT_CHUNK: usize = 64;

/// Activations recorded by [`forward`] for [`backward`].
#[derive(Debug)]
pub struct ForwardCache<T> {
    /// `[N x 1 x input_len]` network input.
    input: Tensor<T>,
    /// Output of each conv block; block `i + 1` reads `blocks[i].pooled`.
    blocks: Vec<BlockOutput<T>>,
    head: HeadCache<T>,
}

#[derive(Debug)]
enum HeadCache<T> {
    Cnn {
        flat: Tensor<T>,
        hidden: Tensor<T>,
        mask: Option<Vec<T>>,
        dropped: Tensor<T>,
    },
    UniLstm {
        lstm: LstmCache<T>,
        mask: Option<Vec<T>>,
        dropped: Tensor<T>,
    },
    BiLstm {
        forward: LstmCache<T>,
        backward: LstmCache<T>,
        mask: Option<Vec<T>>,
        dropped: Tensor<T>,
    },
}

/// `[N x A x B] -> [N x B x A]`
fn swap_last_axes<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, a, b) = (x.dim(0), x.dim(1), x.dim(2));
    let mut out = Tensor::zeros(&[n, b, a]);
    let src = x.data();
    let dst = out.data_mut();
    for s in 0..n {
        let base = s * a * b;
        for i in 0..a {
            for j in 0..b {
                dst[base + j * a + i] = src[base + i * b + j];
            }
        }
    }
    out
}

fn concat_columns<T: Scalar>(left: &Tensor<T>, right: &Tensor<T>) -> Tensor<T> {
    let (n, a, b) = (left.dim(0), left.dim(1), right.dim(1));
    let mut out = Tensor::zeros(&[n, a + b]);
    for s in 0..n {
        let row = &mut out.data_mut()[s * (a + b)..(s + 1) * (a + b)];
        row[..a].copy_from_slice(&left.data()[s * a..(s + 1) * a]);
        row[a..].copy_from_slice(&right.data()[s * b..(s + 1) * b]);
    }
    out
}

fn split_columns<T: Scalar>(x: &Tensor<T>, a: usize) -> (Tensor<T>, Tensor<T>) {
    let (n, width) = (x.dim(0), x.dim(1));
    let b = width - a;
    let mut left = Tensor::zeros(&[n, a]);
    let mut right = Tensor::zeros(&[n, b]);
    for s in 0..n {
        let row = &x.data()[s * width..(s + 1) * width];
        left.data_mut()[s * a..(s + 1) * a].copy_from_slice(&row[..a]);
        right.data_mut()[s * b..(s + 1) * b].copy_from_slice(&row[a..]);
    }
    (left, right)
}

fn check_batch<T: Scalar>(params: &ModelParams<T>, batch: &Tensor<T>) -> Result<usize> {
    batch.expect_rank("model input", 2)?;
    if batch.dim(1) != params.config.input_len {
        return Err(Error::Shape(format!(
            "model expects sequences of length {}, got {}",
            params.config.input_len,
            batch.dim(1)
        )));
    }
    Ok(batch.dim(0))
}

/// Runs the network on `[N x input_len]` inputs and returns the logits.
pub fn forward<T: Scalar, R: Rng + ?Sized>(
    params: &ModelParams<T>,
    batch: &Tensor<T>,
    mode: DropoutMode,
    rng: &mut R,
) -> Result<(Tensor<T>, ForwardCache<T>)> {
    let n = check_batch(params, batch)?;
    let cfg = &params.config;
    let input = batch.clone().reshape(&[n, 1, cfg.input_len])?;
    let mut blocks: Vec<BlockOutput<T>> = Vec::with_capacity(params.convs.len());
    for conv in &params.convs {
        let x = blocks.last().map_or(&input, |b| &b.pooled);
        let out = conv_relu_pool_forward(x, &conv.weights, &conv.bias, cfg.pool_width)?;
        blocks.push(out);
    }
    let features = &blocks.last().expect("at least one conv block").pooled;
    let (logits, head) = match &params.head {
        Head::Cnn { hidden, output } => {
            let flat = features.clone().reshape(&[n, features.len() / n])?;
            let mut h = dense_forward(&flat, &hidden.weights, &hidden.bias)?;
            relu_in_place(&mut h);
            let (dropped, mask) = dropout(&h, cfg.dropout_dense, mode, rng)?;
            let logits = dense_forward(&dropped, &output.weights, &output.bias)?;
            (logits, HeadCache::Cnn { flat, hidden: h, mask, dropped })
        }
        Head::UniLstm { lstm, output } => {
            let seq = swap_last_axes(features);
            let (out, cache) = lstm_forward(&seq, lstm, Direction::Forward)?;
            let (dropped, mask) = dropout(&out.final_state, cfg.dropout_lstm, mode, rng)?;
            let logits = dense_forward(&dropped, &output.weights, &output.bias)?;
            (logits, HeadCache::UniLstm { lstm: cache, mask, dropped })
        }
        Head::BiLstm { forward, backward, output } => {
            let seq = swap_last_axes(features);
            let (fwd, fwd_cache) = lstm_forward(&seq, forward, Direction::Forward)?;
            let (bwd, bwd_cache) = lstm_forward(&seq, backward, Direction::Backward)?;
            let joined = concat_columns(&fwd.final_state, &bwd.final_state);
            let (dropped, mask) = dropout(&joined, cfg.dropout_lstm, mode, rng)?;
            let logits = dense_forward(&dropped, &output.weights, &output.bias)?;
            (
                logits,
                HeadCache::BiLstm {
                    forward: fwd_cache,
                    backward: bwd_cache,
                    mask,
                    dropped,
                },
            )
        }
    };
    Ok((
        logits,
        ForwardCache { input, blocks, head },
    ))
}

/// Gradients of the network output with respect to every parameter, given
/// the gradient at the logits. The L2 term is not included.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    cache: &ForwardCache<T>,
    grad_logits: &Tensor<T>,
) -> Result<ModelParams<T>> {
    let mut grads = params.zeros_like();
    let feature_shape = cache.blocks.last().expect("at least one conv block").pooled.shape().to_vec();
    let n = feature_shape[0];
    let mut grad_features = match (&params.head, &mut grads.head, &cache.head) {
        (
            Head::Cnn { hidden, output },
            Head::Cnn { hidden: g_hidden, output: g_output },
            HeadCache::Cnn { flat, hidden: h, mask, dropped },
        ) => {
            let mut g = dense_backward(dropped, &output.weights, grad_logits, &mut g_output.weights, &mut g_output.bias)?;
            dropout_backward(&mut g, mask.as_deref());
            crate::nn::activation::relu_backward_in_place(h.data(), g.data_mut());
            let g_flat = dense_backward(flat, &hidden.weights, &g, &mut g_hidden.weights, &mut g_hidden.bias)?;
            g_flat.reshape(&feature_shape)?
        }
        (
            Head::UniLstm { lstm, output },
            Head::UniLstm { lstm: g_lstm, output: g_output },
            HeadCache::UniLstm { lstm: lc, mask, dropped },
        ) => {
            let mut g = dense_backward(dropped, &output.weights, grad_logits, &mut g_output.weights, &mut g_output.bias)?;
            dropout_backward(&mut g, mask.as_deref());
            let g_seq = lstm_backward(lstm, lc, None, Some(&g), g_lstm)?;
            swap_last_axes(&g_seq)
        }
        (
            Head::BiLstm { forward, backward, output },
            Head::BiLstm {
                forward: g_fwd,
                backward: g_bwd,
                output: g_output,
            },
            HeadCache::BiLstm {
                forward: fc,
                backward: bc,
                mask,
                dropped,
            },
        ) => {
            let mut g = dense_backward(dropped, &output.weights, grad_logits, &mut g_output.weights, &mut g_output.bias)?;
            dropout_backward(&mut g, mask.as_deref());
            let (g_f, g_b) = split_columns(&g, forward.hidden_size());
            let mut g_seq = lstm_backward(forward, fc, None, Some(&g_f), g_fwd)?;
            g_seq.add_assign(&lstm_backward(backward, bc, None, Some(&g_b), g_bwd)?)?;
            swap_last_axes(&g_seq)
        }
        _ => return Err(Error::State("forward cache does not match the model head".into())),
    };
    debug_assert_eq!(grad_features.dim(0), n);

    for layer in (0..params.convs.len()).rev() {
        let input = if layer == 0 { &cache.input } else { &cache.blocks[layer - 1].pooled };
        let g_conv = &mut grads.convs[layer];
        let grad_in = conv_relu_pool_backward(
            input,
            &params.convs[layer].weights,
            &cache.blocks[layer],
            &grad_features,
            &mut g_conv.weights,
            &mut g_conv.bias,
            layer > 0,
        )?;
        if let Some(g) = grad_in {
            grad_features = g;
        }
    }
    Ok(grads)
}

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    /// Mean cross-entropy over the batch.
    pub data_loss: T,
    /// L2 penalty on conv kernels.
    pub penalty: T,
    pub probabilities: Tensor<T>,
}

impl<T: Scalar> LossOutput<T> {
    pub fn total(&self) -> T {
        self.data_loss + self.penalty
    }
}

/// Records one forward pass so that [`Tape::backward`] can differentiate the
/// regularised loss.
pub struct Tape<'a, T> {
    params: &'a ModelParams<T>,
    recorded: Option<(ForwardCache<T>, Tensor<T>, Vec<usize>)>,
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new(params: &'a ModelParams<T>) -> Self {
        Tape { params, recorded: None }
    }

    pub fn forward_loss<R: Rng + ?Sized>(
        &mut self,
        batch: &Tensor<T>,
        labels: &[usize],
        mode: DropoutMode,
        rng: &mut R,
    ) -> Result<LossOutput<T>> {
        let (logits, cache) = forward(self.params, batch, mode, rng)?;
        let (data_loss, probabilities) = softmax_cross_entropy(&logits, labels)?;
        let penalty = l2_penalty(&self.params.conv_kernels(), self.params.config.l2_lambda);
        self.recorded = Some((cache, probabilities.clone(), labels.to_vec()));
        Ok(LossOutput {
            data_loss,
            penalty,
            probabilities,
        })
    }

    /// Gradient of `data_loss + penalty` from the last recorded pass. The
    /// record is consumed.
    pub fn backward(&mut self) -> Result<ModelParams<T>> {
        let (cache, probs, labels) = self
            .recorded
            .take()
            .ok_or_else(|| Error::State("backward called before a forward pass was recorded".into()))?;
        let grad_logits = softmax_cross_entropy_backward(&probs, &labels);
        let mut grads = backward(self.params, &cache, &grad_logits)?;
        let lambda = self.params.config.l2_lambda;
        if lambda > 0.0 {
            for (p, g) in self.params.convs.iter().zip(grads.convs.iter_mut()) {
                l2_backward(&p.weights, &mut g.weights, lambda);
            }
        }
        Ok(grads)
    }
}

/// Class probabilities for `[N x input_len]` inputs with dropout disabled.
pub fn predict_proba<T: Scalar>(params: &ModelParams<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
    let n = check_batch(params, batch)?;
    let _fp = crate::nn::FlushDenormals::new();
    let len = params.config.input_len;
    let classes = params.config.num_classes;
    // Inference never draws from the generator.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(n * classes);
    for chunk in batch.data().chunks(PREDICT_CHUNK * len) {
        let rows = chunk.len() / len;
        let x = Tensor::new(vec![rows, len], chunk.to_vec())?;
        let (logits, _) = forward(params, &x, DropoutMode::Infer, &mut rng)?;
        out.extend_from_slice(softmax(&logits)?.data());
    }
    Tensor::new(vec![n, classes], out)
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(probs: &Tensor<T>) -> Vec<usize> {
    let c = probs.dim(1);
    probs
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn predict_class<T: Scalar>(params: &ModelParams<T>, batch: &Tensor<T>) -> Result<Vec<usize>> {
    Ok(argmax_rows(&predict_proba(params, batch)?))
}
