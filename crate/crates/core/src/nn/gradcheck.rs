//! Finite-difference verification of analytic gradients (64-bit only).

use std::fmt;

use crate::error::Result;
use crate::nn::Tensor;

/// A differentiable scalar function of a set of parameter tensors.
pub trait GradCheckable {
    fn tensor_count(&self) -> usize;
    fn tensor_name(&self, index: usize) -> String;
    fn tensor_mut(&mut self, index: usize) -> &mut Tensor<f64>;
    /// Forward pass only. Must be deterministic.
    fn loss(&mut self) -> Result<f64>;
    /// Analytic gradients aligned with the parameter tensors.
    fn gradients(&mut self) -> Result<Vec<Tensor<f64>>>;
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so entries whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub scale_floor: f64,
    /// Upper bound on entries checked per tensor (evenly spaced); `None`
    /// checks every entry.
    pub max_entries_per_tensor: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            scale_floor: 1e-6,
            max_entries_per_tensor: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_relative_error <= self.tolerance)
    }

    pub fn max_relative_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_relative_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tensors {
            writeln!(
                f,
                "{:<28} checked {:>6}  max rel err {:.3e} (at {})",
                t.name, t.checked, t.max_relative_error, t.worst_index
            )?;
        }
        write!(f, "tolerance {:.1e}: {}", self.tolerance, if self.passed() { "pass" } else { "FAIL" })
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients against central differences.
pub fn grad_check<M: GradCheckable + ?Sized>(model: &mut M, config: GradCheckConfig) -> Result<GradCheckReport> {
    let analytic = model.gradients()?;
    let mut tensors = Vec::with_capacity(model.tensor_count());
    for (ti, grad) in analytic.iter().enumerate() {
        let len = grad.len();
        let indices: Vec<usize> = match config.max_entries_per_tensor {
            Some(cap) if cap < len => (0..cap).map(|i| i * len / cap).collect(),
            _ => (0..len).collect(),
        };
        let mut worst = (0.0, 0);
        for &i in &indices {
            let original = model.tensor_mut(ti).data()[i];
            model.tensor_mut(ti).data_mut()[i] = original + config.step;
            let plus = model.loss()?;
            model.tensor_mut(ti).data_mut()[i] = original - config.step;
            let minus = model.loss()?;
            model.tensor_mut(ti).data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * config.step);
            let err = relative_error(grad.data()[i], numeric, config.scale_floor);
            if err > worst.0 || err.is_nan() {
                worst = (err, i);
            }
        }
        tensors.push(TensorCheck {
            name: model.tensor_name(ti),
            checked: indices.len(),
            max_relative_error: worst.0,
            worst_index: worst.1,
        });
    }
    Ok(GradCheckReport {
        tensors,
        tolerance: config.tolerance,
    })
}

/// Single-layer harnesses: each reduces a layer's output to a scalar with a
/// fixed random projection `sum(r * out)` so every output entry carries a
/// distinct upstream gradient.
pub mod harness {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::GradCheckable;
    use crate::error::Result;
    use crate::nn::activation::{relu_backward_in_place, relu_in_place};
    use crate::nn::conv::{conv1d_backward, conv1d_forward};
    use crate::nn::dense::{dense_backward, dense_forward};
    use crate::nn::dropout::{dropout, dropout_backward};
    use crate::nn::loss::{softmax_cross_entropy, softmax_cross_entropy_backward};
    use crate::nn::lstm::{lstm_backward, lstm_forward};
    use crate::nn::pool::{maxpool1d_backward, maxpool1d_forward};
    use crate::nn::regularization::{l2_backward, l2_penalty};
    use crate::nn::{Direction, DropoutMode, LstmParams, Tensor};

    pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    fn project(out: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
        out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    }

    pub struct Conv {
        pub tensors: [Tensor<f64>; 3],
        pub r: Tensor<f64>,
    }

    impl Conv {
        pub fn new(seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let input = random_tensor(&[2, 3, 12], 1.0, &mut rng);
            let w = random_tensor(&[4, 3, 5], 0.5, &mut rng);
            let b = random_tensor(&[4], 0.5, &mut rng);
            let r = random_tensor(&[2, 4, 8], 1.0, &mut rng);
            Conv { tensors: [input, w, b], r }
        }
    }

    impl GradCheckable for Conv {
        fn tensor_count(&self) -> usize {
            3
        }
        fn tensor_name(&self, i: usize) -> String {
            ["conv.input", "conv.weights", "conv.bias"][i].into()
        }
        fn tensor_mut(&mut self, i: usize) -> &mut Tensor<f64> {
            &mut self.tensors[i]
        }
        fn loss(&mut self) -> Result<f64> {
            let [x, w, b] = &self.tensors;
            Ok(project(&conv1d_forward(x, w, b)?, &self.r))
        }
        fn gradients(&mut self) -> Result<Vec<Tensor<f64>>> {
            let [x, w, b] = &self.tensors;
            let mut gw = w.zeros_like();
            let mut gb = b.zeros_like();
            let gx = conv1d_backward(x, w, &self.r, &mut gw, &mut gb, true)?.unwrap();
            Ok(vec![gx, gw, gb])
        }
    }

    /// Max pool followed by ReLU on the conv-shaped input.
    pub struct PoolRelu {
        pub input: Tensor<f64>,
        pub width: usize,
        pub r: Tensor<f64>,
    }

    impl PoolRelu {
        pub fn new(seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            PoolRelu {
                input: random_tensor(&[2, 3, 17], 1.0, &mut rng),
                width: 5,
                r: random_tensor(&[2, 3, 3], 1.0, &mut rng),
            }
        }
    }

    impl GradCheckable for PoolRelu {
        fn tensor_count(&self) -> usize {
            1
        }
        fn tensor_name(&self, _: usize) -> String {
            "relu+maxpool.input".into()
        }
        fn tensor_mut(&mut self, _: usize) -> &mut Tensor<f64> {
            &mut self.input
        }
        fn loss(&mut self) -> Result<f64> {
            let mut y = self.input.clone();
            relu_in_place(&mut y);
            let (p, _) = maxpool1d_forward(&y, self.width)?;
            Ok(project(&p, &self.r))
        }
        fn gradients(&mut self) -> Result<Vec<Tensor<f64>>> {
            let mut y = self.input.clone();
            relu_in_place(&mut y);
            let (_, arg) = maxpool1d_forward(&y, self.width)?;
            let mut g = maxpool1d_backward(&self.r, &arg, y.shape())?;
            relu_backward_in_place(y.data(), g.data_mut());
            Ok(vec![g])
        }
    }

    pub struct Dense {
        pub tensors: [Tensor<f64>; 3],
        pub r: Tensor<f64>,
    }

    impl Dense {
        pub fn new(seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Dense {
                tensors: [
                    random_tensor(&[3, 7], 1.0, &mut rng),
                    random_tensor(&[7, 5], 0.5, &mut rng),
                    random_tensor(&[5], 0.5, &mut rng),
                ],
                r: random_tensor(&[3, 5], 1.0, &mut rng),
            }
        }
    }

    impl GradCheckable for Dense {
        fn tensor_count(&self) -> usize {
            3
        }
        fn tensor_name(&self, i: usize) -> String {
            ["dense.input", "dense.weights", "dense.bias"][i].into()
        }
        fn tensor_mut(&mut self, i: usize) -> &mut Tensor<f64> {
            &mut self.tensors[i]
        }
        fn loss(&mut self) -> Result<f64> {
            let [x, w, b] = &self.tensors;
            Ok(project(&dense_forward(x, w, b)?, &self.r))
        }
        fn gradients(&mut self) -> Result<Vec<Tensor<f64>>> {
            let [x, w, b] = &self.tensors;
            let mut gw = w.zeros_like();
            let mut gb = b.zeros_like();
            let gx = dense_backward(x, w, &self.r, &mut gw, &mut gb)?;
            Ok(vec![gx, gw, gb])
        }
    }

    /// LSTM with upstream gradient on both the hidden sequence and the final
    /// state.
    pub struct Lstm {
        pub input: Tensor<f64>,
        pub params: LstmParams<f64>,
        pub direction: Direction,
        pub r_hidden: Tensor<f64>,
        pub r_final: Tensor<f64>,
    }

    impl Lstm {
        pub fn new(seed: u64, direction: Direction) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, t, d, h) = (2, 5, 3, 4);
            Lstm {
                input: random_tensor(&[n, t, d], 1.0, &mut rng),
                params: LstmParams {
                    input_weights: random_tensor(&[4 * h, d], 0.6, &mut rng),
                    recurrent_weights: random_tensor(&[4 * h, h], 0.6, &mut rng),
                    bias: random_tensor(&[4 * h], 0.6, &mut rng),
                },
                direction,
                r_hidden: random_tensor(&[n, t, h], 1.0, &mut rng),
                r_final: random_tensor(&[n, h], 1.0, &mut rng),
            }
        }
    }

    impl GradCheckable for Lstm {
        fn tensor_count(&self) -> usize {
            4
        }
        fn tensor_name(&self, i: usize) -> String {
            let dir = match self.direction {
                Direction::Forward => "fwd",
                Direction::Backward => "bwd",
            };
            format!("lstm_{dir}.{}", ["input", "input_weights", "recurrent_weights", "bias"][i])
        }
        fn tensor_mut(&mut self, i: usize) -> &mut Tensor<f64> {
            match i {
                0 => &mut self.input,
                1 => &mut self.params.input_weights,
                2 => &mut self.params.recurrent_weights,
                _ => &mut self.params.bias,
            }
        }
        fn loss(&mut self) -> Result<f64> {
            let (out, _) = lstm_forward(&self.input, &self.params, self.direction)?;
            Ok(project(&out.hidden, &self.r_hidden) + project(&out.final_state, &self.r_final))
        }
        fn gradients(&mut self) -> Result<Vec<Tensor<f64>>> {
            let (_, cache) = lstm_forward(&self.input, &self.params, self.direction)?;
            let mut grads = LstmParams::zeros(self.params.input_size(), self.params.hidden_size());
            let gx = lstm_backward(&self.params, &cache, Some(&self.r_hidden), Some(&self.r_final), &mut grads)?;
            Ok(vec![gx, grads.input_weights, grads.recurrent_weights, grads.bias])
        }
    }

    /// Dropout with a mask fixed by reseeding on every evaluation.
    pub struct Dropout {
        pub input: Tensor<f64>,
        pub rate: f64,
        pub seed: u64,
        pub r: Tensor<f64>,
    }

    impl Dropout {
        pub fn new(seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Dropout {
                input: random_tensor(&[4, 6], 1.0, &mut rng),
                rate: 0.3,
                seed,
                r: random_tensor(&[4, 6], 1.0, &mut rng),
            }
        }
    }

    impl GradCheckable for Dropout {
        fn tensor_count(&self) -> usize {
            1
        }
        fn tensor_name(&self, _: usize) -> String {
            "dropout.input".into()
        }
        fn tensor_mut(&mut self, _: usize) -> &mut Tensor<f64> {
            &mut self.input
        }
        fn loss(&mut self) -> Result<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            let (y, _) = dropout(&self.input, self.rate, DropoutMode::Train, &mut rng)?;
            Ok(project(&y, &self.r))
        }
        fn gradients(&mut self) -> Result<Vec<Tensor<f64>>> {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            let (_, mask) = dropout(&self.input, self.rate, DropoutMode::Train, &mut rng)?;
            let mut g = self.r.clone();
            dropout_backward(&mut g, mask.as_deref());
            Ok(vec![g])
        }
    }

    pub struct SoftmaxCrossEntropy {
        pub logits: Tensor<f64>,
        pub labels: Vec<usize>,
    }

    impl SoftmaxCrossEntropy {
        pub fn new(seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            SoftmaxCrossEntropy {
                logits: random_tensor(&[4, 9], 3.0, &mut rng),
                labels: vec![0, 8, 3, 3],
            }
        }
    }

    impl GradCheckable for SoftmaxCrossEntropy {
        fn tensor_count(&self) -> usize {
            1
        }
        fn tensor_name(&self, _: usize) -> String {
            "softmax_ce.logits".into()
        }
        fn tensor_mut(&mut self, _: usize) -> &mut Tensor<f64> {
            &mut self.logits
        }
        fn loss(&mut self) -> Result<f64> {
            Ok(softmax_cross_entropy(&self.logits, &self.labels)?.0)
        }
        fn gradients(&mut self) -> Result<Vec<Tensor<f64>>> {
            let (_, p) = softmax_cross_entropy(&self.logits, &self.labels)?;
            Ok(vec![softmax_cross_entropy_backward(&p, &self.labels)])
        }
    }

    pub struct L2 {
        pub weights: Tensor<f64>,
        pub lambda: f64,
    }

    impl L2 {
        pub fn new(seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            L2 {
                weights: random_tensor(&[3, 2, 4], 1.0, &mut rng),
                lambda: 0.3,
            }
        }
    }

    impl GradCheckable for L2 {
        fn tensor_count(&self) -> usize {
            1
        }
        fn tensor_name(&self, _: usize) -> String {
            "l2.weights".into()
        }
        fn tensor_mut(&mut self, _: usize) -> &mut Tensor<f64> {
            &mut self.weights
        }
        fn loss(&mut self) -> Result<f64> {
            Ok(l2_penalty(&[&self.weights], self.lambda))
        }
        fn gradients(&mut self) -> Result<Vec<Tensor<f64>>> {
            let mut g = self.weights.zeros_like();
            l2_backward(&self.weights, &mut g, self.lambda);
            Ok(vec![g])
        }
    }

    /// Wraps a harness and adds `offset` to one analytic gradient entry.
    pub struct Corrupted<M> {
        pub inner: M,
        pub offset: f64,
    }

    impl<M: GradCheckable> GradCheckable for Corrupted<M> {
        fn tensor_count(&self) -> usize {
            self.inner.tensor_count()
        }
        fn tensor_name(&self, i: usize) -> String {
            self.inner.tensor_name(i)
        }
        fn tensor_mut(&mut self, i: usize) -> &mut Tensor<f64> {
            self.inner.tensor_mut(i)
        }
        fn loss(&mut self) -> Result<f64> {
            self.inner.loss()
        }
        fn gradients(&mut self) -> Result<Vec<Tensor<f64>>> {
            let mut g = self.inner.gradients()?;
            g[0].data_mut()[0] += self.offset;
            Ok(g)
        }
    }

    /// One boxed instance of every single-layer harness.
    pub fn all_layers(seed: u64) -> Vec<Box<dyn GradCheckable>> {
        vec![
            Box::new(Conv::new(seed)),
            Box::new(PoolRelu::new(seed + 1)),
            Box::new(Dense::new(seed + 2)),
            Box::new(Lstm::new(seed + 3, Direction::Forward)),
            Box::new(Lstm::new(seed + 4, Direction::Backward)),
            Box::new(Dropout::new(seed + 5)),
            Box::new(SoftmaxCrossEntropy::new(seed + 6)),
            Box::new(L2::new(seed + 7)),
        ]
    }
}
