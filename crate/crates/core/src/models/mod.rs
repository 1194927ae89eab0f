//! The three classifier architectures.
//!
//! All share a stack of `conv(k) -> ReLU -> maxpool(p)` blocks over the
//! resampled byte sequence. On top of it:
//!
//! * `CNN`: flatten, dense + ReLU + dropout, dense output;
//! * `CNN_UNILSTM`: the pooled feature map read as a sequence of timesteps by
//!   one forward LSTM whose final state (after dropout) feeds the output layer;
//! * `CNN_BILSTM`: forward and backward LSTMs whose final states are
//!   concatenated.
//!
//! With the reference hyperparameters (filters 30/50/90, kernel 7, pool 5,
//! dense 256, LSTM 128) the feature map is 90 channels by 78 positions and the
//! parameter totals are 1,842,069 / 155,669 / 268,949.

mod forward;
pub mod gradcheck;
mod weights;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::NUM_CLASSES;
use crate::nn::{LstmParams, Scalar, Tensor};
use crate::resample::INPUT_LEN;

pub use forward::{argmax_rows, predict_class, predict_proba, ForwardCache, LossOutput, Tape};
pub use weights::{decode_model, encode_model, load_model, save_model, WEIGHT_MAGIC, WEIGHT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "CNN")]
    Cnn,
    #[serde(rename = "CNN_UNILSTM")]
    CnnUniLstm,
    #[serde(rename = "CNN_BILSTM")]
    CnnBiLstm,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::Cnn, Architecture::CnnUniLstm, Architecture::CnnBiLstm];

    pub fn tag(self) -> &'static str {
        match self {
            Architecture::Cnn => "CNN",
            Architecture::CnnUniLstm => "CNN_UNILSTM",
            Architecture::CnnBiLstm => "CNN_BILSTM",
        }
    }

    fn code(self) -> u8 {
        match self {
            Architecture::Cnn => 0,
            Architecture::CnnUniLstm => 1,
            Architecture::CnnBiLstm => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.code() == code)
            .ok_or_else(|| Error::Config(format!("unknown architecture code {code}")))
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_uppercase().replace('-', "_");
        Architecture::ALL
            .into_iter()
            .find(|a| a.tag() == norm)
            .ok_or_else(|| Error::Config(format!("unknown architecture `{s}` (expected CNN, CNN_UNILSTM or CNN_BILSTM)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub input_len: usize,
    pub conv_filters: Vec<usize>,
    pub kernel_width: usize,
    pub pool_width: usize,
    /// Hidden dense layer width (CNN only).
    pub dense_units: usize,
    pub lstm_hidden: usize,
    pub num_classes: usize,
    pub dropout_dense: f64,
    pub dropout_lstm: f64,
    /// L2 coefficient applied to convolution kernels.
    pub l2_lambda: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn reference(architecture: Architecture) -> Self {
        ModelConfig {
            architecture,
            input_len: INPUT_LEN,
            conv_filters: vec![30, 50, 90],
            kernel_width: 7,
            pool_width: 5,
            dense_units: 256,
            lstm_hidden: 128,
            num_classes: NUM_CLASSES,
            dropout_dense: 0.5,
            dropout_lstm: 0.2,
            l2_lambda: 1e-4,
            seed: 0,
        }
    }

    /// Sequence lengths through the conv stack: input, then conv and pool
    /// output for each block.
    pub fn length_chain(&self) -> Result<Vec<usize>> {
        let mut chain = vec![self.input_len];
        let mut len = self.input_len;
        for (i, _) in self.conv_filters.iter().enumerate() {
            if len < self.kernel_width {
                return Err(Error::Config(format!(
                    "conv block {i}: length {len} shorter than kernel width {}",
                    self.kernel_width
                )));
            }
            len = len - self.kernel_width + 1;
            chain.push(len);
            if len < self.pool_width {
                return Err(Error::Config(format!(
                    "conv block {i}: length {len} shorter than pool width {}",
                    self.pool_width
                )));
            }
            len /= self.pool_width;
            chain.push(len);
        }
        Ok(chain)
    }

    /// `(channels, positions)` of the conv-stack output.
    pub fn feature_map(&self) -> Result<(usize, usize)> {
        let chain = self.length_chain()?;
        Ok((*self.conv_filters.last().unwrap(), *chain.last().unwrap()))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_len", self.input_len),
            ("kernel_width", self.kernel_width),
            ("pool_width", self.pool_width),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.conv_filters.is_empty() || self.conv_filters.contains(&0) {
            return Err(Error::Config("conv_filters must be a non-empty list of positive counts".into()));
        }
        match self.architecture {
            Architecture::Cnn if self.dense_units == 0 => {
                return Err(Error::Config("dense_units must be positive".into()))
            }
            Architecture::CnnUniLstm | Architecture::CnnBiLstm if self.lstm_hidden == 0 => {
                return Err(Error::Config("lstm_hidden must be positive".into()))
            }
            _ => {}
        }
        for (name, rate) in [("dropout_dense", self.dropout_dense), ("dropout_lstm", self.dropout_lstm)] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("{name} = {rate} outside [0, 1)")));
            }
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return Err(Error::Config(format!("l2_lambda = {} must be >= 0", self.l2_lambda)));
        }
        self.length_chain()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    /// `[C_out x C_in x K]`
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams<T> {
    /// `[D x U]`
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head<T> {
    Cnn {
        hidden: DenseParams<T>,
        output: DenseParams<T>,
    },
    UniLstm {
        lstm: LstmParams<T>,
        output: DenseParams<T>,
    },
    BiLstm {
        forward: LstmParams<T>,
        backward: LstmParams<T>,
        output: DenseParams<T>,
    },
}

/// Weights of one model plus the configuration that shaped them. The same
/// type doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub convs: Vec<ConvParams<T>>,
    pub head: Head<T>,
}

fn lstm_names(prefix: &str) -> [String; 3] {
    [
        format!("{prefix}.input_weights"),
        format!("{prefix}.recurrent_weights"),
        format!("{prefix}.bias"),
    ]
}

impl<T: Scalar> ModelParams<T> {
    /// Parameter tensors with stable names, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("conv{i}.weights"), &c.weights));
            out.push((format!("conv{i}.bias"), &c.bias));
        }
        match &self.head {
            Head::Cnn { hidden, output } => {
                out.push(("dense.weights".into(), &hidden.weights));
                out.push(("dense.bias".into(), &hidden.bias));
                out.push(("output.weights".into(), &output.weights));
                out.push(("output.bias".into(), &output.bias));
            }
            Head::UniLstm { lstm, output } => {
                let [a, b, c] = lstm_names("lstm_fwd");
                out.push((a, &lstm.input_weights));
                out.push((b, &lstm.recurrent_weights));
                out.push((c, &lstm.bias));
                out.push(("output.weights".into(), &output.weights));
                out.push(("output.bias".into(), &output.bias));
            }
            Head::BiLstm { forward, backward, output } => {
                for (prefix, l) in [("lstm_fwd", forward), ("lstm_bwd", backward)] {
                    let [a, b, c] = lstm_names(prefix);
                    out.push((a, &l.input_weights));
                    out.push((b, &l.recurrent_weights));
                    out.push((c, &l.bias));
                }
                out.push(("output.weights".into(), &output.weights));
                out.push(("output.bias".into(), &output.bias));
            }
        }
        out
    }

    /// Same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weights);
            out.push(&mut c.bias);
        }
        match &mut self.head {
            Head::Cnn { hidden, output } => {
                out.extend([&mut hidden.weights, &mut hidden.bias, &mut output.weights, &mut output.bias]);
            }
            Head::UniLstm { lstm, output } => {
                out.extend([
                    &mut lstm.input_weights,
                    &mut lstm.recurrent_weights,
                    &mut lstm.bias,
                    &mut output.weights,
                    &mut output.bias,
                ]);
            }
            Head::BiLstm { forward, backward, output } => {
                out.extend([
                    &mut forward.input_weights,
                    &mut forward.recurrent_weights,
                    &mut forward.bias,
                    &mut backward.input_weights,
                    &mut backward.recurrent_weights,
                    &mut backward.bias,
                    &mut output.weights,
                    &mut output.bias,
                ]);
            }
        }
        out
    }

    pub fn count_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Kernels subject to the L2 penalty (conv weights, no biases).
    pub fn conv_kernels(&self) -> Vec<&Tensor<T>> {
        self.convs.iter().map(|c| &c.weights).collect()
    }

    pub fn map<U: Scalar>(&self, mut f: impl FnMut(&Tensor<T>) -> Tensor<U>) -> ModelParams<U> {
        let convs = self
            .convs
            .iter()
            .map(|c| ConvParams {
                weights: f(&c.weights),
                bias: f(&c.bias),
            })
            .collect();
        let lstm = |l: &LstmParams<T>, f: &mut dyn FnMut(&Tensor<T>) -> Tensor<U>| LstmParams {
            input_weights: f(&l.input_weights),
            recurrent_weights: f(&l.recurrent_weights),
            bias: f(&l.bias),
        };
        let dense = |d: &DenseParams<T>, f: &mut dyn FnMut(&Tensor<T>) -> Tensor<U>| DenseParams {
            weights: f(&d.weights),
            bias: f(&d.bias),
        };
        let head = match &self.head {
            Head::Cnn { hidden, output } => Head::Cnn {
                hidden: dense(hidden, &mut f),
                output: dense(output, &mut f),
            },
            Head::UniLstm { lstm: l, output } => Head::UniLstm {
                lstm: lstm(l, &mut f),
                output: dense(output, &mut f),
            },
            Head::BiLstm { forward, backward, output } => Head::BiLstm {
                forward: lstm(forward, &mut f),
                backward: lstm(backward, &mut f),
                output: dense(output, &mut f),
            },
        };
        ModelParams {
            config: self.config.clone(),
            convs,
            head,
        }
    }

    pub fn zeros_like(&self) -> ModelParams<T> {
        self.map(Tensor::zeros_like)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        self.map(Tensor::cast)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.all_finite())
    }
}

/// Expected `(name, shape)` list for a configuration, in tensor order.
pub fn expected_shapes(config: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
    let shell = build_model::<f32>(&ModelConfig { seed: 0, ..config.clone() })?;
    Ok(shell
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect())
}

fn glorot<T: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| T::from_f64(rng.random_range(-limit..limit))).collect(),
    )
    .expect("glorot shape")
}

fn dense_init<T: Scalar>(d: usize, u: usize, rng: &mut ChaCha8Rng) -> DenseParams<T> {
    DenseParams {
        weights: glorot(&[d, u], d, u, rng),
        bias: Tensor::zeros(&[u]),
    }
}

fn lstm_init<T: Scalar>(d: usize, h: usize, rng: &mut ChaCha8Rng) -> LstmParams<T> {
    let mut bias = Tensor::zeros(&[4 * h]);
    for b in &mut bias.data_mut()[h..2 * h] {
        *b = T::one();
    }
    LstmParams {
        input_weights: glorot(&[4 * h, d], d, 4 * h, rng),
        recurrent_weights: glorot(&[4 * h, h], h, 4 * h, rng),
        bias,
    }
}

/// Builds a freshly initialised model (Glorot-uniform kernels, zero biases,
/// LSTM forget-gate bias 1) seeded from `config.seed`.
pub fn build_model<T: Scalar>(config: &ModelConfig) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let k = config.kernel_width;
    let mut c_in = 1;
    let mut convs = Vec::with_capacity(config.conv_filters.len());
    for &c_out in &config.conv_filters {
        convs.push(ConvParams {
            weights: glorot(&[c_out, c_in, k], c_in * k, c_out * k, &mut rng),
            bias: Tensor::zeros(&[c_out]),
        });
        c_in = c_out;
    }
    let (channels, positions) = config.feature_map()?;
    let h = config.lstm_hidden;
    let classes = config.num_classes;
    let head = match config.architecture {
        Architecture::Cnn => Head::Cnn {
            hidden: dense_init(channels * positions, config.dense_units, &mut rng),
            output: dense_init(config.dense_units, classes, &mut rng),
        },
        Architecture::CnnUniLstm => Head::UniLstm {
            lstm: lstm_init(channels, h, &mut rng),
            output: dense_init(h, classes, &mut rng),
        },
        Architecture::CnnBiLstm => Head::BiLstm {
            forward: lstm_init(channels, h, &mut rng),
            backward: lstm_init(channels, h, &mut rng),
            output: dense_init(2 * h, classes, &mut rng),
        },
    };
    Ok(ModelParams {
        config: config.clone(),
        convs,
        head,
    })
}

pub fn count_params<T: Scalar>(params: &ModelParams<T>) -> usize {
    params.count_params()
}
