//! Whole-model gradient check at toy shapes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{build_model, Architecture, ModelConfig, ModelParams, Tape};
use crate::error::Result;
use crate::nn::gradcheck::{grad_check, GradCheckConfig, GradCheckReport, GradCheckable};
use crate::nn::{DropoutMode, Tensor};

/// Small configuration of each architecture for input length 64:
/// 64 -> 62 -> 31 -> 29 -> 14 -> 12 -> 6.
pub fn toy_config(architecture: Architecture, seed: u64) -> ModelConfig {
    ModelConfig {
        architecture,
        input_len: 64,
        conv_filters: vec![2, 3, 4],
        kernel_width: 3,
        pool_width: 2,
        dense_units: 6,
        lstm_hidden: 3,
        num_classes: 9,
        dropout_dense: 0.5,
        dropout_lstm: 0.2,
        l2_lambda: 1e-2,
        seed,
    }
}

/// Regularised training loss of a model on a fixed batch, with dropout
/// active but its mask pinned by reseeding before every evaluation.
pub struct ModelHarness {
    pub params: ModelParams<f64>,
    pub batch: Tensor<f64>,
    pub labels: Vec<usize>,
    pub dropout_seed: u64,
}

impl ModelHarness {
    pub fn new(config: &ModelConfig, batch_size: usize, data_seed: u64) -> Result<Self> {
        let params = build_model::<f64>(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
        // Inputs in the byte range, as the real model sees them.
        let batch = crate::nn::gradcheck::harness::random_tensor(&[batch_size, config.input_len], 1.0, &mut rng);
        let values: Vec<f64> = batch.data().iter().map(|v| (v + 1.0) * 127.5).collect();
        let batch = Tensor::new(vec![batch_size, config.input_len], values)?;
        let labels = (0..batch_size).map(|i| (i * 4 + 1) % config.num_classes).collect();
        Ok(ModelHarness {
            params,
            batch,
            labels,
            dropout_seed: data_seed ^ 0xD0,
        })
    }
}

impl GradCheckable for ModelHarness {
    fn tensor_count(&self) -> usize {
        self.params.tensors().len()
    }

    fn tensor_name(&self, index: usize) -> String {
        self.params.tensors()[index].0.clone()
    }

    fn tensor_mut(&mut self, index: usize) -> &mut Tensor<f64> {
        self.params.tensors_mut().swap_remove(index)
    }

    fn loss(&mut self) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.dropout_seed);
        let mut tape = Tape::new(&self.params);
        Ok(tape.forward_loss(&self.batch, &self.labels, DropoutMode::Train, &mut rng)?.total())
    }

    fn gradients(&mut self) -> Result<Vec<Tensor<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.dropout_seed);
        let mut tape = Tape::new(&self.params);
        tape.forward_loss(&self.batch, &self.labels, DropoutMode::Train, &mut rng)?;
        let grads = tape.backward()?;
        Ok(grads.tensors().into_iter().map(|(_, t)| t.clone()).collect())
    }
}

/// Builds the toy model for `architecture` and checks every parameter.
pub fn check_architecture(architecture: Architecture, tolerance: f64) -> Result<GradCheckReport> {
    let mut harness = ModelHarness::new(&toy_config(architecture, 17), 2, 23)?;
    grad_check(
        &mut harness,
        GradCheckConfig {
            tolerance,
            ..GradCheckConfig::default()
        },
    )
}
