//! Inverted dropout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DropoutMode {
    Train,
    Infer,
}

/// Returns the output and, in training mode with a positive rate, the mask
/// of multipliers (`0` or `1 / (1 - rate)`) needed by the backward pass.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    input: &Tensor<T>,
    rate: f64,
    mode: DropoutMode,
    rng: &mut R,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Argument(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == DropoutMode::Infer || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..input.len())
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let mut out = input.clone();
    for (v, &m) in out.data_mut().iter_mut().zip(&mask) {
        *v *= m;
    }
    Ok((out, Some(mask)))
}

pub fn dropout_backward<T: Scalar>(grad_out: &mut Tensor<T>, mask: Option<&[T]>) {
    if let Some(mask) = mask {
        for (g, &m) in grad_out.data_mut().iter_mut().zip(mask) {
            *g *= m;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_rate_and_inference_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        for mode in [DropoutMode::Train, DropoutMode::Infer] {
            let (y, mask) = dropout(&x, 0.0, mode, &mut rng).unwrap();
            assert_eq!(y, x);
            assert!(mask.is_none());
        }
        let (y, _) = dropout(&x, 0.9, DropoutMode::Infer, &mut rng).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn rate_one_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::zeros(&[3]);
        assert!(dropout(&x, 1.0, DropoutMode::Train, &mut rng).is_err());
        assert!(dropout(&x, -0.1, DropoutMode::Train, &mut rng).is_err());
    }

    #[test]
    fn expectation_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::full(&[1_000_000], 1.0);
        let (y, _) = dropout(&x, 0.5, DropoutMode::Train, &mut rng).unwrap();
        let mean = y.data().iter().sum::<f64>() / y.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }
}
