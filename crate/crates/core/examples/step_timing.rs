//! Times one forward and backward pass of each reference model at batch 64.

use std::time::Instant;

use malbyte::models::{build_model, Architecture, ModelConfig, Tape};
use malbyte::nn::DropoutMode;
use malbyte::nn::{FlushDenormals, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let _ftz = FlushDenormals::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f32>::new(vec![64, 10_000], (0..640_000).map(|i| (i * 7 % 256) as f32).collect()).unwrap();
    let labels: Vec<usize> = (0..64).map(|i| i % 9).collect();
    for arch in Architecture::ALL {
        let params = build_model::<f32>(&ModelConfig::reference(arch)).unwrap();
        for _ in 0..2 {
            let mut tape = Tape::new(&params);
            let t = Instant::now();
            tape.forward_loss(&x, &labels, DropoutMode::Train, &mut rng).unwrap();
            let fwd = t.elapsed().as_secs_f64();
            tape.backward().unwrap();
            println!("{arch:12} forward {fwd:.3}s  backward {:.3}s", t.elapsed().as_secs_f64() - fwd);
        }
    }
}
