//! Single-layer LSTM with gate order (input, forget, cell, output).
//!
//! ```text
//! i = σ(W_i x + U_i h + b_i)    f = σ(W_f x + U_f h + b_f)
//! g = tanh(W_g x + U_g h + b_g) o = σ(W_o x + U_o h + b_o)
//! c' = f ⊙ c + i ⊙ g            h' = o ⊙ tanh(c')
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::activation::sigmoid;
use crate::nn::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    /// Visits timesteps `T-1, ..., 0`; hidden state for timestep `t` is
    /// still written at position `t`.
    Backward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams<T> {
    /// `[4H x D]`
    pub input_weights: Tensor<T>,
    /// `[4H x H]`
    pub recurrent_weights: Tensor<T>,
    /// `[4H]`
    pub bias: Tensor<T>,
}

impl<T: Scalar> LstmParams<T> {
    pub fn zeros(input_size: usize, hidden: usize) -> Self {
        LstmParams {
            input_weights: Tensor::zeros(&[4 * hidden, input_size]),
            recurrent_weights: Tensor::zeros(&[4 * hidden, hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.recurrent_weights.dim(1)
    }

    pub fn input_size(&self) -> usize {
        self.input_weights.dim(1)
    }

    pub fn param_count(&self) -> usize {
        self.input_weights.len() + self.recurrent_weights.len() + self.bias.len()
    }

    fn validate(&self) -> Result<(usize, usize)> {
        let h = self.recurrent_weights.dim(1);
        let d = self.input_weights.dim(1);
        self.input_weights.expect_shape("lstm input weights", &[4 * h, d])?;
        self.recurrent_weights.expect_shape("lstm recurrent weights", &[4 * h, h])?;
        self.bias.expect_shape("lstm bias", &[4 * h])?;
        Ok((d, h))
    }
}

#[derive(Debug, Clone)]
pub struct LstmOutput<T> {
    /// `[N x T x H]`
    pub hidden: Tensor<T>,
    /// `[N x H]`, state after the last visited timestep.
    pub final_state: Tensor<T>,
}

/// Activations kept for the backward pass; step-indexed in visiting order.
#[derive(Debug, Clone)]
pub struct LstmCache<T> {
    input: Tensor<T>,
    direction: Direction,
    gates: Vec<Vec<T>>,
    cells: Vec<Vec<T>>,
    tanh_cells: Vec<Vec<T>>,
    hiddens: Vec<Vec<T>>,
}

fn timestep(direction: Direction, step: usize, steps: usize) -> usize {
    match direction {
        Direction::Forward => step,
        Direction::Backward => steps - 1 - step,
    }
}

pub fn lstm_forward<T: Scalar>(
    input: &Tensor<T>,
    params: &LstmParams<T>,
    direction: Direction,
) -> Result<(LstmOutput<T>, LstmCache<T>)> {
    input.expect_rank("lstm input", 3)?;
    let (d, h) = params.validate()?;
    let (n, steps, features) = (input.dim(0), input.dim(1), input.dim(2));
    if features != d {
        return Err(Error::Shape(format!("lstm: input has {features} features, weights expect {d}")));
    }
    if steps == 0 {
        return Err(Error::Shape("lstm: sequence has no timesteps".into()));
    }
    let g4 = 4 * h;
    let mut projected = vec![T::zero(); n * steps * g4];
    T::gemm(false, true, n * steps, g4, d, T::one(), input.data(), params.input_weights.data(), T::zero(), &mut projected);

    let mut hidden = Tensor::zeros(&[n, steps, h]);
    let mut cache = LstmCache {
        input: input.clone(),
        direction,
        gates: Vec::with_capacity(steps),
        cells: Vec::with_capacity(steps),
        tanh_cells: Vec::with_capacity(steps),
        hiddens: Vec::with_capacity(steps),
    };
    let mut h_prev = vec![T::zero(); n * h];
    let mut c_prev = vec![T::zero(); n * h];
    let bias = params.bias.data();
    for step in 0..steps {
        let t = timestep(direction, step, steps);
        let mut z = vec![T::zero(); n * g4];
        for s in 0..n {
            let src = &projected[(s * steps + t) * g4..(s * steps + t + 1) * g4];
            for ((zi, &p), &b) in z[s * g4..(s + 1) * g4].iter_mut().zip(src).zip(bias) {
                *zi = p + b;
            }
        }
        if step > 0 {
            T::gemm(false, true, n, g4, h, T::one(), &h_prev, params.recurrent_weights.data(), T::one(), &mut z);
        }
        let mut c = vec![T::zero(); n * h];
        let mut tc = vec![T::zero(); n * h];
        let mut hv = vec![T::zero(); n * h];
        for s in 0..n {
            let zs = &mut z[s * g4..(s + 1) * g4];
            for j in 0..h {
                let i_g = sigmoid(zs[j]);
                let f_g = sigmoid(zs[h + j]);
                let g_g = zs[2 * h + j].tanh();
                let o_g = sigmoid(zs[3 * h + j]);
                zs[j] = i_g;
                zs[h + j] = f_g;
                zs[2 * h + j] = g_g;
                zs[3 * h + j] = o_g;
                let k = s * h + j;
                c[k] = f_g * c_prev[k] + i_g * g_g;
                tc[k] = c[k].tanh();
                hv[k] = o_g * tc[k];
            }
            hidden.data_mut()[(s * steps + t) * h..(s * steps + t + 1) * h].copy_from_slice(&hv[s * h..(s + 1) * h]);
        }
        h_prev.copy_from_slice(&hv);
        c_prev.copy_from_slice(&c);
        cache.gates.push(z);
        cache.cells.push(c);
        cache.tanh_cells.push(tc);
        cache.hiddens.push(hv);
    }
    let final_state = Tensor::new(vec![n, h], h_prev)?;
    Ok((LstmOutput { hidden, final_state }, cache))
}

/// Backpropagation through time. Either upstream gradient may be absent.
/// Parameter gradients are accumulated into `grads`; the input gradient
/// `[N x T x D]` is returned.
pub fn lstm_backward<T: Scalar>(
    params: &LstmParams<T>,
    cache: &LstmCache<T>,
    grad_hidden: Option<&Tensor<T>>,
    grad_final: Option<&Tensor<T>>,
    grads: &mut LstmParams<T>,
) -> Result<Tensor<T>> {
    let (d, h) = params.validate()?;
    let (n, steps) = (cache.input.dim(0), cache.input.dim(1));
    let g4 = 4 * h;
    if let Some(gh) = grad_hidden {
        gh.expect_shape("lstm grad_hidden", &[n, steps, h])?;
    }
    if let Some(gf) = grad_final {
        gf.expect_shape("lstm grad_final", &[n, h])?;
    }
    let mut dh_next = grad_final.map_or_else(|| vec![T::zero(); n * h], |g| g.data().to_vec());
    let mut dc_next = vec![T::zero(); n * h];
    let mut dz_all = vec![T::zero(); n * steps * g4];
    let mut dz = vec![T::zero(); n * g4];
    let zeros = vec![T::zero(); n * h];
    for step in (0..steps).rev() {
        let t = timestep(cache.direction, step, steps);
        let gates = &cache.gates[step];
        let tc = &cache.tanh_cells[step];
        let c_prev = if step > 0 { &cache.cells[step - 1] } else { &zeros };
        for s in 0..n {
            for j in 0..h {
                let k = s * h + j;
                let mut dh = dh_next[k];
                if let Some(gh) = grad_hidden {
                    dh += gh.data()[(s * steps + t) * h + j];
                }
                let gs = &gates[s * g4..(s + 1) * g4];
                let (i_g, f_g, g_g, o_g) = (gs[j], gs[h + j], gs[2 * h + j], gs[3 * h + j]);
                let d_o = dh * tc[k];
                let dc = dc_next[k] + dh * o_g * (T::one() - tc[k] * tc[k]);
                let d_i = dc * g_g;
                let d_g = dc * i_g;
                let d_f = dc * c_prev[k];
                dc_next[k] = dc * f_g;
                let row = &mut dz[s * g4..(s + 1) * g4];
                row[j] = d_i * i_g * (T::one() - i_g);
                row[h + j] = d_f * f_g * (T::one() - f_g);
                row[2 * h + j] = d_g * (T::one() - g_g * g_g);
                row[3 * h + j] = d_o * o_g * (T::one() - o_g);
            }
            dz_all[(s * steps + t) * g4..(s * steps + t + 1) * g4].copy_from_slice(&dz[s * g4..(s + 1) * g4]);
        }
        if step > 0 {
            let h_prev = &cache.hiddens[step - 1];
            T::gemm(true, false, g4, h, n, T::one(), &dz, h_prev, T::one(), grads.recurrent_weights.data_mut());
            T::gemm(false, false, n, h, g4, T::one(), &dz, params.recurrent_weights.data(), T::zero(), &mut dh_next);
        }
    }
    T::gemm(true, false, g4, d, n * steps, T::one(), &dz_all, cache.input.data(), T::one(), grads.input_weights.data_mut());
    for row in dz_all.chunks_exact(g4) {
        for (b, &g) in grads.bias.data_mut().iter_mut().zip(row) {
            *b += g;
        }
    }
    let mut grad_in = Tensor::zeros(&[n, steps, d]);
    T::gemm(false, false, n * steps, d, g4, T::one(), &dz_all, params.input_weights.data(), T::zero(), grad_in.data_mut());
    Ok(grad_in)
}
