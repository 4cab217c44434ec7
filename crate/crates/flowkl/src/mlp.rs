//! A small fully connected velocity network trained from scratch: tanh
//! hidden layers, affine output, hand-written reverse-mode gradients for the
//! flow-matching loss, and JSON checkpoints.
//!
//! The network input is `[x_1, ..., x_d, t]`, so `widths[0] = d + 1` and
//! `widths.last() = d`.

use crate::autodiff::{Scalar, VelocityField};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Fully connected network with per-layer row-major weight matrices
/// (`weights[l][i * in + j]`) and bias vectors.
#[derive(Clone, Debug)]
pub struct MlpVelocity {
    widths: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 {
        return Err(Error::Argument("MLP needs at least input and output widths".into()));
    }
    if widths.iter().any(|&w| w == 0) {
        return Err(Error::Argument("MLP widths must be positive".into()));
    }
    if widths[0] != widths[widths.len() - 1] + 1 {
        return Err(Error::Argument(format!(
            "MLP input width must be output width + 1 (got {} and {})",
            widths[0],
            widths[widths.len() - 1]
        )));
    }
    Ok(())
}

impl MlpVelocity {
    /// Default architecture for planar problems: (3, 64, 64, 64, 2).
    pub fn default_widths() -> Vec<usize> {
        vec![3, 64, 64, 64, 2]
    }

    /// Zero-initialized network (outputs are identically zero).
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        check_widths(widths)?;
        let weights = (1..widths.len()).map(|l| vec![0.0; widths[l] * widths[l - 1]]).collect();
        let biases = (1..widths.len()).map(|l| vec![0.0; widths[l]]).collect();
        Ok(MlpVelocity { widths: widths.to_vec(), weights, biases })
    }

    /// Weights uniform in `+-1/sqrt(fan_in)`, biases zero, deterministic in
    /// the seed.
    pub fn init(widths: &[usize], seed: u64) -> Result<Self> {
        let mut net = Self::zeros(widths)?;
        let stream = RngStream::new(seed, "mlp-init");
        let mut counter = 0u64;
        for l in 0..net.weights.len() {
            let bound = 1.0 / (widths[l] as f64).sqrt();
            for w in net.weights[l].iter_mut() {
                *w = stream.uniform_in(counter, -bound, bound);
                counter += 1;
            }
        }
        Ok(net)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn param_count(&self) -> usize {
        (1..self.widths.len())
            .map(|l| self.widths[l] * (self.widths[l - 1] + 1))
            .sum()
    }

    /// Flatten parameters layer by layer, weights (row-major) then biases.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in 0..self.weights.len() {
            out.extend_from_slice(&self.weights[l]);
            out.extend_from_slice(&self.biases[l]);
        }
        out
    }

    /// Rebuild a network from `widths` and a flat parameter vector in the
    /// [`params_flat`](Self::params_flat) layout.
    pub fn from_params(widths: &[usize], params: &[f64]) -> Result<Self> {
        let mut net = Self::zeros(widths)?;
        if params.len() != net.param_count() {
            return Err(Error::Argument(format!(
                "expected {} parameters for widths {:?}, got {}",
                net.param_count(),
                widths,
                params.len()
            )));
        }
        let mut off = 0;
        for l in 0..net.weights.len() {
            let nw = net.weights[l].len();
            net.weights[l].copy_from_slice(&params[off..off + nw]);
            off += nw;
            let nb = net.biases[l].len();
            net.biases[l].copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
        Ok(net)
    }

    /// Apply a flat additive update (same layout as `params_flat`).
    pub fn apply_update(&mut self, delta: &[f64]) {
        let mut off = 0;
        for l in 0..self.weights.len() {
            for w in self.weights[l].iter_mut() {
                *w += delta[off];
                off += 1;
            }
            for b in self.biases[l].iter_mut() {
                *b += delta[off];
                off += 1;
            }
        }
        debug_assert_eq!(off, delta.len());
    }

    /// Flow-matching loss `mean_b |v(x_b, t_b) - y_b|^2` and its gradient in
    /// the flat parameter layout, by one reverse-mode pass per sample.
    pub fn loss_grad(&self, xs: &[f64], ts: &[f64], ys: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.dim();
        let batch = ts.len();
        assert_eq!(xs.len(), batch * d);
        assert_eq!(ys.len(), batch * d);
        assert_eq!(grad.len(), self.param_count());
        grad.iter_mut().for_each(|g| *g = 0.0);

        let layers = self.weights.len();
        // Per-layer activations (post-nonlinearity), acts[0] is the input.
        let mut acts: Vec<Vec<f64>> = self.widths.iter().map(|&w| vec![0.0; w]).collect();
        let mut deltas: Vec<Vec<f64>> = (1..=layers).map(|l| vec![0.0; self.widths[l]]).collect();
        // Flat offsets of each layer's weight block.
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offsets.push(off);
            off += self.weights[l].len() + self.biases[l].len();
        }

        let mut loss = 0.0;
        let inv_b = 1.0 / batch as f64;
        for s in 0..batch {
            acts[0][..d].copy_from_slice(&xs[s * d..(s + 1) * d]);
            acts[0][d] = ts[s];
            for l in 0..layers {
                let (input, rest) = acts.split_at_mut(l + 1);
                let input = &input[l];
                let out = &mut rest[0];
                let w = &self.weights[l];
                let b = &self.biases[l];
                let n_in = self.widths[l];
                for (i, o) in out.iter_mut().enumerate() {
                    let mut acc = b[i];
                    let row = &w[i * n_in..(i + 1) * n_in];
                    for j in 0..n_in {
                        acc += row[j] * input[j];
                    }
                    *o = if l + 1 < layers { acc.tanh() } else { acc };
                }
            }

            let out = &acts[layers];
            for c in 0..d {
                let r = out[c] - ys[s * d + c];
                loss += r * r * inv_b;
                deltas[layers - 1][c] = 2.0 * r * inv_b;
            }

            for l in (0..layers).rev() {
                let n_in = self.widths[l];
                let n_out = self.widths[l + 1];
                let base = offsets[l];
                {
                    let delta = &deltas[l];
                    let input = &acts[l];
                    for i in 0..n_out {
                        let di = delta[i];
                        let grow = &mut grad[base + i * n_in..base + (i + 1) * n_in];
                        for j in 0..n_in {
                            grow[j] += di * input[j];
                        }
                        grad[base + n_out * n_in + i] += di;
                    }
                }
                if l > 0 {
                    let (lower, upper) = deltas.split_at_mut(l);
                    let delta = &upper[0];
                    let prev = &mut lower[l - 1];
                    let w = &self.weights[l];
                    let h = &acts[l];
                    for j in 0..n_in {
                        let mut acc = 0.0;
                        for i in 0..n_out {
                            acc += w[i * n_in + j] * delta[i];
                        }
                        prev[j] = acc * (1.0 - h[j] * h[j]);
                    }
                }
            }
        }
        loss
    }
}

impl VelocityField for MlpVelocity {
    fn dim(&self) -> usize {
        self.widths[self.widths.len() - 1]
    }

    fn eval_batch<S: Scalar>(&self, xs: &[S], t: f64, out: &mut [S]) {
        let d = self.dim();
        let layers = self.weights.len();
        let max_w = *self.widths.iter().max().unwrap();
        let mut cur = vec![S::from_real(0.0); max_w];
        let mut next = vec![S::from_real(0.0); max_w];
        for s in 0..xs.len() / d {
            cur[..d].copy_from_slice(&xs[s * d..(s + 1) * d]);
            cur[d] = S::from_real(t);
            for l in 0..layers {
                let n_in = self.widths[l];
                let n_out = self.widths[l + 1];
                let w = &self.weights[l];
                let b = &self.biases[l];
                for (i, slot) in next[..n_out].iter_mut().enumerate() {
                    let row = &w[i * n_in..(i + 1) * n_in];
                    let mut acc = cur[0].mul_real(row[0]);
                    for j in 1..n_in {
                        acc = acc + cur[j].mul_real(row[j]);
                    }
                    acc = acc.add_real(b[i]);
                    *slot = if l + 1 < layers { acc.tanh() } else { acc };
                }
                std::mem::swap(&mut cur, &mut next);
            }
            out[s * d..(s + 1) * d].copy_from_slice(&cur[..d]);
        }
    }
}

/// Serialized training snapshot. `params` uses the flat layout of
/// [`MlpVelocity::params_flat`].
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub step: usize,
    pub val_mse: f64,
    pub schedule_id: String,
    pub rng_seed: u64,
    pub widths: Vec<usize>,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(
        net: &MlpVelocity,
        step: usize,
        val_mse: f64,
        schedule_id: &str,
        rng_seed: u64,
    ) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            step,
            val_mse,
            schedule_id: schedule_id.to_string(),
            rng_seed,
            widths: net.widths().to_vec(),
            params: net.params_flat(),
        }
    }

    pub fn network(&self) -> Result<MlpVelocity> {
        MlpVelocity::from_params(&self.widths, &self.params)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} (supported: {})",
                ckpt.version, CHECKPOINT_VERSION
            )));
        }
        check_widths(&ckpt.widths)?;
        let expected: usize =
            (1..ckpt.widths.len()).map(|l| ckpt.widths[l] * (ckpt.widths[l - 1] + 1)).sum();
        if ckpt.params.len() != expected {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, widths require {}",
                ckpt.params.len(),
                expected
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::output::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
