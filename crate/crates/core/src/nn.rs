//! Fully-connected networks with hand-written reverse-mode gradients.
//!
//! Everything is `f64`. Parameters of an [`Mlp`] live in one flat vector so
//! optimizers, checksums, and checkpoints treat a network as a single array.
//! Weights of each layer are stored input-major (`w[i * out + o]`).

use std::collections::BTreeMap;
use std::f64::consts::{E, PI};
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("expected input of length {expected}, got {got}")]
    InputDim { expected: usize, got: usize },
    #[error("non-finite value produced by layer {layer}")]
    NonFinite { layer: usize },
    #[error("shape mismatch: expected {expected} values, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerIndex {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
}

/// Multi-layer perceptron with `tanh` hidden units and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    layers: Vec<LayerIndex>,
    params: Vec<f64>,
}

/// Activations recorded by [`Mlp::forward_tape`] for a later backward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_next: Vec<f64>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map_or(&[], |v| v.as_slice())
    }
}

fn layout(widths: &[usize]) -> (Vec<LayerIndex>, usize) {
    let mut layers = Vec::with_capacity(widths.len().saturating_sub(1));
    let mut offset = 0;
    for pair in widths.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let w = offset;
        let b = w + fan_in * fan_out;
        offset = b + fan_out;
        layers.push(LayerIndex { fan_in, fan_out, w, b });
    }
    (layers, offset)
}

impl Mlp {
    /// All-zero network; mostly useful in tests.
    pub fn zeros(widths: &[usize]) -> Self {
        assert!(widths.len() >= 2 && widths.iter().all(|&w| w > 0), "need ≥ 2 positive widths");
        let (layers, n) = layout(widths);
        Mlp {
            widths: widths.to_vec(),
            layers,
            params: vec![0.0; n],
        }
    }

    /// LeCun-normal weights, zero biases; the last layer's weights are
    /// additionally multiplied by `output_scale`.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], output_scale: f64, rng: &mut R) -> Self {
        let mut net = Mlp::zeros(widths);
        let last = net.layers.len() - 1;
        for (l, layer) in net.layers.clone().into_iter().enumerate() {
            let std = (1.0 / layer.fan_in as f64).sqrt() * if l == last { output_scale } else { 1.0 };
            for w in &mut net.params[layer.w..layer.b] {
                let z: f64 = StandardNormal.sample(rng);
                *w = z * std;
            }
        }
        net
    }

    pub fn from_params(widths: &[usize], params: Vec<f64>) -> Result<Self, NnError> {
        let mut net = Mlp::zeros(widths);
        if params.len() != net.params.len() {
            return Err(NnError::Shape {
                expected: net.params.len(),
                got: params.len(),
            });
        }
        net.params = params;
        Ok(net)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Weight block of layer `l`, input-major.
    pub fn weights_mut(&mut self, l: usize) -> &mut [f64] {
        let layer = self.layers[l];
        &mut self.params[layer.w..layer.b]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let layer = self.layers[l];
        &mut self.params[layer.b..layer.b + layer.fan_out]
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        let mut tape = Tape::default();
        self.forward_tape(input, &mut tape)?;
        Ok(tape.acts.pop().unwrap_or_default())
    }

    /// Forward pass that keeps every layer's activation in `tape`.
    pub fn forward_tape<'t>(&self, input: &[f64], tape: &'t mut Tape) -> Result<&'t [f64], NnError> {
        if input.len() != self.input_dim() {
            return Err(NnError::InputDim {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        tape.acts.resize_with(self.widths.len(), Vec::new);
        tape.acts[0].clear();
        tape.acts[0].extend_from_slice(input);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (before, after) = tape.acts.split_at_mut(l + 1);
            let x = &before[l];
            let y = &mut after[0];
            y.clear();
            y.extend_from_slice(&self.params[layer.b..layer.b + layer.fan_out]);
            let w = &self.params[layer.w..layer.b];
            for (i, &xi) in x.iter().enumerate() {
                let row = &w[i * layer.fan_out..(i + 1) * layer.fan_out];
                for (yo, &wo) in y.iter_mut().zip(row) {
                    *yo += wo * xi;
                }
            }
            if l != last {
                for v in y.iter_mut() {
                    *v = v.tanh();
                }
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFinite { layer: l });
            }
        }
        Ok(tape.output())
    }

    /// Accumulates `∂L/∂params` into `grads` given `∂L/∂output`, using the
    /// activations left in `tape` by the matching forward pass. When
    /// `grad_input` is given it receives `∂L/∂input`.
    pub fn backward(&self, tape: &mut Tape, grad_output: &[f64], grads: &mut [f64], grad_input: Option<&mut [f64]>) {
        debug_assert_eq!(grads.len(), self.params.len());
        debug_assert_eq!(grad_output.len(), self.output_dim());
        let Tape {
            acts,
            delta,
            delta_next,
        } = tape;
        delta.clear();
        delta.extend_from_slice(grad_output);
        let want_input = grad_input.is_some();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let x = &acts[l];
            for (g, d) in grads[layer.b..layer.b + layer.fan_out].iter_mut().zip(delta.iter()) {
                *g += d;
            }
            let w = &self.params[layer.w..layer.b];
            let gw = &mut grads[layer.w..layer.b];
            let propagate = l > 0 || want_input;
            delta_next.clear();
            for (i, &xi) in x.iter().enumerate() {
                let lo = i * layer.fan_out;
                let hi = lo + layer.fan_out;
                for (g, d) in gw[lo..hi].iter_mut().zip(delta.iter()) {
                    *g += xi * d;
                }
                if propagate {
                    let s: f64 = w[lo..hi].iter().zip(delta.iter()).map(|(a, b)| a * b).sum();
                    delta_next.push(s);
                }
            }
            if !propagate {
                break;
            }
            if l > 0 {
                for (d, a) in delta_next.iter_mut().zip(&acts[l]) {
                    *d *= 1.0 - a * a;
                }
            }
            std::mem::swap(delta, delta_next);
        }
        if let Some(gi) = grad_input {
            gi.copy_from_slice(delta);
        }
    }

    /// Convenience wrapper: gradient of `Σ_k grad_output[k]·output[k]` for
    /// a single input, returned as `(∂/∂params, ∂/∂input)`.
    pub fn vjp(&self, input: &[f64], grad_output: &[f64]) -> Result<(Vec<f64>, Vec<f64>), NnError> {
        let mut tape = Tape::default();
        self.forward_tape(input, &mut tape)?;
        let mut grads = vec![0.0; self.params.len()];
        let mut gi = vec![0.0; input.len()];
        self.backward(&mut tape, grad_output, &mut grads, Some(&mut gi));
        Ok((grads, gi))
    }

    /// Order-sensitive digest of the parameters, for change detection.
    pub fn checksum(&self) -> u64 {
        self.params.iter().fold(0xcbf2_9ce4_8422_2325, |h: u64, v| {
            (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3)
        })
    }

    pub fn write_to(&self, prefix: &str, ckpt: &mut Checkpoint) {
        for (l, layer) in self.layers.iter().enumerate() {
            ckpt.insert(
                format!("{prefix}.layer{l}.weight"),
                vec![layer.fan_in, layer.fan_out],
                self.params[layer.w..layer.b].to_vec(),
            );
            ckpt.insert(
                format!("{prefix}.layer{l}.bias"),
                vec![layer.fan_out],
                self.params[layer.b..layer.b + layer.fan_out].to_vec(),
            );
        }
    }

    pub fn read_from(prefix: &str, ckpt: &Checkpoint) -> Result<Self, NnError> {
        let mut widths = Vec::new();
        let mut params = Vec::new();
        for l in 0.. {
            let Some(w) = ckpt.get(&format!("{prefix}.layer{l}.weight")) else {
                break;
            };
            let b = ckpt
                .get(&format!("{prefix}.layer{l}.bias"))
                .ok_or_else(|| NnError::Checkpoint(format!("missing {prefix}.layer{l}.bias")))?;
            if w.shape.len() != 2 || b.shape != [w.shape[1]] {
                return Err(NnError::Checkpoint(format!("bad shapes for {prefix}.layer{l}")));
            }
            if l == 0 {
                widths.push(w.shape[0]);
            } else if widths.last() != Some(&w.shape[0]) {
                return Err(NnError::Checkpoint(format!("{prefix}.layer{l} does not chain")));
            }
            widths.push(w.shape[1]);
            params.extend_from_slice(&w.data);
            params.extend_from_slice(&b.data);
        }
        if widths.len() < 2 {
            return Err(NnError::Checkpoint(format!("no layers under `{prefix}`")));
        }
        Mlp::from_params(&widths, params)
    }
}

/// Log-density of a diagonal Gaussian at `x`.
pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], x: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(x)
        .map(|((&m, &ls), &v)| {
            let z = (v - m) * (-ls).exp();
            -0.5 * z * z - ls - 0.5 * (2.0 * PI).ln()
        })
        .sum()
}

/// Gradients of [`gaussian_log_prob`] with respect to the mean and log-std.
pub fn gaussian_log_prob_grads(mean: &[f64], log_std: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut dmean = Vec::with_capacity(mean.len());
    let mut dlog_std = Vec::with_capacity(mean.len());
    for ((&m, &ls), &v) in mean.iter().zip(log_std).zip(x) {
        let inv_var = (-2.0 * ls).exp();
        let diff = v - m;
        dmean.push(diff * inv_var);
        dlog_std.push(diff * diff * inv_var - 1.0);
    }
    (dmean, dlog_std)
}

/// Differential entropy of a diagonal Gaussian; its gradient with respect to
/// each log-std entry is 1.
pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| ls + 0.5 * (2.0 * PI * E).ln()).sum()
}

/// `KL(N(m1, s1) ‖ N(m2, s2))` for diagonal Gaussians given log-stds.
pub fn gaussian_kl(mean1: &[f64], log_std1: &[f64], mean2: &[f64], log_std2: &[f64]) -> f64 {
    mean1
        .iter()
        .zip(log_std1)
        .zip(mean2.iter().zip(log_std2))
        .map(|((&m1, &l1), (&m2, &l2))| {
            let var_ratio = (2.0 * (l1 - l2)).exp();
            let d = (m1 - m2) * (-l2).exp();
            l2 - l1 + 0.5 * (var_ratio + d * d - 1.0)
        })
        .sum()
}

/// Diagonal Gaussian action head with state-independent log-stds.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHead {
    pub log_std: Vec<f64>,
}

/// A sampled action with its log-probability and the head's entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSample {
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub entropy: f64,
}

impl GaussianHead {
    pub fn new(dim: usize, initial_log_std: f64) -> Self {
        GaussianHead {
            log_std: vec![initial_log_std; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn sample_and_logprob<R: Rng + ?Sized>(&self, mean: &[f64], rng: &mut R) -> GaussianSample {
        let action: Vec<f64> = mean
            .iter()
            .zip(&self.log_std)
            .map(|(&m, &ls)| {
                let z: f64 = StandardNormal.sample(rng);
                m + ls.exp() * z
            })
            .collect();
        let log_prob = gaussian_log_prob(mean, &self.log_std, &action);
        GaussianSample {
            action,
            log_prob,
            entropy: gaussian_entropy(&self.log_std),
        }
    }

    pub fn log_prob(&self, mean: &[f64], action: &[f64]) -> f64 {
        gaussian_log_prob(mean, &self.log_std, action)
    }

    pub fn entropy(&self) -> f64 {
        gaussian_entropy(&self.log_std)
    }
}

/// Adam moments and hyperparameters for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One descent step on `params` along `grads`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NnError> {
        for len in [params.len(), grads.len()] {
            if len != self.m.len() {
                return Err(NnError::Shape {
                    expected: self.m.len(),
                    got: len,
                });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = self.lr * bc2.sqrt() / bc1;
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= step * *m / (v.sqrt() + self.eps * bc2.sqrt());
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint ℓ2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HARVCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named arrays of little-endian `f64`.
///
/// Layout: magic `HARVCKPT`, `u32` version, `u32` entry count, then per entry
/// in key order: `u32` key length, key bytes (UTF-8), `u32` rank, `u64` per
/// dimension, and the row-major data.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        self.entries.insert(key.into(), Tensor { shape, data });
    }

    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.entries.get(key)
    }

    pub fn vector(&self, key: &str) -> Result<Vec<f64>, NnError> {
        self.get(key)
            .map(|t| t.data.clone())
            .ok_or_else(|| NnError::Checkpoint(format!("missing key `{key}`")))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.entries.keys().any(|k| k.starts_with(prefix))
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (key, t) in &self.entries {
            w.write_all(&(key.len() as u32).to_le_bytes())?;
            w.write_all(key.as_bytes())?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, NnError> {
        let bad = |what: &str| NnError::Checkpoint(what.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic; not a checkpoint file"));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)?;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut key = vec![0u8; len];
            r.read_exact(&mut key).map_err(|_| bad("truncated key"))?;
            let key = String::from_utf8(key).map_err(|_| bad("key is not utf-8"))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(|_| bad("truncated shape"))?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(|_| bad("truncated data"))?;
                data.push(f64::from_le_bytes(b));
            }
            ckpt.entries.insert(key, Tensor { shape, data });
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_bytes())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, NnError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))?;
        Checkpoint::read(bytes.as_slice())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| NnError::Checkpoint("truncated file".to_string()))?;
    Ok(u32::from_le_bytes(b))
}
