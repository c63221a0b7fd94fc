//! Feedforward regression surrogate with exact backpropagation.
//!
//! Parameters live in one flat vector. Each layer contributes its weight
//! matrix (`fan_out x fan_in`, row-major) followed by its bias vector, layers
//! in input-to-output order. Hidden layers apply the configured activation;
//! the output layer is linear.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("parameter vector is bound to architecture {actual:016x}, expected {expected:016x}")]
    ArchitectureMismatch { expected: u64, actual: u64 },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("learning rate must be finite and non-negative, got {0}")]
    InvalidLearningRate(f64),
    #[error("truncated parameter encoding: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("zero-length parameter vector")]
    ZeroLength,
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

/// Stable 64-bit identifier of an architecture, shared by both ends of a
/// federation to check they train the same network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchId(pub u64);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArchitecture {
    input_dim: usize,
    hidden_layers: Vec<usize>,
    output_dim: usize,
    activation: Activation,
}

impl ModelArchitecture {
    pub fn new(
        input_dim: usize,
        hidden_layers: Vec<usize>,
        output_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(ModelError::InvalidArchitecture(
                "input and output dimensions must be at least 1".into(),
            ));
        }
        if hidden_layers.contains(&0) {
            return Err(ModelError::InvalidArchitecture(
                "hidden layer widths must be at least 1".into(),
            ));
        }
        Ok(Self {
            input_dim,
            hidden_layers,
            output_dim,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn hidden_layers(&self) -> &[usize] {
        &self.hidden_layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// `(fan_in, fan_out)` for every layer, input side first.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden_layers.len() + 2);
        widths.push(self.input_dim);
        widths.extend_from_slice(&self.hidden_layers);
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(fan_in, fan_out)| (fan_in + 1) * fan_out)
            .sum()
    }

    pub fn arch_id(&self) -> ArchId {
        let hidden: Vec<String> = self.hidden_layers.iter().map(|h| h.to_string()).collect();
        let canonical = format!(
            "in={};hidden=[{}];out={};act={}",
            self.input_dim,
            hidden.join(","),
            self.output_dim,
            self.activation.name()
        );
        let digest = Sha256::digest(canonical.as_bytes());
        let mut word = [0u8; 8];
        word.copy_from_slice(&digest[..8]);
        ArchId(u64::from_le_bytes(word))
    }

    fn widest_layer(&self) -> usize {
        self.hidden_layers
            .iter()
            .copied()
            .chain([self.input_dim, self.output_dim])
            .max()
            .unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    values: Vec<f64>,
    arch_id: ArchId,
}

impl ParameterVector {
    /// Binds `values` to `arch`, checking length and finiteness.
    pub fn new(values: Vec<f64>, arch: &ModelArchitecture) -> Result<Self> {
        Self::with_id(values, arch.parameter_count(), arch.arch_id())
    }

    pub(crate) fn with_id(values: Vec<f64>, expected_len: usize, arch_id: ArchId) -> Result<Self> {
        if values.len() != expected_len {
            return Err(ModelError::DimensionMismatch {
                what: "parameter vector",
                expected: expected_len,
                actual: values.len(),
            });
        }
        check_finite(&values)?;
        Ok(Self { values, arch_id })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn arch_id(&self) -> ArchId {
        self.arch_id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn check_bound_to(&self, arch: &ModelArchitecture) -> Result<()> {
        let expected = arch.arch_id();
        if self.arch_id != expected {
            return Err(ModelError::ArchitectureMismatch {
                expected: expected.0,
                actual: self.arch_id.0,
            });
        }
        if self.values.len() != arch.parameter_count() {
            return Err(ModelError::DimensionMismatch {
                what: "parameter vector",
                expected: arch.parameter_count(),
                actual: self.values.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    values: Vec<f64>,
}

impl Gradient {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite(&values)?;
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(ModelError::NonFinite { index }),
        None => Ok(()),
    }
}

/// Glorot-uniform weights, zero biases. Same `(arch, seed)` gives the same
/// vector bit for bit.
pub fn init_params(arch: &ModelArchitecture, seed: u64) -> ParameterVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(arch.parameter_count());
    for (fan_in, fan_out) in arch.layer_dims() {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        values.extend((0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)));
        values.extend(std::iter::repeat(0.0).take(fan_out));
    }
    ParameterVector {
        values,
        arch_id: arch.arch_id(),
    }
}

/// Computes `W x + b` for one layer.
#[inline]
fn affine(weights: &[f64], biases: &[f64], input: &[f64], out: &mut [f64]) {
    let fan_in = input.len();
    for ((o, row), b) in out.iter_mut().zip(weights.chunks_exact(fan_in)).zip(biases) {
        *o = b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
    }
}

/// Per-layer views into the flat parameter (or gradient) vector.
fn split_layers<'a>(values: &'a [f64], dims: &[(usize, usize)]) -> Vec<(&'a [f64], &'a [f64])> {
    let mut rest = values;
    dims.iter()
        .map(|&(fan_in, fan_out)| {
            let (w, tail) = rest.split_at(fan_in * fan_out);
            let (b, tail) = tail.split_at(fan_out);
            rest = tail;
            (w, b)
        })
        .collect()
}

pub fn forward(params: &ParameterVector, arch: &ModelArchitecture, input: &[f64]) -> Result<Vec<f64>> {
    params.check_bound_to(arch)?;
    if input.len() != arch.input_dim {
        return Err(ModelError::DimensionMismatch {
            what: "model input",
            expected: arch.input_dim,
            actual: input.len(),
        });
    }
    let dims = arch.layer_dims();
    let layers = split_layers(&params.values, &dims);
    let last = layers.len() - 1;
    let mut current = input.to_vec();
    for (l, ((w, b), &(_, fan_out))) in layers.iter().zip(&dims).enumerate() {
        let mut next = vec![0.0; fan_out];
        affine(w, b, &current, &mut next);
        if l != last {
            for v in next.iter_mut() {
                *v = arch.activation.apply(*v);
            }
        }
        current = next;
    }
    Ok(current)
}

/// Mean over samples of the squared Euclidean error of each output vector.
pub fn mse_loss(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    if pred.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    if pred.len() != truth.len() {
        return Err(ModelError::DimensionMismatch {
            what: "batch size",
            expected: pred.len(),
            actual: truth.len(),
        });
    }
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        if p.len() != t.len() {
            return Err(ModelError::DimensionMismatch {
                what: "output vector",
                expected: p.len(),
                actual: t.len(),
            });
        }
        total += p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / pred.len() as f64)
}

/// MSE of the model over a batch and its exact gradient, averaged over the batch.
pub fn loss_gradient(
    params: &ParameterVector,
    arch: &ModelArchitecture,
    batch_inputs: &[Vec<f64>],
    batch_targets: &[Vec<f64>],
) -> Result<(f64, Gradient)> {
    if batch_inputs.len() != batch_targets.len() {
        return Err(ModelError::DimensionMismatch {
            what: "batch size",
            expected: batch_inputs.len(),
            actual: batch_targets.len(),
        });
    }
    let samples = batch_inputs
        .iter()
        .zip(batch_targets)
        .map(|(x, y)| (x.as_slice(), y.as_slice()));
    loss_gradient_over(params, arch, samples, batch_inputs.len())
}

/// Same as [`loss_gradient`] over an arbitrary sequence of `(input, target)`
/// pairs, so callers can form mini-batches without copying rows.
pub fn loss_gradient_over<'a, I>(
    params: &ParameterVector,
    arch: &ModelArchitecture,
    samples: I,
    batch_len: usize,
) -> Result<(f64, Gradient)>
where
    I: IntoIterator<Item = (&'a [f64], &'a [f64])>,
{
    params.check_bound_to(arch)?;
    if batch_len == 0 {
        return Err(ModelError::EmptyBatch);
    }
    let dims = arch.layer_dims();
    let layers = split_layers(&params.values, &dims);
    let n_layers = dims.len();
    let scale = 2.0 / batch_len as f64;

    let mut grad = vec![0.0; params.values.len()];
    // Offsets of each layer's weight and bias blocks inside `grad`.
    let mut offsets = Vec::with_capacity(n_layers);
    let mut at = 0;
    for &(fan_in, fan_out) in &dims {
        offsets.push((at, at + fan_in * fan_out));
        at += (fan_in + 1) * fan_out;
    }

    // pre[l], post[l]: pre-activation and output of layer l; post[0] is the input.
    let mut pre: Vec<Vec<f64>> = dims.iter().map(|&(_, out)| vec![0.0; out]).collect();
    let mut post: Vec<Vec<f64>> = std::iter::once(vec![0.0; arch.input_dim])
        .chain(dims.iter().map(|&(_, out)| vec![0.0; out]))
        .collect();
    let width = arch.widest_layer();
    let mut delta = vec![0.0; width];
    let mut upstream = vec![0.0; width];

    let mut total_loss = 0.0;
    let mut seen = 0usize;
    for (x, y) in samples {
        if x.len() != arch.input_dim {
            return Err(ModelError::DimensionMismatch {
                what: "model input",
                expected: arch.input_dim,
                actual: x.len(),
            });
        }
        if y.len() != arch.output_dim {
            return Err(ModelError::DimensionMismatch {
                what: "target",
                expected: arch.output_dim,
                actual: y.len(),
            });
        }
        seen += 1;
        post[0].copy_from_slice(x);
        for l in 0..n_layers {
            let (w, b) = layers[l];
            let (inputs, outputs) = post.split_at_mut(l + 1);
            affine(w, b, &inputs[l], &mut pre[l]);
            let out = &mut outputs[0];
            if l + 1 == n_layers {
                out.copy_from_slice(&pre[l]);
            } else {
                for (a, &z) in out.iter_mut().zip(&pre[l]) {
                    *a = arch.activation.apply(z);
                }
            }
        }

        let prediction = &post[n_layers];
        let out_dim = arch.output_dim;
        for j in 0..out_dim {
            let r = prediction[j] - y[j];
            total_loss += r * r;
            delta[j] = scale * r;
        }

        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = dims[l];
            let (w_off, b_off) = offsets[l];
            let input = &post[l];
            for o in 0..fan_out {
                let d = delta[o];
                grad[b_off + o] += d;
                let row = &mut grad[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                for (g, &a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            if l == 0 {
                break;
            }
            let (w, _) = layers[l];
            upstream[..fan_in].iter_mut().for_each(|u| *u = 0.0);
            for o in 0..fan_out {
                let d = delta[o];
                let row = &w[o * fan_in..(o + 1) * fan_in];
                for (u, &wv) in upstream[..fan_in].iter_mut().zip(row) {
                    *u += wv * d;
                }
            }
            for i in 0..fan_in {
                delta[i] = upstream[i] * arch.activation.derivative(pre[l - 1][i], post[l][i]);
            }
        }
    }
    if seen != batch_len {
        return Err(ModelError::DimensionMismatch {
            what: "batch size",
            expected: batch_len,
            actual: seen,
        });
    }
    let loss = total_loss / batch_len as f64;
    if !loss.is_finite() {
        return Err(ModelError::NonFinite { index: 0 });
    }
    Ok((loss, Gradient::new(grad)?))
}

/// One plain gradient-descent step, `params - eta * grad`.
pub fn sgd_step(params: &ParameterVector, grad: &Gradient, eta: f64) -> Result<ParameterVector> {
    if !eta.is_finite() || eta < 0.0 {
        return Err(ModelError::InvalidLearningRate(eta));
    }
    if grad.values.len() != params.values.len() {
        return Err(ModelError::DimensionMismatch {
            what: "gradient",
            expected: params.values.len(),
            actual: grad.values.len(),
        });
    }
    let values: Vec<f64> = params
        .values
        .iter()
        .zip(&grad.values)
        .map(|(p, g)| p - eta * g)
        .collect();
    check_finite(&values)?;
    Ok(ParameterVector {
        values,
        arch_id: params.arch_id,
    })
}

/// `u32` little-endian count followed by each value as little-endian `f64`.
pub fn serialize_params(params: &ParameterVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 8 * params.values.len());
    write_raw_values(&params.values, &mut out);
    out
}

pub(crate) fn write_raw_values(values: &[f64], out: &mut Vec<u8>) {
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Decodes a buffer produced by [`serialize_params`]. The buffer must hold
/// exactly one encoded vector.
pub fn deserialize_params(bytes: &[u8], arch: &ModelArchitecture) -> Result<ParameterVector> {
    let (params, used) = read_params(bytes, arch)?;
    if used != bytes.len() {
        return Err(ModelError::DimensionMismatch {
            what: "encoded parameter bytes",
            expected: used,
            actual: bytes.len(),
        });
    }
    Ok(params)
}

/// Decodes a parameter vector from the front of `bytes`, returning it and the
/// number of bytes consumed.
pub fn read_params(bytes: &[u8], arch: &ModelArchitecture) -> Result<(ParameterVector, usize)> {
    let (values, used) = read_raw_values(bytes)?;
    Ok((ParameterVector::new(values, arch)?, used))
}

pub(crate) fn read_raw_values(bytes: &[u8]) -> Result<(Vec<f64>, usize)> {
    if bytes.len() < 4 {
        return Err(ModelError::Truncated {
            needed: 4,
            available: bytes.len(),
        });
    }
    let count = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    if count == 0 {
        return Err(ModelError::ZeroLength);
    }
    let needed = count
        .checked_mul(8)
        .and_then(|n| n.checked_add(4))
        .ok_or(ModelError::Truncated {
            needed: usize::MAX,
            available: bytes.len(),
        })?;
    if bytes.len() < needed {
        return Err(ModelError::Truncated {
            needed,
            available: bytes.len(),
        });
    }
    let values = bytes[4..needed]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((values, needed))
}
