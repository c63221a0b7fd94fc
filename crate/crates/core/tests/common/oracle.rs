//! Reference computations written without the library's internals: a naive
//! forward pass, central finite differences and brute-force window counts.
#![allow(dead_code)]

use fedplant_core::model::{init_params, loss_gradient, Activation, ModelArchitecture, ParameterVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

/// Layer-by-layer evaluation straight from the flat layout: per layer a
/// row-major `fan_out x fan_in` weight block, then `fan_out` biases.
pub fn naive_forward(values: &[f64], arch: &ModelArchitecture, x: &[f64]) -> Vec<f64> {
    let mut widths = vec![arch.input_dim()];
    widths.extend_from_slice(arch.hidden_layers());
    widths.push(arch.output_dim());
    let mut at = 0;
    let mut h = x.to_vec();
    for l in 0..widths.len() - 1 {
        let (n_in, n_out) = (widths[l], widths[l + 1]);
        let mut next = Vec::with_capacity(n_out);
        for o in 0..n_out {
            let mut z = values[at + n_in * n_out + o];
            for i in 0..n_in {
                z += values[at + o * n_in + i] * h[i];
            }
            let hidden = l + 2 < widths.len();
            next.push(match (hidden, arch.activation()) {
                (false, _) => z,
                (true, Activation::Relu) => z.max(0.0),
                (true, Activation::Tanh) => z.tanh(),
            });
        }
        at += n_in * n_out + n_out;
        h = next;
    }
    assert_eq!(at, values.len(), "layout consumed every parameter");
    h
}

/// Mean over samples of the summed squared error.
pub fn naive_loss(values: &[f64], arch: &ModelArchitecture, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> f64 {
    let total: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            naive_forward(values, arch, x)
                .iter()
                .zip(y)
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
        })
        .sum();
    total / xs.len() as f64
}

pub fn fd_gradient(values: &[f64], arch: &ModelArchitecture, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Vec<f64> {
    let mut probe = values.to_vec();
    (0..values.len())
        .map(|i| {
            probe[i] = values[i] + FD_STEP;
            let up = naive_loss(&probe, arch, xs, ys);
            probe[i] = values[i] - FD_STEP;
            let down = naive_loss(&probe, arch, xs, ys);
            probe[i] = values[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, 1e-4)`; the floor keeps near-zero entries from
/// turning rounding noise into a large ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

pub struct GradInstance {
    pub arch: ModelArchitecture,
    pub params: ParameterVector,
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<Vec<f64>>,
}

/// A random net of at most three layers, every width in 1..=8.
pub fn random_instance(seed: u64) -> GradInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = rng.random_range(1..=8);
    let hidden: Vec<usize> = (0..rng.random_range(0..=2)).map(|_| rng.random_range(1..=8)).collect();
    let output = rng.random_range(1..=8);
    let activation = if rng.random_bool(0.5) {
        Activation::Relu
    } else {
        Activation::Tanh
    };
    let arch = ModelArchitecture::new(input, hidden, output, activation).unwrap();
    // Non-zero biases so relu units are not all sitting on their kink.
    let mut values = init_params(&arch, rng.random()).into_values();
    for v in values.iter_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    let params = ParameterVector::new(values, &arch).unwrap();
    let n = rng.random_range(1..=6);
    let xs = (0..n).map(|_| (0..input).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let ys = (0..n).map(|_| (0..output).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    GradInstance { arch, params, xs, ys }
}

/// Largest relative error between the analytic gradient and central finite
/// differences of the naive loss.
pub fn gradient_check(inst: &GradInstance) -> f64 {
    let (loss, grad) = loss_gradient(&inst.params, &inst.arch, &inst.xs, &inst.ys).unwrap();
    let naive = naive_loss(inst.params.values(), &inst.arch, &inst.xs, &inst.ys);
    assert!((loss - naive).abs() <= 1e-12 * naive.abs().max(1.0), "loss {loss} vs naive {naive}");
    let numeric = fd_gradient(inst.params.values(), &inst.arch, &inst.xs, &inst.ys);
    grad.values()
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max)
}

/// Number of length-`t` windows with a target `horizon` rows after the
/// window end, counted by enumerating end rows.
pub fn brute_window_count(rows: usize, t: usize, horizon: usize) -> usize {
    (0..rows).filter(|&end| end + 1 >= t && end + horizon < rows).count()
}

/// `sum_k w_k * theta_k`, accumulated in the given order.
pub fn plaintext_weighted_sum(thetas: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let mut acc = vec![0.0; thetas[0].len()];
    for (theta, w) in thetas.iter().zip(weights) {
        for (a, v) in acc.iter_mut().zip(theta) {
            *a += w * v;
        }
    }
    acc
}
