//! Aggregation weights: sample-size proportional, optionally rescaled by
//! per-plant coefficients.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeightError {
    #[error("no plants to weight")]
    Empty,
    #[error("plant at position {0} reports zero samples")]
    ZeroSamples(usize),
    #[error("coefficient at position {index} must be positive and finite, got {value}")]
    NonPositiveAlpha { index: usize, value: f64 },
    #[error("validation MSE at position {index} must be positive and finite, got {value}")]
    NonPositiveMse { index: usize, value: f64 },
    #[error("{what}: expected {expected} entries, got {actual}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WeightingMode {
    #[default]
    Fedavg,
    Adaptive,
}

impl WeightingMode {
    pub fn code(self) -> u8 {
        match self {
            WeightingMode::Fedavg => 0,
            WeightingMode::Adaptive => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(WeightingMode::Fedavg),
            1 => Some(WeightingMode::Adaptive),
            _ => None,
        }
    }
}

/// One weight per plant, in ascending plant-id order; sums to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights(pub Vec<f64>);

impl AggregationWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaCoefficients(pub Vec<f64>);

fn check_counts(counts: &[u64]) -> Result<(), WeightError> {
    if counts.is_empty() {
        return Err(WeightError::Empty);
    }
    if let Some(i) = counts.iter().position(|&n| n == 0) {
        return Err(WeightError::ZeroSamples(i));
    }
    Ok(())
}

/// `w_k = N_k / sum_j N_j`.
pub fn fedavg_weights(sample_counts: &[u64]) -> Result<AggregationWeights, WeightError> {
    check_counts(sample_counts)?;
    let total: f64 = sample_counts.iter().map(|&n| n as f64).sum();
    Ok(AggregationWeights(
        sample_counts.iter().map(|&n| n as f64 / total).collect(),
    ))
}

/// `w_k = a_k N_k / sum_j a_j N_j`.
///
/// Coefficients are first divided by their maximum. The weights are
/// invariant to that rescaling, and equal coefficients become exactly 1 so the
/// result matches [`fedavg_weights`] bit for bit.
pub fn adaptive_weights(
    sample_counts: &[u64],
    alphas: &AlphaCoefficients,
) -> Result<AggregationWeights, WeightError> {
    check_counts(sample_counts)?;
    if alphas.0.len() != sample_counts.len() {
        return Err(WeightError::LengthMismatch {
            what: "alpha coefficients",
            expected: sample_counts.len(),
            actual: alphas.0.len(),
        });
    }
    for (index, &value) in alphas.0.iter().enumerate() {
        if !(value > 0.0 && value.is_finite()) {
            return Err(WeightError::NonPositiveAlpha { index, value });
        }
    }
    let max = alphas.0.iter().copied().fold(f64::MIN, f64::max);
    let scaled: Vec<f64> = alphas
        .0
        .iter()
        .zip(sample_counts)
        .map(|(a, &n)| (a / max) * n as f64)
        .collect();
    let total: f64 = scaled.iter().sum();
    Ok(AggregationWeights(scaled.iter().map(|s| s / total).collect()))
}

/// `a_k = ln(1 + 1/mse_k)`, rescaled so the coefficients average `alpha_mean`.
/// Lower validation error earns a larger coefficient.
pub fn compute_alpha(validation_mse: &[f64], alpha_mean: f64) -> Result<AlphaCoefficients, WeightError> {
    if validation_mse.is_empty() {
        return Err(WeightError::Empty);
    }
    for (index, &value) in validation_mse.iter().enumerate() {
        if !(value > 0.0 && value.is_finite()) {
            return Err(WeightError::NonPositiveMse { index, value });
        }
    }
    let raw: Vec<f64> = validation_mse.iter().map(|m| (1.0 / m).ln_1p()).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(AlphaCoefficients(raw.iter().map(|a| a * alpha_mean / mean).collect()))
}
