//! Synthetic multi-plant process data.
//!
//! Each plant runs four mean-reverting input signals (temperature, pressure,
//! flow, concentration) inside its own operating window and produces
//!
//! `yield = a*sin(w*T) + b*P^2 + c*F*C + d + noise`
//!
//! where `T, P, F, C` are the inputs, expressed relative to the plant's
//! operating window and averaged over the process residence time, and
//! `(a, b, c, d)` are plant-specific gains. Different operating windows and
//! gains make the plants non-identically distributed while the shared backbone
//! gives them something to learn from each other.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::RawPlantTable;
use crate::seeds::derive_seed;

pub const INPUT_COLUMNS: [&str; 4] = ["temperature", "pressure", "flow", "concentration"];
pub const TARGET_COLUMN: &str = "yield";

const SIN_FREQ: f64 = 0.8;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid synthetic config: {0}")]
pub struct SyntheticConfigError(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticPlant {
    pub name: String,
    pub samples: usize,
    pub noise_std: f64,
    /// `[a, b, c, d]` of the backbone.
    pub gains: [f64; 4],
    /// `[low, high]` operating window for each input, in input column order.
    pub ranges: [[f64; 2]; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Probability that any single measured cell is blanked.
    pub missing_fraction: f64,
    /// Probability that a row carries a sensor spike in one input.
    pub outlier_fraction: f64,
    /// AR(1) coefficient of the input signals.
    pub persistence: f64,
    /// The response follows the inputs averaged over this many samples.
    pub residence_steps: usize,
    /// Seconds between consecutive samples.
    pub sample_interval: i64,
    #[serde(rename = "plant")]
    pub plants: Vec<SyntheticPlant>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            missing_fraction: 0.002,
            outlier_fraction: 0.001,
            persistence: 0.3,
            residence_steps: 4,
            sample_interval: 60,
            plants: vec![
                SyntheticPlant {
                    name: "A".into(),
                    samples: 360,
                    noise_std: 0.5,
                    gains: [60.0, 4.0, 6.0, 60.0],
                    ranges: [[320.0, 375.0], [3.5, 6.5], [38.0, 62.0], [0.38, 0.62]],
                },
                SyntheticPlant {
                    name: "B".into(),
                    samples: 90,
                    noise_std: 0.5,
                    gains: [55.0, 4.4, 5.6, 62.0],
                    ranges: [[330.0, 385.0], [4.0, 7.0], [42.0, 66.0], [0.42, 0.66]],
                },
                SyntheticPlant {
                    name: "C".into(),
                    samples: 340,
                    noise_std: 0.5,
                    gains: [65.0, 3.6, 6.4, 58.0],
                    ranges: [[315.0, 370.0], [3.0, 6.0], [34.0, 58.0], [0.34, 0.58]],
                },
            ],
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), SyntheticConfigError> {
        let err = |m: String| Err(SyntheticConfigError(m));
        if self.plants.is_empty() {
            return err("no plants".into());
        }
        if !(0.0..1.0).contains(&self.missing_fraction) || !(0.0..1.0).contains(&self.outlier_fraction) {
            return err("missing/outlier fractions must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.persistence) {
            return err("persistence must lie in [0, 1)".into());
        }
        if self.residence_steps == 0 {
            return err("residence_steps must be at least 1".into());
        }
        if self.sample_interval <= 0 {
            return err("sample interval must be positive".into());
        }
        for p in &self.plants {
            if p.samples < 2 {
                return err(format!("plant {} needs at least 2 samples", p.name));
            }
            if !(p.noise_std >= 0.0 && p.noise_std.is_finite()) {
                return err(format!("plant {} noise must be finite and non-negative", p.name));
            }
            if p.ranges.iter().any(|[lo, hi]| !(lo < hi)) || p.gains.iter().any(|g| !g.is_finite()) {
                return err(format!("plant {} has an empty range or non-finite gain", p.name));
            }
        }
        let mut names: Vec<&str> = self.plants.iter().map(|p| p.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return err("duplicate plant names".into());
        }
        Ok(())
    }
}

/// Raw inputs as deviations from the centre of the operating window, `-1`
/// and `1` at its edges.
pub fn scaled_inputs(ranges: &[[f64; 2]; 4], inputs: &[f64; 4]) -> [f64; 4] {
    std::array::from_fn(|j| {
        let [lo, hi] = ranges[j];
        (2.0 * inputs[j] - lo - hi) / (hi - lo)
    })
}

/// The noise-free response to scaled inputs `s = [T, P, F, C]`.
pub fn backbone(gains: &[f64; 4], s: &[f64; 4]) -> f64 {
    gains[0] * (SIN_FREQ * s[0]).sin() + gains[1] * s[1] * s[1] + gains[2] * s[2] * s[3] + gains[3]
}

fn residence_mean(history: &VecDeque<[f64; 4]>) -> [f64; 4] {
    let n = history.len() as f64;
    std::array::from_fn(|j| history.iter().map(|s| s[j]).sum::<f64>() / n)
}

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

fn generate_plant(cfg: &SyntheticConfig, index: usize, seed: u64) -> RawPlantTable {
    let plant = &cfg.plants[index];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed("synthetic-plant", &[seed, index as u64]));
    let phi = cfg.persistence;
    let innovation = (1.0 - phi * phi).sqrt();
    let centers: Vec<f64> = plant.ranges.iter().map(|[lo, hi]| 0.5 * (lo + hi)).collect();
    let spreads: Vec<f64> = plant.ranges.iter().map(|[lo, hi]| 0.25 * (hi - lo)).collect();

    let mut state = centers.clone();
    let mut history: VecDeque<[f64; 4]> = VecDeque::with_capacity(cfg.residence_steps);
    let mut rows = Vec::with_capacity(plant.samples);
    for _ in 0..plant.samples {
        for j in 0..4 {
            let z: f64 = StandardNormal.sample(&mut rng);
            let next = centers[j] + phi * (state[j] - centers[j]) + spreads[j] * innovation * z;
            state[j] = next.clamp(plant.ranges[j][0], plant.ranges[j][1]);
        }
        let inputs = [state[0], state[1], state[2], state[3]];
        if history.len() == cfg.residence_steps {
            history.pop_front();
        }
        history.push_back(scaled_inputs(&plant.ranges, &inputs));
        let noise: f64 = StandardNormal.sample(&mut rng);
        let y = backbone(&plant.gains, &residence_mean(&history)) + plant.noise_std * noise;

        let mut row: Vec<Option<f64>> = inputs.iter().chain([&y]).map(|&v| Some(round4(v))).collect();
        if rng.random::<f64>() < cfg.outlier_fraction {
            let j = rng.random_range(0..4);
            let spike = if rng.random::<bool>() { 20.0 } else { -20.0 };
            row[j] = Some(round4(inputs[j] + spike * spreads[j]));
        }
        for cell in row.iter_mut() {
            if rng.random::<f64>() < cfg.missing_fraction {
                *cell = None;
            }
        }
        rows.push(row);
    }

    let columns = INPUT_COLUMNS
        .iter()
        .chain([&TARGET_COLUMN])
        .map(|s| s.to_string())
        .collect();
    let timestamps = (0..plant.samples as i64).map(|i| i * cfg.sample_interval).collect();
    RawPlantTable::new(plant.name.clone(), "timestamp", columns, timestamps, rows)
        .expect("generator produces well-formed tables")
}

/// One table per configured plant, deterministic in `seed`.
pub fn generate_synthetic_plants(
    cfg: &SyntheticConfig,
    seed: u64,
) -> Result<Vec<RawPlantTable>, SyntheticConfigError> {
    cfg.validate()?;
    Ok((0..cfg.plants.len()).map(|k| generate_plant(cfg, k, seed)).collect())
}
