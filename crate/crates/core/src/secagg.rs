//! Pairwise-masked secure aggregation over fixed-point integers.
//!
//! A plant scales its parameters by its aggregation weight, encodes them as
//! two's-complement fixed point in `u64`, and adds one pseudorandom mask per
//! peer. For each pair the lower id adds the shared stream and the higher id
//! subtracts it, so all masks vanish in the modular sum and the server only
//! learns the weighted average.

use std::collections::{BTreeMap, BTreeSet};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelArchitecture, ModelError, ParameterVector};
use crate::seeds::derive_seed128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregationError {
    #[error("invalid quantization spec: {0}")]
    InvalidSpec(String),
    #[error("aggregation weight {0} outside [0, 1]")]
    InvalidWeight(f64),
    #[error("plant {plant} has no shared mask seed with peer {peer}")]
    MissingSeed { plant: u32, peer: u32 },
    #[error("plant {0} listed as its own peer")]
    SelfPeer(u32),
    #[error("no update from plant {0}; round aborted")]
    MissingPlant(u32),
    #[error("unexpected update from plant {0}")]
    UnexpectedPlant(u32),
    #[error("duplicate update from plant {0}")]
    DuplicatePlant(u32),
    #[error("update from plant {plant} is for round {got}, expected {expected}")]
    RoundMismatch { plant: u32, expected: u32, got: u32 },
    #[error("update from plant {plant} has {got} words, expected {expected}")]
    LengthMismatch { plant: u32, expected: usize, got: usize },
    #[error("no updates to aggregate")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("malformed masked update encoding: {0}")]
    Encoding(String),
}

pub type Result<T, E = AggregationError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizationSpec {
    /// Fractional bits; values are multiplied by `2^scale_bits`.
    pub scale_bits: u32,
    /// Parameters are clipped to `[-clip_range, clip_range]` before encoding.
    pub clip_range: f64,
}

impl Default for QuantizationSpec {
    fn default() -> Self {
        Self {
            scale_bits: 24,
            clip_range: 64.0,
        }
    }
}

impl QuantizationSpec {
    /// Checks the spec can sum `max_plants` encoded vectors without the true
    /// (unmasked) sum leaving the signed 62-bit range.
    pub fn validate(&self, max_plants: usize) -> Result<()> {
        if !(8..=40).contains(&self.scale_bits) {
            return Err(AggregationError::InvalidSpec(format!(
                "scale_bits {} outside [8, 40]",
                self.scale_bits
            )));
        }
        if !(self.clip_range > 0.0 && self.clip_range.is_finite()) {
            return Err(AggregationError::InvalidSpec("clip_range must be positive".into()));
        }
        let bound = 2f64.powi(62) / max_plants.max(1) as f64;
        if self.clip_range * self.scale() >= bound {
            return Err(AggregationError::InvalidSpec(format!(
                "clip_range * 2^scale_bits must stay below 2^62 / {max_plants}"
            )));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        2f64.powi(self.scale_bits as i32)
    }

    /// Worst-case per-coordinate rounding error of a `plants`-way aggregate.
    pub fn error_bound(&self, plants: usize) -> f64 {
        plants as f64 * 2f64.powi(-(self.scale_bits as i32 + 1))
    }
}

/// `round(clip(v) * weight * 2^scale_bits)` as two's complement in `u64`.
pub fn quantize(params: &[f64], weight: f64, spec: &QuantizationSpec) -> Result<Vec<u64>> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(AggregationError::InvalidWeight(weight));
    }
    let scale = spec.scale();
    Ok(params
        .iter()
        .map(|v| {
            let clipped = v.clamp(-spec.clip_range, spec.clip_range);
            ((clipped * weight * scale).round() as i64) as u64
        })
        .collect())
}

/// How many entries [`quantize`] would clip.
pub fn count_clipped(params: &[f64], spec: &QuantizationSpec) -> usize {
    params.iter().filter(|v| v.abs() > spec.clip_range).count()
}

pub fn dequantize(word: u64, spec: &QuantizationSpec) -> f64 {
    (word as i64) as f64 / spec.scale()
}

/// Pre-shared 128-bit seeds, one per unordered pair of plants.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaskSeedMatrix {
    seeds: BTreeMap<(u32, u32), u128>,
}

impl MaskSeedMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Derives every pairwise seed from a secret that all plants hold.
    pub fn from_shared_secret(secret: u64, plant_ids: &[u32]) -> Self {
        let mut m = Self::new();
        for (i, &a) in plant_ids.iter().enumerate() {
            for &b in &plant_ids[i + 1..] {
                let (lo, hi) = ordered(a, b);
                m.insert(a, b, derive_seed128("mask-seed", &[secret, lo as u64, hi as u64]));
            }
        }
        m
    }

    pub fn insert(&mut self, a: u32, b: u32, seed: u128) {
        self.seeds.insert(ordered(a, b), seed);
    }

    /// The seed shared by `a` and `b`, independent of argument order.
    pub fn get(&self, a: u32, b: u32) -> Option<u128> {
        self.seeds.get(&ordered(a, b)).copied()
    }
}

fn ordered(a: u32, b: u32) -> (u32, u32) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSign {
    Add,
    Subtract,
}

/// The pair stream keyed by `(seed, round)`, negated modulo `2^64` when `sign`
/// is [`MaskSign::Subtract`].
pub fn derive_mask(seed: u128, round: u32, sign: MaskSign, q: usize) -> Vec<u64> {
    let mut key = [0u8; 32];
    key[..16].copy_from_slice(&seed.to_le_bytes());
    key[16..20].copy_from_slice(&round.to_le_bytes());
    let mut rng = ChaCha20Rng::from_seed(key);
    (0..q)
        .map(|_| {
            let w = rng.next_u64();
            match sign {
                MaskSign::Add => w,
                MaskSign::Subtract => w.wrapping_neg(),
            }
        })
        .collect()
}

/// Fixed-point, weight-scaled, pairwise-masked parameters of one plant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedUpdate {
    pub plant_id: u32,
    pub round: u32,
    pub masked_values: Vec<u64>,
}

impl MaskedUpdate {
    /// `plant_id u32, round u32, q u32`, then `q` words, all little-endian.
    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.plant_id.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&(self.masked_values.len() as u32).to_le_bytes());
        for w in &self.masked_values {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }

    /// Decodes from the front of `bytes`; returns the update and bytes used.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize)> {
        let word = |at: usize| -> Result<u32> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
                .ok_or_else(|| AggregationError::Encoding("truncated header".into()))
        };
        let plant_id = word(0)?;
        let round = word(4)?;
        let q = word(8)? as usize;
        let end = 12 + q * 8;
        let body = bytes
            .get(12..end)
            .ok_or_else(|| AggregationError::Encoding(format!("need {end} bytes, have {}", bytes.len())))?;
        let masked_values = body
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((
            Self {
                plant_id,
                round,
                masked_values,
            },
            end,
        ))
    }
}

/// Encodes `params` for plant `plant_id` and hides them under one mask per
/// peer.
pub fn mask_update(
    params: &[f64],
    weight: f64,
    plant_id: u32,
    peers: &[u32],
    seeds: &MaskSeedMatrix,
    round: u32,
    spec: &QuantizationSpec,
) -> Result<MaskedUpdate> {
    let mut words = quantize(params, weight, spec)?;
    let clipped = count_clipped(params, spec);
    if clipped > 0 {
        log::warn!("plant {plant_id} round {round}: {clipped} parameters clipped to +/-{}", spec.clip_range);
    }
    for &peer in peers {
        if peer == plant_id {
            return Err(AggregationError::SelfPeer(plant_id));
        }
        let seed = seeds
            .get(plant_id, peer)
            .ok_or(AggregationError::MissingSeed { plant: plant_id, peer })?;
        let sign = if plant_id < peer {
            MaskSign::Add
        } else {
            MaskSign::Subtract
        };
        for (w, m) in words.iter_mut().zip(derive_mask(seed, round, sign, params.len())) {
            *w = w.wrapping_add(m);
        }
    }
    Ok(MaskedUpdate {
        plant_id,
        round,
        masked_values: words,
    })
}

/// Sums one masked update per expected plant modulo `2^64` and decodes the
/// result as signed fixed point.
pub fn aggregate_masked(
    updates: &[MaskedUpdate],
    expected_plants: &[u32],
    round: u32,
    spec: &QuantizationSpec,
    arch: &ModelArchitecture,
) -> Result<ParameterVector> {
    if updates.is_empty() {
        return Err(AggregationError::Empty);
    }
    let expected: BTreeSet<u32> = expected_plants.iter().copied().collect();
    let mut seen = BTreeSet::new();
    let q = arch.parameter_count();
    for u in updates {
        if !expected.contains(&u.plant_id) {
            return Err(AggregationError::UnexpectedPlant(u.plant_id));
        }
        if !seen.insert(u.plant_id) {
            return Err(AggregationError::DuplicatePlant(u.plant_id));
        }
        if u.round != round {
            return Err(AggregationError::RoundMismatch {
                plant: u.plant_id,
                expected: round,
                got: u.round,
            });
        }
        if u.masked_values.len() != q {
            return Err(AggregationError::LengthMismatch {
                plant: u.plant_id,
                expected: q,
                got: u.masked_values.len(),
            });
        }
    }
    if let Some(&missing) = expected.difference(&seen).next() {
        return Err(AggregationError::MissingPlant(missing));
    }
    let mut sum = vec![0u64; q];
    for u in updates {
        for (s, w) in sum.iter_mut().zip(&u.masked_values) {
            *s = s.wrapping_add(*w);
        }
    }
    let values = sum.into_iter().map(|w| dequantize(w, spec)).collect();
    Ok(ParameterVector::new(values, arch)?)
}
