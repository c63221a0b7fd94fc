//! Round scheduling, aggregation and the baseline training paradigms.
//!
//! A federated run is a coordinator ([`server`]) talking to one client per
//! plant ([`plant`]) over a [`Link`](crate::transport::Link). Each round the
//! coordinator broadcasts the global parameters and aggregation weights,
//! waits at a barrier for every plant's update, aggregates (masked or
//! plaintext), and asks the plants to score the new global model on their own
//! splits.

mod baselines;
pub mod plant;
pub mod server;
pub mod weights;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, PreparedPlant};
use crate::model::{ModelArchitecture, ModelError, ParameterVector};
use crate::secagg::{AggregationError, QuantizationSpec};
use crate::seeds::derive_seed;
use crate::trainer::{EvalMetrics, LocalTrainConfig, TrainError};
use crate::transport::{self, Endpoint, Listener, TransportError};

pub use baselines::{run_centralized, run_local_only, CentralizedOutcome, EpochRecord, LocalOnlyResult};
pub use plant::{run_client, PlantWorker};
pub use server::{serve, Coordinator};
pub use weights::{
    adaptive_weights, compute_alpha, fedavg_weights, AggregationWeights, AlphaCoefficients, WeightError,
    WeightingMode,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FedError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl FedError {
    pub fn is_divergence(&self) -> bool {
        matches!(self, FedError::Train(TrainError::Diverged { .. }))
    }
}

pub type Result<T, E = FedError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantDescriptor {
    pub id: u32,
    pub name: String,
}

/// A plant's prepared splits, as held at that plant.
#[derive(Debug, Clone)]
pub struct PlantData {
    pub descriptor: PlantDescriptor,
    pub prepared: PreparedPlant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedConfig {
    pub rounds: u32,
    pub plants: Vec<PlantDescriptor>,
    pub arch: ModelArchitecture,
    /// `shuffle_seed` is replaced per round by [`round_shuffle_seed`].
    pub local: LocalTrainConfig,
    pub weighting: WeightingMode,
    /// Coefficients in `plants` order; bypasses [`compute_alpha`].
    pub alpha_overrides: Option<Vec<f64>>,
    pub alpha_mean: f64,
    pub quant: QuantizationSpec,
    pub secure: bool,
    pub master_seed: u64,
    /// Pre-shared among plants; pairwise mask seeds derive from it.
    pub mask_secret: u64,
    pub phase_timeout: Duration,
}

impl FederatedConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(FedError::Config(m));
        if self.rounds == 0 {
            return err("rounds must be at least 1".into());
        }
        if self.plants.is_empty() {
            return err("at least one plant is required".into());
        }
        let mut ids: Vec<u32> = self.plants.iter().map(|p| p.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return err("plant ids must be unique".into());
        }
        let mut names: Vec<&str> = self.plants.iter().map(|p| p.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return err("plant names must be unique".into());
        }
        if let Some(alphas) = &self.alpha_overrides {
            if alphas.len() != self.plants.len() {
                return err(format!(
                    "{} alpha overrides for {} plants",
                    alphas.len(),
                    self.plants.len()
                ));
            }
            if alphas.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
                return err("alpha overrides must be positive".into());
            }
        }
        if !(self.alpha_mean > 0.0 && self.alpha_mean.is_finite()) {
            return err("alpha_mean must be positive".into());
        }
        self.local.validate().map_err(|e| FedError::Config(e.to_string()))?;
        self.quant
            .validate(self.plants.len())
            .map_err(|e| FedError::Config(e.to_string()))?;
        Ok(())
    }

    /// Plants sorted by id; the order used for weights and summation.
    pub fn plants_by_id(&self) -> Vec<PlantDescriptor> {
        let mut p = self.plants.clone();
        p.sort_by_key(|d| d.id);
        p
    }

    /// Alpha overrides re-ordered to ascending plant id.
    pub(crate) fn alpha_overrides_by_id(&self) -> Option<AlphaCoefficients> {
        let alphas = self.alpha_overrides.as_ref()?;
        let mut pairs: Vec<(u32, f64)> = self.plants.iter().map(|p| p.id).zip(alphas.iter().copied()).collect();
        pairs.sort_by_key(|(id, _)| *id);
        Some(AlphaCoefficients(pairs.into_iter().map(|(_, a)| a).collect()))
    }
}

/// Shuffle seed for local training in round `round` (1-based). Shared by
/// every plant and by the baselines, so a single-plant federation retraces
/// local-only training exactly.
pub fn round_shuffle_seed(master_seed: u64, round: u32) -> u64 {
    derive_seed("local-shuffle", &[master_seed, round as u64])
}

/// Metrics after one communication round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    /// Sample-weighted mean of the plants' training MSE under the new global
    /// model, in original target units.
    pub global_train_mse: f64,
    pub per_plant_test_mse: BTreeMap<String, f64>,
    pub weights_used: BTreeMap<String, f64>,
    /// Kept out of the JSON so records compare byte-for-byte across runs.
    #[serde(skip)]
    pub wall_time_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedOutcome {
    pub params: ParameterVector,
    pub records: Vec<RoundRecord>,
    /// Final global model on each plant's test split.
    pub metrics: BTreeMap<String, EvalMetrics>,
}

static INPROC_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Runs a federation inside this process: one thread per plant talking to
/// the coordinator over the in-process transport.
pub fn run_federated(cfg: &FederatedConfig, plants: &[PlantData]) -> Result<FederatedOutcome> {
    let name = format!(
        "federation-{}-{}",
        std::process::id(),
        INPROC_COUNTER.fetch_add(1, Ordering::Relaxed)
    );
    run_federated_on(cfg, plants, &Endpoint::Inproc(name))
}

/// Same as [`run_federated`] over an arbitrary endpoint, e.g. a loopback TCP
/// address. Clients still run as threads of this process.
pub fn run_federated_on(cfg: &FederatedConfig, plants: &[PlantData], endpoint: &Endpoint) -> Result<FederatedOutcome> {
    cfg.validate()?;
    let listener = Listener::bind(endpoint)?;
    let endpoint = listener.endpoint();
    std::thread::scope(|scope| {
        let handles: Vec<_> = plants
            .iter()
            .map(|p| {
                let worker = PlantWorker::new(p, cfg);
                let endpoint = endpoint.clone();
                scope.spawn(move || -> Result<()> {
                    let mut link = transport::connect(&endpoint, cfg.phase_timeout)?;
                    run_client(link.as_mut(), &worker)?;
                    Ok(())
                })
            })
            .collect();
        let outcome = serve(&listener, cfg);
        drop(listener);
        let client_results: Vec<Result<()>> = handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(FedError::Config("plant worker panicked".into()))))
            .collect();
        match outcome {
            Ok(o) => Ok(o),
            Err(server_err) => {
                // A plant's own failure explains the aborted round better.
                let plant_err = client_results
                    .into_iter()
                    .filter_map(|r| r.err())
                    .find(|e| matches!(e, FedError::Train(_) | FedError::Data(_) | FedError::Model(_)));
                Err(plant_err.unwrap_or(server_err))
            }
        }
    })
}
