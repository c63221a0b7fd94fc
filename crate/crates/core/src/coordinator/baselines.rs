//! Centralized and local-only training, the two reference paradigms.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{round_shuffle_seed, FedError, FederatedConfig, PlantData, Result};
use crate::data::PlantDataset;
use crate::model::{init_params, ModelArchitecture, ParameterVector};
use crate::trainer::{evaluate, train_epochs, EvalMetrics, LocalTrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based across the whole run.
    pub epoch: usize,
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentralizedOutcome {
    pub params: ParameterVector,
    pub epochs: Vec<EpochRecord>,
    pub metrics: BTreeMap<String, EvalMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalOnlyResult {
    pub params: ParameterVector,
    pub metrics: EvalMetrics,
}

/// `rounds` blocks of `local.epochs` epochs, each block shuffled with the
/// same seed the federated plants use in that round.
fn train_schedule(
    cfg: &FederatedConfig,
    train_set: &PlantDataset,
) -> Result<(ParameterVector, Vec<f64>)> {
    let mut params = init_params(&cfg.arch, cfg.master_seed);
    let mut losses = Vec::with_capacity(cfg.rounds as usize * cfg.local.epochs);
    for round in 1..=cfg.rounds {
        let local = LocalTrainConfig {
            shuffle_seed: round_shuffle_seed(cfg.master_seed, round),
            ..cfg.local.clone()
        };
        let (next, epoch_losses) = train_epochs(&params, &cfg.arch, train_set, &local)?;
        params = next;
        losses.extend(epoch_losses);
    }
    Ok((params, losses))
}

fn check_plants(cfg: &FederatedConfig, plants: &[PlantData]) -> Result<()> {
    cfg.validate()?;
    if plants.is_empty() {
        return Err(FedError::Config("no plant data supplied".into()));
    }
    Ok(())
}

fn sorted(plants: &[PlantData]) -> Vec<&PlantData> {
    let mut v: Vec<&PlantData> = plants.iter().collect();
    v.sort_by_key(|p| p.descriptor.id);
    v
}

/// Trains one model on every plant's (per-plant standardized) training
/// split, concatenated in ascending plant-id order, and scores it on each
/// plant's test split.
pub fn run_centralized(cfg: &FederatedConfig, plants: &[PlantData]) -> Result<CentralizedOutcome> {
    check_plants(cfg, plants)?;
    let plants = sorted(plants);
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for p in &plants {
        inputs.extend_from_slice(p.prepared.split.train.inputs());
        targets.extend_from_slice(p.prepared.split.train.targets());
    }
    let name = if plants.len() == 1 {
        plants[0].prepared.split.train.plant_id().to_string()
    } else {
        "pooled".to_string()
    };
    let pooled = PlantDataset::new(name, inputs, targets)?;
    let (params, losses) = train_schedule(cfg, &pooled)?;
    let metrics = score_all(&params, &cfg.arch, &plants)?;
    Ok(CentralizedOutcome {
        params,
        epochs: losses
            .into_iter()
            .enumerate()
            .map(|(i, train_loss)| EpochRecord {
                epoch: i + 1,
                train_loss,
            })
            .collect(),
        metrics,
    })
}

fn score_all(
    params: &ParameterVector,
    arch: &ModelArchitecture,
    plants: &[&PlantData],
) -> Result<BTreeMap<String, EvalMetrics>> {
    plants
        .iter()
        .map(|p| {
            let m = evaluate(params, arch, &p.prepared.split.test, &p.prepared.stats)?;
            Ok((p.descriptor.name.clone(), m))
        })
        .collect()
}

/// Trains each plant on its own data only, one thread per plant.
pub fn run_local_only(cfg: &FederatedConfig, plants: &[PlantData]) -> Result<BTreeMap<String, LocalOnlyResult>> {
    check_plants(cfg, plants)?;
    let plants = sorted(plants);
    let results: Vec<Result<(String, LocalOnlyResult)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = plants
            .iter()
            .map(|p| {
                scope.spawn(move || {
                    let (params, _) = train_schedule(cfg, &p.prepared.split.train)?;
                    let metrics = evaluate(&params, &cfg.arch, &p.prepared.split.test, &p.prepared.stats)?;
                    Ok((p.descriptor.name.clone(), LocalOnlyResult { params, metrics }))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(FedError::Config("local trainer panicked".into()))))
            .collect()
    });
    results.into_iter().collect()
}
