//! The plant side of a federation session.

use std::time::Duration;

use super::{round_shuffle_seed, FedError, FederatedConfig, PlantData, Result};
use crate::data::PreparedPlant;
use crate::model::{ModelArchitecture, ParameterVector};
use crate::secagg::{mask_update, MaskSeedMatrix, QuantizationSpec};
use crate::trainer::{evaluate, train_local, LocalTrainConfig};
use crate::transport::wire::error_code;
use crate::transport::{Link, Message, TransportError};

/// Everything a plant holds locally: its data, the shared model definition
/// and the pre-shared mask secret.
#[derive(Debug, Clone)]
pub struct PlantWorker {
    pub plant_id: u32,
    pub arch: ModelArchitecture,
    pub data: PreparedPlant,
    pub local: LocalTrainConfig,
    pub master_seed: u64,
    pub mask_secret: u64,
    pub timeout: Duration,
}

impl PlantWorker {
    pub fn new(plant: &PlantData, cfg: &FederatedConfig) -> Self {
        Self {
            plant_id: plant.descriptor.id,
            arch: cfg.arch.clone(),
            data: plant.prepared.clone(),
            local: cfg.local.clone(),
            master_seed: cfg.master_seed,
            mask_secret: cfg.mask_secret,
            timeout: cfg.phase_timeout,
        }
    }
}

struct Session {
    peers: Vec<u32>,
    seeds: MaskSeedMatrix,
    secure: bool,
    quant: QuantizationSpec,
    position: usize,
    q: usize,
}

fn violation(link: &mut dyn Link, code: u16, text: String) -> FedError {
    let _ = link.send(&Message::protocol_error(code, text.clone()));
    FedError::Transport(TransportError::Violation(text))
}

/// Joins the federation on `link` and serves rounds until shutdown. Returns
/// the number of rounds acknowledged.
pub fn run_client(link: &mut dyn Link, worker: &PlantWorker) -> Result<u32> {
    let n_samples = worker.data.split.train.n_samples() as u64;
    link.send(&Message::JoinRequest {
        plant_id: worker.plant_id,
        arch_hash: worker.arch.arch_id().0,
        n_samples,
    })?;
    let session = match link.recv(worker.timeout)? {
        Message::JoinAccept {
            q,
            quant,
            peer_ids,
            secure,
            ..
        } => {
            let position = peer_ids
                .iter()
                .position(|&id| id == worker.plant_id)
                .ok_or_else(|| violation(link, error_code::UNKNOWN_PLANT, "own id missing from peer list".into()))?;
            Session {
                seeds: MaskSeedMatrix::from_shared_secret(worker.mask_secret, &peer_ids),
                peers: peer_ids.iter().copied().filter(|&id| id != worker.plant_id).collect(),
                secure,
                quant,
                position,
                q: q as usize,
            }
        }
        Message::ProtocolError { code, text } => return Err(TransportError::Remote { code, text }.into()),
        other => {
            return Err(violation(
                link,
                error_code::UNEXPECTED_MESSAGE,
                format!("expected JoinAccept, got {}", other.name()),
            ))
        }
    };
    if session.q != worker.arch.parameter_count() {
        return Err(violation(
            link,
            error_code::ARCH_MISMATCH,
            format!("coordinator expects {} parameters", session.q),
        ));
    }

    let mut last_acked: Option<u32> = None;
    loop {
        match link.recv(worker.timeout)? {
            Message::GlobalModel { round, params, weights } => {
                if let Some(acked) = last_acked.filter(|&a| a >= round) {
                    let _ = link.send(&Message::protocol_error(
                        error_code::ROUND_REGRESSION,
                        format!("round {round} after ack of {acked}"),
                    ));
                    return Err(TransportError::RoundRegression {
                        received: round,
                        acked,
                    }
                    .into());
                }
                let global = ParameterVector::new(params, &worker.arch)
                    .map_err(|e| violation(link, error_code::ARCH_MISMATCH, e.to_string()))?;
                let weight = *weights.get(session.position).ok_or_else(|| {
                    violation(link, error_code::LENGTH_MISMATCH, "weight vector too short".into())
                })?;
                let cfg = LocalTrainConfig {
                    shuffle_seed: round_shuffle_seed(worker.master_seed, round),
                    ..worker.local.clone()
                };
                let update = match train_local(worker.plant_id, &global, &worker.arch, &worker.data.split.train, &cfg) {
                    Ok(u) => u,
                    Err(e) => {
                        let _ = link.send(&Message::protocol_error(error_code::TRAINING_FAILED, e.to_string()));
                        return Err(e.into());
                    }
                };
                let reply = if session.secure {
                    let masked = mask_update(
                        update.params.values(),
                        weight,
                        worker.plant_id,
                        &session.peers,
                        &session.seeds,
                        round,
                        &session.quant,
                    )?;
                    Message::LocalUpdateMasked {
                        round,
                        update: masked,
                        n_samples: update.n_samples,
                        train_loss: update.train_loss_final,
                    }
                } else {
                    Message::LocalUpdatePlain {
                        round,
                        plant_id: worker.plant_id,
                        n_samples: update.n_samples,
                        train_loss: update.train_loss_final,
                        params: update.params.into_values(),
                    }
                };
                link.send(&reply)?;
            }
            Message::RoundAck { round } => last_acked = Some(round),
            Message::EvalRequest { round, params } => {
                let global = ParameterVector::new(params, &worker.arch)
                    .map_err(|e| violation(link, error_code::ARCH_MISMATCH, e.to_string()))?;
                let split = &worker.data.split;
                let train = evaluate(&global, &worker.arch, &split.train, &worker.data.stats)?;
                let test = evaluate(&global, &worker.arch, &split.test, &worker.data.stats)?;
                link.send(&Message::EvalReport {
                    round,
                    plant_id: worker.plant_id,
                    train_mse: train.mse,
                    test,
                })?;
            }
            Message::Shutdown => return Ok(last_acked.unwrap_or(0)),
            Message::ProtocolError { code, text } => return Err(TransportError::Remote { code, text }.into()),
            other => {
                return Err(violation(
                    link,
                    error_code::UNEXPECTED_MESSAGE,
                    format!("unexpected {}", other.name()),
                ))
            }
        }
    }
}
