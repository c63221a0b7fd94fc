//! The coordinator side of a federation session.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use super::weights::{adaptive_weights, compute_alpha, fedavg_weights, AggregationWeights, AlphaCoefficients};
use super::{FedError, FederatedConfig, FederatedOutcome, PlantDescriptor, Result, RoundRecord, WeightingMode};
use crate::model::{init_params, ModelArchitecture, ParameterVector};
use crate::secagg::{aggregate_masked, AggregationError, MaskedUpdate};
use crate::trainer::EvalMetrics;
use crate::transport::wire::error_code;
use crate::transport::{Link, Listener, Message, TransportError};

struct Session {
    plant: PlantDescriptor,
    link: Box<dyn Link>,
    n_samples: u64,
}

enum Received {
    Plain(Vec<f64>),
    Masked(MaskedUpdate),
}

struct Collected {
    n_samples: u64,
    train_loss: f64,
    body: Received,
}

/// Drives the rounds for one federation. Sessions are kept in ascending
/// plant-id order, which is also the order of weights and summation.
pub struct Coordinator {
    cfg: FederatedConfig,
    sessions: Vec<Session>,
    global: ParameterVector,
    previous_losses: Option<Vec<f64>>,
    records: Vec<RoundRecord>,
    last_metrics: BTreeMap<String, EvalMetrics>,
}

fn remaining(deadline: Instant) -> Duration {
    deadline.saturating_duration_since(Instant::now())
}

fn reject(link: &mut dyn Link, code: u16, text: String) {
    log::warn!("rejecting join: {text}");
    let _ = link.send(&Message::protocol_error(code, text));
}

impl Coordinator {
    /// Accepts connections until every configured plant has joined, then
    /// sends each its JoinAccept. Joins with an unknown id, a foreign
    /// architecture or an id already taken are refused and do not count.
    pub fn accept(listener: &Listener, cfg: &FederatedConfig) -> Result<Self> {
        cfg.validate()?;
        let plants = cfg.plants_by_id();
        let arch_hash = cfg.arch.arch_id().0;
        let deadline = Instant::now() + cfg.phase_timeout;
        let mut joined: BTreeMap<u32, Session> = BTreeMap::new();
        while joined.len() < plants.len() {
            let wait = remaining(deadline);
            if wait.is_zero() {
                return Err(TransportError::Timeout(format!("{} of {} plants", joined.len(), plants.len())).into());
            }
            let mut link = listener.accept(wait)?;
            let (plant_id, hash, n_samples) = match link.recv(remaining(deadline).max(Duration::from_millis(1))) {
                Ok(Message::JoinRequest {
                    plant_id,
                    arch_hash,
                    n_samples,
                }) => (plant_id, arch_hash, n_samples),
                Ok(other) => {
                    reject(
                        link.as_mut(),
                        error_code::UNEXPECTED_MESSAGE,
                        format!("expected JoinRequest, got {}", other.name()),
                    );
                    continue;
                }
                Err(e) => {
                    log::warn!("dropping connection during join: {e}");
                    continue;
                }
            };
            let Some(plant) = plants.iter().find(|p| p.id == plant_id) else {
                reject(link.as_mut(), error_code::UNKNOWN_PLANT, format!("unknown plant id {plant_id}"));
                continue;
            };
            if hash != arch_hash {
                reject(
                    link.as_mut(),
                    error_code::ARCH_MISMATCH,
                    format!("architecture hash {hash:016x} does not match {arch_hash:016x}"),
                );
                continue;
            }
            if joined.contains_key(&plant_id) {
                reject(link.as_mut(), error_code::DUPLICATE_PLANT, format!("plant {plant_id} already joined"));
                continue;
            }
            if n_samples == 0 {
                reject(link.as_mut(), error_code::UNKNOWN_PLANT, format!("plant {plant_id} has no training samples"));
                continue;
            }
            log::info!("plant {} ({}) joined with {n_samples} samples", plant.id, plant.name);
            joined.insert(
                plant_id,
                Session {
                    plant: plant.clone(),
                    link,
                    n_samples,
                },
            );
        }
        let peer_ids: Vec<u32> = plants.iter().map(|p| p.id).collect();
        let accept = Message::JoinAccept {
            round_count: cfg.rounds,
            q: cfg.arch.parameter_count() as u32,
            quant: cfg.quant,
            peer_ids,
            weighting: cfg.weighting,
            secure: cfg.secure,
        };
        let mut sessions: Vec<Session> = joined.into_values().collect();
        for s in &mut sessions {
            s.link.send(&accept)?;
        }
        Ok(Self {
            cfg: cfg.clone(),
            sessions,
            global: init_params(&cfg.arch, cfg.master_seed),
            previous_losses: None,
            records: Vec::new(),
            last_metrics: BTreeMap::new(),
        })
    }

    pub fn global(&self) -> &ParameterVector {
        &self.global
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    fn weights(&self) -> Result<AggregationWeights> {
        let counts: Vec<u64> = self.sessions.iter().map(|s| s.n_samples).collect();
        let w = match self.cfg.weighting {
            WeightingMode::Fedavg => fedavg_weights(&counts)?,
            WeightingMode::Adaptive => {
                let alphas = match (self.cfg.alpha_overrides_by_id(), &self.previous_losses) {
                    (Some(a), _) => a,
                    (None, Some(losses)) => compute_alpha(losses, self.cfg.alpha_mean)?,
                    (None, None) => AlphaCoefficients(vec![1.0; counts.len()]),
                };
                adaptive_weights(&counts, &alphas)?
            }
        };
        Ok(w)
    }

    fn broadcast(&mut self, msg: &Message) -> Result<()> {
        for s in &mut self.sessions {
            s.link.send(msg)?;
        }
        Ok(())
    }

    /// Tells every plant the round is off. Best effort: the links may
    /// already be gone.
    fn abort(&mut self, reason: &str) {
        for s in &mut self.sessions {
            let _ = s.link.send(&Message::protocol_error(error_code::ROUND_ABORTED, reason));
        }
    }

    fn collect_updates(&mut self, round: u32, deadline: Instant) -> Result<Vec<Collected>> {
        let secure = self.cfg.secure;
        let q = self.cfg.arch.parameter_count();
        let mut out = Vec::with_capacity(self.sessions.len());
        for s in &mut self.sessions {
            let id = s.plant.id;
            let violation = |link: &mut Box<dyn Link>, code, text: String| {
                let _ = link.send(&Message::protocol_error(code, text.clone()));
                FedError::Transport(TransportError::Violation(format!("plant {id}: {text}")))
            };
            let msg = s.link.recv(remaining(deadline)).map_err(|e| match e {
                TransportError::Timeout(_) => TransportError::Timeout(format!("update from plant {id} in round {round}")),
                other => other,
            })?;
            let collected = match msg {
                Message::LocalUpdatePlain {
                    round: r,
                    plant_id,
                    n_samples,
                    train_loss,
                    params,
                } if !secure => {
                    if plant_id != id {
                        return Err(violation(&mut s.link, error_code::UNKNOWN_PLANT, format!("update claims plant {plant_id}")));
                    }
                    if params.len() != q {
                        return Err(violation(&mut s.link, error_code::ARCH_MISMATCH, format!("{} parameters, expected {q}", params.len())));
                    }
                    if r != round {
                        return Err(violation(&mut s.link, error_code::ROUND_REGRESSION, format!("update for round {r} in round {round}")));
                    }
                    Collected {
                        n_samples,
                        train_loss,
                        body: Received::Plain(params),
                    }
                }
                Message::LocalUpdateMasked {
                    round: r,
                    update,
                    n_samples,
                    train_loss,
                } if secure => {
                    if update.plant_id != id {
                        return Err(violation(
                            &mut s.link,
                            error_code::UNKNOWN_PLANT,
                            format!("update claims plant {}", update.plant_id),
                        ));
                    }
                    if r != round {
                        return Err(violation(&mut s.link, error_code::ROUND_REGRESSION, format!("update for round {r} in round {round}")));
                    }
                    Collected {
                        n_samples,
                        train_loss,
                        body: Received::Masked(update),
                    }
                }
                Message::ProtocolError { code, text } => {
                    return Err(TransportError::Remote {
                        code,
                        text: format!("plant {id}: {text}"),
                    }
                    .into())
                }
                other => {
                    return Err(violation(
                        &mut s.link,
                        error_code::UNEXPECTED_MESSAGE,
                        format!("unexpected {} while waiting for update", other.name()),
                    ))
                }
            };
            if collected.n_samples == 0 {
                return Err(violation(&mut s.link, error_code::UNKNOWN_PLANT, "update reports zero samples".into()));
            }
            s.n_samples = collected.n_samples;
            out.push(collected);
        }
        Ok(out)
    }

    fn aggregate(&self, round: u32, updates: Vec<Collected>, weights: &AggregationWeights) -> Result<ParameterVector> {
        let arch: &ModelArchitecture = &self.cfg.arch;
        if self.cfg.secure {
            let masked: Vec<MaskedUpdate> = updates
                .into_iter()
                .map(|c| match c.body {
                    Received::Masked(m) => m,
                    Received::Plain(_) => unreachable!("checked while collecting"),
                })
                .collect();
            let ids: Vec<u32> = self.sessions.iter().map(|s| s.plant.id).collect();
            return Ok(aggregate_masked(&masked, &ids, round, &self.cfg.quant, arch)?);
        }
        let mut acc: Vec<f64> = Vec::new();
        for (c, &w) in updates.into_iter().zip(weights.as_slice()) {
            let Received::Plain(params) = c.body else {
                unreachable!("checked while collecting")
            };
            if acc.is_empty() {
                acc = params.iter().map(|v| w * v).collect();
            } else {
                for (a, v) in acc.iter_mut().zip(&params) {
                    *a += w * v;
                }
            }
        }
        if acc.is_empty() {
            return Err(AggregationError::Empty.into());
        }
        Ok(ParameterVector::new(acc, arch)?)
    }

    fn evaluate(&mut self, round: u32, deadline: Instant) -> Result<(f64, BTreeMap<String, EvalMetrics>)> {
        self.broadcast(&Message::EvalRequest {
            round,
            params: self.global.values().to_vec(),
        })?;
        let mut weighted = 0.0;
        let mut total = 0.0;
        let mut metrics = BTreeMap::new();
        for s in &mut self.sessions {
            let id = s.plant.id;
            match s.link.recv(remaining(deadline))? {
                Message::EvalReport {
                    round: r,
                    plant_id,
                    train_mse,
                    test,
                } if r == round && plant_id == id => {
                    weighted += s.n_samples as f64 * train_mse;
                    total += s.n_samples as f64;
                    metrics.insert(s.plant.name.clone(), test);
                }
                Message::ProtocolError { code, text } => {
                    return Err(TransportError::Remote {
                        code,
                        text: format!("plant {id}: {text}"),
                    }
                    .into())
                }
                other => {
                    let text = format!("unexpected {} while waiting for evaluation", other.name());
                    let _ = s.link.send(&Message::protocol_error(error_code::UNEXPECTED_MESSAGE, text.clone()));
                    return Err(TransportError::Violation(format!("plant {id}: {text}")).into());
                }
            }
        }
        Ok((weighted / total, metrics))
    }

    /// One communication round: broadcast, barrier, aggregate, evaluate.
    pub fn run_round(&mut self, round: u32) -> Result<&RoundRecord> {
        let start = Instant::now();
        let deadline = start + self.cfg.phase_timeout;
        let weights = self.weights()?;
        self.broadcast(&Message::GlobalModel {
            round,
            params: self.global.values().to_vec(),
            weights: weights.0.clone(),
        })?;
        let updates = self.collect_updates(round, deadline)?;
        self.broadcast(&Message::RoundAck { round })?;
        self.previous_losses = Some(
            updates
                .iter()
                .map(|c| c.train_loss.max(f64::MIN_POSITIVE))
                .collect(),
        );
        self.global = self.aggregate(round, updates, &weights)?;

        let deadline = Instant::now() + self.cfg.phase_timeout;
        let (global_train_mse, metrics) = self.evaluate(round, deadline)?;
        let record = RoundRecord {
            round,
            global_train_mse,
            per_plant_test_mse: metrics.iter().map(|(k, m)| (k.clone(), m.mse)).collect(),
            weights_used: self
                .sessions
                .iter()
                .zip(&weights.0)
                .map(|(s, &w)| (s.plant.name.clone(), w))
                .collect(),
            wall_time_ms: start.elapsed().as_millis() as u64,
        };
        log::info!("round {round}: global train mse {global_train_mse:.6}");
        self.last_metrics = metrics;
        self.records.push(record);
        Ok(self.records.last().expect("just pushed"))
    }

    /// Runs every configured round, then shuts the plants down.
    pub fn run(mut self) -> Result<FederatedOutcome> {
        for round in 1..=self.cfg.rounds {
            if let Err(e) = self.run_round(round) {
                log::error!("round {round} aborted: {e}");
                self.abort(&format!("round {round} aborted: {e}"));
                return Err(e);
            }
        }
        self.broadcast(&Message::Shutdown)?;
        Ok(FederatedOutcome {
            params: self.global,
            records: self.records,
            metrics: self.last_metrics,
        })
    }
}

/// Accepts the configured plants on `listener` and runs the federation.
pub fn serve(listener: &Listener, cfg: &FederatedConfig) -> Result<FederatedOutcome> {
    Coordinator::accept(listener, cfg)?.run()
}
