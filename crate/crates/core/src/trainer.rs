//! Local training at one plant and the evaluation metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{NormalizationStats, PlantDataset};
use crate::model::{forward, loss_gradient_over, sgd_step, ModelArchitecture, ModelError, ParameterVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid local training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at plant {plant}, epoch {epoch}: {source}")]
    Diverged {
        plant: String,
        epoch: usize,
        #[source]
        source: ModelError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("test targets are constant but predictions are not; R^2 is undefined")]
    DegenerateTargets,
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Base seed for per-epoch shuffling; epoch `e` shuffles with `seed + e`.
    pub shuffle_seed: u64,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            learning_rate: 0.01,
            shuffle_seed: 0,
        }
    }
}

impl LocalTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch size must be at least 1".into()));
        }
        // Zero is accepted: it yields a null update, used for protocol checks.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// What a plant hands back after its local phase. Carries no sample data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalUpdate {
    pub plant_id: u32,
    pub params: ParameterVector,
    pub n_samples: u64,
    pub train_loss_final: f64,
}

/// Runs `cfg.epochs` epochs of shuffled mini-batch SGD from `start` and
/// returns the final parameters and each epoch's mean training loss.
pub fn train_epochs(
    start: &ParameterVector,
    arch: &ModelArchitecture,
    train_set: &PlantDataset,
    cfg: &LocalTrainConfig,
) -> Result<(ParameterVector, Vec<f64>)> {
    cfg.validate()?;
    let n = train_set.n_samples();
    let mut params = start.clone();
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let inputs = train_set.inputs();
    let targets = train_set.targets();
    for epoch in 0..cfg.epochs {
        let diverged = |source| TrainError::Diverged {
            plant: train_set.plant_id().to_string(),
            epoch,
            source,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed.wrapping_add(epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut weighted_loss = 0.0;
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for chunk in order.chunks(cfg.batch_size) {
            // Membership comes from the shuffle; summing in index order makes a
            // full batch reproduce the plain full-batch gradient exactly.
            batch.clear();
            batch.extend_from_slice(chunk);
            batch.sort_unstable();
            let samples = batch
                .iter()
                .map(|&i| (inputs[i].as_slice(), targets[i].as_slice()));
            let (loss, grad) = loss_gradient_over(&params, arch, samples, batch.len()).map_err(|e| match e {
                ModelError::NonFinite { .. } => diverged(e),
                other => TrainError::Model(other),
            })?;
            weighted_loss += loss * batch.len() as f64;
            params = sgd_step(&params, &grad, cfg.learning_rate).map_err(|e| match e {
                ModelError::NonFinite { .. } => diverged(e),
                other => TrainError::Model(other),
            })?;
        }
        epoch_losses.push(weighted_loss / n as f64);
    }
    Ok((params, epoch_losses))
}

/// One plant's local phase, starting from the received global parameters.
pub fn train_local(
    plant_id: u32,
    global_params: &ParameterVector,
    arch: &ModelArchitecture,
    train_set: &PlantDataset,
    cfg: &LocalTrainConfig,
) -> Result<LocalUpdate> {
    let (params, losses) = train_epochs(global_params, arch, train_set, cfg)?;
    Ok(LocalUpdate {
        plant_id,
        params,
        n_samples: train_set.n_samples() as u64,
        train_loss_final: *losses.last().expect("at least one epoch"),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mse: f64,
    pub mae: f64,
    pub r2: f64,
}

/// Scores raw-unit predictions against raw-unit targets.
pub fn score(predictions: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<EvalMetrics> {
    if targets.is_empty() {
        return Err(TrainError::EmptyTestSet);
    }
    let n = targets.len() as f64;
    let p = targets[0].len();
    let mut mean = vec![0.0; p];
    for y in targets {
        for (m, v) in mean.iter_mut().zip(y) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);

    let (mut sse, mut sae, mut sst) = (0.0, 0.0, 0.0);
    for (yh, y) in predictions.iter().zip(targets) {
        for j in 0..p {
            let r = yh[j] - y[j];
            sse += r * r;
            sae += r.abs();
            sst += (y[j] - mean[j]) * (y[j] - mean[j]);
        }
    }
    let r2 = if sst > 0.0 {
        1.0 - sse / sst
    } else if sse == 0.0 {
        1.0
    } else {
        return Err(TrainError::DegenerateTargets);
    };
    Ok(EvalMetrics {
        mse: sse / n,
        mae: sae / (n * p as f64),
        r2,
    })
}

/// MSE, MAE and R^2 on a standardized test set, measured in original target
/// units after undoing the target standardization.
pub fn evaluate(
    params: &ParameterVector,
    arch: &ModelArchitecture,
    test_set: &PlantDataset,
    norm_stats: &NormalizationStats,
) -> Result<EvalMetrics> {
    let mut predictions = Vec::with_capacity(test_set.n_samples());
    let mut targets = Vec::with_capacity(test_set.n_samples());
    for (x, y) in test_set.inputs().iter().zip(test_set.targets()) {
        let yh = forward(params, arch, x)?;
        predictions.push(norm_stats.targets.invert_row(&yh));
        targets.push(norm_stats.targets.invert_row(y));
    }
    score(&predictions, &targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ColumnStats;
    use crate::model::{init_params, loss_gradient, Activation};

    fn identity_stats() -> NormalizationStats {
        let unit = ColumnStats {
            mean: vec![0.0],
            std: vec![1.0],
        };
        NormalizationStats {
            features: unit.clone(),
            targets: unit,
            warnings: vec![],
        }
    }

    fn small_set() -> PlantDataset {
        let inputs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 / 10.0, 1.0 - i as f64 / 7.0]).collect();
        let targets = inputs.iter().map(|x| vec![x[0] * 2.0 - x[1]]).collect();
        PlantDataset::new("P", inputs, targets).unwrap()
    }

    #[test]
    fn full_batch_single_epoch_is_one_sgd_step() {
        let arch = ModelArchitecture::new(2, vec![3], 1, Activation::Tanh).unwrap();
        let start = init_params(&arch, 4);
        let ds = small_set();
        let cfg = LocalTrainConfig {
            epochs: 1,
            batch_size: ds.n_samples(),
            learning_rate: 0.1,
            shuffle_seed: 77,
        };
        let update = train_local(2, &start, &arch, &ds, &cfg).unwrap();
        let (_, g) = loss_gradient(&start, &arch, ds.inputs(), ds.targets()).unwrap();
        assert_eq!(update.params, sgd_step(&start, &g, 0.1).unwrap());
        assert_eq!(update.n_samples, 10);
        assert_eq!(update.plant_id, 2);
    }

    #[test]
    fn zero_learning_rate_is_null_update() {
        let arch = ModelArchitecture::new(2, vec![4], 1, Activation::Relu).unwrap();
        let start = init_params(&arch, 1);
        let cfg = LocalTrainConfig {
            epochs: 3,
            batch_size: 4,
            learning_rate: 0.0,
            shuffle_seed: 0,
        };
        let update = train_local(0, &start, &arch, &small_set(), &cfg).unwrap();
        assert_eq!(update.params, start);
    }

    #[test]
    fn divergence_names_plant_and_epoch() {
        let arch = ModelArchitecture::new(2, vec![], 1, Activation::Relu).unwrap();
        let start = init_params(&arch, 1);
        let inputs = vec![vec![1e150, 1e150]; 4];
        let ds = PlantDataset::new("Z", inputs, vec![vec![0.0]; 4]).unwrap();
        let cfg = LocalTrainConfig {
            learning_rate: 1.0,
            batch_size: 1,
            ..Default::default()
        };
        match train_local(0, &start, &arch, &ds, &cfg) {
            Err(TrainError::Diverged { plant, epoch, .. }) => {
                assert_eq!(plant, "Z");
                assert_eq!(epoch, 0);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let bad = [
            LocalTrainConfig { epochs: 0, ..Default::default() },
            LocalTrainConfig { batch_size: 0, ..Default::default() },
            LocalTrainConfig { learning_rate: -0.1, ..Default::default() },
            LocalTrainConfig { learning_rate: f64::NAN, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn metric_examples() {
        let perfect = score(&[vec![1.0], vec![3.0]], &[vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(perfect, EvalMetrics { mse: 0.0, mae: 0.0, r2: 1.0 });

        let mean_pred = score(&[vec![3.0], vec![3.0]], &[vec![1.0], vec![5.0]]).unwrap();
        assert_eq!(mean_pred.r2, 0.0);

        let m = score(&[vec![2.0], vec![4.0]], &[vec![1.0], vec![5.0]]).unwrap();
        assert_eq!(m, EvalMetrics { mse: 1.0, mae: 1.0, r2: 0.75 });

        assert_eq!(score(&[vec![2.0]], &[vec![2.0]]).unwrap().r2, 1.0);
        assert_eq!(score(&[vec![1.0]], &[vec![2.0]]), Err(TrainError::DegenerateTargets));
        assert_eq!(score(&[], &[]), Err(TrainError::EmptyTestSet));
    }

    #[test]
    fn evaluate_reports_original_units() {
        let arch = ModelArchitecture::new(1, vec![], 1, Activation::Relu).unwrap();
        // predicts 0 in standardized units, i.e. the target mean 10
        let params = ParameterVector::new(vec![0.0, 0.0], &arch).unwrap();
        let mut stats = identity_stats();
        stats.targets = ColumnStats {
            mean: vec![10.0],
            std: vec![2.0],
        };
        let ds = PlantDataset::new("P", vec![vec![0.0], vec![0.0]], vec![vec![-1.0], vec![1.0]]).unwrap();
        let m = evaluate(&params, &arch, &ds, &stats).unwrap();
        // raw targets 8 and 12, prediction 10 for both
        assert_eq!(m.mse, 4.0);
        assert_eq!(m.mae, 2.0);
        assert_eq!(m.r2, 0.0);
    }
}
