//! The experiment file: one TOML document describing the federation, the
//! model, data preparation and the synthetic generator.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordinator::{FederatedConfig, PlantData, PlantDescriptor, WeightingMode};
use crate::data::{prepare_plant, DataError, RawPlantTable, WindowSpec};
use crate::model::{Activation, ModelArchitecture};
use crate::secagg::QuantizationSpec;
use crate::seeds::derive_seed;
use crate::synthetic::{SyntheticConfig, INPUT_COLUMNS, TARGET_COLUMN};
use crate::trainer::LocalTrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederatedSection {
    pub rounds: u32,
    pub weighting: WeightingMode,
    pub alpha_overrides: Option<Vec<f64>>,
    pub alpha_mean: f64,
    pub secure: bool,
    pub master_seed: u64,
    /// Shared by the plants, never by the coordinator. Derived from
    /// `master_seed` when absent.
    pub mask_secret: Option<u64>,
    pub phase_timeout_secs: f64,
}

impl Default for FederatedSection {
    fn default() -> Self {
        Self {
            rounds: 40,
            weighting: WeightingMode::Fedavg,
            alpha_overrides: None,
            alpha_mean: 1.0,
            secure: true,
            master_seed: 42,
            mask_secret: None,
            phase_timeout_secs: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_layers: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden_layers: vec![64, 64],
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for LocalSection {
    fn default() -> Self {
        let d = LocalTrainConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub window_length: usize,
    pub horizon: usize,
    pub feature_columns: Vec<String>,
    pub target_columns: Vec<String>,
    pub split_fraction: f64,
    pub outlier_k: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            window_length: 4,
            horizon: 0,
            feature_columns: INPUT_COLUMNS.iter().map(|s| s.to_string()).collect(),
            target_columns: vec![TARGET_COLUMN.to_string()],
            split_fraction: 0.8,
            outlier_k: 5.0,
        }
    }
}

impl DataSection {
    pub fn window_spec(&self) -> WindowSpec {
        WindowSpec {
            window_length: self.window_length,
            feature_columns: self.feature_columns.clone(),
            target_columns: self.target_columns.clone(),
            horizon: self.horizon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantEntry {
    pub id: u32,
    pub name: String,
    /// CSV file name relative to the data directory; `plant_<name>.csv`
    /// when absent.
    #[serde(default)]
    pub file: Option<String>,
}

impl PlantEntry {
    pub fn file_name(&self) -> String {
        self.file.clone().unwrap_or_else(|| format!("plant_{}.csv", self.name))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub federated: FederatedSection,
    pub model: ModelSection,
    pub local: LocalSection,
    pub quantization: QuantizationSpec,
    pub data: DataSection,
    pub plants: Vec<PlantEntry>,
    pub synthetic: SyntheticConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let synthetic = SyntheticConfig::default();
        let plants = synthetic
            .plants
            .iter()
            .enumerate()
            .map(|(i, p)| PlantEntry {
                id: i as u32 + 1,
                name: p.name.clone(),
                file: None,
            })
            .collect();
        Self {
            federated: FederatedSection::default(),
            model: ModelSection::default(),
            local: LocalSection::default(),
            quantization: QuantizationSpec::default(),
            data: DataSection::default(),
            plants,
            synthetic,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| ConfigError::Invalid(m);
        self.data.window_spec().validate().map_err(|e| invalid(e.to_string()))?;
        if !(self.data.split_fraction > 0.0 && self.data.split_fraction < 1.0) {
            return Err(invalid(format!("split_fraction must lie in (0, 1), got {}", self.data.split_fraction)));
        }
        if !(self.data.outlier_k > 0.0) {
            return Err(invalid("outlier_k must be positive".into()));
        }
        if !(self.federated.phase_timeout_secs > 0.0 && self.federated.phase_timeout_secs.is_finite()) {
            return Err(invalid("phase_timeout_secs must be positive".into()));
        }
        self.federated_config()?;
        Ok(())
    }

    pub fn architecture(&self) -> Result<ModelArchitecture, ConfigError> {
        let spec = self.data.window_spec();
        ModelArchitecture::new(
            spec.input_dim(),
            self.model.hidden_layers.clone(),
            spec.output_dim(),
            self.model.activation,
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn mask_secret(&self) -> u64 {
        self.federated
            .mask_secret
            .unwrap_or_else(|| derive_seed("mask-secret", &[self.federated.master_seed]))
    }

    pub fn federated_config(&self) -> Result<FederatedConfig, ConfigError> {
        let cfg = FederatedConfig {
            rounds: self.federated.rounds,
            plants: self
                .plants
                .iter()
                .map(|p| PlantDescriptor {
                    id: p.id,
                    name: p.name.clone(),
                })
                .collect(),
            arch: self.architecture()?,
            local: LocalTrainConfig {
                epochs: self.local.epochs,
                batch_size: self.local.batch_size,
                learning_rate: self.local.learning_rate,
                shuffle_seed: 0,
            },
            weighting: self.federated.weighting,
            alpha_overrides: self.federated.alpha_overrides.clone(),
            alpha_mean: self.federated.alpha_mean,
            quant: self.quantization,
            secure: self.federated.secure,
            master_seed: self.federated.master_seed,
            mask_secret: self.mask_secret(),
            phase_timeout: Duration::from_secs_f64(self.federated.phase_timeout_secs.min(1e9)),
        };
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn plant(&self, id: u32) -> Option<&PlantEntry> {
        self.plants.iter().find(|p| p.id == id)
    }

    /// Cleans, windows, splits and standardizes one plant's table.
    pub fn prepare(&self, entry: &PlantEntry, table: &RawPlantTable) -> Result<PlantData, DataError> {
        let prepared = prepare_plant(table, &self.data.window_spec(), self.data.split_fraction, self.data.outlier_k)?;
        Ok(PlantData {
            descriptor: PlantDescriptor {
                id: entry.id,
                name: entry.name.clone(),
            },
            prepared,
        })
    }
}
