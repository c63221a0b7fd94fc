//! The `fedplant` command line: generate synthetic plant data, run the three
//! training paradigms, compare them, and host or join a networked federation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fedplant_core::config::{ConfigError, ExperimentConfig};
use fedplant_core::coordinator::{
    run_centralized, run_client, run_federated, run_local_only, serve, EpochRecord, FedError, PlantData,
    PlantWorker, RoundRecord,
};
use fedplant_core::data::{parse_csv, DataError};
use fedplant_core::synthetic::generate_synthetic_plants;
use fedplant_core::trainer::{EvalMetrics, TrainError};
use fedplant_core::transport::{self, Endpoint, Listener};

pub const SEED_ENV: &str = "FEDPLANT_SEED";
pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const EPOCHS_FILE: &str = "epochs.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const TABLE_HEADER: &str = "plant,centralized_mse,federated_mse,local_only_mse";

#[derive(Debug, Parser)]
#[command(name = "fedplant", version, about = "Federated surrogate modelling across process plants")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write one synthetic CSV per plant.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Generator seed; defaults to the master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train with one paradigm and write its metric files.
    Run {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge a centralized, a federated and a local-only run into one report.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        table: PathBuf,
    },
    /// Coordinate a federation over TCP and write the federated metric files.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        listen: String,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Join a federation as one plant.
    Client {
        #[arg(long)]
        plant: u32,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        connect: String,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Federated,
    Centralized,
    Local,
}

/// A failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub const GENERAL: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const PROTOCOL: i32 = 4;
    pub const DIVERGENCE: i32 = 5;

    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    fn io(what: &Path, e: std::io::Error) -> Self {
        Self::new(Self::GENERAL, format!("{}: {e}", what.display()))
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::new(Self::CONFIG, e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self::new(Self::DATA, e.to_string())
    }
}

impl From<FedError> for CliError {
    fn from(e: FedError) -> Self {
        let code = match &e {
            _ if e.is_divergence() => Self::DIVERGENCE,
            FedError::Config(_) | FedError::Model(_) => Self::CONFIG,
            FedError::Train(TrainError::InvalidConfig(_)) => Self::CONFIG,
            FedError::Data(_) | FedError::Train(_) | FedError::Weights(_) => Self::DATA,
            FedError::Transport(_) | FedError::Aggregation(_) => Self::PROTOCOL,
        };
        Self::new(code, e.to_string())
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

/// Per-run summary written as `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub mode: Mode,
    pub master_seed: u64,
    /// SHA-256 over the plant CSVs in plant-id order; absent for a coordinator,
    /// which never sees the data.
    pub data_digest: Option<String>,
    pub config: ExperimentConfig,
    pub plants: BTreeMap<String, EvalMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantComparison {
    pub plant: String,
    pub centralized_mse: f64,
    pub federated_mse: f64,
    pub local_only_mse: f64,
    /// `100 * (1 - federated / local_only)`.
    pub improvement_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub master_seed: u64,
    pub data_digest: Option<String>,
    pub config: ExperimentConfig,
    pub comparison: Vec<PlantComparison>,
    pub metrics: BTreeMap<String, BTreeMap<String, EvalMetrics>>,
    pub federated_rounds: Vec<RoundRecord>,
    pub centralized_epochs: Vec<EpochRecord>,
}

pub fn improvement_pct(federated_mse: f64, local_only_mse: f64) -> f64 {
    100.0 * (1.0 - federated_mse / local_only_mse)
}

/// Loads the config (defaults when no path is given) and applies the
/// `FEDPLANT_SEED` override.
pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Ok(text) = std::env::var(SEED_ENV) {
        cfg.federated.master_seed = text
            .trim()
            .parse()
            .map_err(|_| CliError::new(CliError::CONFIG, format!("{SEED_ENV}={text:?} is not an unsigned integer")))?;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
        .collect()
}

fn read_plant_file(path: &Path, name: &str) -> Result<(Vec<u8>, fedplant_core::data::RawPlantTable)> {
    let bytes = fs::read(path).map_err(|e| CliError::new(CliError::DATA, format!("{}: {e}", path.display())))?;
    let table = parse_csv(&bytes, name).map_err(|e| CliError::new(CliError::DATA, format!("{}: {e}", path.display())))?;
    Ok((bytes, table))
}

/// Reads and prepares every configured plant from `dir`; returns the plants
/// and a digest of the raw files.
pub fn load_plants(cfg: &ExperimentConfig, dir: &Path) -> Result<(Vec<PlantData>, String)> {
    let mut entries = cfg.plants.clone();
    entries.sort_by_key(|p| p.id);
    let mut hasher = Sha256::new();
    let mut plants = Vec::with_capacity(entries.len());
    for entry in &entries {
        let path = dir.join(entry.file_name());
        let (bytes, table) = read_plant_file(&path, &entry.name)?;
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
        plants.push(cfg.prepare(entry, &table).map_err(|e| CliError::new(CliError::DATA, format!("plant {}: {e}", entry.name)))?);
    }
    let digest = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
    Ok((plants, digest))
}

pub fn cmd_generate(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config)?;
    let seed = seed.unwrap_or(cfg.federated.master_seed);
    let tables = generate_synthetic_plants(&cfg.synthetic, seed).map_err(|e| CliError::new(CliError::CONFIG, e.to_string()))?;
    create_dir(out)?;
    for table in &tables {
        let file = cfg
            .plants
            .iter()
            .find(|p| p.name == table.plant_id())
            .map(|p| p.file_name())
            .unwrap_or_else(|| format!("plant_{}.csv", table.plant_id()));
        write(&out.join(file), table.to_csv().as_bytes())?;
        log::info!("plant {}: {} rows", table.plant_id(), table.len());
    }
    Ok(())
}

fn write_metrics(out: &Path, metrics: &RunMetrics) -> Result<()> {
    write(&out.join(METRICS_FILE), to_json(metrics).as_bytes())
}

pub fn cmd_run(mode: Mode, config: Option<&Path>, data: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let fed_cfg = cfg.federated_config()?;
    let (plants, digest) = load_plants(&cfg, data)?;
    create_dir(out)?;
    let plant_metrics = match mode {
        Mode::Federated => {
            let outcome = run_federated(&fed_cfg, &plants)?;
            write(&out.join(ROUNDS_FILE), to_jsonl(&outcome.records).as_bytes())?;
            outcome.metrics
        }
        Mode::Centralized => {
            let outcome = run_centralized(&fed_cfg, &plants)?;
            write(&out.join(EPOCHS_FILE), to_jsonl(&outcome.epochs).as_bytes())?;
            outcome.metrics
        }
        Mode::Local => run_local_only(&fed_cfg, &plants)?
            .into_iter()
            .map(|(name, r)| (name, r.metrics))
            .collect(),
    };
    for (name, m) in &plant_metrics {
        log::info!("{mode:?} plant {name}: test mse {:.4}, mae {:.4}, r2 {:.4}", m.mse, m.mae, m.r2);
    }
    write_metrics(
        out,
        &RunMetrics {
            mode,
            master_seed: cfg.federated.master_seed,
            data_digest: Some(digest),
            config: cfg,
            plants: plant_metrics,
        },
    )
}

fn read_run(dir: &Path) -> Result<RunMetrics> {
    let path = dir.join(METRICS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError::new(CliError::DATA, format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::new(CliError::DATA, format!("{}: {e}", path.display())))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::new(CliError::DATA, format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CliError::new(CliError::DATA, format!("{}: {e}", path.display()))))
        .collect()
}

pub fn cmd_compare(runs: &[PathBuf], out: &Path, table: &Path) -> Result<()> {
    let mut by_mode: BTreeMap<&'static str, (PathBuf, RunMetrics)> = BTreeMap::new();
    for dir in runs {
        let run = read_run(dir)?;
        let key = match run.mode {
            Mode::Centralized => "centralized",
            Mode::Federated => "federated",
            Mode::Local => "local_only",
        };
        if by_mode.insert(key, (dir.clone(), run)).is_some() {
            return Err(CliError::new(CliError::DATA, format!("more than one {key} run given")));
        }
    }
    let get = |key: &str| {
        by_mode
            .get(key)
            .ok_or_else(|| CliError::new(CliError::DATA, format!("no {key} run among --runs")))
    };
    let (_, central) = get("centralized")?;
    let (fed_dir, fed) = get("federated")?;
    let (_, local) = get("local_only")?;

    for (dir, run) in by_mode.values() {
        if run.master_seed != fed.master_seed {
            return Err(CliError::new(
                CliError::DATA,
                format!("{} used master seed {}, federated run used {}", dir.display(), run.master_seed, fed.master_seed),
            ));
        }
    }
    let digests: Vec<&String> = by_mode.values().filter_map(|(_, r)| r.data_digest.as_ref()).collect();
    if digests.windows(2).any(|w| w[0] != w[1]) {
        return Err(CliError::new(CliError::DATA, "runs were trained on different data"));
    }

    let mut comparison = Vec::new();
    for (plant, f) in &fed.plants {
        let missing = |what: &str| CliError::new(CliError::DATA, format!("{what} run has no plant {plant}"));
        let c = central.plants.get(plant).ok_or_else(|| missing("centralized"))?;
        let l = local.plants.get(plant).ok_or_else(|| missing("local-only"))?;
        comparison.push(PlantComparison {
            plant: plant.clone(),
            centralized_mse: c.mse,
            federated_mse: f.mse,
            local_only_mse: l.mse,
            improvement_pct: improvement_pct(f.mse, l.mse),
        });
    }
    let central_dir = &by_mode["centralized"].0;
    let report = ExperimentReport {
        master_seed: fed.master_seed,
        data_digest: digests.first().map(|d| d.to_string()),
        config: fed.config.clone(),
        comparison,
        metrics: by_mode.iter().map(|(k, (_, r))| (k.to_string(), r.plants.clone())).collect(),
        federated_rounds: read_jsonl(&fed_dir.join(ROUNDS_FILE))?,
        centralized_epochs: read_jsonl(&central_dir.join(EPOCHS_FILE))?,
    };
    write(out, to_json(&report).as_bytes())?;

    let mut csv = String::from(TABLE_HEADER);
    csv.push('\n');
    for row in &report.comparison {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            row.plant, row.centralized_mse, row.federated_mse, row.local_only_mse
        ));
    }
    write(table, csv.as_bytes())?;
    for row in &report.comparison {
        log::info!("plant {}: federated improves on local-only by {:.1}%", row.plant, row.improvement_pct);
    }
    Ok(())
}

fn parse_endpoint(text: &str) -> Result<Endpoint> {
    text.parse().map_err(|e: transport::TransportError| CliError::new(CliError::CONFIG, e.to_string()))
}

pub fn cmd_serve(config: Option<&Path>, listen: &str, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let fed_cfg = cfg.federated_config()?;
    let listener = Listener::bind(&parse_endpoint(listen)?).map_err(|e| CliError::new(CliError::PROTOCOL, e.to_string()))?;
    log::info!("waiting for {} plants on {}", fed_cfg.plants.len(), listener.endpoint());
    let outcome = serve(&listener, &fed_cfg)?;
    create_dir(out)?;
    write(&out.join(ROUNDS_FILE), to_jsonl(&outcome.records).as_bytes())?;
    write_metrics(
        out,
        &RunMetrics {
            mode: Mode::Federated,
            master_seed: cfg.federated.master_seed,
            data_digest: None,
            config: cfg,
            plants: outcome.metrics,
        },
    )
}

pub fn cmd_client(plant: u32, data: &Path, connect: &str, config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let fed_cfg = cfg.federated_config()?;
    // An id the local config does not know still gets to ask; the
    // coordinator decides membership.
    let entry = cfg.plant(plant).cloned().unwrap_or(fedplant_core::config::PlantEntry {
        id: plant,
        name: plant.to_string(),
        file: None,
    });
    let (_, table) = read_plant_file(data, &entry.name)?;
    let prepared = cfg.prepare(&entry, &table)?;
    let worker = PlantWorker::new(&prepared, &fed_cfg);
    let endpoint = parse_endpoint(connect)?;
    let mut link = transport::connect(&endpoint, fed_cfg.phase_timeout).map_err(|e| CliError::new(CliError::PROTOCOL, e.to_string()))?;
    let rounds = run_client(link.as_mut(), &worker)?;
    log::info!("plant {plant}: completed {rounds} rounds");
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out, seed } => cmd_generate(config.as_deref(), &out, seed),
        Command::Run {
            mode,
            config,
            data,
            out,
        } => cmd_run(mode, config.as_deref(), &data, &out),
        Command::Compare { runs, out, table } => cmd_compare(&runs, &out, &table),
        Command::Serve { config, listen, out } => cmd_serve(config.as_deref(), &listen, &out),
        Command::Client {
            plant,
            data,
            connect,
            config,
        } => cmd_client(plant, &data, &connect, config.as_deref()),
    }
}
