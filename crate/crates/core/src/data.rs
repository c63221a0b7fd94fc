//! Per-plant preprocessing: CSV ingestion, cleaning, z-score normalization,
//! sliding windows and the chronological train/test split.
//!
//! Every function here takes a single plant's table. Nothing accepts two
//! plants' raw rows at once, which keeps measurements inside their plant.

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower bound applied to fitted standard deviations.
pub const MIN_STD: f64 = 1e-8;

/// MAD to standard deviation factor for normally distributed data.
const MAD_SCALE: f64 = 1.4826;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("empty CSV input")]
    Empty,
    #[error("CSV error: {0}")]
    Csv(String),
    #[error("row {row}: expected {expected} fields, found {found}")]
    Ragged {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row}: cannot parse timestamp {text:?}")]
    BadTimestamp { row: usize, text: String },
    #[error("row {row}: timestamp not strictly increasing")]
    UnsortedTimestamps { row: usize },
    #[error("cleaning removed every row of plant {0}")]
    AllRowsRemoved(String),
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
    #[error("column {0:?} is used both as feature and target")]
    OverlappingColumns(String),
    #[error("window spec: {0}")]
    InvalidWindow(String),
    #[error("table still contains missing values; clean it first")]
    MissingValues,
    #[error("need at least {needed} rows, have {available}")]
    TooFewRows { needed: usize, available: usize },
    #[error("split fraction {fraction} of {samples} samples leaves an empty side")]
    EmptySplit { fraction: f64, samples: usize },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("cannot fit normalization on zero rows")]
    NoRows,
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// A plant's time series as read from disk, before any cleaning.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPlantTable {
    plant_id: String,
    timestamp_name: String,
    column_names: Vec<String>,
    timestamps: Vec<i64>,
    rows: Vec<Vec<Option<f64>>>,
}

impl RawPlantTable {
    pub fn new(
        plant_id: impl Into<String>,
        timestamp_name: impl Into<String>,
        column_names: Vec<String>,
        timestamps: Vec<i64>,
        rows: Vec<Vec<Option<f64>>>,
    ) -> Result<Self> {
        if timestamps.len() != rows.len() {
            return Err(DataError::InvalidDataset(format!(
                "{} timestamps for {} rows",
                timestamps.len(),
                rows.len()
            )));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != column_names.len() {
                return Err(DataError::Ragged {
                    row: i,
                    expected: column_names.len(),
                    found: row.len(),
                });
            }
        }
        if let Some(i) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(DataError::UnsortedTimestamps { row: i + 1 });
        }
        Ok(Self {
            plant_id: plant_id.into(),
            timestamp_name: timestamp_name.into(),
            column_names,
            timestamps,
            rows,
        })
    }

    pub fn plant_id(&self) -> &str {
        &self.plant_id
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn rows(&self) -> &[Vec<Option<f64>>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.column_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| DataError::UnknownColumn(name.to_string()))
    }

    fn retain_rows(&self, keep: &[bool]) -> Self {
        let mut timestamps = Vec::new();
        let mut rows = Vec::new();
        for ((ts, row), &k) in self.timestamps.iter().zip(&self.rows).zip(keep) {
            if k {
                timestamps.push(*ts);
                rows.push(row.clone());
            }
        }
        Self {
            plant_id: self.plant_id.clone(),
            timestamp_name: self.timestamp_name.clone(),
            column_names: self.column_names.clone(),
            timestamps,
            rows,
        }
    }

    /// Writes the table in the same CSV layout [`parse_csv`] reads. Missing
    /// cells become empty fields.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.timestamp_name);
        for c in &self.column_names {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (ts, row) in self.timestamps.iter().zip(&self.rows) {
            out.push_str(&ts.to_string());
            for cell in row {
                out.push(',');
                if let Some(v) = cell {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        out
    }
}

fn parse_timestamp(text: &str) -> Option<i64> {
    let text = text.trim();
    if let Ok(v) = text.parse::<i64>() {
        return Some(v);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(text) {
        return Some(dt.timestamp_millis());
    }
    ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"]
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(text, fmt).ok())
        .map(|dt| dt.and_utc().timestamp_millis())
}

fn parse_cell(text: &str) -> Option<f64> {
    text.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Reads a CSV whose first row is a header and whose first column is an
/// integer or ISO-8601 timestamp. Empty or non-numeric cells become `None`.
pub fn parse_csv(bytes: &[u8], plant_id: &str) -> Result<RawPlantTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes);
    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| DataError::Csv(e.to_string()))?,
        None => return Err(DataError::Empty),
    };
    if header.is_empty() {
        return Err(DataError::Empty);
    }
    let timestamp_name = header[0].trim().to_string();
    let column_names: Vec<String> = header.iter().skip(1).map(|h| h.trim().to_string()).collect();

    let mut timestamps = Vec::new();
    let mut rows = Vec::new();
    for (i, record) in records.enumerate() {
        let record = record.map_err(|e| DataError::Csv(e.to_string()))?;
        if record.len() != header.len() {
            return Err(DataError::Ragged {
                row: i,
                expected: header.len(),
                found: record.len(),
            });
        }
        let ts = parse_timestamp(&record[0]).ok_or_else(|| DataError::BadTimestamp {
            row: i,
            text: record[0].to_string(),
        })?;
        timestamps.push(ts);
        rows.push(record.iter().skip(1).map(parse_cell).collect());
    }
    RawPlantTable::new(plant_id, timestamp_name, column_names, timestamps, rows)
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn sorted(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Median and MAD-based robust standard deviation of one column.
pub fn robust_center_scale(values: &[f64]) -> (f64, f64) {
    let s = sorted(values.iter().copied());
    let med = median(&s);
    let mad = median(&sorted(values.iter().map(|v| (v - med).abs())));
    (med, MAD_SCALE * mad)
}

/// Drops rows with missing cells, then rows where any column sits more than
/// `k_out` robust standard deviations from its median. The outlier pass is
/// repeated until no row is removed, so cleaning a cleaned table is a no-op.
/// Columns with zero MAD are exempt from the outlier rule.
pub fn clean(table: &RawPlantTable, k_out: f64) -> Result<RawPlantTable> {
    let complete: Vec<bool> = table.rows.iter().map(|r| r.iter().all(Option::is_some)).collect();
    let mut current = table.retain_rows(&complete);
    let dropped_missing = table.len() - current.len();
    let mut dropped_outliers = 0;
    loop {
        if current.is_empty() {
            return Err(DataError::AllRowsRemoved(table.plant_id.clone()));
        }
        let mut keep = vec![true; current.len()];
        for c in 0..current.column_names.len() {
            let column: Vec<f64> = current.rows.iter().map(|r| r[c].expect("complete")).collect();
            let (med, scale) = robust_center_scale(&column);
            if scale <= 0.0 {
                continue;
            }
            for (k, v) in keep.iter_mut().zip(&column) {
                if (v - med).abs() > k_out * scale {
                    *k = false;
                }
            }
        }
        let removed = keep.iter().filter(|k| !**k).count();
        if removed == 0 {
            break;
        }
        dropped_outliers += removed;
        current = current.retain_rows(&keep);
    }
    if dropped_missing + dropped_outliers > 0 {
        log::info!(
            "plant {}: dropped {} rows with missing cells and {} outlier rows",
            table.plant_id,
            dropped_missing,
            dropped_outliers
        );
    }
    Ok(current)
}

/// Per-column mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ColumnStats {
    /// Fits on `rows`; returns the stats and the indices of columns whose
    /// standard deviation had to be clamped to [`MIN_STD`].
    pub fn fit(rows: &[Vec<f64>]) -> Result<(Self, Vec<usize>)> {
        let first = rows.first().ok_or(DataError::NoRows)?;
        let width = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; width];
        for row in rows {
            if row.len() != width {
                return Err(DataError::InvalidDataset("rows of unequal width".into()));
            }
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; width];
        for row in rows {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let mut clamped = Vec::new();
        let std = var
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let sd = (s / n).sqrt();
                if sd < MIN_STD {
                    clamped.push(j);
                    MIN_STD
                } else {
                    sd
                }
            })
            .collect();
        Ok((Self { mean, std }, clamped))
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    /// Standardizes one row; column `j` of the row uses stats `j % width`,
    /// so windowed rows reuse the per-feature stats.
    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        let w = self.width();
        row.iter()
            .enumerate()
            .map(|(j, v)| (v - self.mean[j % w]) / self.std[j % w])
            .collect()
    }

    pub fn invert_row(&self, row: &[f64]) -> Vec<f64> {
        let w = self.width();
        row.iter()
            .enumerate()
            .map(|(j, v)| v * self.std[j % w] + self.mean[j % w])
            .collect()
    }
}

/// Feature and target standardization for one plant, fitted on its training
/// split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub features: ColumnStats,
    pub targets: ColumnStats,
    /// Human-readable notes about clamped columns.
    pub warnings: Vec<String>,
}

pub fn fit_normalization(feature_rows: &[Vec<f64>], target_rows: &[Vec<f64>]) -> Result<NormalizationStats> {
    let (features, fc) = ColumnStats::fit(feature_rows)?;
    let (targets, tc) = ColumnStats::fit(target_rows)?;
    let mut warnings = Vec::new();
    for j in fc {
        warnings.push(format!("feature column {j} has zero variance; std clamped to {MIN_STD:e}"));
    }
    for j in tc {
        warnings.push(format!("target column {j} has zero variance; std clamped to {MIN_STD:e}"));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(NormalizationStats {
        features,
        targets,
        warnings,
    })
}

pub fn apply_normalization(rows: &[Vec<f64>], stats: &ColumnStats) -> Vec<Vec<f64>> {
    rows.iter().map(|r| stats.apply_row(r)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub window_length: usize,
    pub feature_columns: Vec<String>,
    pub target_columns: Vec<String>,
    #[serde(default)]
    pub horizon: usize,
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.window_length == 0 {
            return Err(DataError::InvalidWindow("window length must be at least 1".into()));
        }
        if self.feature_columns.is_empty() || self.target_columns.is_empty() {
            return Err(DataError::InvalidWindow(
                "need at least one feature and one target column".into(),
            ));
        }
        if let Some(c) = self.feature_columns.iter().find(|c| self.target_columns.contains(c)) {
            return Err(DataError::OverlappingColumns(c.clone()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.window_length * self.feature_columns.len()
    }

    pub fn output_dim(&self) -> usize {
        self.target_columns.len()
    }

    /// Number of samples a table of `rows` rows produces.
    pub fn sample_count(&self, rows: usize) -> usize {
        (rows + 1).saturating_sub(self.window_length + self.horizon)
    }
}

/// Supervised samples of one plant.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantDataset {
    plant_id: String,
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
}

impl PlantDataset {
    pub fn new(plant_id: impl Into<String>, inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(DataError::InvalidDataset("dataset has no samples".into()));
        }
        if inputs.len() != targets.len() {
            return Err(DataError::InvalidDataset(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        let (dx, dy) = (inputs[0].len(), targets[0].len());
        if inputs.iter().any(|r| r.len() != dx) || targets.iter().any(|r| r.len() != dy) {
            return Err(DataError::InvalidDataset("rows of unequal width".into()));
        }
        if inputs.iter().chain(&targets).flatten().any(|v| !v.is_finite()) {
            return Err(DataError::InvalidDataset("non-finite value".into()));
        }
        Ok(Self {
            plant_id: plant_id.into(),
            inputs,
            targets,
        })
    }

    pub fn plant_id(&self) -> &str {
        &self.plant_id
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[Vec<f64>] {
        &self.targets
    }

    pub fn n_samples(&self) -> usize {
        self.inputs.len()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn output_dim(&self) -> usize {
        self.targets[0].len()
    }

    fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            plant_id: self.plant_id.clone(),
            inputs: self.inputs[range.clone()].to_vec(),
            targets: self.targets[range].to_vec(),
        }
    }

    /// Standardizes inputs and targets with `stats`.
    pub fn normalized(&self, stats: &NormalizationStats) -> Self {
        Self {
            plant_id: self.plant_id.clone(),
            inputs: apply_normalization(&self.inputs, &stats.features),
            targets: apply_normalization(&self.targets, &stats.targets),
        }
    }
}

/// Builds oldest-first sliding windows over the feature columns, each paired
/// with the target row `horizon` steps after the window's last row.
pub fn make_windows(table: &RawPlantTable, spec: &WindowSpec) -> Result<PlantDataset> {
    spec.validate()?;
    let feature_idx = spec
        .feature_columns
        .iter()
        .map(|c| table.column_index(c))
        .collect::<Result<Vec<_>>>()?;
    let target_idx = spec
        .target_columns
        .iter()
        .map(|c| table.column_index(c))
        .collect::<Result<Vec<_>>>()?;
    let needed = spec.window_length + spec.horizon;
    if table.len() < needed {
        return Err(DataError::TooFewRows {
            needed,
            available: table.len(),
        });
    }
    let value = |row: usize, col: usize| table.rows[row][col].ok_or(DataError::MissingValues);

    let t = spec.window_length;
    let mut inputs = Vec::with_capacity(spec.sample_count(table.len()));
    let mut targets = Vec::with_capacity(inputs.capacity());
    for end in (t - 1)..(table.len() - spec.horizon) {
        let mut z = Vec::with_capacity(spec.input_dim());
        for row in (end + 1 - t)..=end {
            for &c in &feature_idx {
                z.push(value(row, c)?);
            }
        }
        let y = target_idx
            .iter()
            .map(|&c| value(end + spec.horizon, c))
            .collect::<Result<Vec<_>>>()?;
        inputs.push(z);
        targets.push(y);
    }
    PlantDataset::new(table.plant_id.clone(), inputs, targets)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: PlantDataset,
    pub test: PlantDataset,
    pub split_fraction: f64,
}

/// First `ceil(fraction * N)` samples train, the rest test.
pub fn chrono_split(dataset: &PlantDataset, fraction: f64) -> Result<SplitDataset> {
    let n = dataset.n_samples();
    let empty = DataError::EmptySplit {
        fraction,
        samples: n,
    };
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(empty);
    }
    // Tolerance keeps e.g. 0.7 * 10 at 7 rather than 8.
    let n_train = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    if n_train == 0 || n_train >= n {
        return Err(empty);
    }
    Ok(SplitDataset {
        train: dataset.slice(0..n_train),
        test: dataset.slice(n_train..n),
        split_fraction: fraction,
    })
}

/// Everything a plant needs for training and evaluation, in standardized
/// units, plus the stats to map predictions back.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedPlant {
    pub split: SplitDataset,
    pub stats: NormalizationStats,
}

/// Runs clean -> windows -> chronological split -> normalization fitted on
/// the rows that feed the training windows.
pub fn prepare_plant(
    table: &RawPlantTable,
    spec: &WindowSpec,
    split_fraction: f64,
    k_out: f64,
) -> Result<PreparedPlant> {
    let cleaned = clean(table, k_out)?;
    let raw = make_windows(&cleaned, spec)?;
    let split = chrono_split(&raw, split_fraction)?;

    let feature_idx = spec
        .feature_columns
        .iter()
        .map(|c| cleaned.column_index(c))
        .collect::<Result<Vec<_>>>()?;
    let train_rows = split.train.n_samples() + spec.window_length - 1;
    let feature_rows: Vec<Vec<f64>> = cleaned.rows[..train_rows]
        .iter()
        .map(|r| feature_idx.iter().map(|&c| r[c].expect("cleaned")).collect())
        .collect();
    let stats = fit_normalization(&feature_rows, split.train.targets())?;

    Ok(PreparedPlant {
        split: SplitDataset {
            train: split.train.normalized(&stats),
            test: split.test.normalized(&stats),
            split_fraction,
        },
        stats,
    })
}
