//! Small, fast fixtures shared by the integration tests.
#![allow(dead_code)]

pub mod oracle;

use std::time::Duration;

use fedplant_core::coordinator::{FederatedConfig, PlantData, PlantDescriptor, WeightingMode};
use fedplant_core::data::{prepare_plant, RawPlantTable, WindowSpec};
use fedplant_core::model::{Activation, ModelArchitecture};
use fedplant_core::secagg::QuantizationSpec;
use fedplant_core::trainer::LocalTrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FEATURES: [&str; 2] = ["x1", "x2"];

pub fn spec() -> WindowSpec {
    WindowSpec {
        window_length: 2,
        feature_columns: FEATURES.iter().map(|s| s.to_string()).collect(),
        target_columns: vec!["y".into()],
        horizon: 0,
    }
}

pub fn table(name: &str, rows: usize, seed: u64, offset: f64) -> RawPlantTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows)
        .map(|_| {
            let x1: f64 = rng.random_range(-1.0..1.0);
            let x2: f64 = rng.random_range(-1.0..1.0);
            let y = 3.0 * x1 - 2.0 * x2 * x2 + offset + 0.05 * rng.random_range(-1.0..1.0);
            vec![Some(x1), Some(x2), Some(y)]
        })
        .collect();
    RawPlantTable::new(
        name,
        "timestamp",
        vec!["x1".into(), "x2".into(), "y".into()],
        (0..rows as i64).map(|t| t * 60).collect(),
        data,
    )
    .unwrap()
}

pub fn plant_with_rows(id: u32, name: &str, seed: u64, rows: usize) -> PlantData {
    let prepared = prepare_plant(&table(name, rows, seed, id as f64), &spec(), 0.8, 5.0).unwrap();
    PlantData {
        descriptor: PlantDescriptor {
            id,
            name: name.into(),
        },
        prepared,
    }
}

pub fn tiny_plant(id: u32, name: &str, seed: u64) -> PlantData {
    plant_with_rows(id, name, seed, 60)
}

pub fn tiny_arch() -> ModelArchitecture {
    ModelArchitecture::new(4, vec![6], 1, Activation::Relu).unwrap()
}

pub fn tiny_config(plants: &[(u32, &str)], rounds: u32, secure: bool) -> FederatedConfig {
    FederatedConfig {
        rounds,
        plants: plants
            .iter()
            .map(|&(id, name)| PlantDescriptor {
                id,
                name: name.into(),
            })
            .collect(),
        arch: tiny_arch(),
        local: LocalTrainConfig {
            epochs: 2,
            batch_size: 8,
            learning_rate: 0.05,
            shuffle_seed: 0,
        },
        weighting: WeightingMode::Fedavg,
        alpha_overrides: None,
        alpha_mean: 1.0,
        quant: QuantizationSpec::default(),
        secure,
        master_seed: 7,
        mask_secret: 99,
        phase_timeout: Duration::from_secs(20),
    }
}

pub fn three_plants() -> (FederatedConfig, Vec<PlantData>) {
    let cfg = tiny_config(&[(1, "A"), (2, "B"), (3, "C")], 3, true);
    let plants = vec![
        plant_with_rows(1, "A", 11, 80),
        plant_with_rows(2, "B", 12, 30),
        plant_with_rows(3, "C", 13, 70),
    ];
    (cfg, plants)
}
