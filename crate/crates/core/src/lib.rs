//! Federated training of process surrogate models across plants that never
//! share their measurements.
//!
//! Plants train a small feedforward regressor on their own windowed time
//! series; a coordinator combines the resulting parameter vectors with
//! sample-size (optionally adaptive) weights. With secure aggregation on, each
//! plant submits fixed-point parameters hidden under pairwise masks that cancel
//! only in the sum.

pub mod data;
pub mod model;
pub mod secagg;
pub mod seeds;
pub mod synthetic;
pub mod trainer;
pub mod transport;
pub mod config;
pub mod coordinator;
