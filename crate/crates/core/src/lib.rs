//! Leakage-free two-stage modelling of invoice dilution.
//!
//! The pipeline runs from raw invoice streams to evaluated models:
//!
//! - [`data_model`]: invoice and macro schemas, validation, file formats
//! - [`synthgen`]: synthetic invoice streams with a planted dilution process
//! - [`feature_engine`]: point-in-time history and macro features
//! - [`windowing`]: rolling calendar windows, splits and scalers
//! - [`models`]: gradient-boosted trees, random forests, MLPs and KANs
//! - [`two_stage`]: the event classifier gating magnitude regressors
//! - [`metrics`]: classification, regression and binned diagnostics
//! - [`harness`]: the rolling-window experiment runner

// `!(a < b)` comparisons deliberately treat NaN as a failure.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data_model;
pub mod error;
pub mod feature_engine;
pub mod harness;
pub mod matrix;
pub mod metrics;
pub mod models;
pub mod synthgen;
pub mod two_stage;
pub mod windowing;

pub use error::{LabError, Result};
