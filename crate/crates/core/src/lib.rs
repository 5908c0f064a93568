//! Wearable activity-recognition toolkit: WISDM-style ingestion, windowed
//! features, a one-way MANOVA device test, a from-scratch neural network
//! core with the four classifier stacks and a GRU forecaster, and the
//! evaluation metrics behind the report tables.

pub mod dataset;
pub mod eval;
pub mod features;
pub mod models;
pub mod nncore;
pub mod stats;
