//! Input-adaptive cross-depth aggregation laboratory.
//!
//! A toy multimodal decoder with block-boundary state capture, a
//! cross-depth aggregation module covering the fixed-query baseline and the
//! input-adaptive design space, low-rank adapters, and a training and
//! evaluation harness for the perception/composition forgetting experiment.

pub mod agg;
pub mod backbone;
pub mod check;
pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod harness;
pub mod optim;
pub mod params;
pub mod report;
pub mod tasks;
pub mod tensor;
