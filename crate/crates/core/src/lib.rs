//! Skeleton gait recognition: pose normalization, a single-pose hierarchical
//! spatial transformer and a temporal baseline, triplet-loss training,
//! gallery/probe evaluation, and a synthetic walker generator for
//! confound experiments.

mod error;

pub mod checkpoint;
pub mod dataset;
pub mod evaluation;
pub mod models;
pub mod normalization;
pub mod pose;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
