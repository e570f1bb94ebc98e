//! Std companion to `augmix-core`: dataset ingestion, artifact formats,
//! experiment configuration and orchestration.

pub mod artifacts;
pub mod config;
pub mod dataset;
pub mod experiment;
pub mod sweep;
pub mod synth;
