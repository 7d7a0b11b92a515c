//! Orchestration for the bood pipeline: configuration, stage runners, run
//! manifests, parameter sweeps and SVG plots.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod plot;
pub mod sweep;
pub mod pipeline;
