//! Run manifest: the configuration echo, timings, training histories and
//! summary statistics of one pipeline run, written as JSON.

use std::path::Path;

use bood_core::detector::DetectorEpoch;
use bood_core::eval::MetricsReport;
use bood_core::latent::EpochStats;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;
use crate::pipeline::{read_json, write_json, RunArtifacts};

pub const TOOL_NAME: &str = env!("CARGO_PKG_NAME");
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceSummary {
    pub features: usize,
    pub max_steps: usize,
    /// Features that never changed prediction within `max_steps`.
    pub never_crossed: usize,
    pub mean_steps: Option<f64>,
    /// `histogram[k]` counts features whose distance is `k`.
    pub histogram: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisSummary {
    pub selected: usize,
    pub outliers: usize,
    pub failures: usize,
    pub flipped_back: usize,
    pub flip_back_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub detector: MetricsReport,
    pub msp: MetricsReport,
    pub energy: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub parallel: bool,
    pub config: RunConfig,
    pub stages: Vec<StageTiming>,
    pub encoder_history: Vec<EpochStats>,
    pub distances: DistanceSummary,
    pub synthesis: SynthesisSummary,
    pub detector_history: Vec<DetectorEpoch>,
    pub metrics: RunMetrics,
}

/// Dotted paths that must be present for a manifest to be reproducible.
pub const REQUIRED_FIELDS: &[&str] = &[
    "tool",
    "version",
    "seed",
    "parallel",
    "config.seed",
    "config.data",
    "config.anchors",
    "config.encoder",
    "config.boundary",
    "config.synthesis",
    "config.detector",
    "config.eval",
    "stages",
    "encoder_history",
    "distances.histogram",
    "distances.never_crossed",
    "synthesis.outliers",
    "synthesis.flip_back_rate",
    "detector_history",
    "metrics.detector",
    "metrics.msp",
    "metrics.energy",
];

impl RunManifest {
    pub fn from_run(cfg: &RunConfig, run: &RunArtifacts, parallel: bool) -> Self {
        let table = &run.distances;
        RunManifest {
            tool: TOOL_NAME.to_string(),
            version: TOOL_VERSION.to_string(),
            seed: cfg.seed,
            parallel,
            config: cfg.clone(),
            stages: run
                .stage_seconds
                .iter()
                .map(|(stage, seconds)| StageTiming { stage: stage.clone(), seconds: *seconds })
                .collect(),
            encoder_history: run.encoder_history.clone(),
            distances: DistanceSummary {
                features: table.records.len(),
                max_steps: table.max_steps,
                never_crossed: table.never_crossed(),
                mean_steps: table.mean_steps(),
                histogram: table.histogram(),
            },
            synthesis: SynthesisSummary {
                selected: run.selected.len(),
                outliers: run.synthesis.outliers.len(),
                failures: run.synthesis.failures.len(),
                flipped_back: run.synthesis.flipped_back,
                flip_back_rate: run.synthesis.flip_back_rate(),
            },
            detector_history: run.detector_history.clone(),
            metrics: RunMetrics {
                detector: run.eval.detector.clone(),
                msp: run.eval.msp.clone(),
                energy: run.eval.energy.clone(),
            },
        }
    }

    pub fn save(&self, path: &Path) -> bood_core::Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> bood_core::Result<Self> {
        read_json(path)
    }

    /// The manifest with wall-clock timings zeroed, for run-to-run comparison.
    pub fn without_timings(&self) -> Self {
        let mut m = self.clone();
        m.stages.iter_mut().for_each(|s| s.seconds = 0.0);
        m
    }
}

/// Missing entries of [`REQUIRED_FIELDS`] in a parsed manifest.
pub fn missing_fields(doc: &Value) -> Vec<&'static str> {
    REQUIRED_FIELDS
        .iter()
        .copied()
        .filter(|path| {
            let mut cur = doc;
            for key in path.split('.') {
                match cur.get(key) {
                    Some(v) if !v.is_null() => cur = v,
                    _ => return true,
                }
            }
            false
        })
        .collect()
}
