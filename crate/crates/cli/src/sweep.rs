//! One-parameter sweeps: a full pipeline run per value with a shared seed.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use bood_core::par::Exec;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, RunConfig};
use crate::pipeline::run_pipeline;
use crate::plot::{sweep_line_svg, Line, PlotResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    /// Step size, shared by distance estimation and synthesis.
    #[serde(rename = "alpha")]
    Alpha,
    /// Extra steps past the flip.
    #[serde(rename = "c")]
    C,
    /// Selection percentage.
    #[serde(rename = "r")]
    R,
    #[serde(rename = "beta")]
    Beta,
    /// Step cap, shared by distance estimation and synthesis.
    #[serde(rename = "K")]
    K,
}

impl SweepParam {
    pub const ALL: [SweepParam; 5] = [SweepParam::Alpha, SweepParam::C, SweepParam::R, SweepParam::Beta, SweepParam::K];

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::C => "c",
            SweepParam::R => "r",
            SweepParam::Beta => "beta",
            SweepParam::K => "K",
        }
    }

    pub fn check(self, v: f64) -> Result<(), String> {
        let integral = v.fract() == 0.0 && v.is_finite();
        let ok = match self {
            SweepParam::Alpha => v > 0.0 && v.is_finite(),
            SweepParam::C => integral && v >= 0.0,
            SweepParam::R => v > 0.0 && v <= 100.0,
            SweepParam::Beta => v >= 0.0 && v.is_finite(),
            SweepParam::K => integral && v >= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(format!("{v} is not a legal value for {}", self.name()))
        }
    }

    /// `base` with the parameter set to `v`.
    pub fn apply(self, base: &RunConfig, v: f64) -> RunConfig {
        let mut cfg = base.clone();
        match self {
            SweepParam::Alpha => {
                cfg.boundary.alpha = v;
                cfg.synthesis.alpha = Some(v);
            }
            SweepParam::C => cfg.synthesis.extra_steps = v as usize,
            SweepParam::R => cfg.boundary.select_percent = v,
            SweepParam::Beta => cfg.detector.beta = v,
            SweepParam::K => {
                cfg.boundary.max_steps = v as usize;
                cfg.synthesis.max_steps = Some(v as usize);
            }
        }
        cfg
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        SweepParam::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown sweep parameter {s:?}; expected one of alpha, c, r, beta, K"))
    }
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<f64>,
    pub base: RunConfig,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.values.is_empty() {
            return Err(ConfigError::Invalid("sweep needs at least one value".into()));
        }
        for &v in &self.values {
            self.param.check(v).map_err(ConfigError::Invalid)?;
        }
        self.base.validate()
    }
}

/// One sweep value. Metric fields are absent when the run failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub fpr95_avg: Option<f64>,
    pub auroc_avg: Option<f64>,
    pub id_acc: Option<f64>,
    /// Average metrics of the negative-energy score on the same backbone.
    pub energy_fpr95_avg: Option<f64>,
    pub energy_auroc_avg: Option<f64>,
    pub mean_k: Option<f64>,
    pub never_crossed: Option<usize>,
    pub outliers: Option<usize>,
    pub error: Option<String>,
}

pub fn run_sweep(spec: &SweepSpec, exec: Exec) -> Result<Vec<SweepRow>, ConfigError> {
    spec.validate()?;
    Ok(spec
        .values
        .iter()
        .map(|&value| {
            let cfg = spec.param.apply(&spec.base, value);
            match run_pipeline(&cfg, exec, None) {
                Ok(run) => {
                    let det = &run.eval.detector;
                    let en = &run.eval.energy;
                    SweepRow {
                        value,
                        fpr95_avg: det.average.as_ref().map(|a| a.fpr95),
                        auroc_avg: det.average.as_ref().map(|a| a.auroc),
                        id_acc: Some(det.id_acc),
                        energy_fpr95_avg: en.average.as_ref().map(|a| a.fpr95),
                        energy_auroc_avg: en.average.as_ref().map(|a| a.auroc),
                        mean_k: run.distances.mean_steps(),
                        never_crossed: Some(run.distances.never_crossed()),
                        outliers: Some(run.synthesis.outliers.len()),
                        error: None,
                    }
                }
                Err(e) => SweepRow {
                    value,
                    fpr95_avg: None,
                    auroc_avg: None,
                    id_acc: None,
                    energy_fpr95_avg: None,
                    energy_auroc_avg: None,
                    mean_k: None,
                    never_crossed: None,
                    outliers: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect())
}

fn opt<T: fmt::Debug>(v: &Option<T>) -> String {
    v.as_ref().map(|x| format!("{x:?}")).unwrap_or_default()
}

pub fn write_sweep_csv(path: &Path, param: SweepParam, rows: &[SweepRow]) -> bood_core::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        param.name(),
        "fpr95_avg",
        "auroc_avg",
        "id_acc",
        "energy_fpr95_avg",
        "energy_auroc_avg",
        "mean_k",
        "never_crossed",
        "outliers",
        "error",
    ])?;
    for r in rows {
        w.write_record([
            format!("{:?}", r.value),
            opt(&r.fpr95_avg),
            opt(&r.auroc_avg),
            opt(&r.id_acc),
            opt(&r.energy_fpr95_avg),
            opt(&r.energy_auroc_avg),
            opt(&r.mean_k),
            opt(&r.never_crossed),
            opt(&r.outliers),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// FPR95, AUROC and ID accuracy against the swept value.
pub fn sweep_svg(param: SweepParam, rows: &[SweepRow]) -> PlotResult<String> {
    let line = |name: &str, get: fn(&SweepRow) -> Option<f64>| Line {
        name: name.to_string(),
        points: rows.iter().filter_map(|r| get(r).map(|y| (r.value, y))).collect(),
    };
    sweep_line_svg(
        &format!("Sensitivity to {}", param.name()),
        param.name(),
        &[
            line("FPR95", |r| r.fpr95_avg),
            line("AUROC", |r| r.auroc_avg),
            line("ID ACC", |r| r.id_acc),
        ],
    )
}
