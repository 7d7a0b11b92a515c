//! Run configuration: TOML file, `section.key=value` overrides, defaults.

use std::path::{Path, PathBuf};

use bood_core::boundary::BoundaryConfig;
use bood_core::data::DatasetSpec;
use bood_core::detector::{DetectorMode, DetectorTrainConfig};
use bood_core::nn::{Activation, MlpSpec, TrainConfig};
use bood_core::rng::derive_seed;
use bood_core::synthesis::SynthesisConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid TOML: {0}")]
    Toml(String),
    #[error("bad override {0:?}: expected section.key=value")]
    Override(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    RandomOrthonormal,
    FromFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorsConfig {
    pub mode: AnchorMode,
    pub path: Option<PathBuf>,
}

impl Default for AnchorsConfig {
    fn default() -> Self {
        AnchorsConfig {
            mode: AnchorMode::RandomOrthonormal,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_min: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            latent_dim: 8,
            hidden: vec![64, 64],
            activation: Activation::Relu,
            temperature: 1.0,
            epochs: 20,
            batch_size: 160,
            lr_init: 0.1,
            lr_min: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisSection {
    /// Defaults to the boundary step size.
    pub alpha: Option<f64>,
    pub extra_steps: usize,
    /// Defaults to the boundary step cap.
    pub max_steps: Option<usize>,
    pub per_origin_count: usize,
}

impl Default for SynthesisSection {
    fn default() -> Self {
        SynthesisSection {
            alpha: None,
            extra_steps: 2,
            max_steps: None,
            per_origin_count: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub mode: DetectorMode,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub head_hidden: usize,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    /// Ridge term of the least-squares latent-to-input decoder fit.
    pub decoder_ridge: f64,
}

impl Default for DetectorSection {
    fn default() -> Self {
        DetectorSection {
            mode: DetectorMode::Decoded,
            hidden: vec![64, 64],
            activation: Activation::Relu,
            head_hidden: 16,
            beta: 2.5,
            epochs: 50,
            batch_size: 160,
            lr_init: 0.1,
            lr_min: 0.0,
            decoder_ridge: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tpr_target: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { tpr_target: 0.95 }
    }
}

/// Every hyperparameter of one pipeline run. Stage seeds are derived from
/// `seed`; seed fields inside sections are overwritten.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DatasetSpec,
    pub anchors: AnchorsConfig,
    pub encoder: EncoderConfig,
    pub boundary: BoundaryConfig,
    pub synthesis: SynthesisSection,
    pub detector: DetectorSection,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            output_dir: PathBuf::from("bood-run"),
            data: DatasetSpec::default(),
            anchors: AnchorsConfig::default(),
            encoder: EncoderConfig::default(),
            boundary: BoundaryConfig::default(),
            synthesis: SynthesisSection::default(),
            detector: DetectorSection::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Apply `section.key=value` (or top-level `key=value`) to a TOML table.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) || keys.len() > 2 {
        return Err(ConfigError::Override(spec.to_string()));
    }
    let value = parse_override_value(raw.trim());
    match keys.as_slice() {
        [key] => {
            table.insert(key.to_string(), value);
        }
        [section, key] => {
            let entry = table
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let toml::Value::Table(t) = entry else {
                return Err(ConfigError::Override(spec.to_string()));
            };
            t.insert(key.to_string(), value);
        }
        _ => unreachable!(),
    }
    Ok(())
}

impl RunConfig {
    /// Defaults, then the file (if any), then overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_path_buf(),
                    source,
                })?;
                text.parse::<toml::Table>()
                    .map_err(|e| ConfigError::Toml(e.to_string()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Toml(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |e: bood_core::Error| match e {
            bood_core::Error::Config(m) => ConfigError::Invalid(m),
            other => ConfigError::Invalid(other.to_string()),
        };
        self.data.validate().map_err(wrap)?;
        self.boundary.validate().map_err(wrap)?;
        self.synthesis().validate().map_err(wrap)?;
        self.encoder_train().validate().map_err(wrap)?;
        self.detector_train().validate().map_err(wrap)?;
        self.encoder_spec(1).map_err(wrap)?;
        if !(self.encoder.temperature > 0.0) {
            return Err(ConfigError::Invalid("encoder temperature must be positive".into()));
        }
        if self.detector.head_hidden == 0 {
            return Err(ConfigError::Invalid("head_hidden must be at least 1".into()));
        }
        if !(self.eval.tpr_target > 0.0 && self.eval.tpr_target <= 1.0) {
            return Err(ConfigError::Invalid("tpr_target must lie in (0, 1]".into()));
        }
        if self.anchors.mode == AnchorMode::FromFile && self.anchors.path.is_none() {
            return Err(ConfigError::Invalid("anchors.mode = from_file needs anchors.path".into()));
        }
        Ok(())
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    /// Dataset spec with its seed taken from the run seed.
    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            seed: self.stage_seed("data"),
            ..self.data.clone()
        }
    }

    pub fn encoder_spec(&self, input_dim: usize) -> bood_core::Result<MlpSpec> {
        let mut widths = vec![input_dim];
        widths.extend(&self.encoder.hidden);
        widths.push(self.encoder.latent_dim);
        MlpSpec::new(widths, self.encoder.activation)
    }

    pub fn encoder_train(&self) -> TrainConfig {
        let e = &self.encoder;
        TrainConfig {
            epochs: e.epochs,
            batch_size: e.batch_size,
            lr_init: e.lr_init,
            lr_min: e.lr_min,
            seed: self.stage_seed("encoder/train"),
            shuffle: true,
        }
    }

    pub fn synthesis(&self) -> SynthesisConfig {
        SynthesisConfig {
            alpha: self.synthesis.alpha.unwrap_or(self.boundary.alpha),
            extra_steps: self.synthesis.extra_steps,
            max_steps: self.synthesis.max_steps.unwrap_or(self.boundary.max_steps),
            per_origin_count: self.synthesis.per_origin_count,
            keep_trajectory: false,
        }
    }

    pub fn detector_spec(&self, input_dim: usize, classes: usize) -> bood_core::Result<MlpSpec> {
        let mut widths = vec![input_dim];
        widths.extend(&self.detector.hidden);
        widths.push(classes);
        MlpSpec::new(widths, self.detector.activation)
    }

    pub fn detector_train(&self) -> DetectorTrainConfig {
        let d = &self.detector;
        DetectorTrainConfig {
            beta: d.beta,
            train: TrainConfig {
                epochs: d.epochs,
                batch_size: d.batch_size,
                lr_init: d.lr_init,
                lr_min: d.lr_min,
                seed: self.stage_seed("detector/train"),
                shuffle: true,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_match_reference_hyperparameters() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.boundary.alpha, 0.015);
        assert_eq!(c.boundary.max_steps, 100);
        assert_eq!(c.boundary.select_percent, 5.0);
        assert_eq!(c.synthesis.extra_steps, 2);
        assert_eq!(c.detector.beta, 2.5);
        assert_eq!(c.encoder.temperature, 1.0);
        assert_eq!(c.encoder.lr_init, 0.1);
        assert_eq!(c.synthesis().alpha, 0.015);
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 3\n[boundary]\nalpha = 0.05\n[detector]\nbeta = 1.0\n").unwrap();
        let c = RunConfig::load(Some(&p), &["detector.beta=0".into(), "detector.mode=latent".into()]).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.boundary.alpha, 0.05);
        assert_eq!(c.detector.beta, 0.0);
        assert_eq!(c.detector.mode, DetectorMode::Latent);
        assert_eq!(c.synthesis().alpha, 0.05);
        assert_eq!(c.encoder.latent_dim, 8);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(RunConfig::load(None, &["nokey".into()]), Err(ConfigError::Override(_))));
        assert!(matches!(RunConfig::load(None, &["boundary.bogus=1".into()]), Err(ConfigError::Toml(_))));
        assert!(matches!(
            RunConfig::load(None, &["boundary.select_percent=0".into()]),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            RunConfig::load(Some(Path::new("/nonexistent/x.toml")), &[]),
            Err(ConfigError::Read { .. })
        ));
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::default();
        let text = c.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }
}
