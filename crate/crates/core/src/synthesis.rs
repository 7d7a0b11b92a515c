//! Outlier synthesis: push a boundary feature across the decision boundary by
//! signed-gradient ascent, then keep going for `c` more steps.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::boundary::perturb_step;
use crate::error::{Error, Result};
use crate::latent::{FeatureClassifier, LatentFeature};
use crate::par::Exec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub alpha: f64,
    /// Additional steps after the prediction flips.
    pub extra_steps: usize,
    /// Cap on the pre-flip loop.
    pub max_steps: usize,
    /// Outliers per origin feature; the j-th one uses `extra_steps + j` extra steps.
    pub per_origin_count: usize,
    pub keep_trajectory: bool,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            alpha: 0.015,
            extra_steps: 2,
            max_steps: 100,
            per_origin_count: 1,
            keep_trajectory: false,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if self.per_origin_count == 0 {
            return Err(Error::Config("per_origin_count must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesizedOutlier {
    pub z_ood: Vec<f64>,
    pub origin_index: usize,
    pub origin_label: usize,
    /// Step at which the prediction first left `origin_label`.
    pub flip_step: usize,
    /// Steps taken after the flip.
    pub extra_steps: usize,
    /// Iterates from the origin feature up to `z_ood`, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<Vec<Vec<f64>>>,
}

/// Runs the ascent once and snapshots after `extra_steps + j` post-flip steps
/// for `j < per_origin_count`.
fn synthesize_series<C: FeatureClassifier + ?Sized>(
    clf: &C,
    feature: &LatentFeature,
    cfg: &SynthesisConfig,
) -> Result<Vec<SynthesizedOutlier>> {
    let y = feature.label;
    let mut z = feature.z.clone();
    if clf.predict(&z)? != y {
        return Err(Error::AlreadyMisclassified { origin: feature.source_index });
    }
    let mut trajectory = cfg.keep_trajectory.then(|| vec![z.clone()]);
    let mut flip_step = None;
    for k in 1..=cfg.max_steps {
        z = perturb_step(clf, &z, y, cfg.alpha)?;
        if let Some(t) = trajectory.as_mut() {
            t.push(z.clone());
        }
        if clf.predict(&z)? != y {
            flip_step = Some(k);
            break;
        }
    }
    let flip_step = flip_step.ok_or(Error::UnreachableBoundary {
        origin: feature.source_index,
        max_steps: cfg.max_steps,
    })?;

    let mut out = Vec::with_capacity(cfg.per_origin_count);
    let last = cfg.extra_steps + cfg.per_origin_count - 1;
    for extra in 0..=last {
        if extra > 0 {
            z = perturb_step(clf, &z, y, cfg.alpha)?;
            if let Some(t) = trajectory.as_mut() {
                t.push(z.clone());
            }
        }
        if extra >= cfg.extra_steps {
            out.push(SynthesizedOutlier {
                z_ood: z.clone(),
                origin_index: feature.source_index,
                origin_label: y,
                flip_step,
                extra_steps: extra,
                trajectory: trajectory.clone(),
            });
        }
    }
    Ok(out)
}

/// Ascend until the prediction leaves the feature's label, then take
/// `extra_steps` more steps.
pub fn synthesize_ood<C: FeatureClassifier + ?Sized>(
    clf: &C,
    feature: &LatentFeature,
    cfg: &SynthesisConfig,
) -> Result<SynthesizedOutlier> {
    let single = SynthesisConfig { per_origin_count: 1, ..cfg.clone() };
    single.validate()?;
    Ok(synthesize_series(clf, feature, &single)?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisFailure {
    pub origin_index: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisBatch {
    pub outliers: Vec<SynthesizedOutlier>,
    pub failures: Vec<SynthesisFailure>,
    /// Outliers whose final prediction returned to the origin label.
    pub flipped_back: usize,
}

impl SynthesisBatch {
    pub fn flip_back_rate(&self) -> f64 {
        if self.outliers.is_empty() {
            0.0
        } else {
            self.flipped_back as f64 / self.outliers.len() as f64
        }
    }
}

/// Synthesize from every selected feature, ordered by origin index. Per-item
/// failures are collected rather than aborting the batch.
pub fn synthesize_batch<C: FeatureClassifier + ?Sized>(
    clf: &C,
    selected: &[LatentFeature],
    cfg: &SynthesisConfig,
    exec: Exec,
) -> Result<SynthesisBatch> {
    cfg.validate()?;
    if selected.is_empty() {
        return Err(Error::Empty("boundary feature selection"));
    }
    let mut order: Vec<&LatentFeature> = selected.iter().collect();
    order.sort_by_key(|f| f.source_index);
    let results = exec.map(&order, |f| synthesize_series(clf, f, cfg));

    let mut batch = SynthesisBatch {
        outliers: Vec::new(),
        failures: Vec::new(),
        flipped_back: 0,
    };
    for (f, res) in order.iter().zip(results) {
        match res {
            Ok(series) => {
                for o in series {
                    if clf.predict(&o.z_ood)? == o.origin_label {
                        batch.flipped_back += 1;
                    }
                    batch.outliers.push(o);
                }
            }
            Err(e) => batch.failures.push(SynthesisFailure {
                origin_index: f.source_index,
                message: e.to_string(),
            }),
        }
    }
    Ok(batch)
}

pub const FEATURE_MAGIC: &[u8; 8] = b"BOODFEAT";
pub const FEATURE_VERSION: u32 = 1;

/// One record of the outlier feature file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub origin_index: u64,
    pub origin_label: u32,
    pub flip_step: u32,
    pub z: Vec<f64>,
}

impl From<&SynthesizedOutlier> for FeatureRecord {
    fn from(o: &SynthesizedOutlier) -> Self {
        FeatureRecord {
            origin_index: o.origin_index as u64,
            origin_label: o.origin_label as u32,
            flip_step: o.flip_step as u32,
            z: o.z_ood.clone(),
        }
    }
}

pub fn write_feature_file<W: Write>(records: &[FeatureRecord], w: W) -> Result<()> {
    let first = records.first().ok_or(Error::Empty("outlier list"))?;
    let dim = first.z.len();
    if let Some(bad) = records.iter().find(|r| r.z.len() != dim) {
        return Err(Error::dim("outlier feature width", dim, bad.z.len()));
    }
    let mut w = BufWriter::new(w);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    for r in records {
        w.write_all(&r.origin_index.to_le_bytes())?;
        w.write_all(&r.origin_label.to_le_bytes())?;
        w.write_all(&r.flip_step.to_le_bytes())?;
        for v in &r.z {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_feature_file<R: Read>(mut r: R) -> Result<Vec<FeatureRecord>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = buf
            .get(pos..pos + n)
            .ok_or_else(|| Error::Format("truncated feature file".into()))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != FEATURE_MAGIC {
        return Err(Error::Format("not a BOODFEAT file".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!("unsupported feature file version {version}")));
    }
    let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let dim = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let mut records = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let origin_index = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let origin_label = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        let flip_step = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        let z = (0..dim)
            .map(|_| take(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))))
            .collect::<Result<Vec<_>>>()?;
        records.push(FeatureRecord { origin_index, origin_label, flip_step, z });
    }
    if pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes in feature file", buf.len() - pos)));
    }
    Ok(records)
}

/// Path of the JSON-lines sibling written next to a binary feature file.
pub fn jsonl_sibling(path: &Path) -> PathBuf {
    path.with_extension("jsonl")
}

/// Write the binary feature file and its JSON-lines sibling.
pub fn export_features(outliers: &[SynthesizedOutlier], path: &Path) -> Result<()> {
    let records: Vec<FeatureRecord> = outliers.iter().map(FeatureRecord::from).collect();
    write_feature_file(&records, fs::File::create(path)?)?;
    let mut jsonl = BufWriter::new(fs::File::create(jsonl_sibling(path))?);
    for r in &records {
        serde_json::to_writer(&mut jsonl, r)?;
        jsonl.write_all(b"\n")?;
    }
    jsonl.flush()?;
    Ok(())
}
