//! Distance-to-boundary estimation by counting signed-gradient ascent steps
//! until the classifier's prediction flips, and selection of the closest
//! features.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{FeatureClassifier, LatentFeature};
use crate::par::Exec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundaryConfig {
    /// Step size of one signed-gradient move.
    pub alpha: f64,
    /// Maximum number of steps.
    pub max_steps: usize,
    /// Percentage of non-capped features to keep, in `(0, 100]`.
    pub select_percent: f64,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        BoundaryConfig {
            alpha: 0.015,
            max_steps: 100,
            select_percent: 5.0,
        }
    }
}

impl BoundaryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if !(self.select_percent > 0.0 && self.select_percent <= 100.0) {
            return Err(Error::Config(format!(
                "selection percentage must lie in (0, 100], got {}",
                self.select_percent
            )));
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One ascent step `z + α·sign(∇_z ℓ(f(z), y))`, with `sign(0) = 0`.
pub fn perturb_step<C: FeatureClassifier + ?Sized>(clf: &C, z: &[f64], y: usize, alpha: f64) -> Result<Vec<f64>> {
    let (_, grad) = clf.loss_and_grad(z, y)?;
    Ok(z.iter().zip(grad).map(|(v, g)| v + alpha * sign(g)).collect())
}

/// Result of probing one feature. `steps` is `None` when the prediction never
/// flipped within the step cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceRecord {
    pub source_index: usize,
    pub label: usize,
    pub steps: Option<usize>,
    pub final_z: Vec<f64>,
}

impl DistanceRecord {
    pub fn crossed(&self) -> bool {
        self.steps.is_some()
    }
}

/// Minimal number of steps that changes the prediction away from `y`: 0 if it
/// is already wrong, `None` if `max_steps` steps do not suffice. Also returns
/// the iterate at the flip (or after the last step).
pub fn estimate_distance<C: FeatureClassifier + ?Sized>(
    clf: &C,
    z: &[f64],
    y: usize,
    alpha: f64,
    max_steps: usize,
) -> Result<(Option<usize>, Vec<f64>)> {
    let mut cur = z.to_vec();
    if clf.predict(&cur)? != y {
        return Ok((Some(0), cur));
    }
    for k in 1..=max_steps {
        cur = perturb_step(clf, &cur, y, alpha)?;
        if clf.predict(&cur)? != y {
            return Ok((Some(k), cur));
        }
    }
    Ok((None, cur))
}

/// Distance records in `source_index` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceTable {
    pub max_steps: usize,
    pub records: Vec<DistanceRecord>,
}

impl DistanceTable {
    pub fn build<C: FeatureClassifier + ?Sized>(
        clf: &C,
        features: &[LatentFeature],
        cfg: &BoundaryConfig,
        exec: Exec,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut records = exec
            .map(features, |f| {
                estimate_distance(clf, &f.z, f.label, cfg.alpha, cfg.max_steps).map(|(steps, final_z)| {
                    DistanceRecord {
                        source_index: f.source_index,
                        label: f.label,
                        steps,
                        final_z,
                    }
                })
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        records.sort_by_key(|r| r.source_index);
        Ok(DistanceTable {
            max_steps: cfg.max_steps,
            records,
        })
    }

    pub fn never_crossed(&self) -> usize {
        self.records.iter().filter(|r| !r.crossed()).count()
    }

    /// `counts[k]` = number of features with distance `k`, for `k ∈ [0, K]`.
    pub fn histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.max_steps + 1];
        for k in self.records.iter().filter_map(|r| r.steps) {
            counts[k] += 1;
        }
        counts
    }

    pub fn mean_steps(&self) -> Option<f64> {
        let ks: Vec<usize> = self.records.iter().filter_map(|r| r.steps).collect();
        (!ks.is_empty()).then(|| ks.iter().sum::<usize>() as f64 / ks.len() as f64)
    }

    /// CSV columns `source_index,label,steps,crossed`; capped rows carry the cap.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["source_index", "label", "steps", "crossed"])?;
        for r in &self.records {
            out.write_record([
                r.source_index.to_string(),
                r.label.to_string(),
                r.steps.unwrap_or(self.max_steps).to_string(),
                u8::from(r.crossed()).to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads the CSV export; `final_z` is not stored and comes back empty.
    pub fn read_csv(path: &Path, max_steps: usize) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut records = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let field = |j: usize| -> Result<usize> {
                rec.get(j)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| Error::Parse {
                        line,
                        message: format!("bad integer in column {j}"),
                    })
            };
            let crossed = field(3)? != 0;
            records.push(DistanceRecord {
                source_index: field(0)?,
                label: field(1)?,
                steps: crossed.then(|| field(2)).transpose()?,
                final_z: Vec::new(),
            });
        }
        Ok(DistanceTable { max_steps, records })
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Indices into `table.records` of the smallest-distance `percent`% of the
/// crossed entries, ordered by `(steps, source_index)`. The count is
/// `ceil(percent/100 · crossed)`.
pub fn select_boundary(table: &DistanceTable, percent: f64) -> Result<Vec<usize>> {
    if table.records.is_empty() {
        return Err(Error::Empty("distance table"));
    }
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(Error::Config(format!("selection percentage must lie in (0, 100], got {percent}")));
    }
    let mut crossed: Vec<(usize, usize, usize)> = table
        .records
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.steps.map(|k| (k, r.source_index, i)))
        .collect();
    if crossed.is_empty() {
        return Err(Error::NoBoundaryFeatures);
    }
    crossed.sort_unstable();
    let take = ((percent * crossed.len() as f64) / 100.0).ceil() as usize;
    Ok(crossed.into_iter().take(take).map(|(_, _, i)| i).collect())
}
