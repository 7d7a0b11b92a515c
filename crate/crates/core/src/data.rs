//! Synthetic benchmark generators, CSV ingestion and the linear toy decoder.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::default_class_names;
use crate::nn::{dot, norm, Matrix};
use crate::rng::{stage_rng, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    IdTest,
    OodTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn new(x: Matrix, labels: Vec<usize>, class_names: Vec<String>, split: Split) -> Result<Self> {
        if labels.len() != x.rows() {
            return Err(Error::dim("dataset label count", x.rows(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_names.len()) {
            return Err(Error::LabelOutOfRange { label: bad, classes: class_names.len() });
        }
        Ok(Dataset { x, labels, class_names, split })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// CSV rows `label_name,x_0,...,x_{D-1}` without header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        for (row, &y) in self.x.iter_rows().zip(&self.labels) {
            let mut rec = Vec::with_capacity(row.len() + 1);
            rec.push(self.class_names[y].clone());
            rec.extend(row.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Load `label,values...` rows. Labels are mapped to dense indices in
/// order of first appearance.
pub fn load_embeddings_csv(path: &Path, split: Split) -> Result<Dataset> {
    load_csv_inner(path, split, None)
}

/// Like [`load_embeddings_csv`] but maps labels onto an existing class list;
/// unknown labels are an error.
pub fn load_embeddings_csv_with_classes(path: &Path, split: Split, classes: &[String]) -> Result<Dataset> {
    load_csv_inner(path, split, Some(classes))
}

fn load_csv_inner(path: &Path, split: Split, known: Option<&[String]>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut names: Vec<String> = known.map(<[String]>::to_vec).unwrap_or_default();
    let mut index: HashMap<String, usize> = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut width = None;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(i as u64 + 1, |p| p.line()) as usize;
        if rec.len() < 2 {
            return Err(Error::Parse { line, message: "row needs a label and at least one value".into() });
        }
        let w = rec.len() - 1;
        match width {
            None => width = Some(w),
            Some(expected) if expected != w => {
                return Err(Error::Parse {
                    line,
                    message: format!("ragged row: expected {expected} values, got {w}"),
                })
            }
            _ => {}
        }
        let name = &rec[0];
        let label = match index.get(name) {
            Some(&l) => l,
            None if known.is_some() => {
                return Err(Error::Parse { line, message: format!("unknown class label {name:?}") })
            }
            None => {
                names.push(name.to_string());
                index.insert(name.to_string(), names.len() - 1);
                names.len() - 1
            }
        };
        labels.push(label);
        for f in rec.iter().skip(1) {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line,
                message: format!("non-numeric value {f:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { line, message: format!("non-finite value {f:?}") });
            }
            data.push(v);
        }
    }
    let width = width.ok_or(Error::Empty("embedding CSV"))?;
    let x = Matrix::from_vec(labels.len(), width, data)?;
    Dataset::new(x, labels, names, split)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    GaussianMixture,
    TwoRings,
    FromCsv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DataKind,
    pub classes: usize,
    pub input_dim: usize,
    /// Dimension of the class structure before it is mixed into `input_dim`.
    pub latent_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub class_center_scale: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Extra mixture components used for the held-out-classes OOD set.
    pub held_out_classes: usize,
    pub radial_factor: f64,
    pub box_inflation: f64,
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
    pub ood_csv: Vec<PathBuf>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            kind: DataKind::GaussianMixture,
            classes: 8,
            input_dim: 16,
            latent_dim: 2,
            train_per_class: 500,
            test_per_class: 200,
            class_center_scale: 3.0,
            noise_sigma: 0.2,
            seed: 7,
            held_out_classes: 8,
            radial_factor: 2.0,
            box_inflation: 1.5,
            train_csv: None,
            test_csv: None,
            ood_csv: Vec::new(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kind == DataKind::FromCsv {
            if self.train_csv.is_none() || self.test_csv.is_none() {
                return Err(Error::Config("from_csv needs train_csv and test_csv".into()));
            }
            return Ok(());
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("samples per class must be at least 1".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(self.class_center_scale > 0.0) {
            return Err(Error::Config("class_center_scale must be positive".into()));
        }
        if self.latent_dim == 0 || self.input_dim < self.latent_dim {
            return Err(Error::Config(format!(
                "need 1 <= latent_dim <= input_dim, got latent_dim={} input_dim={}",
                self.latent_dim, self.input_dim
            )));
        }
        if self.kind == DataKind::TwoRings && self.latent_dim != 2 {
            return Err(Error::Config("two_rings needs latent_dim = 2".into()));
        }
        Ok(())
    }

    fn on_circle(&self) -> bool {
        self.latent_dim == 2 && self.classes <= 8
    }
}

/// Everything needed to reproduce or decode the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorRecord {
    pub seed: u64,
    pub kind: DataKind,
    /// Class centers in the low-dimensional structure space.
    pub latent_centers: Vec<Vec<f64>>,
    /// Class centers after mixing into the input space.
    pub centers: Vec<Vec<f64>>,
    /// Mixing matrix rows (`input_dim × latent_dim`), orthonormal columns.
    pub mixing: Vec<Vec<f64>>,
    pub noise_sigma: f64,
    pub margins: Margins,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    pub held_out_latent_centers: Vec<Vec<f64>>,
    /// Smallest distance from a held-out center to any ID center.
    pub held_out_min_center_distance: f64,
    /// OOD samples are rejected within this distance of any ID center.
    pub exclusion_radius: f64,
}

impl GeneratorRecord {
    pub fn mixing_matrix(&self) -> Matrix {
        Matrix::from_rows(&self.mixing).expect("rectangular mixing matrix")
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn gaussian(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn mixing_matrix(spec: &DatasetSpec) -> Matrix {
    let (d, l) = (spec.input_dim, spec.latent_dim);
    if d == l {
        return Matrix::identity(d);
    }
    let mut rng = stage_rng(spec.seed, "data/mixing");
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(l);
    while cols.len() < l {
        let mut c: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
        for _ in 0..2 {
            for prev in &cols {
                let p = dot(&c, prev);
                c.iter_mut().zip(prev).for_each(|(a, b)| *a -= p * b);
            }
        }
        let n = norm(&c);
        if n > 1e-6 {
            c.iter_mut().for_each(|v| *v /= n);
            cols.push(c);
        }
    }
    let mut m = Matrix::zeros(d, l);
    for (j, c) in cols.iter().enumerate() {
        for (i, v) in c.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    m
}

fn mix(w: &Matrix, latent: &[f64]) -> Vec<f64> {
    w.iter_rows().map(|r| dot(r, latent)).collect()
}

fn latent_centers(spec: &DatasetSpec) -> Vec<Vec<f64>> {
    match spec.kind {
        DataKind::TwoRings => (0..spec.classes).map(|_| vec![0.0, 0.0]).collect(),
        _ if spec.on_circle() => (0..spec.classes)
            .map(|j| {
                let a = TAU * j as f64 / spec.classes as f64;
                vec![spec.class_center_scale * a.cos(), spec.class_center_scale * a.sin()]
            })
            .collect(),
        _ => {
            let mut rng = stage_rng(spec.seed, "data/centers");
            (0..spec.classes)
                .map(|_| (0..spec.latent_dim).map(|_| spec.class_center_scale * gaussian(&mut rng)).collect())
                .collect()
        }
    }
}

fn ring_radius(spec: &DatasetSpec, class: usize) -> f64 {
    spec.class_center_scale * (class + 1) as f64
}

fn min_distance(p: &[f64], centers: &[Vec<f64>]) -> f64 {
    centers
        .iter()
        .map(|c| p.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .fold(f64::INFINITY, f64::min)
}

fn held_out_latent_centers(spec: &DatasetSpec, id_centers: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let count = spec.held_out_classes;
    match spec.kind {
        DataKind::TwoRings => vec![vec![0.0, 0.0]; count.min(1)],
        _ if spec.on_circle() => (0..count)
            .map(|j| {
                // halfway between neighbouring ID classes, cycling through the gaps
                let gap = j % spec.classes;
                let a = TAU * (gap as f64 + 0.5) / spec.classes as f64;
                vec![spec.class_center_scale * a.cos(), spec.class_center_scale * a.sin()]
            })
            .collect(),
        _ => {
            let mut rng = stage_rng(spec.seed, "data/held-out-centers");
            let required = 6.0 * spec.noise_sigma.max(1e-3);
            let mut out = Vec::with_capacity(count);
            let mut tries = 0;
            while out.len() < count && tries < 100_000 {
                tries += 1;
                let c: Vec<f64> = (0..spec.latent_dim)
                    .map(|_| spec.class_center_scale * gaussian(&mut rng))
                    .collect();
                if min_distance(&c, id_centers) >= required {
                    out.push(c);
                }
            }
            out
        }
    }
}

fn record(spec: &DatasetSpec) -> GeneratorRecord {
    let w = mixing_matrix(spec);
    let lc = latent_centers(spec);
    let held = held_out_latent_centers(spec, &lc);
    let held_distance = if spec.kind == DataKind::TwoRings {
        // the held-out ring sits one ring spacing outside the last ID ring
        spec.class_center_scale
    } else {
        held.iter().map(|h| min_distance(h, &lc)).fold(f64::INFINITY, f64::min)
    };
    GeneratorRecord {
        seed: spec.seed,
        kind: spec.kind,
        centers: lc.iter().map(|c| mix(&w, c)).collect(),
        latent_centers: lc,
        mixing: w.iter_rows().map(<[f64]>::to_vec).collect(),
        noise_sigma: spec.noise_sigma,
        margins: Margins {
            held_out_latent_centers: held,
            held_out_min_center_distance: held_distance,
            exclusion_radius: 3.0 * spec.noise_sigma,
        },
    }
}

/// One sample from class `class` of the ID generator.
fn sample_id(spec: &DatasetSpec, rec: &GeneratorRecord, w: &Matrix, class: usize, rng: &mut Rng) -> Vec<f64> {
    let latent = match spec.kind {
        DataKind::TwoRings => {
            let a = rng.random_range(0.0..TAU);
            let r = ring_radius(spec, class);
            vec![r * a.cos(), r * a.sin()]
        }
        _ => rec.latent_centers[class].clone(),
    };
    let mut x = mix(w, &latent);
    x.iter_mut().for_each(|v| *v += spec.noise_sigma * gaussian(rng));
    x
}

fn sample_split(spec: &DatasetSpec, rec: &GeneratorRecord, per_class: usize, stage: &str, split: Split) -> Result<Dataset> {
    let w = rec.mixing_matrix();
    let mut rng = stage_rng(spec.seed, stage);
    let mut rows = Vec::with_capacity(per_class * spec.classes);
    let mut labels = Vec::with_capacity(per_class * spec.classes);
    for class in 0..spec.classes {
        for _ in 0..per_class {
            rows.push(sample_id(spec, rec, &w, class, &mut rng));
            labels.push(class);
        }
    }
    Dataset::new(Matrix::from_rows(&rows)?, labels, default_class_names(spec.classes), split)
}

/// Train and ID-test splits (class-major order) plus the generator record.
pub fn gen_gaussian_mixture(spec: &DatasetSpec) -> Result<(Dataset, Dataset, GeneratorRecord)> {
    spec.validate()?;
    if spec.kind == DataKind::FromCsv {
        return Err(Error::Config("from_csv data is loaded, not generated".into()));
    }
    let rec = record(spec);
    let train = sample_split(spec, &rec, spec.train_per_class, "data/train", Split::Train)?;
    let test = sample_split(spec, &rec, spec.test_per_class, "data/test", Split::IdTest)?;
    Ok((train, test, rec))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodShift {
    HeldOutClasses,
    RadialShift,
    UniformBox,
}

impl OodShift {
    pub const ALL: [OodShift; 3] = [OodShift::HeldOutClasses, OodShift::RadialShift, OodShift::UniformBox];

    pub fn name(self) -> &'static str {
        match self {
            OodShift::HeldOutClasses => "held_out_classes",
            OodShift::RadialShift => "radial_shift",
            OodShift::UniformBox => "uniform_box",
        }
    }
}

/// Per-dimension `(min, max)` of the rows.
fn bounding_box(x: &Matrix) -> Vec<(f64, f64)> {
    (0..x.cols())
        .map(|j| {
            x.iter_rows()
                .map(|r| r[j])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        })
        .collect()
}

/// Uniform samples in the box inflated by `inflation` about its center, kept
/// only when they fall outside the original box.
pub fn sample_outside_box(id: &Matrix, inflation: f64, count: usize, rng: &mut Rng) -> Result<Matrix> {
    if id.rows() == 0 {
        return Err(Error::Empty("ID data for bounding box"));
    }
    if !(inflation > 1.0) {
        return Err(Error::Config(format!("box inflation must exceed 1, got {inflation}")));
    }
    let bbox = bounding_box(id);
    if bbox.iter().any(|(lo, hi)| !(hi - lo > 0.0)) {
        return Err(Error::Config("degenerate ID bounding box: the complement has zero volume".into()));
    }
    let outer: Vec<(f64, f64)> = bbox
        .iter()
        .map(|&(lo, hi)| {
            let (mid, half) = ((lo + hi) / 2.0, (hi - lo) / 2.0 * inflation);
            (mid - half, mid + half)
        })
        .collect();
    let mut rows = Vec::with_capacity(count);
    while rows.len() < count {
        let p: Vec<f64> = outer.iter().map(|&(lo, hi)| rng.random_range(lo..hi)).collect();
        let inside = p.iter().zip(&bbox).all(|(v, (lo, hi))| v >= lo && v <= hi);
        if !inside {
            rows.push(p);
        }
    }
    Matrix::from_rows(&rows)
}

/// Scale every row by `factor` about the origin.
pub fn radial_shift(id: &Matrix, factor: f64) -> Result<Matrix> {
    if !(factor >= 2.0 && factor.is_finite()) {
        return Err(Error::Config(format!("radial shift factor must be >= 2, got {factor}")));
    }
    let mut out = id.clone();
    out.scale(factor);
    Ok(out)
}

fn ood_dataset(x: Matrix) -> Result<Dataset> {
    let n = x.rows();
    Dataset::new(x, vec![0; n], vec!["ood".into()], Split::OodTest)
}

/// An OOD test set of `test_per_class × classes` samples, disjoint from the ID
/// supports by construction.
pub fn gen_ood_testset(spec: &DatasetSpec, shift: OodShift) -> Result<Dataset> {
    let (train, _, rec) = gen_gaussian_mixture(spec)?;
    let count = spec.test_per_class * spec.classes;
    let stage = format!("data/ood/{}", shift.name());
    let mut rng = stage_rng(spec.seed, &stage);
    match shift {
        OodShift::HeldOutClasses => {
            let held = &rec.margins.held_out_latent_centers;
            if held.is_empty() {
                return Err(Error::Config("held_out_classes needs at least one held-out component".into()));
            }
            let radius = rec.margins.exclusion_radius;
            if rec.margins.held_out_min_center_distance <= radius {
                return Err(Error::Config(format!(
                    "held-out margin {} does not clear the {radius} exclusion radius",
                    rec.margins.held_out_min_center_distance
                )));
            }
            let w = rec.mixing_matrix();
            let mut rows = Vec::with_capacity(count);
            let mut i = 0usize;
            let mut attempts = 0usize;
            while rows.len() < count {
                attempts += 1;
                if attempts > 1000 * count {
                    return Err(Error::Numerical("held-out sampling keeps landing inside ID support".into()));
                }
                let latent = if spec.kind == DataKind::TwoRings {
                    let a = rng.random_range(0.0..TAU);
                    let r = ring_radius(spec, spec.classes);
                    vec![r * a.cos(), r * a.sin()]
                } else {
                    held[i % held.len()].clone()
                };
                let mut x = mix(&w, &latent);
                x.iter_mut().for_each(|v| *v += spec.noise_sigma * gaussian(&mut rng));
                let clear = match spec.kind {
                    DataKind::TwoRings => {
                        // distance from the nearest ID ring
                        let r = norm(&x);
                        (0..spec.classes).all(|c| (r - ring_radius(spec, c)).abs() > radius)
                    }
                    _ => min_distance(&x, &rec.centers) > radius,
                };
                if clear {
                    rows.push(x);
                    i += 1;
                }
            }
            ood_dataset(Matrix::from_rows(&rows)?)
        }
        OodShift::RadialShift => {
            let per_class = spec.test_per_class;
            let fresh = sample_split(spec, &rec, per_class, &format!("{stage}/base"), Split::IdTest)?;
            ood_dataset(radial_shift(&fresh.x, spec.radial_factor)?)
        }
        OodShift::UniformBox => ood_dataset(sample_outside_box(&train.x, spec.box_inflation, count, &mut rng)?),
    }
}

/// Linear latent-to-input map `x = W z + b` standing in for a generative decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDecoder {
    /// `input_dim × latent_dim`
    pub w: Matrix,
    pub bias: Vec<f64>,
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

impl ToyDecoder {
    /// Validates that `w` has full column rank.
    pub fn new(w: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != w.rows() {
            return Err(Error::dim("decoder bias", w.rows(), bias.len()));
        }
        if w.rows() < w.cols() {
            return Err(Error::Config("decoder needs input_dim >= latent_dim for full column rank".into()));
        }
        let svd = to_na(&w).svd(false, false);
        let smallest = svd.singular_values.iter().copied().fold(f64::INFINITY, f64::min);
        if !(smallest > 1e-8) {
            return Err(Error::Numerical(format!(
                "decoder matrix is rank deficient (smallest singular value {smallest:e})"
            )));
        }
        Ok(ToyDecoder { w, bias })
    }

    pub fn from_record(rec: &GeneratorRecord) -> Result<Self> {
        let w = rec.mixing_matrix();
        let d = w.rows();
        ToyDecoder::new(w, vec![0.0; d])
    }

    /// Ridge least-squares fit of `inputs ≈ W·features + b`.
    pub fn fit(features: &Matrix, inputs: &Matrix, ridge: f64) -> Result<Self> {
        if features.rows() != inputs.rows() {
            return Err(Error::dim("decoder fit rows", features.rows(), inputs.rows()));
        }
        if features.rows() == 0 {
            return Err(Error::Empty("decoder fit data"));
        }
        let (m, n) = features.shape();
        let mut a = DMatrix::<f64>::zeros(m, n + 1);
        for i in 0..m {
            for j in 0..n {
                a[(i, j)] = features[(i, j)];
            }
            a[(i, n)] = 1.0;
        }
        let mut gram = a.transpose() * &a;
        for j in 0..n {
            gram[(j, j)] += ridge;
        }
        let rhs = a.transpose() * to_na(inputs);
        let coef = gram
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Numerical("singular decoder normal equations".into()))?;
        let d = inputs.cols();
        let mut w = Matrix::zeros(d, n);
        for i in 0..d {
            for j in 0..n {
                w[(i, j)] = coef[(j, i)];
            }
        }
        let bias = (0..d).map(|i| coef[(n, i)]).collect();
        ToyDecoder::new(w, bias)
    }

    pub fn latent_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.latent_dim() {
            return Err(Error::dim("decoder latent width", self.latent_dim(), z.len()));
        }
        Ok(self
            .w
            .iter_rows()
            .zip(&self.bias)
            .map(|(r, b)| dot(r, z) + b)
            .collect())
    }

    pub fn decode_batch(&self, zs: &[Vec<f64>]) -> Result<Matrix> {
        let rows = zs.iter().map(|z| self.decode(z)).collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, self.input_dim()));
        }
        Matrix::from_rows(&rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec {
            classes: 3,
            input_dim: 5,
            train_per_class: 20,
            test_per_class: 10,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn zero_noise_hits_centers() {
        let spec = DatasetSpec { noise_sigma: 0.0, ..small() };
        let (train, _, rec) = gen_gaussian_mixture(&spec).unwrap();
        for (row, &y) in train.x.iter_rows().zip(&train.labels) {
            assert_eq!(row, rec.centers[y].as_slice());
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = gen_gaussian_mixture(&small()).unwrap();
        let b = gen_gaussian_mixture(&small()).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
        let c = gen_gaussian_mixture(&DatasetSpec { seed: 8, ..small() }).unwrap();
        assert_ne!(a.0.x, c.0.x);
        for s in OodShift::ALL {
            assert_eq!(gen_ood_testset(&small(), s).unwrap(), gen_ood_testset(&small(), s).unwrap());
        }
    }

    #[test]
    fn class_means_are_close_to_centers() {
        let spec = DatasetSpec { train_per_class: 500, ..DatasetSpec::default() };
        let (train, _, rec) = gen_gaussian_mixture(&spec).unwrap();
        let m = spec.train_per_class as f64;
        let bound = 3.0 * spec.noise_sigma / m.sqrt();
        for class in 0..spec.classes {
            let rows: Vec<&[f64]> = train
                .x
                .iter_rows()
                .zip(&train.labels)
                .filter(|(_, &y)| y == class)
                .map(|(r, _)| r)
                .collect();
            for j in 0..spec.input_dim {
                let mean = rows.iter().map(|r| r[j]).sum::<f64>() / m;
                assert!((mean - rec.centers[class][j]).abs() < bound, "class {class} dim {j}");
            }
        }
    }

    #[test]
    fn mixing_has_orthonormal_columns() {
        let (_, _, rec) = gen_gaussian_mixture(&DatasetSpec::default()).unwrap();
        let w = rec.mixing_matrix();
        let g = w.t_matmul(&w).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((g[(i, j)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn held_out_respects_margin() {
        let spec = DatasetSpec::default();
        let (_, _, rec) = gen_gaussian_mixture(&spec).unwrap();
        assert!(rec.margins.held_out_min_center_distance > rec.margins.exclusion_radius);
        let ood = gen_ood_testset(&spec, OodShift::HeldOutClasses).unwrap();
        assert_eq!(ood.len(), spec.test_per_class * spec.classes);
        for row in ood.x.iter_rows() {
            assert!(min_distance(row, &rec.centers) > 3.0 * spec.noise_sigma);
        }
    }

    #[test]
    fn radial_and_box_constraints() {
        assert!(radial_shift(&Matrix::identity(2), 1.0).is_err());
        let spec = small();
        let (train, _, _) = gen_gaussian_mixture(&spec).unwrap();
        let bbox = bounding_box(&train.x);
        let ood = gen_ood_testset(&spec, OodShift::UniformBox).unwrap();
        for row in ood.x.iter_rows() {
            assert!(row.iter().zip(&bbox).any(|(v, (lo, hi))| v < lo || v > hi));
        }
        let flat = Matrix::from_rows(&[[0.0, 1.0], [1.0, 1.0]]).unwrap();
        assert!(sample_outside_box(&flat, 1.5, 3, &mut stage_rng(0, "t")).is_err());
        assert!(sample_outside_box(&train.x, 1.0, 3, &mut stage_rng(0, "t")).is_err());
    }

    #[test]
    fn two_rings_generate() {
        let spec = DatasetSpec { kind: DataKind::TwoRings, classes: 2, input_dim: 4, ..small() };
        let (train, _, _) = gen_gaussian_mixture(&spec).unwrap();
        assert_eq!(train.len(), 40);
        let ood = gen_ood_testset(&spec, OodShift::HeldOutClasses).unwrap();
        assert_eq!(ood.len(), 20);
    }

    #[test]
    fn decoder_identity_and_linearity() {
        let d = ToyDecoder::new(Matrix::identity(3), vec![0.0; 3]).unwrap();
        assert_eq!(d.decode(&[1.0, -2.0, 0.5]).unwrap(), vec![1.0, -2.0, 0.5]);
        let w = Matrix::from_rows(&[[1.0, 2.0], [0.0, 1.0], [3.0, -1.0]]).unwrap();
        let b = vec![0.5, -1.0, 2.0];
        let d = ToyDecoder::new(w, b.clone()).unwrap();
        let z = [0.3, -0.7];
        let a = 2.5;
        let lhs: Vec<f64> = d.decode(&[a * z[0], a * z[1]]).unwrap().iter().zip(&b).map(|(x, b)| x - b).collect();
        let rhs: Vec<f64> = d.decode(&z).unwrap().iter().zip(&b).map(|(x, b)| a * (x - b)).collect();
        for (l, r) in lhs.iter().zip(rhs) {
            assert!((l - r).abs() < 1e-12);
        }
        assert!(d.decode(&[1.0]).is_err());
        let rank1 = Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]]).unwrap();
        assert!(ToyDecoder::new(rank1, vec![0.0; 3]).is_err());
    }

    #[test]
    fn decoder_fit_recovers_linear_map() {
        let w = Matrix::from_rows(&[[1.0, 2.0], [0.0, 1.0], [3.0, -1.0]]).unwrap();
        let truth = ToyDecoder::new(w.clone(), vec![0.5, -1.0, 2.0]).unwrap();
        let mut rng = stage_rng(1, "fit");
        let zs: Vec<Vec<f64>> = (0..50).map(|_| vec![gaussian(&mut rng), gaussian(&mut rng)]).collect();
        let x = truth.decode_batch(&zs).unwrap();
        let fit = ToyDecoder::fit(&Matrix::from_rows(&zs).unwrap(), &x, 0.0).unwrap();
        for (a, b) in fit.w.data().iter().zip(w.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn csv_ingestion() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        std::fs::write(&p, "cat,1,2,3\ndog,4,5,6\ncat,7,8,9\n").unwrap();
        let d = load_embeddings_csv(&p, Split::Train).unwrap();
        assert_eq!(d.labels, vec![0, 1, 0]);
        assert_eq!(d.class_names, vec!["cat", "dog"]);

        std::fs::write(&p, "cat,1,2,3\ndog,4,5,6,7\n").unwrap();
        match load_embeddings_csv(&p, Split::Train) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("ragged"));
            }
            other => panic!("expected ragged-row error, got {other:?}"),
        }
        std::fs::write(&p, "cat,1,x\n").unwrap();
        assert!(matches!(load_embeddings_csv(&p, Split::Train), Err(Error::Parse { line: 1, .. })));
        std::fs::write(&p, "").unwrap();
        assert!(matches!(load_embeddings_csv(&p, Split::Train), Err(Error::Empty(_))));
        std::fs::write(&p, "bird,1,2\n").unwrap();
        let known = vec!["cat".to_string()];
        assert!(load_embeddings_csv_with_classes(&p, Split::IdTest, &known).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let (train, _, _) = gen_gaussian_mixture(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.csv");
        train.write_csv(&p).unwrap();
        let back = load_embeddings_csv(&p, Split::Train).unwrap();
        assert_eq!(back.labels, train.labels);
        for (a, b) in back.x.data().iter().zip(train.x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
