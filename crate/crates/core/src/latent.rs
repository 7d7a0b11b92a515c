//! Text-conditioned latent space: fixed unit anchors per class, an MLP encoder
//! trained so that normalized features align with their class anchor, and the
//! cosine classifier over raw features.

use std::collections::HashSet;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::mlp::check_labels;
use crate::nn::{
    argmax, cosine_lr, dot, log_sum_exp, norm, sgd_step, softmax, BatchSchedule, LossHead, Matrix, Mlp,
    TrainConfig,
};
use crate::rng::{seeded, Rng};

/// Features at or below this norm have no direction.
pub const MIN_FEATURE_NORM: f64 = 1e-9;

/// One unit-norm anchor embedding per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    names: Vec<String>,
    anchors: Matrix,
}

impl AnchorSet {
    /// Normalize the given rows and validate the set.
    pub fn from_rows(names: Vec<String>, rows: &Matrix) -> Result<Self> {
        if names.len() != rows.rows() {
            return Err(Error::dim("anchor names", rows.rows(), names.len()));
        }
        if names.len() < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", names.len())));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::Config(format!("duplicate class name {dup:?}")));
        }
        let mut anchors = rows.clone();
        for i in 0..anchors.rows() {
            let row = anchors.row_mut(i);
            let len = norm(row);
            if len <= MIN_FEATURE_NORM {
                return Err(Error::Config(format!("anchor {:?} has zero norm", names[i])));
            }
            row.iter_mut().for_each(|v| *v /= len);
        }
        for i in 0..anchors.rows() {
            for j in 0..i {
                if dot(anchors.row(i), anchors.row(j)) > 1.0 - 1e-12 {
                    return Err(Error::Config(format!(
                        "anchors {:?} and {:?} coincide",
                        names[j], names[i]
                    )));
                }
            }
        }
        Ok(AnchorSet { names, anchors })
    }

    /// Pairwise-orthogonal random anchors; requires `dim >= names.len()`.
    pub fn random_orthonormal(names: Vec<String>, dim: usize, rng: &mut Rng) -> Result<Self> {
        let v = names.len();
        if dim < v {
            return Err(Error::Config(format!(
                "orthonormal anchors need dim >= classes, got dim={dim} classes={v}"
            )));
        }
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(v);
        while rows.len() < v {
            let mut cand: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            // two Gram-Schmidt passes keep dot products at round-off level
            for _ in 0..2 {
                for r in &rows {
                    let proj = dot(&cand, r);
                    cand.iter_mut().zip(r).for_each(|(c, x)| *c -= proj * x);
                }
            }
            let len = norm(&cand);
            if len > 1e-6 {
                cand.iter_mut().for_each(|c| *c /= len);
                rows.push(cand);
            }
        }
        AnchorSet::from_rows(names, &Matrix::from_rows(&rows)?)
    }

    /// CSV rows: class name, then components. No header.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let mut names = Vec::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let line = i + 1;
            let mut fields = rec.iter();
            let name = fields.next().unwrap_or_default().to_string();
            let comps = fields
                .map(|f| {
                    f.parse::<f64>().map_err(|_| Error::Parse {
                        line,
                        message: format!("non-numeric anchor component {f:?}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if comps.is_empty() {
                return Err(Error::Parse { line, message: "anchor row has no components".into() });
            }
            if let Some(first) = rows.first() {
                if first.len() != comps.len() {
                    return Err(Error::Parse {
                        line,
                        message: format!("expected {} components, got {}", first.len(), comps.len()),
                    });
                }
            }
            names.push(name);
            rows.push(comps);
        }
        if rows.is_empty() {
            return Err(Error::Empty("anchor file"));
        }
        AnchorSet::from_rows(names, &Matrix::from_rows(&rows)?)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        for (name, row) in self.names.iter().zip(self.anchors.iter_rows()) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.anchors.rows()
    }

    pub fn dim(&self) -> usize {
        self.anchors.cols()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn anchor(&self, class: usize) -> &[f64] {
        self.anchors.row(class)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.anchors
    }
}

pub fn default_class_names(classes: usize) -> Vec<String> {
    (0..classes).map(|i| format!("class_{i}")).collect()
}

/// A classifier acting directly on latent features, as probed by the
/// boundary search and the outlier synthesis.
pub trait FeatureClassifier: Sync {
    fn num_classes(&self) -> usize;

    fn predict(&self, z: &[f64]) -> Result<usize>;

    /// Loss against label `y` and its gradient with respect to `z`.
    fn loss_and_grad(&self, z: &[f64], y: usize) -> Result<(f64, Vec<f64>)>;
}

/// Cosine similarity to each anchor; the loss is softmax cross-entropy over
/// `cosine / t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineClassifier {
    pub anchors: AnchorSet,
    pub temperature: f64,
}

impl CosineClassifier {
    pub fn new(anchors: AnchorSet, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        Ok(CosineClassifier { anchors, temperature })
    }

    fn check(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.anchors.dim() {
            return Err(Error::dim("latent feature width", self.anchors.dim(), z.len()));
        }
        let len = norm(z);
        if !(len > MIN_FEATURE_NORM) {
            return Err(Error::DegenerateFeature { norm: len });
        }
        Ok(len)
    }

    /// Cosine similarity of `z` to every anchor.
    pub fn cosine_logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        let len = self.check(z)?;
        Ok(self
            .anchors
            .matrix()
            .iter_rows()
            .map(|a| dot(z, a) / len)
            .collect())
    }
}

impl FeatureClassifier for CosineClassifier {
    fn num_classes(&self) -> usize {
        self.anchors.num_classes()
    }

    fn predict(&self, z: &[f64]) -> Result<usize> {
        Ok(argmax(&self.cosine_logits(z)?))
    }

    fn loss_and_grad(&self, z: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
        check_labels(&[y], self.num_classes())?;
        let len = self.check(z)?;
        let t = self.temperature;
        let unit: Vec<f64> = z.iter().map(|v| v / len).collect();
        let scaled: Vec<f64> = self
            .anchors
            .matrix()
            .iter_rows()
            .map(|a| dot(&unit, a) / t)
            .collect();
        let loss = log_sum_exp(&scaled) - scaled[y];
        let mut d_logit = softmax(&scaled);
        d_logit[y] -= 1.0;
        // ∂L/∂unit = Σ_j (p_j − δ_jy)/t · a_j
        let mut g_unit = vec![0.0; z.len()];
        for (d, a) in d_logit.iter().zip(self.anchors.matrix().iter_rows()) {
            g_unit.iter_mut().zip(a).for_each(|(g, &aj)| *g += d / t * aj);
        }
        // project out the radial component: ∂unit/∂z = (I − ûûᵀ)/|z|
        let radial = dot(&unit, &g_unit);
        let grad = g_unit
            .iter()
            .zip(&unit)
            .map(|(g, u)| (g - u * radial) / len)
            .collect();
        Ok((loss, grad))
    }
}

impl LossHead for CosineClassifier {
    fn loss_and_grad(&self, output: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
        let n = output.rows();
        if n == 0 {
            return Err(Error::Empty("latent loss batch"));
        }
        let mut grad = Matrix::zeros(n, output.cols());
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let (l, g) = FeatureClassifier::loss_and_grad(self, output.row(i), y)?;
            total += l;
            grad.row_mut(i)
                .iter_mut()
                .zip(g)
                .for_each(|(o, v)| *o = v / n as f64);
        }
        Ok((total / n as f64, grad))
    }
}

/// A feature in the latent space together with its label and dataset row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentFeature {
    pub z: Vec<f64>,
    pub label: usize,
    pub source_index: usize,
}

impl LatentFeature {
    pub fn new(z: Vec<f64>, label: usize, source_index: usize) -> Result<Self> {
        let len = norm(&z);
        if !(len > MIN_FEATURE_NORM) {
            return Err(Error::DegenerateFeature { norm: len });
        }
        Ok(LatentFeature { z, label, source_index })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Encoder `h` with the cosine head over its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderModel {
    pub mlp: Mlp,
    pub classifier: CosineClassifier,
}

impl EncoderModel {
    pub fn new(mlp: Mlp, classifier: CosineClassifier) -> Result<Self> {
        if mlp.output_width() != classifier.anchors.dim() {
            return Err(Error::dim(
                "encoder output width",
                classifier.anchors.dim(),
                mlp.output_width(),
            ));
        }
        Ok(EncoderModel { mlp, classifier })
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }

    /// Mean contrastive anchor loss over the batch.
    pub fn latent_loss(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        if x.rows() == 0 {
            return Err(Error::Empty("latent loss batch"));
        }
        check_labels(labels, self.num_classes())?;
        let z = self.mlp.forward(x)?;
        Ok(LossHead::loss_and_grad(&self.classifier, &z, labels)?.0)
    }

    pub fn accuracy(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        let z = self.mlp.forward(x)?;
        let mut correct = 0usize;
        for (row, &y) in z.iter_rows().zip(labels) {
            if self.classifier.predict(row)? == y {
                correct += 1;
            }
        }
        Ok(correct as f64 / labels.len().max(1) as f64)
    }

    /// Minibatch SGD with cosine decay. The history starts with the untrained
    /// model (epoch 0), followed by one full-data evaluation per epoch.
    pub fn train(&mut self, x: &Matrix, labels: &[usize], cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
        cfg.validate()?;
        if x.rows() == 0 {
            return Err(Error::Empty("encoder training set"));
        }
        if labels.len() != x.rows() {
            return Err(Error::dim("label count", x.rows(), labels.len()));
        }
        check_labels(labels, self.num_classes())?;
        let mut history = vec![EpochStats {
            epoch: 0,
            loss: self.latent_loss(x, labels)?,
            accuracy: self.accuracy(x, labels)?,
        }];
        if cfg.epochs == 0 {
            return Ok(history);
        }
        let mut rng = seeded(cfg.seed);
        let mut schedule = BatchSchedule::new(x.rows(), cfg.batch_size, cfg.shuffle);
        let total_steps = cfg.epochs * cfg.batches_per_epoch(x.rows());
        let mut step = 0;
        for epoch in 1..=cfg.epochs {
            for batch in schedule.epoch(&mut rng) {
                let bx = x.select_rows(&batch);
                let by: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                let (_, grads) = self.mlp.loss_and_grads(&bx, &by, &self.classifier)?;
                let lr = cosine_lr(step, total_steps, cfg.lr_init, cfg.lr_min);
                sgd_step(&mut self.mlp.params, &grads.params, lr)?;
                step += 1;
            }
            if !self.mlp.params.is_finite() {
                return Err(Error::Numerical(format!("encoder diverged in epoch {epoch}")));
            }
            history.push(EpochStats {
                epoch,
                loss: self.latent_loss(x, labels)?,
                accuracy: self.accuracy(x, labels)?,
            });
        }
        Ok(history)
    }

    /// Raw (unnormalized) encoder outputs, one per row, in row order.
    pub fn encode(&self, x: &Matrix, labels: &[usize]) -> Result<Vec<LatentFeature>> {
        if labels.len() != x.rows() {
            return Err(Error::dim("label count", x.rows(), labels.len()));
        }
        let z = self.mlp.forward(x)?;
        z.iter_rows()
            .zip(labels)
            .enumerate()
            .map(|(i, (row, &y))| LatentFeature::new(row.to_vec(), y, i))
            .collect()
    }
}
