//! Energy-regularized OOD detector: a classifier backbone `g` whose logit
//! energy feeds a small scalar MLP `φ`; training minimizes
//! `CE + β · L_ood` where `L_ood` is a logistic loss separating ID from OOD
//! through `φ(E(g(x)))`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::mlp::{check_labels, softmax_ce};
use crate::nn::{
    argmax, cosine_lr, log_sum_exp, sgd_step, sigmoid, softmax, softplus, Activation, BatchSchedule, Matrix, Mlp,
    MlpParams, MlpSpec, TrainConfig,
};
use crate::par::Exec;
use crate::rng::{derive_seed, seeded, Rng};

/// `E = −log Σ exp(logit)`, temperature 1.
pub fn energy(logits: &[f64]) -> f64 {
    -log_sum_exp(logits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DetectorMode {
    /// Inputs live in the raw data space; outliers arrive decoded.
    #[default]
    Decoded,
    /// Inputs are latent features from a frozen upstream encoder.
    Latent,
}

/// Scalar-to-scalar MLP `φ` with two hidden layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyHead(pub Mlp);

impl EnergyHead {
    pub fn init(hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(EnergyHead(Mlp::init(
            MlpSpec::new(vec![1, hidden, hidden, 1], Activation::Tanh)?,
            rng,
        )?))
    }

    pub fn new(mlp: Mlp) -> Result<Self> {
        if mlp.input_width() != 1 || mlp.output_width() != 1 {
            return Err(Error::dim("energy head width", 1, mlp.input_width().max(mlp.output_width())));
        }
        Ok(EnergyHead(mlp))
    }

    pub fn eval(&self, e: f64) -> f64 {
        self.0
            .forward(&Matrix::row_vector(&[e]))
            .expect("scalar head")
            .data()[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub backbone: Mlp,
    pub head: EnergyHead,
    pub mode: DetectorMode,
}

/// Loss values and gradients of the combined objective.
#[derive(Debug, Clone)]
pub struct ObjectiveGrads {
    pub ce: f64,
    pub ood: Option<f64>,
    pub total: f64,
    pub backbone: MlpParams,
    pub head: MlpParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorEpoch {
    pub epoch: usize,
    pub ce_loss: f64,
    /// Unweighted OOD term; absent when training without outliers.
    pub ood_loss: Option<f64>,
    pub id_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorTrainConfig {
    pub beta: f64,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        DetectorTrainConfig {
            beta: 2.5,
            train: TrainConfig::default(),
        }
    }
}

impl DetectorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        self.train.validate()
    }
}

fn energies(logits: &Matrix) -> Matrix {
    let e: Vec<f64> = logits.iter_rows().map(energy).collect();
    Matrix::from_vec(e.len(), 1, e).expect("finite energies")
}

/// `mean softplus(−s_id) + mean softplus(s_ood)`: the logistic loss with ID as
/// the positive class, in overflow-free form.
pub fn ood_loss_from_scores(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(Error::Empty("OOD loss batch"));
    }
    let id = id_scores.iter().map(|&s| softplus(-s)).sum::<f64>() / id_scores.len() as f64;
    let ood = ood_scores.iter().map(|&s| softplus(s)).sum::<f64>() / ood_scores.len() as f64;
    Ok(id + ood)
}

impl DetectorModel {
    pub fn init(backbone: MlpSpec, head_hidden: usize, mode: DetectorMode, rng: &mut Rng) -> Result<Self> {
        let backbone = Mlp::init(backbone, rng)?;
        let head = EnergyHead::init(head_hidden, rng)?;
        Ok(DetectorModel { backbone, head, mode })
    }

    pub fn input_width(&self) -> usize {
        self.backbone.input_width()
    }

    pub fn num_classes(&self) -> usize {
        self.backbone.output_width()
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        self.backbone.forward(x)
    }

    /// `φ(E(g(x)))` per row.
    pub fn head_scores(&self, x: &Matrix) -> Result<Vec<f64>> {
        let e = energies(&self.logits(x)?);
        Ok(self.head.0.forward(&e)?.into_data())
    }

    /// `σ(φ(E(g(x))))` per row; higher means more ID-like.
    pub fn ood_scores(&self, x: &Matrix) -> Result<Vec<f64>> {
        Ok(self.head_scores(x)?.into_iter().map(sigmoid).collect())
    }

    /// Scores computed in row chunks, possibly in parallel; identical to
    /// [`Self::ood_scores`] regardless of `exec`.
    pub fn ood_scores_chunked(&self, x: &Matrix, chunk: usize, exec: Exec) -> Result<Vec<f64>> {
        let chunk = chunk.max(1);
        let starts: Vec<usize> = (0..x.rows()).step_by(chunk).collect();
        let parts = exec.map(&starts, |&s| {
            let idx: Vec<usize> = (s..(s + chunk).min(x.rows())).collect();
            self.ood_scores(&x.select_rows(&idx))
        });
        let mut out = Vec::with_capacity(x.rows());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.iter_rows().map(argmax).collect())
    }

    /// The OOD regularizer alone.
    pub fn ood_loss(&self, id_x: &Matrix, ood_x: &Matrix) -> Result<f64> {
        ood_loss_from_scores(&self.head_scores(id_x)?, &self.head_scores(ood_x)?)
    }

    /// `CE(id) + β · L_ood(id, ood)` with gradients for backbone and head.
    /// With an empty OOD batch this is plain cross-entropy.
    pub fn objective_and_grads(
        &self,
        id_x: &Matrix,
        id_y: &[usize],
        ood_x: &Matrix,
        beta: f64,
    ) -> Result<ObjectiveGrads> {
        if id_x.rows() == 0 {
            return Err(Error::Empty("ID batch"));
        }
        if id_y.len() != id_x.rows() {
            return Err(Error::dim("label count", id_x.rows(), id_y.len()));
        }
        if ood_x.rows() > 0 && ood_x.cols() != self.input_width() {
            return Err(Error::dim("OOD input width", self.input_width(), ood_x.cols()));
        }
        check_labels(id_y, self.num_classes())?;
        let id_cache = self.backbone.forward_cached(id_x)?;
        let (ce, mut d_logits_id) = softmax_ce(&id_cache.output, id_y)?;
        let mut head_grads = MlpParams::zeros(&self.head.0.spec);
        let mut backbone_grads = MlpParams::zeros(&self.backbone.spec);

        let mut ood_value = None;
        if ood_x.rows() > 0 {
            let ood_cache = self.backbone.forward_cached(ood_x)?;
            let e_id = energies(&id_cache.output);
            let e_ood = energies(&ood_cache.output);
            let h_id = self.head.0.forward_cached(&e_id)?;
            let h_ood = self.head.0.forward_cached(&e_ood)?;
            let s_id = h_id.output.data();
            let s_ood = h_ood.output.data();
            ood_value = Some(ood_loss_from_scores(s_id, s_ood)?);

            // β = 0 contributes nothing; skipping keeps plain-CE runs bit-identical
            if beta != 0.0 {
                let (n, m) = (s_id.len() as f64, s_ood.len() as f64);
                let ds_id: Vec<f64> = s_id.iter().map(|&s| -beta * sigmoid(-s) / n).collect();
                let ds_ood: Vec<f64> = s_ood.iter().map(|&s| beta * sigmoid(s) / m).collect();
                let g_id = self
                    .head
                    .0
                    .backward(&h_id, &Matrix::from_vec(ds_id.len(), 1, ds_id)?)?;
                let g_ood = self
                    .head
                    .0
                    .backward(&h_ood, &Matrix::from_vec(ds_ood.len(), 1, ds_ood)?)?;
                head_grads.add_scaled(&g_id.params, 1.0)?;
                head_grads.add_scaled(&g_ood.params, 1.0)?;

                // ∂E/∂logits = −softmax(logits)
                let mut d_logits_ood = Matrix::zeros(ood_x.rows(), self.num_classes());
                for i in 0..id_x.rows() {
                    let de = g_id.input[(i, 0)];
                    let p = softmax(id_cache.output.row(i));
                    for (d, pj) in d_logits_id.row_mut(i).iter_mut().zip(p) {
                        *d -= de * pj;
                    }
                }
                for i in 0..ood_x.rows() {
                    let de = g_ood.input[(i, 0)];
                    let p = softmax(ood_cache.output.row(i));
                    for (d, pj) in d_logits_ood.row_mut(i).iter_mut().zip(p) {
                        *d = -de * pj;
                    }
                }
                let g = self.backbone.backward(&ood_cache, &d_logits_ood)?;
                backbone_grads.add_scaled(&g.params, 1.0)?;
            }
        }
        let g = self.backbone.backward(&id_cache, &d_logits_id)?;
        backbone_grads.add_scaled(&g.params, 1.0)?;
        let total = ce + beta * ood_value.unwrap_or(0.0);
        Ok(ObjectiveGrads {
            ce,
            ood: ood_value,
            total,
            backbone: backbone_grads,
            head: head_grads,
        })
    }

    pub fn accuracy(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        if x.rows() == 0 {
            return Err(Error::Empty("accuracy set"));
        }
        let pred = self.predict(x)?;
        let correct = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(correct as f64 / labels.len() as f64)
    }

    /// Minibatch SGD on `CE + β · L_ood`. Each ID batch is paired with a
    /// proportionally sized slice of a separately shuffled outlier order.
    pub fn train(
        &mut self,
        id_x: &Matrix,
        id_y: &[usize],
        ood_x: &Matrix,
        cfg: &DetectorTrainConfig,
    ) -> Result<Vec<DetectorEpoch>> {
        cfg.validate()?;
        if id_x.rows() == 0 {
            return Err(Error::Empty("detector training set"));
        }
        if id_x.cols() != self.input_width() {
            return Err(Error::dim("detector input width", self.input_width(), id_x.cols()));
        }
        if ood_x.rows() > 0 && ood_x.cols() != self.input_width() {
            return Err(Error::dim("outlier input width", self.input_width(), ood_x.cols()));
        }
        if ood_x.rows() == 0 && cfg.beta > 0.0 {
            return Err(Error::Empty("outlier set for beta > 0"));
        }
        check_labels(id_y, self.num_classes())?;
        let tc = &cfg.train;
        let mut history = Vec::with_capacity(tc.epochs);
        if tc.epochs == 0 {
            return Ok(history);
        }
        let mut rng = seeded(tc.seed);
        let mut ood_rng = seeded(derive_seed(tc.seed, "outlier-order"));
        let mut schedule = BatchSchedule::new(id_x.rows(), tc.batch_size, tc.shuffle);
        let mut ood_order: Vec<usize> = (0..ood_x.rows()).collect();
        let total_steps = tc.epochs * tc.batches_per_epoch(id_x.rows());
        let mut step = 0;
        for epoch in 1..=tc.epochs {
            if tc.shuffle {
                ood_order.shuffle(&mut ood_rng);
            }
            let mut ood_cursor = 0usize;
            let (mut ce_sum, mut ood_sum, mut seen) = (0.0, 0.0, 0usize);
            for batch in schedule.epoch(&mut rng) {
                let bx = id_x.select_rows(&batch);
                let by: Vec<usize> = batch.iter().map(|&i| id_y[i]).collect();
                let take = (ood_order.len() * batch.len()).div_ceil(id_x.rows());
                let ood_idx: Vec<usize> = (0..take)
                    .map(|j| ood_order[(ood_cursor + j) % ood_order.len()])
                    .collect();
                ood_cursor += take;
                let ob = ood_x.select_rows(&ood_idx);
                let og = self.objective_and_grads(&bx, &by, &ob, cfg.beta)?;
                let lr = cosine_lr(step, total_steps, tc.lr_init, tc.lr_min);
                sgd_step(&mut self.backbone.params, &og.backbone, lr)?;
                if og.ood.is_some() && cfg.beta != 0.0 {
                    sgd_step(&mut self.head.0.params, &og.head, lr)?;
                }
                ce_sum += og.ce * batch.len() as f64;
                ood_sum += og.ood.unwrap_or(0.0) * batch.len() as f64;
                seen += batch.len();
                step += 1;
            }
            if !(self.backbone.params.is_finite() && self.head.0.params.is_finite()) {
                return Err(Error::Numerical(format!("detector diverged in epoch {epoch}")));
            }
            history.push(DetectorEpoch {
                epoch,
                ce_loss: ce_sum / seen as f64,
                ood_loss: (ood_x.rows() > 0).then(|| ood_sum / seen as f64),
                id_acc: self.accuracy(id_x, id_y)?,
            });
        }
        Ok(history)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{finite_diff_check, DEFAULT_STEP};
    use rand::Rng as _;

    #[test]
    fn energy_examples() {
        assert!((energy(&[0.0, 0.0]) + 2f64.ln()).abs() < 1e-15);
        assert!((energy(&[1.0, 0.0]) - (-1.313262)).abs() < 1e-6);
        let c = 3.7;
        assert!((energy(&[c; 5]) + (c + 5f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn energy_shift_identity() {
        let mut rng = seeded(4);
        for _ in 0..100 {
            let l: Vec<f64> = (0..6).map(|_| rng.random_range(-5.0..5.0)).collect();
            let c: f64 = rng.random_range(-3.0..3.0);
            let shifted: Vec<f64> = l.iter().map(|v| v + c).collect();
            assert!((energy(&shifted) - (energy(&l) - c)).abs() < 1e-12);
        }
    }

    #[test]
    fn ood_loss_examples() {
        assert!((ood_loss_from_scores(&[0.0], &[0.0]).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-15);
        let v = ood_loss_from_scores(&[2.0], &[-1.0]).unwrap();
        assert!((v - 0.440190).abs() < 1e-6);
        assert!(ood_loss_from_scores(&[800.0], &[-800.0]).unwrap() < 1e-300);
        assert!(ood_loss_from_scores(&[], &[1.0]).is_err());
    }

    #[test]
    fn swapping_batches_swaps_terms_under_negated_head() {
        // σ(−φ) = 1 − σ(φ): with φ negated, the ID term on B equals the OOD term on B
        // under the original head, and vice versa
        let m = small_model(6);
        let mut neg = m.clone();
        let last = neg.head.0.params.layers.last_mut().unwrap();
        last.weight.scale(-1.0);
        last.bias.iter_mut().for_each(|b| *b = -*b);
        let mut rng = seeded(8);
        let a = random_rows(&mut rng, 5, 3);
        let b = random_rows(&mut rng, 3, 3);
        let sa = m.head_scores(&a).unwrap();
        let sb = m.head_scores(&b).unwrap();
        let na = neg.head_scores(&a).unwrap();
        let nb = neg.head_scores(&b).unwrap();
        let id_term = |s: &[f64]| s.iter().map(|&v| softplus(-v)).sum::<f64>() / s.len() as f64;
        let ood_term = |s: &[f64]| s.iter().map(|&v| softplus(v)).sum::<f64>() / s.len() as f64;
        assert_eq!(id_term(&nb), ood_term(&sb));
        assert_eq!(ood_term(&na), id_term(&sa));
        assert_eq!(
            ood_loss_from_scores(&sa, &sb).unwrap(),
            ood_loss_from_scores(&nb, &na).unwrap()
        );
    }

    fn small_model(seed: u64) -> DetectorModel {
        let spec = MlpSpec::new(vec![3, 6, 3], Activation::Tanh).unwrap();
        DetectorModel::init(spec, 4, DetectorMode::Decoded, &mut seeded(seed)).unwrap()
    }

    fn random_rows(rng: &mut Rng, n: usize, d: usize) -> Matrix {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect();
        Matrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        for trial in 0..20u64 {
            let model = small_model(trial);
            let mut rng = seeded(1000 + trial);
            let id_x = random_rows(&mut rng, 4, 3);
            let ood_x = random_rows(&mut rng, 3, 3);
            let id_y: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
            let beta = 2.5;
            let og = model.objective_and_grads(&id_x, &id_y, &ood_x, beta).unwrap();

            let backbone_loss = |p: &MlpParams, _: &Matrix| {
                let mut m = model.clone();
                m.backbone.params = p.clone();
                m.objective_and_grads(&id_x, &id_y, &ood_x, beta).unwrap().total
            };
            let r = finite_diff_check(&model.backbone.params, &id_x, backbone_loss, &og.backbone, None, DEFAULT_STEP, 1e-4);
            assert!(r.passed(), "trial {trial} backbone: {} at {:?}", r.max_rel_error, r.worst);

            let head_loss = |p: &MlpParams, _: &Matrix| {
                let mut m = model.clone();
                m.head.0.params = p.clone();
                m.objective_and_grads(&id_x, &id_y, &ood_x, beta).unwrap().total
            };
            let r = finite_diff_check(&model.head.0.params, &id_x, head_loss, &og.head, None, DEFAULT_STEP, 1e-4);
            assert!(r.passed(), "trial {trial} head: {} at {:?}", r.max_rel_error, r.worst);
        }
    }

    #[test]
    fn score_is_sigmoid_of_head() {
        let mut m = small_model(1);
        // zero the head so φ ≡ 0
        m.head.0.params.values_mut().for_each(|v| *v = 0.0);
        let x = Matrix::from_rows(&[[0.1, 0.2, 0.3]]).unwrap();
        assert_eq!(m.ood_scores(&x).unwrap(), vec![0.5]);
        let ood = Matrix::from_rows(&[[1.0, 0.0, -1.0]]).unwrap();
        assert!((m.ood_loss(&x, &ood).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!(m.ood_scores(&Matrix::row_vector(&[1.0])).is_err());
    }

    #[test]
    fn chunked_scores_match() {
        let m = small_model(2);
        let x = random_rows(&mut seeded(3), 37, 3);
        let full = m.ood_scores(&x).unwrap();
        assert_eq!(m.ood_scores_chunked(&x, 8, Exec::Parallel).unwrap(), full);
        assert_eq!(m.ood_scores_chunked(&x, 5, Exec::Sequential).unwrap(), full);
    }

    #[test]
    fn beta_zero_equals_plain_ce() {
        let mut rng = seeded(9);
        let x = random_rows(&mut rng, 40, 3);
        let y: Vec<usize> = (0..40).map(|i| i % 3).collect();
        let ood = random_rows(&mut rng, 10, 3);
        let cfg = DetectorTrainConfig {
            beta: 0.0,
            train: TrainConfig { epochs: 3, batch_size: 8, seed: 5, ..TrainConfig::default() },
        };
        let mut a = small_model(4);
        let mut b = small_model(4);
        let ha = a.train(&x, &y, &ood, &cfg).unwrap();
        b.train(&x, &y, &Matrix::zeros(0, 3), &cfg).unwrap();
        assert_eq!(a.backbone.params, b.backbone.params);
        assert!(ha.iter().all(|e| e.ood_loss.is_some()));
    }

    #[test]
    fn zero_epochs_and_shape_errors() {
        let mut m = small_model(4);
        let before = m.clone();
        let x = random_rows(&mut seeded(1), 5, 3);
        let cfg = DetectorTrainConfig { train: TrainConfig { epochs: 0, ..TrainConfig::default() }, ..Default::default() };
        assert!(m.train(&x, &[0; 5], &x, &cfg).unwrap().is_empty());
        assert_eq!(m, before);
        assert!(m.train(&x, &[0; 5], &Matrix::zeros(2, 4), &cfg).is_err());
        let cfg = DetectorTrainConfig::default();
        assert!(m.train(&x, &[0; 5], &Matrix::zeros(0, 3), &cfg).is_err());
    }
}
