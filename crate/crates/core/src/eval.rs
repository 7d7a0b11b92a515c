//! Threshold metrics with ID as the positive class, and baseline scorers.

use serde::{Deserialize, Serialize};

use crate::detector::energy;
use crate::error::{Error, Result};
use crate::nn::{argmax, softmax, Matrix};

/// Detection scores; higher means more ID-like.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub id: Vec<f64>,
    pub ood: Vec<f64>,
}

impl ScoreSet {
    pub fn new(id: Vec<f64>, ood: Vec<f64>) -> Result<Self> {
        let set = ScoreSet { id, ood };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Empty("ID scores"));
        }
        if self.ood.is_empty() {
            return Err(Error::Empty("OOD scores"));
        }
        if self.id.iter().chain(&self.ood).any(|s| !s.is_finite()) {
            return Err(Error::Numerical("non-finite score".into()));
        }
        Ok(())
    }

    pub fn swapped(&self) -> ScoreSet {
        ScoreSet {
            id: self.ood.clone(),
            ood: self.id.clone(),
        }
    }
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Number of entries of ascending `s` that are `>= t`.
fn count_ge(s: &[f64], t: f64) -> usize {
    s.len() - s.partition_point(|&v| v < t)
}

/// FPR at the largest threshold `τ` for which the fraction of ID scores `≥ τ`
/// reaches `tpr_target`.
pub fn fpr_at_tpr(scores: &ScoreSet, tpr_target: f64) -> Result<f64> {
    scores.validate()?;
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::Config(format!("TPR target must lie in (0, 1], got {tpr_target}")));
    }
    let id = sorted(&scores.id);
    let n = id.len();
    // walk distinct ID values from the top; count(id ≥ v) grows as v drops
    let mut i = n;
    let mut tau = id[0];
    while i > 0 {
        let v = id[i - 1];
        let ge = n - id.partition_point(|&x| x < v);
        if ge as f64 / n as f64 >= tpr_target {
            tau = v;
            break;
        }
        i = id.partition_point(|&x| x < v);
    }
    let ood = sorted(&scores.ood);
    Ok(count_ge(&ood, tau) as f64 / ood.len() as f64)
}

/// Probability that an ID score beats an OOD score, ties counting half.
pub fn auroc(scores: &ScoreSet) -> Result<f64> {
    scores.validate()?;
    let id = sorted(&scores.id);
    // twice the Mann–Whitney statistic, kept integral
    let mut twice: u64 = 0;
    for &o in &scores.ood {
        let below = id.partition_point(|&x| x < o);
        let not_above = id.partition_point(|&x| x <= o);
        let greater = id.len() - not_above;
        let ties = not_above - below;
        twice += 2 * greater as u64 + ties as u64;
    }
    Ok(twice as f64 / (2 * id.len() * scores.ood.len()) as f64)
}

/// Fraction of rows whose argmax logit (lowest index on ties) equals the label.
pub fn id_accuracy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if logits.rows() == 0 {
        return Err(Error::Empty("ID test set"));
    }
    if labels.len() != logits.rows() {
        return Err(Error::dim("label count", logits.rows(), labels.len()));
    }
    let correct = logits
        .iter_rows()
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Maximum softmax probability.
    Msp,
    /// Negative energy.
    Energy,
}

pub fn baseline_scores(kind: BaselineKind, logits: &Matrix) -> Vec<f64> {
    logits
        .iter_rows()
        .map(|row| match kind {
            BaselineKind::Msp => softmax(row).into_iter().fold(f64::NEG_INFINITY, f64::max),
            BaselineKind::Energy => -energy(row),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub name: String,
    pub fpr95: f64,
    pub auroc: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Average {
    pub fpr95: f64,
    pub auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sets: Vec<SetMetrics>,
    /// Unweighted mean over the non-empty sets; absent when there are none.
    pub average: Option<Average>,
    pub id_acc: f64,
}

/// Per-set FPR@TPR and AUROC plus their unweighted average. Empty OOD sets are
/// skipped rather than reported as zero.
pub fn evaluate_scores(
    id_scores: &[f64],
    ood_sets: &[(String, Vec<f64>)],
    id_acc: f64,
    tpr_target: f64,
) -> Result<MetricsReport> {
    if id_scores.is_empty() {
        return Err(Error::Empty("ID test scores"));
    }
    let mut sets = Vec::new();
    for (name, ood) in ood_sets {
        if ood.is_empty() {
            continue;
        }
        let s = ScoreSet::new(id_scores.to_vec(), ood.clone())?;
        sets.push(SetMetrics {
            name: name.clone(),
            fpr95: fpr_at_tpr(&s, tpr_target)?,
            auroc: auroc(&s)?,
            n_id: id_scores.len(),
            n_ood: ood.len(),
        });
    }
    let average = (!sets.is_empty()).then(|| Average {
        fpr95: sets.iter().map(|s| s.fpr95).sum::<f64>() / sets.len() as f64,
        auroc: sets.iter().map(|s| s.auroc).sum::<f64>() / sets.len() as f64,
    });
    Ok(MetricsReport { sets, average, id_acc })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(id: &[f64], ood: &[f64]) -> ScoreSet {
        ScoreSet::new(id.to_vec(), ood.to_vec()).unwrap()
    }

    #[test]
    fn fpr_examples() {
        let id: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(fpr_at_tpr(&set(&id, &[0.0, 1.5, 2.5, 5.0]), 0.95).unwrap(), 0.5);
        assert_eq!(fpr_at_tpr(&set(&[5.0, 6.0], &[1.0, 2.0]), 0.95).unwrap(), 0.0);
        let same: Vec<f64> = (0..40).map(|i| (i % 7) as f64).collect();
        assert!(fpr_at_tpr(&set(&same, &same), 0.95).unwrap() >= 0.95);
        assert!(fpr_at_tpr(&set(&[1.0], &[1.0]), 0.0).is_err());
        assert!(ScoreSet::new(vec![], vec![1.0]).is_err());
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&set(&[3.0, 4.0], &[1.0, 2.0])).unwrap(), 1.0);
        assert_eq!(auroc(&set(&[1.0, 3.0], &[2.0, 4.0])).unwrap(), 0.25);
        assert_eq!(auroc(&set(&[1.0], &[1.0])).unwrap(), 0.5);
    }

    #[test]
    fn baselines() {
        let l = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0]]).unwrap();
        let msp = baseline_scores(BaselineKind::Msp, &l);
        assert_eq!(msp[0], 0.5);
        assert!((msp[1] - 0.731059).abs() < 1e-6);
        let e = baseline_scores(BaselineKind::Energy, &l);
        assert!((e[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn accuracy_complement_under_label_flip() {
        let l = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.2, 0.1]]).unwrap();
        let y = [0, 1, 1, 1];
        let flipped: Vec<usize> = y.iter().map(|v| 1 - v).collect();
        let a = id_accuracy(&l, &y).unwrap();
        assert_eq!(a, 0.5);
        assert_eq!(id_accuracy(&l, &flipped).unwrap(), 1.0 - a);
        assert_eq!(id_accuracy(&l, &[0, 1, 0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn averages() {
        let id: Vec<f64> = (0..100).map(f64::from).collect();
        // OOD at 90..: the 95% threshold is 5, so FPR is the fraction ≥ 5
        let a: Vec<f64> = vec![0.0, 1.0, 2.0, 3.0, 50.0];
        let b: Vec<f64> = vec![0.0, 1.0, 60.0, 70.0, 80.0];
        let r = evaluate_scores(&id, &[("a".into(), a.clone()), ("b".into(), b), ("empty".into(), vec![])], 0.9, 0.95)
            .unwrap();
        assert_eq!(r.sets.len(), 2);
        assert!((r.sets[0].fpr95 - 0.2).abs() < 1e-15 && (r.sets[1].fpr95 - 0.6).abs() < 1e-15);
        assert!((r.average.as_ref().unwrap().fpr95 - 0.4).abs() < 1e-15);
        let single = evaluate_scores(&id, &[("a".into(), a)], 0.9, 0.95).unwrap();
        assert_eq!(single.average.as_ref().unwrap().fpr95, single.sets[0].fpr95);
        assert_eq!(single.average.unwrap().auroc, single.sets[0].auroc);
        assert!(evaluate_scores(&id, &[], 1.0, 0.95).unwrap().average.is_none());
    }
}
