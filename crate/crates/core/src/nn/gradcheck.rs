//! Central finite-difference gradient checking.

use super::matrix::Matrix;
use super::mlp::MlpParams;

/// Gradients are compared with `|a − n| / max(|a|, |n|, FLOOR)`; the floor keeps
/// near-zero entries from amplifying finite-difference round-off.
pub const REL_ERROR_FLOOR: f64 = 1e-5;
pub const DEFAULT_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradEntry {
    Param(usize),
    Input { row: usize, col: usize },
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst: Option<GradEntry>,
    /// Entries whose relative error exceeds the tolerance.
    pub flagged: Vec<(GradEntry, f64)>,
    pub checked: usize,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compare analytic parameter and input gradients of `loss` against central
/// differences with step `h`.
pub fn finite_diff_check<F>(
    params: &MlpParams,
    input: &Matrix,
    loss: F,
    analytic_params: &MlpParams,
    analytic_input: Option<&Matrix>,
    h: f64,
    tolerance: f64,
) -> FdReport
where
    F: Fn(&MlpParams, &Matrix) -> f64,
{
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        flagged: Vec::new(),
        checked: 0,
    };
    let mut record = |entry: GradEntry, analytic: f64, numeric: f64| {
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err;
            report.worst = Some(entry);
        }
        if err > tolerance {
            report.flagged.push((entry, err));
        }
    };

    let mut p = params.clone();
    for (i, analytic) in analytic_params.values().enumerate() {
        let orig = p.get_flat(i);
        p.set_flat(i, orig + h);
        let plus = loss(&p, input);
        p.set_flat(i, orig - h);
        let minus = loss(&p, input);
        p.set_flat(i, orig);
        record(GradEntry::Param(i), analytic, (plus - minus) / (2.0 * h));
    }

    if let Some(ag) = analytic_input {
        let mut x = input.clone();
        for row in 0..x.rows() {
            for col in 0..x.cols() {
                let orig = x[(row, col)];
                x[(row, col)] = orig + h;
                let plus = loss(params, &x);
                x[(row, col)] = orig - h;
                let minus = loss(params, &x);
                x[(row, col)] = orig;
                record(GradEntry::Input { row, col }, ag[(row, col)], (plus - minus) / (2.0 * h));
            }
        }
    }
    report
}
