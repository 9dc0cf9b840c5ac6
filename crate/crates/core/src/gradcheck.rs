//! Central-difference gradient oracle.
//!
//! Only loss *values* cross this module's boundary: the checker receives a
//! scalar closure and a precomputed analytic gradient, and never sees how
//! that gradient was produced.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    pub step: f64,
    pub kink_guard: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            step: 1e-5,
            kink_guard: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub num_skipped_kinks: usize,
    pub num_checked: usize,
    pub pass: bool,
}

/// `(f(p + h e_j) - f(p - h e_j)) / 2h` for every coordinate `j`.
pub fn finite_diff_grad<F>(loss_fn: F, params: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = params.to_vec();
    (0..params.len())
        .map(|j| {
            probe[j] = params[j] + step;
            let plus = loss_fn(&probe);
            probe[j] = params[j] - step;
            let minus = loss_fn(&probe);
            probe[j] = params[j];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares `analytic` with central differences of `loss_fn` at `params`.
/// Coordinates flagged in `skip` (hinge kinks) are not compared. A
/// non-finite difference quotient counts as an infinite error.
pub fn check<F>(loss_fn: F, analytic: &[f64], params: &[f64], skip: &[bool], opts: &GradCheckOptions) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(analytic.len(), params.len(), "analytic gradient length");
    assert_eq!(skip.len(), params.len(), "skip mask length");
    let numeric = finite_diff_grad(loss_fn, params, opts.step);

    let mut max_rel_error = 0.0f64;
    let mut worst_index = None;
    let mut skipped = 0;
    let mut checked = 0;
    for j in 0..params.len() {
        if skip[j] {
            skipped += 1;
            continue;
        }
        checked += 1;
        let err = if numeric[j].is_finite() && analytic[j].is_finite() {
            relative_error(analytic[j], numeric[j])
        } else {
            f64::INFINITY
        };
        if worst_index.is_none() || err > max_rel_error {
            max_rel_error = err;
            worst_index = Some(j);
        }
    }
    GradCheckReport {
        max_rel_error,
        worst_index,
        num_skipped_kinks: skipped,
        num_checked: checked,
        pass: max_rel_error < opts.tolerance,
    }
}
