//! Sigmoid multi-label classification losses on the logit matrix:
//! distribution-balanced (DB), binary cross-entropy, and focal.
//!
//! DB is summed over classes and averaged over samples; BCE and focal are
//! averaged over both.

use crate::error::{Error, Result};
use crate::losses::{ClassPriors, LossConfig};

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-(1-q)^γ log q` with `q = σ(s)`, and its derivative in `s`.
fn focal_positive(s: f64, gamma: f64) -> (f64, f64) {
    let q = sigmoid(s);
    let one_minus_q = sigmoid(-s);
    let log_q = -softplus(-s);
    let m = one_minus_q.powf(gamma);
    (-m * log_q, m * (gamma * q * log_q - one_minus_q))
}

/// `-q^γ log(1-q)` with `q = σ(u)`, and its derivative in `u`.
fn focal_negative(u: f64, gamma: f64) -> (f64, f64) {
    let q = sigmoid(u);
    let one_minus_q = sigmoid(-u);
    let log_one_minus_q = -softplus(u);
    let m = q.powf(gamma);
    (-m * log_one_minus_q, m * (q - gamma * one_minus_q * log_one_minus_q))
}

#[derive(Debug, Clone)]
pub struct LogitLoss {
    pub value: f64,
    /// `∂L/∂z`, `batch × classes`, when requested.
    pub grad_logits: Option<Vec<Vec<f64>>>,
}

fn check_shapes(logits: &[Vec<f64>], labels: &[&[u8]]) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if logits.len() != labels.len() {
        return Err(Error::Shape(format!("{} logit rows for {} label rows", logits.len(), labels.len())));
    }
    let c = logits[0].len();
    for (z, y) in logits.iter().zip(labels) {
        if z.len() != c || y.len() != c {
            return Err(Error::Shape("ragged logit or label rows".into()));
        }
    }
    Ok(c)
}

/// How per-element terms are combined within one sample.
#[derive(Clone, Copy)]
enum ClassReduction {
    Sum,
    Mean,
}

/// Shared reduction: `elem(i, z, positive) -> (loss, dloss/dz)`, combined
/// over classes per `classes` and averaged over samples.
fn reduce<F>(logits: &[Vec<f64>], labels: &[&[u8]], want_grad: bool, classes: ClassReduction, elem: F) -> Result<LogitLoss>
where
    F: Fn(usize, f64, bool) -> (f64, f64),
{
    let c = check_shapes(logits, labels)?;
    let inv_b = match classes {
        ClassReduction::Sum => 1.0 / logits.len() as f64,
        ClassReduction::Mean => 1.0 / (logits.len() * c) as f64,
    };
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Vec::with_capacity(logits.len()));
    for (z, y) in logits.iter().zip(labels) {
        let mut per_sample = 0.0;
        let mut row = Vec::with_capacity(if want_grad { c } else { 0 });
        for i in 0..c {
            let (l, dl) = elem(i, z[i], y[i] == 1);
            per_sample += l;
            if want_grad {
                row.push(dl * inv_b);
            }
        }
        total += per_sample;
        if let Some(g) = grad.as_mut() {
            g.push(row);
        }
    }
    Ok(LogitLoss {
        value: total * inv_b,
        grad_logits: grad,
    })
}

/// Re-balancing factor `α + σ(β·((1/n_i)/Σ_j(1/n_j) - θ))`.
pub fn db_rebalance(counts: &[usize], class: usize, alpha: f64, beta: f64, theta: f64) -> f64 {
    let inv_total: f64 = counts.iter().map(|&n| 1.0 / n as f64).sum();
    let share = (1.0 / counts[class] as f64) / inv_total;
    alpha + sigmoid(beta * (share - theta))
}

/// Class-prior logit bias `κ·ln(N/n_i - 1)`; requires `0 < n_i < N`.
pub fn db_bias(n: usize, total: usize, kappa: f64) -> Result<f64> {
    if n == 0 || n > total {
        return Err(Error::InvalidCount { class: 0, count: n });
    }
    if n == total {
        return Err(Error::InfiniteBias { class: 0, total });
    }
    Ok(kappa * (total as f64 / n as f64 - 1.0).ln())
}

pub(crate) fn db_forward(logits: &[Vec<f64>], labels: &[&[u8]], priors: &ClassPriors, config: &LossConfig, want_grad: bool) -> Result<LogitLoss> {
    let gamma = config.gamma_focal;
    let zeta = config.db_zeta;
    reduce(logits, labels, want_grad, ClassReduction::Sum, |i, z, positive| {
        let r = priors.rebalance[i];
        let s = z - priors.bias[i];
        if positive {
            let (l, dl) = focal_positive(s, gamma);
            (r * l, r * dl)
        } else {
            let (l, dl) = focal_negative(zeta * s, gamma);
            // d/ds of (r/ζ)·f(ζs) is r·f'(ζs)
            (r / zeta * l, r * dl)
        }
    })
}

/// Distribution-balanced loss: positives `-r(1-q)^γ log q` with
/// `q = σ(z - v)`, negatives `-(r/ζ) q^γ log(1-q)` with `q = σ(ζ(z - v))`.
pub fn db_loss(logits: &[Vec<f64>], labels: &[&[u8]], priors: &ClassPriors, config: &LossConfig) -> Result<LogitLoss> {
    db_forward(logits, labels, priors, config, true)
}

pub(crate) fn bce_forward(logits: &[Vec<f64>], labels: &[&[u8]], want_grad: bool) -> Result<LogitLoss> {
    reduce(logits, labels, want_grad, ClassReduction::Mean, |_, z, positive| {
        if positive {
            (softplus(-z), -sigmoid(-z))
        } else {
            (softplus(z), sigmoid(z))
        }
    })
}

/// Sigmoid cross-entropy, averaged over samples and classes.
pub fn bce_loss(logits: &[Vec<f64>], labels: &[&[u8]]) -> Result<LogitLoss> {
    bce_forward(logits, labels, true)
}

pub(crate) fn focal_forward(logits: &[Vec<f64>], labels: &[&[u8]], gamma: f64, want_grad: bool) -> Result<LogitLoss> {
    reduce(logits, labels, want_grad, ClassReduction::Mean, |_, z, positive| {
        if positive {
            focal_positive(z, gamma)
        } else {
            focal_negative(z, gamma)
        }
    })
}

/// Focal loss, averaged over samples and classes.
pub fn focal_loss(logits: &[Vec<f64>], labels: &[&[u8]], gamma: f64) -> Result<LogitLoss> {
    focal_forward(logits, labels, gamma, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn unit_priors(c: usize) -> ClassPriors {
        ClassPriors {
            margins: vec![0.0; c],
            weights: vec![1.0; c],
            rebalance: vec![1.0; c],
            bias: vec![0.0; c],
        }
    }

    #[test]
    fn db_reduces_to_log_two_at_origin() {
        let cfg = LossConfig {
            gamma_focal: 0.0,
            db_zeta: 1.0,
            ..LossConfig::default()
        };
        let out = db_loss(&[vec![0.0]], &[&[1]], &unit_priors(1), &cfg).unwrap();
        assert!((out.value - LN2).abs() < 1e-15);
    }

    #[test]
    fn confident_positive_costs_nothing() {
        let cfg = LossConfig::default();
        let out = db_loss(&[vec![60.0]], &[&[1]], &unit_priors(1), &cfg).unwrap();
        assert!(out.value < 1e-25);
    }

    #[test]
    fn rebalance_examples() {
        // share exactly θ
        let r = db_rebalance(&[1, 1, 2], 2, 0.1, 10.0, 0.2);
        assert!((r - 0.6).abs() < 1e-15);
        let r = db_rebalance(&[5, 80, 3], 1, 0.3, 0.0, 0.2);
        assert_eq!(r, 0.8);
        for i in 0..10 {
            let r = db_rebalance(&[40; 10], i, 0.1, 10.0, 0.1);
            assert!((r - 0.6).abs() < 1e-15);
        }
    }

    #[test]
    fn rebalance_is_monotone_in_count() {
        let counts = [1, 2, 5, 9, 30, 200];
        let r: Vec<f64> = (0..counts.len()).map(|i| db_rebalance(&counts, i, 0.1, 10.0, 0.2)).collect();
        assert!(r.windows(2).all(|w| w[0] >= w[1]));
        assert!(r.iter().all(|&x| x > 0.1 && x < 1.1));
    }

    #[test]
    fn bias_examples() {
        assert_eq!(db_bias(50, 100, 1.0).unwrap(), 0.0);
        assert_eq!(db_bias(3, 100, 0.0).unwrap(), 0.0);
        assert!((db_bias(1, 11, 1.0).unwrap() - 10f64.ln()).abs() < 1e-15);
        assert!(matches!(db_bias(7, 7, 1.0), Err(Error::InfiniteBias { .. })));
    }

    #[test]
    fn bce_at_zero() {
        // every term is ln 2, so the class mean is ln 2 as well
        let out = bce_loss(&[vec![0.0, 0.0]], &[&[1, 0]]).unwrap();
        assert!((out.value - LN2).abs() < 1e-15);
        let g = out.grad_logits.unwrap();
        assert_eq!(g[0], vec![-0.25, 0.25]);
    }

    #[test]
    fn focal_direct_arithmetic() {
        // q = 0.9 for a positive
        let z = (0.9f64 / 0.1).ln();
        let out = focal_loss(&[vec![z]], &[&[1]], 2.0).unwrap();
        let expected = 0.01 * -(0.9f64.ln());
        assert!((out.value - expected).abs() < 1e-15);
        assert!((out.value - 0.0010536).abs() < 1e-7);
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let out = db_loss(&[vec![-800.0, 800.0]], &[&[1, 0]], &unit_priors(2), &LossConfig::default()).unwrap();
        assert!(out.value.is_finite());
        assert!(out.grad_logits.unwrap()[0].iter().all(|g| g.is_finite()));
    }

    #[test]
    fn ragged_input_rejected() {
        assert!(bce_loss(&[vec![0.0, 1.0]], &[&[1]]).is_err());
        assert!(bce_loss(&[vec![0.0]], &[]).is_err());
    }
}
