//! Training objectives and their analytic gradients w.r.t. prompt contexts.
//!
//! The overall objective is `λ·L_cls + (1-λ)·L_cse`, where `L_cls` is a
//! per-class sigmoid classification loss on the cosine logits and `L_cse`
//! is the class-specific embedding loss between caption embeddings and
//! class prompt embeddings.
//!
//! Reductions are sequential: per sample the class terms are summed in
//! class order, then samples are summed in batch order and divided by the
//! batch size. Every loss here follows that order so values are bit-stable.

mod classification;
mod embedding;

use serde::{Deserialize, Serialize};

pub use classification::{bce_loss, db_bias, db_loss, db_rebalance, focal_loss, LogitLoss};
pub use embedding::{
    class_margin, class_weights, cse_forward, cse_loss, cse_term, delta, mean_positive_delta, CseOutput,
};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::prompt::{FrozenTextEncoder, LogitHead, PromptEmbeddings, PromptMode, PromptSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClsLossKind {
    #[default]
    Db,
    Bce,
    Focal,
}

impl std::str::FromStr for ClsLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "db" => Ok(ClsLossKind::Db),
            "bce" => Ok(ClsLossKind::Bce),
            "focal" => Ok(ClsLossKind::Focal),
            other => Err(Error::config("loss.cls_loss_kind", format!("unknown loss {other:?} (db|bce|focal)"))),
        }
    }
}

/// Every scalar hyperparameter of the objective, plus the ablation switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Margin scale: `μ̃_i = η / n_i^{1/4}`.
    pub eta: f64,
    /// Re-weighting exponent: `w_i ∝ (1/n_i)^γ`.
    pub gamma_rw: f64,
    /// Flat margin used when the class-aware margin is off.
    pub mu_base: f64,
    /// Classification/embedding balance, in `[0, 1]`.
    pub lambda: f64,
    pub db_alpha: f64,
    pub db_beta: f64,
    pub db_theta: f64,
    pub db_kappa: f64,
    /// Negative-tolerance scale, `>= 1`.
    pub db_zeta: f64,
    pub gamma_focal: f64,
    pub use_embedding_loss: bool,
    pub use_class_aware_margin: bool,
    pub use_reweighting: bool,
    pub cls_loss_kind: ClsLossKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            gamma_rw: 1.0,
            mu_base: 0.5,
            lambda: 0.5,
            db_alpha: 0.1,
            db_beta: 10.0,
            db_theta: 0.2,
            db_kappa: 0.05,
            db_zeta: 5.0,
            gamma_focal: 2.0,
            use_embedding_loss: true,
            use_class_aware_margin: true,
            use_reweighting: true,
            cls_loss_kind: ClsLossKind::Db,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            ("eta", self.eta),
            ("gamma_rw", self.gamma_rw),
            ("mu_base", self.mu_base),
            ("lambda", self.lambda),
            ("db_alpha", self.db_alpha),
            ("db_beta", self.db_beta),
            ("db_theta", self.db_theta),
            ("db_kappa", self.db_kappa),
            ("db_zeta", self.db_zeta),
            ("gamma_focal", self.gamma_focal),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(Error::config(format!("loss.{name}"), "must be finite"));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("loss.lambda", "must lie in [0, 1]"));
        }
        if self.eta < 0.0 {
            return Err(Error::config("loss.eta", "must be >= 0"));
        }
        if self.gamma_rw < 0.0 {
            return Err(Error::config("loss.gamma_rw", "must be >= 0"));
        }
        if self.db_zeta < 1.0 {
            return Err(Error::config("loss.db_zeta", "must be >= 1"));
        }
        if self.gamma_focal < 0.0 {
            return Err(Error::config("loss.gamma_focal", "must be >= 0"));
        }
        Ok(())
    }

    /// Weight of the classification part in the total.
    fn cls_weight(&self) -> f64 {
        if self.use_embedding_loss {
            self.lambda
        } else {
            1.0
        }
    }

    fn cse_weight(&self) -> f64 {
        if self.use_embedding_loss {
            1.0 - self.lambda
        } else {
            0.0
        }
    }
}

/// Class-level quantities derived once from the full training split.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPriors {
    /// Hinge margin per class (`μ̃_i`, or `mu_base` when class-aware margins are off).
    pub margins: Vec<f64>,
    /// Embedding-loss weight per class (`w_i`, or 1 when re-weighting is off).
    pub weights: Vec<f64>,
    /// Distribution-balanced re-balancing factor `r_i`.
    pub rebalance: Vec<f64>,
    /// Distribution-balanced logit bias `v_i` (zero unless the DB loss is selected).
    pub bias: Vec<f64>,
}

impl ClassPriors {
    pub fn new(counts: &[usize], num_samples: usize, config: &LossConfig) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Shape("no classes".into()));
        }
        if let Some(class) = counts.iter().position(|&n| n == 0) {
            return Err(Error::InvalidCount { class, count: 0 });
        }
        let margins = if config.use_class_aware_margin {
            counts
                .iter()
                .map(|&n| class_margin(n, config.eta))
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![config.mu_base; counts.len()]
        };
        let weights = if config.use_reweighting {
            class_weights(counts, config.gamma_rw)?
        } else {
            vec![1.0; counts.len()]
        };
        let rebalance = (0..counts.len())
            .map(|i| db_rebalance(counts, i, config.db_alpha, config.db_beta, config.db_theta))
            .collect();
        let bias = if config.cls_loss_kind == ClsLossKind::Db {
            counts
                .iter()
                .enumerate()
                .map(|(class, &n)| {
                    db_bias(n, num_samples, config.db_kappa).map_err(|e| match e {
                        Error::InfiniteBias { total, .. } => Error::InfiniteBias { class, total },
                        other => other,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![0.0; counts.len()]
        };
        Ok(Self {
            margins,
            weights,
            rebalance,
            bias,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.margins.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub cls_part: f64,
    pub cse_part: f64,
    /// Same layout as [`PromptSet::contexts`].
    pub gradient: Vec<f64>,
}

pub(crate) fn check_batch(batch: &[&Sample], num_classes: usize, dim: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for (k, s) in batch.iter().enumerate() {
        if s.labels.len() != num_classes {
            return Err(Error::Shape(format!("sample {k}: {} labels for {num_classes} classes", s.labels.len())));
        }
        if s.image_embedding.len() != dim || s.caption_embedding.len() != dim {
            return Err(Error::Shape(format!("sample {k}: embedding dimension differs from {dim}")));
        }
    }
    Ok(())
}

/// Logit matrix `batch × classes`.
pub fn batch_logits(batch: &[&Sample], embeddings: &PromptEmbeddings, head: &LogitHead) -> Vec<Vec<f64>> {
    batch
        .iter()
        .map(|s| head.logits(&s.image_embedding, embeddings.embeddings()))
        .collect()
}

/// Classification loss on a logit matrix, dispatched on `config.cls_loss_kind`.
pub fn classification_loss(
    logits: &[Vec<f64>],
    labels: &[&[u8]],
    priors: &ClassPriors,
    config: &LossConfig,
    want_grad: bool,
) -> Result<LogitLoss> {
    match config.cls_loss_kind {
        ClsLossKind::Db => classification::db_forward(logits, labels, priors, config, want_grad),
        ClsLossKind::Bce => classification::bce_forward(logits, labels, want_grad),
        ClsLossKind::Focal => classification::focal_forward(logits, labels, config.gamma_focal, want_grad),
    }
}

struct Parts {
    cls: f64,
    cse: f64,
    grad_embeddings: Option<Vec<Vec<f64>>>,
}

fn evaluate_parts(
    batch: &[&Sample],
    embeddings: &PromptEmbeddings,
    head: &LogitHead,
    priors: &ClassPriors,
    config: &LossConfig,
    want_grad: bool,
) -> Result<Parts> {
    let num_classes = embeddings.embeddings().len();
    let dim = embeddings.get(0).len();
    check_batch(batch, num_classes, dim)?;
    if priors.num_classes() != num_classes {
        return Err(Error::Shape(format!("{} class priors for {num_classes} classes", priors.num_classes())));
    }

    let logits = batch_logits(batch, embeddings, head);
    let labels: Vec<&[u8]> = batch.iter().map(|s| s.labels.as_slice()).collect();
    let cls = classification_loss(&logits, &labels, priors, config, want_grad)?;
    let cse = cse_forward(batch, embeddings.embeddings(), priors, want_grad)?;

    let grad_embeddings = if want_grad {
        let (wc, we) = (config.cls_weight(), config.cse_weight());
        let inv_tau = 1.0 / head.temperature();
        let g_z = cls.grad_logits.expect("requested");
        let g_cse = cse.grad_embeddings.expect("requested");
        let mut g: Vec<Vec<f64>> = g_cse
            .into_iter()
            .map(|row| row.into_iter().map(|v| we * v).collect())
            .collect();
        for (s, gz) in batch.iter().zip(&g_z) {
            for (class, &gzi) in gz.iter().enumerate() {
                if gzi != 0.0 {
                    crate::vecmath::axpy(wc * gzi * inv_tau, &s.image_embedding, &mut g[class]);
                }
            }
        }
        Some(g)
    } else {
        None
    };
    Ok(Parts {
        cls: cls.value,
        cse: cse.value,
        grad_embeddings,
    })
}

fn combine(config: &LossConfig, cls: f64, cse: f64) -> f64 {
    config.cls_weight() * cls + config.cse_weight() * cse
}

/// `λ·L_cls + (1-λ)·L_cse` with its gradient w.r.t. the prompt contexts.
/// When `use_embedding_loss` is off the total is `L_cls` alone, though
/// `cse_part` is still reported.
pub fn total_loss(
    batch: &[&Sample],
    prompts: &PromptSet,
    encoder: &FrozenTextEncoder,
    head: &LogitHead,
    priors: &ClassPriors,
    config: &LossConfig,
) -> Result<LossReport> {
    let embeddings = PromptEmbeddings::compute(encoder, prompts)?;
    let parts = evaluate_parts(batch, &embeddings, head, priors, config, true)?;
    let gradient = embeddings.backward(encoder, prompts, &parts.grad_embeddings.expect("requested"));
    Ok(LossReport {
        total: combine(config, parts.cls, parts.cse),
        cls_part: parts.cls,
        cse_part: parts.cse,
        gradient,
    })
}

/// [`total_loss`] with the gradient kept in per-block form: one row per
/// context block, shared by every token of that block.
pub fn total_loss_token_gradients(
    batch: &[&Sample],
    prompts: &PromptSet,
    encoder: &FrozenTextEncoder,
    head: &LogitHead,
    priors: &ClassPriors,
    config: &LossConfig,
) -> Result<(LossValues, Vec<Vec<f64>>)> {
    let embeddings = PromptEmbeddings::compute(encoder, prompts)?;
    let parts = evaluate_parts(batch, &embeddings, head, priors, config, true)?;
    let blocks = embeddings.token_gradients(encoder, prompts, &parts.grad_embeddings.expect("requested"));
    let values = LossValues {
        total: combine(config, parts.cls, parts.cse),
        cls: parts.cls,
        cse: parts.cse,
    };
    Ok((values, blocks))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub cls: f64,
    pub cse: f64,
}

/// Value-only loss breakdown for precomputed prompt embeddings.
pub fn loss_values_with(
    batch: &[&Sample],
    embeddings: &PromptEmbeddings,
    head: &LogitHead,
    priors: &ClassPriors,
    config: &LossConfig,
) -> Result<LossValues> {
    let parts = evaluate_parts(batch, embeddings, head, priors, config, false)?;
    Ok(LossValues {
        total: combine(config, parts.cls, parts.cse),
        cls: parts.cls,
        cse: parts.cse,
    })
}

/// Value-only evaluation of [`total_loss`]; no gradient code runs.
pub fn total_loss_value(
    batch: &[&Sample],
    prompts: &PromptSet,
    encoder: &FrozenTextEncoder,
    head: &LogitHead,
    priors: &ClassPriors,
    config: &LossConfig,
) -> Result<f64> {
    let embeddings = PromptEmbeddings::compute(encoder, prompts)?;
    Ok(loss_values_with(batch, &embeddings, head, priors, config)?.total)
}

/// Parameter coordinates whose loss is within `guard` of a hinge kink:
/// any negative pair `(k, i)` with `|w_i(μ̃_i - Δ_i^k)| < guard` flags every
/// context coordinate that feeds class `i`'s prompt.
pub fn hinge_kink_mask(
    batch: &[&Sample],
    prompts: &PromptSet,
    encoder: &FrozenTextEncoder,
    priors: &ClassPriors,
    config: &LossConfig,
    guard: f64,
) -> Result<Vec<bool>> {
    let mut mask = vec![false; prompts.contexts().len()];
    if config.cse_weight() == 0.0 {
        return Ok(mask);
    }
    let embeddings = PromptEmbeddings::compute(encoder, prompts)?;
    let block = prompts.context_len() * prompts.token_dim();
    for s in batch {
        for (i, &y) in s.labels.iter().enumerate() {
            if y == 1 {
                continue;
            }
            let arg = priors.weights[i] * (priors.margins[i] - delta(&s.caption_embedding, embeddings.get(i)));
            if arg.abs() < guard {
                let range = match prompts.mode() {
                    PromptMode::ClassSpecific => i * block..(i + 1) * block,
                    PromptMode::Shared => 0..mask.len(),
                };
                mask[range].iter_mut().for_each(|m| *m = true);
            }
        }
    }
    Ok(mask)
}
