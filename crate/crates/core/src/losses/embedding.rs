//! Class-specific embedding loss.

use crate::data::{MultiLabelDataset, Sample};
use crate::error::{Error, Result};
use crate::losses::{check_batch, ClassPriors, LossConfig, LossReport};
use crate::prompt::{FrozenTextEncoder, PromptEmbeddings, PromptSet};

/// Class-aware margin `η / n^{1/4}`.
pub fn class_margin(n: usize, eta: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidCount { class: 0, count: 0 });
    }
    Ok(eta / (n as f64).powf(0.25))
}

/// Normalized inverse-frequency weights `(1/n_i)^γ / Σ_j (1/n_j)^γ`.
pub fn class_weights(counts: &[usize], gamma: f64) -> Result<Vec<f64>> {
    if let Some(class) = counts.iter().position(|&n| n == 0) {
        return Err(Error::InvalidCount { class, count: 0 });
    }
    if counts.is_empty() {
        return Ok(Vec::new());
    }
    let raw: Vec<f64> = counts.iter().map(|&n| (1.0 / n as f64).powf(gamma)).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|r| r / total).collect())
}

/// Cosine distance `1 - cos(t, e)` between unit vectors, evaluated as
/// `½‖t - e‖²` (the same quantity for unit inputs, without cancellation
/// near `t = e`).
pub fn delta(caption: &[f64], prompt: &[f64]) -> f64 {
    0.5 * caption
        .iter()
        .zip(prompt)
        .map(|(t, e)| (t - e) * (t - e))
        .sum::<f64>()
}

/// One per-class term: `w·Δ` for a positive pair, `max(0, w(μ̃ - Δ))` for a negative pair.
pub fn cse_term(delta: f64, signed_label: i8, weight: f64, margin: f64) -> f64 {
    if signed_label > 0 {
        weight * delta
    } else {
        (weight * (margin - delta)).max(0.0)
    }
}

#[derive(Debug, Clone)]
pub struct CseOutput {
    pub value: f64,
    /// `∂L_cse/∂e_i` per class, when requested.
    pub grad_embeddings: Option<Vec<Vec<f64>>>,
}

/// Mean over the batch of `Σ_i cse_term`, optionally with the gradient
/// w.r.t. each class prompt embedding. The hinge subgradient at the kink is 0.
pub fn cse_forward(batch: &[&Sample], embeddings: &[Vec<f64>], priors: &ClassPriors, want_grad: bool) -> Result<CseOutput> {
    let c = embeddings.len();
    let d = embeddings.first().map(Vec::len).unwrap_or(0);
    check_batch(batch, c, d)?;
    let inv_b = 1.0 / batch.len() as f64;
    let mut grad = want_grad.then(|| vec![vec![0.0; d]; c]);

    let mut total = 0.0;
    for s in batch {
        let t = &s.caption_embedding;
        let mut per_sample = 0.0;
        for (i, e) in embeddings.iter().enumerate() {
            let signed: i8 = if s.labels[i] == 1 { 1 } else { -1 };
            let (w, mu) = (priors.weights[i], priors.margins[i]);
            let dl = delta(t, e);
            let term = cse_term(dl, signed, w, mu);
            per_sample += term;
            if let Some(g) = grad.as_mut() {
                // ∂Δ/∂e = e - t
                let coef = if signed > 0 {
                    w * inv_b
                } else if term > 0.0 {
                    -w * inv_b
                } else {
                    continue;
                };
                for ((gj, ej), tj) in g[i].iter_mut().zip(e).zip(t) {
                    *gj += coef * (ej - tj);
                }
            }
        }
        total += per_sample;
    }
    Ok(CseOutput {
        value: total / batch.len() as f64,
        grad_embeddings: grad,
    })
}

/// Embedding loss alone, with its gradient w.r.t. the prompt contexts.
/// `cls_part` of the report is 0 and `total == cse_part`.
pub fn cse_loss(batch: &[&Sample], prompts: &PromptSet, encoder: &FrozenTextEncoder, priors: &ClassPriors, _config: &LossConfig) -> Result<LossReport> {
    let embeddings = PromptEmbeddings::compute(encoder, prompts)?;
    let out = cse_forward(batch, embeddings.embeddings(), priors, true)?;
    let gradient = embeddings.backward(encoder, prompts, &out.grad_embeddings.expect("requested"));
    Ok(LossReport {
        total: out.value,
        cls_part: 0.0,
        cse_part: out.value,
        gradient,
    })
}

/// Mean `Δ` over every positive (sample, class) pair of the dataset.
pub fn mean_positive_delta(dataset: &MultiLabelDataset, embeddings: &PromptEmbeddings) -> f64 {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for s in dataset.samples() {
        for i in s.positives() {
            sum += delta(&s.caption_embedding, embeddings.get(i));
            pairs += 1;
        }
    }
    sum / pairs as f64
}
