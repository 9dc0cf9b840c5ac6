//! Prompt-tuning loop and the linear-probe baseline.
//!
//! Plain SGD over the prompt contexts with a per-epoch cosine-annealed
//! learning rate. Randomness comes from ChaCha8 seeded with
//! `train.seed`: context initialization on stream 0, the per-epoch shuffle
//! on stream 1, linear-probe initialization on stream 2, and the
//! gradient-check batch on stream 3.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{Baseline, RunConfig};
use crate::data::{ClassStats, MultiLabelDataset, Sample};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradCheckOptions, GradCheckReport};
use crate::losses::{self, ClassPriors, LossValues};
use crate::metrics::{self, EvalResult};
use crate::prompt::{class_tokens, FrozenTextEncoder, LogitHead, PromptEmbeddings, PromptSet};

const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_PROBE_INIT: u64 = 2;
const STREAM_GRADCHECK: u64 = 3;

/// `lr0 · (1 + cos(π t / T)) / 2` for epoch index `t ∈ [0, T)`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> Result<f64> {
    if step >= total {
        return Err(Error::InvalidStep { step, total });
    }
    Ok(lr0 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()) / 2.0)
}

/// `params ← params − lr · gradient`.
pub fn sgd_step(params: &mut [f64], gradient: &[f64], lr: f64) -> Result<()> {
    if params.len() != gradient.len() {
        return Err(Error::Shape(format!("{} params, {} gradient entries", params.len(), gradient.len())));
    }
    if let Some(j) = gradient.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient coordinate {j} is {}", gradient[j])));
    }
    for (p, g) in params.iter_mut().zip(gradient) {
        *p -= lr * g;
    }
    Ok(())
}

/// SGD with optional momentum and L2 weight decay (both off by default).
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(num_params: usize, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: vec![0.0; num_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], gradient: &[f64], lr: f64) -> Result<()> {
        if self.momentum == 0.0 && self.weight_decay == 0.0 {
            return sgd_step(params, gradient, lr);
        }
        let mut g = gradient.to_vec();
        if self.weight_decay != 0.0 {
            crate::vecmath::axpy(self.weight_decay, params, &mut g);
        }
        if self.momentum != 0.0 {
            for (v, gi) in self.velocity.iter_mut().zip(g.iter_mut()) {
                *v = self.momentum * *v + *gi;
                *gi = *v;
            }
        }
        sgd_step(params, &g, lr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate used during the epoch (0 for the initial record).
    pub lr: f64,
    /// Losses over the full training split at the end of the epoch.
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_cse: f64,
    /// Mean `Δ` over positive (caption, class prompt) pairs of the training split.
    pub mean_positive_delta: Option<f64>,
    pub eval: Option<EvalResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenChecksums {
    pub projection: String,
    pub class_tokens: String,
    pub train_embeddings: String,
    pub eval_embeddings: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// The effective configuration, as written to `config.json`.
    pub config: String,
    pub class_stats: ClassStats,
    pub initial: EpochRecord,
    /// One entry per completed epoch.
    pub history: Vec<EpochRecord>,
    pub final_eval: Option<EvalResult>,
    pub frozen_before: FrozenChecksums,
    pub frozen_after: FrozenChecksums,
    pub wall_clock_seconds: f64,
    /// Set when the run aborted on a numerical failure.
    pub failure: Option<String>,
}

impl RunRecord {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }

    pub fn rows(&self) -> impl Iterator<Item = &EpochRecord> {
        std::iter::once(&self.initial).chain(&self.history)
    }
}

/// `C × d` weights plus per-class bias on frozen image embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub num_classes: usize,
    pub dim: usize,
    /// Row-major weights followed by the `C` biases.
    pub params: Vec<f64>,
}

impl LinearHead {
    fn new(num_classes: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut params: Vec<f64> = (0..num_classes * dim)
            .map(|_| 0.02 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        params.extend(std::iter::repeat_n(0.0, num_classes));
        Self { num_classes, dim, params }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let (w, b) = self.params.split_at(self.num_classes * self.dim);
        w.chunks_exact(self.dim)
            .zip(b)
            .map(|(row, bi)| crate::vecmath::dot(row, x) + bi)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub enum TrainedModel {
    Prompts(PromptSet),
    LinearProbe(LinearHead),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub record: RunRecord,
    pub model: TrainedModel,
    pub encoder: FrozenTextEncoder,
}

/// Frozen encoder, class tokens, and initial prompts exactly as [`train`] builds them.
pub fn build_model(config: &RunConfig, num_classes: usize, dim: usize) -> Result<(FrozenTextEncoder, PromptSet, LogitHead)> {
    let token_dim = config.prompt.token_dim.unwrap_or(dim);
    let encoder = FrozenTextEncoder::new(config.encoder_seed, token_dim, dim);
    let tokens = class_tokens(config.encoder_seed, num_classes, token_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    rng.set_stream(STREAM_INIT);
    let prompts = PromptSet::new(config.prompt.mode, config.prompt.context_len, tokens, config.prompt.init, &mut rng)?;
    let head = LogitHead::new(config.prompt.temperature)?;
    Ok((encoder, prompts, head))
}

fn checksums(encoder: &FrozenTextEncoder, prompts: &PromptSet, train: &MultiLabelDataset, eval: &MultiLabelDataset) -> FrozenChecksums {
    FrozenChecksums {
        projection: encoder.checksum(),
        class_tokens: prompts.class_token_checksum(),
        train_embeddings: train.embedding_checksum(),
        eval_embeddings: eval.embedding_checksum(),
    }
}

fn check_compatible(train: &MultiLabelDataset, eval: &MultiLabelDataset) -> Result<()> {
    if train.num_classes() != eval.num_classes() || train.dim() != eval.dim() {
        return Err(Error::InvalidDataset(format!(
            "evaluation split has {} classes / dim {}, training split {} / {}",
            eval.num_classes(),
            eval.dim(),
            train.num_classes(),
            train.dim()
        )));
    }
    Ok(())
}

struct PromptState<'a> {
    train: &'a MultiLabelDataset,
    eval: &'a MultiLabelDataset,
    encoder: &'a FrozenTextEncoder,
    head: &'a LogitHead,
    priors: &'a ClassPriors,
    stats: &'a ClassStats,
    config: &'a RunConfig,
}

impl PromptState<'_> {
    fn record(&self, prompts: &PromptSet, epoch: usize, lr: f64, with_eval: bool) -> Result<EpochRecord> {
        let embeddings = PromptEmbeddings::compute(self.encoder, prompts)?;
        let all: Vec<&Sample> = self.train.samples().iter().collect();
        let LossValues { total, cls, cse } =
            losses::loss_values_with(&all, &embeddings, self.head, self.priors, &self.config.loss)?;
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("training loss {total} at epoch {epoch}")));
        }
        let eval = if with_eval {
            Some(metrics::evaluate(self.eval, prompts, self.encoder, self.head, self.stats)?)
        } else {
            None
        };
        Ok(EpochRecord {
            epoch,
            lr,
            loss_total: total,
            loss_cls: cls,
            loss_cse: cse,
            mean_positive_delta: Some(losses::mean_positive_delta(self.train, &embeddings)),
            eval,
        })
    }
}

fn finite_loss(total: f64, epoch: usize) -> Result<()> {
    if total.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("batch loss {total} in epoch {epoch}")))
    }
}

/// Plain SGD applied straight from the per-block gradient; performs the
/// same floating-point operations as [`sgd_step`] on the expanded gradient
/// without materializing it.
fn plain_step(batch: &[&Sample], prompts: &mut PromptSet, state: &PromptState<'_>, lr: f64, epoch: usize) -> Result<()> {
    let (values, blocks) =
        losses::total_loss_token_gradients(batch, prompts, state.encoder, state.head, state.priors, &state.config.loss)?;
    finite_loss(values.total, epoch)?;
    if let Some((b, g)) = blocks.iter().enumerate().find_map(|(b, g)| g.iter().find(|v| !v.is_finite()).map(|v| (b, *v))) {
        return Err(Error::NonFinite(format!("gradient of context block {b} is {g}")));
    }
    let d = prompts.token_dim();
    let block_len = prompts.context_len() * d;
    for (block, g) in prompts.contexts_mut().chunks_exact_mut(block_len).zip(&blocks) {
        for tok in block.chunks_exact_mut(d) {
            for (p, gi) in tok.iter_mut().zip(g) {
                *p -= lr * gi;
            }
        }
    }
    Ok(())
}

fn is_eval_epoch(epoch: usize, config: &RunConfig) -> bool {
    epoch % config.train.eval_every == 0 || epoch == config.train.epochs
}

/// Trains per `config.train.baseline`; the prompt path is the default.
///
/// Class statistics come from `train`; metrics are computed on `eval`.
/// A numerical failure mid-run is not an `Err`: the partial record comes
/// back with `failure` set.
pub fn train(train: &MultiLabelDataset, eval: &MultiLabelDataset, config: &RunConfig) -> Result<TrainOutcome> {
    match config.train.baseline {
        Baseline::None => train_prompts(train, eval, config),
        Baseline::LinearProbe => linear_probe_baseline(train, eval, config),
    }
}

pub fn train_prompts(train: &MultiLabelDataset, eval: &MultiLabelDataset, config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    check_compatible(train, eval)?;
    let started = Instant::now();
    let stats = ClassStats::from_dataset(train, config.train.thresholds());
    let priors = ClassPriors::new(&stats.counts, train.len(), &config.loss)?;
    let (encoder, mut prompts, head) = build_model(config, train.num_classes(), train.dim())?;
    let frozen_before = checksums(&encoder, &prompts, train, eval);

    let state = PromptState {
        train,
        eval,
        encoder: &encoder,
        head: &head,
        priors: &priors,
        stats: &stats,
        config,
    };
    let initial = state.record(&prompts, 0, 0.0, true)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    rng.set_stream(STREAM_SHUFFLE);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut opt = Sgd::new(prompts.contexts().len(), config.train.momentum, config.train.weight_decay);
    let plain_sgd = config.train.momentum == 0.0 && config.train.weight_decay == 0.0;
    let mut history = Vec::with_capacity(config.train.epochs);
    let mut failure = None;

    'epochs: for epoch in 1..=config.train.epochs {
        let lr = cosine_lr(epoch - 1, config.train.epochs, config.train.lr0)?;
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.train.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&k| &train.samples()[k]).collect();
            let step = if plain_sgd {
                plain_step(&batch, &mut prompts, &state, lr, epoch)
            } else {
                losses::total_loss(&batch, &prompts, &encoder, &head, &priors, &config.loss)
                    .and_then(|report| finite_loss(report.total, epoch).map(|_| report))
                    .and_then(|report| opt.step(prompts.contexts_mut(), &report.gradient, lr))
            };
            if let Err(e) = step {
                failure = Some(e.to_string());
                break 'epochs;
            }
        }
        match state.record(&prompts, epoch, lr, is_eval_epoch(epoch, config)) {
            Ok(r) => history.push(r),
            Err(e) => {
                failure = Some(e.to_string());
                break;
            }
        }
    }

    let final_eval = history.iter().rev().find_map(|r| r.eval.clone());
    let frozen_after = checksums(&encoder, &prompts, train, eval);
    let record = RunRecord {
        config: config.to_json(),
        class_stats: stats,
        initial,
        history,
        final_eval,
        frozen_before,
        frozen_after,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        failure,
    };
    Ok(TrainOutcome {
        record,
        model: TrainedModel::Prompts(prompts),
        encoder,
    })
}

struct ProbeState<'a> {
    train: &'a MultiLabelDataset,
    eval: &'a MultiLabelDataset,
    priors: &'a ClassPriors,
    stats: &'a ClassStats,
    config: &'a RunConfig,
}

impl ProbeState<'_> {
    fn loss(&self, head: &LinearHead, batch: &[&Sample], want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let logits: Vec<Vec<f64>> = batch.iter().map(|s| head.logits(&s.image_embedding)).collect();
        let labels: Vec<&[u8]> = batch.iter().map(|s| s.labels.as_slice()).collect();
        let out = losses::classification_loss(&logits, &labels, self.priors, &self.config.loss, want_grad)?;
        let grad = out.grad_logits.map(|gz| {
            let (c, d) = (head.num_classes, head.dim);
            let mut g = vec![0.0; head.params.len()];
            for (s, row) in batch.iter().zip(&gz) {
                for (i, &gzi) in row.iter().enumerate() {
                    crate::vecmath::axpy(gzi, &s.image_embedding, &mut g[i * d..(i + 1) * d]);
                    g[c * d + i] += gzi;
                }
            }
            g
        });
        Ok((out.value, grad))
    }

    fn record(&self, head: &LinearHead, epoch: usize, lr: f64, with_eval: bool) -> Result<EpochRecord> {
        let all: Vec<&Sample> = self.train.samples().iter().collect();
        let (total, _) = self.loss(head, &all, false)?;
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("training loss {total} at epoch {epoch}")));
        }
        let eval = if with_eval {
            let scores: Vec<Vec<f64>> = self.eval.samples().iter().map(|s| head.logits(&s.image_embedding)).collect();
            Some(metrics::evaluate_scores(self.eval, &scores, self.stats)?)
        } else {
            None
        };
        Ok(EpochRecord {
            epoch,
            lr,
            loss_total: total,
            loss_cls: total,
            loss_cse: 0.0,
            mean_positive_delta: None,
            eval,
        })
    }
}

/// Trains a linear head on the frozen image embeddings with the selected
/// classification loss. No prompts and no embedding loss are involved.
pub fn linear_probe_baseline(train: &MultiLabelDataset, eval: &MultiLabelDataset, config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    check_compatible(train, eval)?;
    let started = Instant::now();
    let stats = ClassStats::from_dataset(train, config.train.thresholds());
    let priors = ClassPriors::new(&stats.counts, train.len(), &config.loss)?;
    // built only for the frozen-parameter audit and the outcome
    let (encoder, prompts, _) = build_model(config, train.num_classes(), train.dim())?;
    let frozen_before = checksums(&encoder, &prompts, train, eval);

    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    rng.set_stream(STREAM_PROBE_INIT);
    let mut head = LinearHead::new(train.num_classes(), train.dim(), &mut rng);
    let state = ProbeState {
        train,
        eval,
        priors: &priors,
        stats: &stats,
        config,
    };
    let initial = state.record(&head, 0, 0.0, true)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    rng.set_stream(STREAM_SHUFFLE);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut opt = Sgd::new(head.params.len(), config.train.momentum, config.train.weight_decay);
    let mut history = Vec::with_capacity(config.train.epochs);
    let mut failure = None;

    'epochs: for epoch in 1..=config.train.epochs {
        let lr = cosine_lr(epoch - 1, config.train.epochs, config.train.lr0)?;
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.train.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&k| &train.samples()[k]).collect();
            let step = state.loss(&head, &batch, true).and_then(|(value, grad)| {
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("batch loss {value} in epoch {epoch}")));
                }
                opt.step(&mut head.params, &grad.expect("requested"), lr)
            });
            if let Err(e) = step {
                failure = Some(e.to_string());
                break 'epochs;
            }
        }
        match state.record(&head, epoch, lr, is_eval_epoch(epoch, config)) {
            Ok(r) => history.push(r),
            Err(e) => {
                failure = Some(e.to_string());
                break;
            }
        }
    }

    let final_eval = history.iter().rev().find_map(|r| r.eval.clone());
    let frozen_after = checksums(&encoder, &prompts, train, eval);
    Ok(TrainOutcome {
        record: RunRecord {
            config: config.to_json(),
            class_stats: stats,
            initial,
            history,
            final_eval,
            frozen_before,
            frozen_after,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
            failure,
        },
        model: TrainedModel::LinearProbe(head),
        encoder,
    })
}

/// Gradient check of the configured objective at the initial prompts, on
/// one seeded batch of `batch_size` training samples.
pub fn initial_gradcheck(train: &MultiLabelDataset, config: &RunConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    config.validate()?;
    let stats = ClassStats::from_dataset(train, config.train.thresholds());
    let priors = ClassPriors::new(&stats.counts, train.len(), &config.loss)?;
    let (encoder, prompts, head) = build_model(config, train.num_classes(), train.dim())?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    rng.set_stream(STREAM_GRADCHECK);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let batch: Vec<&Sample> = order
        .iter()
        .take(config.train.batch_size)
        .map(|&k| &train.samples()[k])
        .collect();

    let report = losses::total_loss(&batch, &prompts, &encoder, &head, &priors, &config.loss)?;
    let skip = losses::hinge_kink_mask(&batch, &prompts, &encoder, &priors, &config.loss, opts.kink_guard)?;
    let loss_at = |params: &[f64]| {
        let mut p = prompts.clone();
        p.contexts_mut().copy_from_slice(params);
        losses::total_loss_value(&batch, &p, &encoder, &head, &priors, &config.loss).unwrap_or(f64::NAN)
    };
    Ok(gradcheck::check(loss_at, &report.gradient, prompts.contexts(), &skip, opts))
}
