//! Run directories, prompt checkpoints, ablation variants, and sweeps.
//!
//! A run directory holds `config.json` (the effective configuration),
//! `metrics.csv` (one row per epoch, epoch 0 being the initial prompts),
//! `prompts.ckpt.json` (or `probe.ckpt.json` for the linear-probe
//! baseline), and `run.json` (the full [`RunRecord`]). Floats are written
//! in shortest round-trip form, so every value reparses to the same bits.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Baseline, RunConfig};
use crate::data::MultiLabelDataset;
use crate::error::{Error, Result};
use crate::gradcheck::{GradCheckOptions, GradCheckReport};
use crate::losses::ClsLossKind;
use crate::prompt::{ContextInit, PromptMode, PromptSet};
use crate::synth::{self, SynthConfig};
use crate::train::{self, RunRecord, TrainOutcome, TrainedModel};

pub const METRICS_HEADER: &str = "epoch,map_total,map_head,map_medium,map_tail,loss_total,loss_cls,loss_cse,lr";

/// Loads the training split from `data` or generates it from `config.synth`.
/// The evaluation split comes from `eval_data`, or is generated on the
/// held-out stream when the training split was generated too. A training
/// file without an evaluation file is evaluated on itself.
pub fn load_or_generate(config: &RunConfig, data: Option<&Path>, eval_data: Option<&Path>) -> Result<(MultiLabelDataset, MultiLabelDataset)> {
    let train = match data {
        Some(p) => MultiLabelDataset::load(p)?,
        None => synth::generate(&config.synth)?,
    };
    let eval = match (eval_data, data) {
        (Some(p), _) => MultiLabelDataset::load(p)?,
        (None, None) => synth::generate_eval(&config.synth, config.train.eval_samples)?,
        (None, Some(_)) => train.clone(),
    };
    Ok((train, eval))
}

/// Creates `dir`, refusing to reuse a non-empty directory unless `force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::OutputExists(dir.to_path_buf()));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Refuses to replace an existing file unless `force`.
pub fn check_out_file(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::OutputExists(path.to_path_buf()));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Absent groups and non-evaluated epochs are empty fields.
pub fn metrics_csv(record: &RunRecord) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in record.rows() {
        let e = r.eval.as_ref();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch,
            opt(e.map(|e| e.map_total)),
            opt(e.and_then(|e| e.map_head)),
            opt(e.and_then(|e| e.map_medium)),
            opt(e.and_then(|e| e.map_tail)),
            r.loss_total,
            r.loss_cls,
            r.loss_cse,
            r.lr
        )
        .expect("writing to a String");
    }
    out
}

/// On-disk prompt checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptCheckpoint {
    pub mode: PromptMode,
    #[serde(rename = "M")]
    pub context_len: usize,
    pub d_token: usize,
    /// `blocks × M × d_token`
    pub contexts: Vec<Vec<Vec<f64>>>,
    pub class_tokens: Vec<Vec<f64>>,
    pub encoder_seed: u64,
}

impl PromptCheckpoint {
    pub fn new(prompts: &PromptSet, encoder_seed: u64) -> Self {
        let d = prompts.token_dim();
        let contexts = prompts
            .contexts()
            .chunks_exact(prompts.context_len() * d)
            .map(|block| block.chunks_exact(d).map(<[f64]>::to_vec).collect())
            .collect();
        Self {
            mode: prompts.mode(),
            context_len: prompts.context_len(),
            d_token: d,
            contexts,
            class_tokens: prompts.class_tokens().to_vec(),
            encoder_seed,
        }
    }

    pub fn to_prompts(&self) -> Result<PromptSet> {
        let flat: Vec<f64> = self.contexts.iter().flatten().flatten().copied().collect();
        if self.class_tokens.iter().any(|t| t.len() != self.d_token) {
            return Err(Error::Shape("class token width differs from d_token".into()));
        }
        PromptSet::from_parts(self.mode, self.context_len, flat, self.class_tokens.clone())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }
}

/// Writes the four run files into an already prepared directory.
pub fn write_run_dir(dir: &Path, outcome: &TrainOutcome, encoder_seed: u64) -> Result<()> {
    write_file(&dir.join("config.json"), &outcome.record.config)?;
    write_file(&dir.join("metrics.csv"), &metrics_csv(&outcome.record))?;
    match &outcome.model {
        TrainedModel::Prompts(p) => write_file(&dir.join("prompts.ckpt.json"), &PromptCheckpoint::new(p, encoder_seed).to_json())?,
        TrainedModel::LinearProbe(h) => write_file(&dir.join("probe.ckpt.json"), &serde_json::to_string(h).expect("probe serializes"))?,
    }
    let run = serde_json::to_string_pretty(&outcome.record).expect("record serializes");
    write_file(&dir.join("run.json"), &run)
}

/// Ablation and loss-roster tokens a variant name is built from, joined
/// with `+` (for example `bce+no-margin`).
pub const VARIANT_TOKENS: &[(&str, &str)] = &[
    ("full", "embedding loss with class-aware margin and re-weighting, DB classification loss"),
    ("no-cse", "classification loss only (lambda = 1)"),
    ("no-margin", "flat margin mu_base instead of the class-aware margin"),
    ("no-reweight", "uniform embedding-loss class weights"),
    ("shared-prompt", "one context block shared by all classes"),
    ("db", "distribution-balanced classification loss"),
    ("bce", "binary cross-entropy classification loss"),
    ("focal", "focal classification loss"),
    ("linear-probe", "linear head on frozen image embeddings, no prompts"),
];

/// Applies one ablation token to `config`.
pub fn apply_ablation(config: &mut RunConfig, token: &str) -> Result<()> {
    match token {
        "full" => {}
        "no-cse" => config.loss.lambda = 1.0,
        "no-margin" => config.loss.use_class_aware_margin = false,
        "no-reweight" => config.loss.use_reweighting = false,
        "shared-prompt" => config.prompt.mode = PromptMode::Shared,
        "db" => config.loss.cls_loss_kind = ClsLossKind::Db,
        "bce" => config.loss.cls_loss_kind = ClsLossKind::Bce,
        "focal" => config.loss.cls_loss_kind = ClsLossKind::Focal,
        "linear-probe" => config.train.baseline = Baseline::LinearProbe,
        other => {
            let known: Vec<&str> = VARIANT_TOKENS.iter().map(|(t, _)| *t).collect();
            return Err(Error::config("ablation", format!("unknown variant {other:?} (known: {})", known.join(", "))));
        }
    }
    Ok(())
}

pub fn variant_config(base: &RunConfig, name: &str) -> Result<RunConfig> {
    let mut cfg = base.clone();
    for token in name.split('+') {
        apply_ablation(&mut cfg, token)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Trains one configuration end to end and writes its run directory.
pub fn run_one(config: &RunConfig, data: Option<&Path>, eval_data: Option<&Path>, out: &Path, force: bool) -> Result<TrainOutcome> {
    let (train_set, eval_set) = load_or_generate(config, data, eval_data)?;
    prepare_out_dir(out, force)?;
    let outcome = train::train(&train_set, &eval_set, config)?;
    write_run_dir(out, &outcome, config.encoder_seed)?;
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(MeanStd { mean, std, n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub variant: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub final_eval: Option<crate::metrics::EvalResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: String,
    pub runs: usize,
    pub failed: usize,
    pub map_total: Option<MeanStd>,
    pub map_head: Option<MeanStd>,
    pub map_medium: Option<MeanStd>,
    pub map_tail: Option<MeanStd>,
}

pub fn aggregate(variant: &str, runs: &[&SweepRun]) -> SweepRow {
    let ok: Vec<&crate::metrics::EvalResult> = runs
        .iter()
        .filter(|r| r.error.is_none())
        .filter_map(|r| r.final_eval.as_ref())
        .collect();
    let collect = |f: &dyn Fn(&crate::metrics::EvalResult) -> Option<f64>| mean_std(&ok.iter().filter_map(|e| f(e)).collect::<Vec<_>>());
    SweepRow {
        variant: variant.to_string(),
        runs: runs.len(),
        failed: runs.len() - ok.len(),
        map_total: collect(&|e| Some(e.map_total)),
        map_head: collect(&|e| e.map_head),
        map_medium: collect(&|e| e.map_medium),
        map_tail: collect(&|e| e.map_tail),
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "variant,runs,failed,map_total_mean,map_total_std,map_head_mean,map_head_std,map_medium_mean,map_medium_std,map_tail_mean,map_tail_std\n",
    );
    let cell = |m: &Option<MeanStd>| match m {
        Some(m) => format!("{},{}", m.mean, m.std),
        None => ",".to_string(),
    };
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.variant,
            r.runs,
            r.failed,
            cell(&r.map_total),
            cell(&r.map_head),
            cell(&r.map_medium),
            cell(&r.map_tail)
        )
        .expect("writing to a String");
    }
    out
}

/// Rejects empty or repeated variant names before any run starts.
pub fn check_variants(variants: &[String]) -> Result<()> {
    if variants.is_empty() {
        return Err(Error::config("variants", "no variants given"));
    }
    for (i, v) in variants.iter().enumerate() {
        if variants[..i].contains(v) {
            return Err(Error::config("variants", format!("duplicate variant {v:?}")));
        }
    }
    Ok(())
}

/// Runs every variant × seed (in parallel) into `out/<variant>/seed-<seed>`
/// and writes `out/sweep.csv`. Each seed drives both data generation and
/// training. A failed run marks its row and the sweep carries on.
pub fn run_sweep(base: &RunConfig, seeds: &[u64], variants: &[String], out: &Path, force: bool) -> Result<(Vec<SweepRow>, Vec<SweepRun>)> {
    check_variants(variants)?;
    if seeds.is_empty() {
        return Err(Error::config("seeds", "no seeds given"));
    }
    let configs: Vec<RunConfig> = variants.iter().map(|v| variant_config(base, v)).collect::<Result<_>>()?;
    prepare_out_dir(out, force)?;

    let jobs: Vec<(usize, u64)> = (0..variants.len()).flat_map(|v| seeds.iter().map(move |&s| (v, s))).collect();
    let runs: Vec<SweepRun> = jobs
        .par_iter()
        .map(|&(v, seed)| {
            let cfg = configs[v].clone().with_seed(seed);
            let dir = out.join(&variants[v]).join(format!("seed-{seed}"));
            let result = run_one(&cfg, None, None, &dir, force);
            let (final_eval, error) = match result {
                Ok(o) => (o.record.final_eval.clone(), o.record.failure.clone()),
                Err(e) => (None, Some(e.to_string())),
            };
            SweepRun {
                variant: variants[v].clone(),
                seed,
                dir,
                final_eval,
                error,
            }
        })
        .collect();

    let rows: Vec<SweepRow> = variants
        .iter()
        .map(|v| aggregate(v, &runs.iter().filter(|r| &r.variant == v).collect::<Vec<_>>()))
        .collect();
    write_file(&out.join("sweep.csv"), &sweep_csv(&rows))?;
    Ok((rows, runs))
}

/// One randomized gradient-check configuration and its report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckTrial {
    pub index: usize,
    pub config: RunConfig,
    pub report: GradCheckReport,
}

const LAMBDAS: [f64; 3] = [0.0, 0.5, 1.0];
const CLS_KINDS: [ClsLossKind; 3] = [ClsLossKind::Db, ClsLossKind::Bce, ClsLossKind::Focal];

/// A small random configuration for trial `index`. λ cycles through
/// {0, 0.5, 1} and the prompt mode, margin, and re-weighting toggles walk
/// all eight combinations, so any 24 consecutive trials cover every pairing.
pub fn random_trial_config(seed: u64, index: usize) -> RunConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let num_classes = rng.random_range(3..=6);
    let mut cfg = RunConfig::default();
    cfg.synth = SynthConfig {
        num_classes,
        num_samples: 6 * num_classes,
        dim: rng.random_range(3..=8),
        powerlaw_exponent: rng.random_range(0.0..1.5),
        cooccur_prob: rng.random_range(0.0..0.6),
        max_extra_labels: 2,
        noise_std: rng.random_range(0.05..0.6),
        caption_noise_std: rng.random_range(0.05..0.6),
        seed: rng.random(),
    };
    cfg.encoder_seed = rng.random();
    cfg.train.seed = rng.random();
    cfg.train.batch_size = rng.random_range(1..=8);
    let toggles = (index / LAMBDAS.len()) % 8;
    cfg.loss.lambda = LAMBDAS[index % LAMBDAS.len()];
    cfg.prompt.mode = if toggles & 1 == 0 { PromptMode::ClassSpecific } else { PromptMode::Shared };
    cfg.loss.use_class_aware_margin = toggles & 2 == 0;
    cfg.loss.use_reweighting = toggles & 4 == 0;
    cfg.loss.cls_loss_kind = CLS_KINDS[rng.random_range(0..CLS_KINDS.len())];
    cfg.loss.eta = rng.random_range(0.2..2.0);
    cfg.loss.gamma_rw = rng.random_range(0.0..2.0);
    cfg.loss.mu_base = rng.random_range(0.1..1.0);
    cfg.prompt.context_len = rng.random_range(1..=3);
    cfg.prompt.token_dim = Some(rng.random_range(2..=6));
    cfg.prompt.temperature = rng.random_range(0.5..2.0);
    cfg.prompt.init = ContextInit::Random { std: 0.5 };
    cfg
}

/// Runs `count` seeded random gradient checks of the total loss in parallel.
/// A drawn dataset that makes the configuration invalid (a class present
/// in every sample gives an infinite DB bias) is redrawn with the next
/// data seed.
pub fn random_gradcheck_trials(seed: u64, count: usize, opts: &GradCheckOptions) -> Result<Vec<GradCheckTrial>> {
    (0..count)
        .into_par_iter()
        .map(|index| {
            let mut config = random_trial_config(seed, index);
            loop {
                let data = synth::generate(&config.synth)?;
                match train::initial_gradcheck(&data, &config, opts) {
                    Ok(report) => return Ok(GradCheckTrial { index, config, report }),
                    Err(Error::InfiniteBias { .. }) => config.synth.seed = config.synth.seed.wrapping_add(1),
                    Err(e) => return Err(e),
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_tokens_compose() {
        let cfg = variant_config(&RunConfig::default(), "bce+no-margin+no-reweight").unwrap();
        assert_eq!(cfg.loss.cls_loss_kind, ClsLossKind::Bce);
        assert!(!cfg.loss.use_class_aware_margin && !cfg.loss.use_reweighting);
        assert_eq!(variant_config(&RunConfig::default(), "no-cse").unwrap().loss.lambda, 1.0);
        assert!(variant_config(&RunConfig::default(), "bogus").is_err());
    }

    #[test]
    fn duplicate_variants_rejected() {
        let err = check_variants(&["bce".into(), "full".into(), "bce".into()]).unwrap_err();
        assert!(err.to_string().contains("duplicate variant"));
    }

    #[test]
    fn single_value_has_zero_std() {
        let m = mean_std(&[0.42]).unwrap();
        assert_eq!((m.mean, m.std, m.n), (0.42, 0.0, 1));
        let m = mean_std(&[1.0, 3.0]).unwrap();
        assert_eq!(m.mean, 2.0);
        assert!((m.std - 2f64.sqrt()).abs() < 1e-15);
    }
}
