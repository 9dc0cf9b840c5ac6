use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ltprompt::data::{ClassStats, MultiLabelDataset};
use ltprompt::gradcheck::{GradCheckOptions, GradCheckReport};
use ltprompt::losses::ClsLossKind;
use ltprompt::metrics::{self, EvalResult};
use ltprompt::prompt::{FrozenTextEncoder, LogitHead};
use ltprompt::runner::{self, PromptCheckpoint};
use ltprompt::train::{self, LinearHead};
use ltprompt::{synth, Error, RunConfig};

const EXIT_GRADCHECK: u8 = 3;

#[derive(Parser)]
#[command(name = "ltprompt", version, about = "Prompt tuning with class-specific embedding loss on long-tailed multi-label data")]
struct Cli {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both the data seed and the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file (synth, eval) or directory (train, sweep).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Allow replacing existing output.
    #[arg(long, global = true)]
    force: bool,
    /// Train without the initial gradient check.
    #[arg(long, global = true)]
    skip_gradcheck: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic long-tailed dataset.
    Synth(SynthArgs),
    /// Train prompts (or the linear-probe baseline) into a run directory.
    Train(TrainArgs),
    /// Evaluate a trained run on a dataset.
    Eval(EvalArgs),
    /// Check analytic loss gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Train every variant for every seed and aggregate the metrics.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    powerlaw: Option<f64>,
    #[arg(long)]
    cooccur: Option<f64>,
    #[arg(long)]
    max_extra: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    caption_noise: Option<f64>,
    /// Write the held-out split (`train.eval_samples` samples) instead.
    #[arg(long)]
    eval_split: bool,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Repeatable: full, no-cse, no-margin, no-reweight, shared-prompt, linear-probe.
    #[arg(long)]
    ablation: Vec<String>,
    /// Classification loss.
    #[arg(long)]
    loss: Option<ClsLossKind>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Training split; generated from the config when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Evaluation split; generated alongside a generated training split.
    #[arg(long)]
    eval_data: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Run this many seeded random configurations instead of the configured one.
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3, 4, 5])]
    seeds: Vec<u64>,
    /// Comma-separated variants; tokens may be joined with `+`.
    #[arg(long, value_delimiter = ',', default_values_t = ["full".to_string(), "no-cse".to_string()])]
    variants: Vec<String>,
}

enum Failure {
    Error(Error),
    Gradcheck(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(Failure::Gradcheck(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_GRADCHECK)
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }
    match &cli.command {
        Command::Synth(a) => cmd_synth(cli, config, a),
        Command::Train(a) => cmd_train(cli, config, a),
        Command::Eval(a) => cmd_eval(cli, config, a),
        Command::Gradcheck(a) => cmd_gradcheck(config, a),
        Command::Sweep(a) => cmd_sweep(cli, config, a),
    }
}

fn require_out(cli: &Cli) -> Result<&Path, Error> {
    cli.out
        .as_deref()
        .ok_or_else(|| Error::config("out", "--out is required for this command"))
}

fn cmd_synth(cli: &Cli, mut config: RunConfig, a: &SynthArgs) -> Result<(), Failure> {
    let s = &mut config.synth;
    s.num_classes = a.classes.unwrap_or(s.num_classes);
    s.num_samples = a.samples.unwrap_or(s.num_samples);
    s.dim = a.dim.unwrap_or(s.dim);
    s.powerlaw_exponent = a.powerlaw.unwrap_or(s.powerlaw_exponent);
    s.cooccur_prob = a.cooccur.unwrap_or(s.cooccur_prob);
    s.max_extra_labels = a.max_extra.unwrap_or(s.max_extra_labels);
    s.noise_std = a.noise.unwrap_or(s.noise_std);
    s.caption_noise_std = a.caption_noise.unwrap_or(s.caption_noise_std);
    config.validate()?;

    let out = require_out(cli)?;
    runner::check_out_file(out, cli.force)?;
    let dataset = if a.eval_split {
        synth::generate_eval(&config.synth, config.train.eval_samples)?
    } else {
        synth::generate(&config.synth)?
    };
    runner::write_file(out, &dataset.to_json())?;

    let stats = ClassStats::from_dataset(&dataset, config.train.thresholds());
    println!("{:<10} {:>7}  group", "class", "count");
    for (i, name) in dataset.class_names().iter().enumerate() {
        println!("{:<10} {:>7}  {}", name, stats.counts[i], stats.groups[i]);
    }
    println!("wrote {} samples to {}", dataset.len(), out.display());
    Ok(())
}

fn apply_model_args(config: &mut RunConfig, a: &ModelArgs) -> Result<(), Error> {
    for token in &a.ablation {
        runner::apply_ablation(config, token)?;
    }
    if let Some(kind) = a.loss {
        config.loss.cls_loss_kind = kind;
    }
    if let Some(e) = a.epochs {
        config.train.epochs = e;
    }
    if let Some(lr) = a.lr0 {
        config.train.lr0 = lr;
    }
    if let Some(l) = a.lambda {
        config.loss.lambda = l;
    }
    config.validate()
}

fn print_report(report: &GradCheckReport) {
    println!(
        "gradcheck: {} (max relative error {:.3e} at {}, {} checked, {} kinks skipped)",
        if report.pass { "pass" } else { "FAIL" },
        report.max_rel_error,
        report.worst_index.map_or("-".to_string(), |i| i.to_string()),
        report.num_checked,
        report.num_skipped_kinks
    );
}

fn fmt_map(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |x| format!("{:.2}", 100.0 * x))
}

fn print_eval(label: &str, e: &EvalResult) {
    println!(
        "{label}: mAP total {:.2}  head {}  medium {}  tail {}",
        100.0 * e.map_total,
        fmt_map(e.map_head),
        fmt_map(e.map_medium),
        fmt_map(e.map_tail)
    );
}

fn cmd_train(cli: &Cli, mut config: RunConfig, a: &TrainArgs) -> Result<(), Failure> {
    apply_model_args(&mut config, &a.model)?;
    let out = require_out(cli)?;
    let (train_set, eval_set) = runner::load_or_generate(&config, a.data.data.as_deref(), a.data.eval_data.as_deref())?;

    if !cli.skip_gradcheck && config.train.baseline == ltprompt::Baseline::None {
        let report = train::initial_gradcheck(&train_set, &config, &GradCheckOptions::default())?;
        print_report(&report);
        if !report.pass {
            return Err(Failure::Gradcheck("gradient check failed; not training".into()));
        }
    }

    runner::prepare_out_dir(out, cli.force)?;
    let outcome = train::train(&train_set, &eval_set, &config)?;
    runner::write_run_dir(out, &outcome, config.encoder_seed)?;
    if let Some(e) = &outcome.record.final_eval {
        print_eval("final", e);
    }
    println!("wrote run to {}", out.display());
    match &outcome.record.failure {
        Some(msg) => Err(Error::NonFinite(msg.clone()).into()),
        None => Ok(()),
    }
}

fn cmd_eval(cli: &Cli, _config: RunConfig, a: &EvalArgs) -> Result<(), Failure> {
    let config = RunConfig::load(a.run.join("config.json"))?;
    let (train_set, eval_set) = runner::load_or_generate(&config, a.data.data.as_deref(), a.data.eval_data.as_deref())?;
    let stats = ClassStats::from_dataset(&train_set, config.train.thresholds());
    let result = evaluate_run(&a.run, &config, &eval_set, &stats)?;
    print_eval("eval", &result);
    if let Some(out) = &cli.out {
        runner::check_out_file(out, cli.force)?;
        runner::write_file(out, &serde_json::to_string_pretty(&result).expect("eval result serializes"))?;
    }
    Ok(())
}

fn evaluate_run(dir: &Path, config: &RunConfig, eval_set: &MultiLabelDataset, stats: &ClassStats) -> Result<EvalResult, Error> {
    let probe_path = dir.join("probe.ckpt.json");
    if probe_path.exists() {
        let text = std::fs::read_to_string(&probe_path).map_err(|e| Error::io(&probe_path, e))?;
        let head: LinearHead = serde_json::from_str(&text).map_err(|e| Error::json(&probe_path, e))?;
        if head.num_classes != eval_set.num_classes() || head.dim != eval_set.dim() {
            return Err(Error::Shape("probe checkpoint does not match the dataset".into()));
        }
        let scores: Vec<Vec<f64>> = eval_set.samples().iter().map(|s| head.logits(&s.image_embedding)).collect();
        return metrics::evaluate_scores(eval_set, &scores, stats);
    }
    let ckpt = PromptCheckpoint::load(&dir.join("prompts.ckpt.json"))?;
    let prompts = ckpt.to_prompts()?;
    if prompts.num_classes() != eval_set.num_classes() {
        return Err(Error::Shape("prompt checkpoint does not match the dataset".into()));
    }
    let encoder = FrozenTextEncoder::new(ckpt.encoder_seed, ckpt.d_token, eval_set.dim());
    let head = LogitHead::new(config.prompt.temperature)?;
    metrics::evaluate(eval_set, &prompts, &encoder, &head, stats)
}

fn cmd_gradcheck(mut config: RunConfig, a: &GradcheckArgs) -> Result<(), Failure> {
    let opts = GradCheckOptions {
        tolerance: a.tolerance,
        ..Default::default()
    };
    if let Some(count) = a.trials {
        let trials = runner::random_gradcheck_trials(config.train.seed, count, &opts)?;
        let worst = trials
            .iter()
            .max_by(|x, y| x.report.max_rel_error.total_cmp(&y.report.max_rel_error))
            .ok_or_else(|| Error::config("trials", "must be at least 1"))?;
        let failed: Vec<usize> = trials.iter().filter(|t| !t.report.pass).map(|t| t.index).collect();
        let skipped: usize = trials.iter().map(|t| t.report.num_skipped_kinks).sum();
        println!(
            "gradcheck trials: {} run, {} failed, worst max relative error {:.3e} (trial {}), {} kinks skipped",
            trials.len(),
            failed.len(),
            worst.report.max_rel_error,
            worst.index,
            skipped
        );
        if !failed.is_empty() {
            return Err(Failure::Gradcheck(format!("gradient check failed for trials {failed:?}")));
        }
        return Ok(());
    }
    apply_model_args(&mut config, &a.model)?;
    let (train_set, _) = runner::load_or_generate(&config, a.data.data.as_deref(), a.data.eval_data.as_deref())?;
    let report = train::initial_gradcheck(&train_set, &config, &opts)?;
    print_report(&report);
    if !report.pass {
        return Err(Failure::Gradcheck("gradient check failed".into()));
    }
    Ok(())
}

fn cmd_sweep(cli: &Cli, config: RunConfig, a: &SweepArgs) -> Result<(), Failure> {
    let out = require_out(cli)?;
    runner::check_variants(&a.variants)?;
    let (rows, runs) = runner::run_sweep(&config, &a.seeds, &a.variants, out, cli.force)?;
    for r in runs.iter().filter(|r| r.error.is_some()) {
        eprintln!("run {} seed {} failed: {}", r.variant, r.seed, r.error.as_deref().unwrap_or(""));
    }
    let cell = |m: &Option<runner::MeanStd>| m.map_or("-".to_string(), |m| format!("{:.2}±{:.2}", 100.0 * m.mean, 100.0 * m.std));
    println!("{:<24} {:>5} {:>14} {:>14} {:>14} {:>14}", "variant", "runs", "total", "head", "medium", "tail");
    for r in &rows {
        println!(
            "{:<24} {:>5} {:>14} {:>14} {:>14} {:>14}",
            r.variant,
            r.runs - r.failed,
            cell(&r.map_total),
            cell(&r.map_head),
            cell(&r.map_medium),
            cell(&r.map_tail)
        );
    }
    println!("wrote {}", out.join("sweep.csv").display());
    Ok(())
}
