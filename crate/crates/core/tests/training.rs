use ltprompt::losses::{self, ClassPriors, LossConfig};
use ltprompt::prompt::{FrozenTextEncoder, LogitHead, PromptMode, PromptSet};
use ltprompt::runner::{self, PromptCheckpoint};
use ltprompt::synth::{self, dataset_prototypes};
use ltprompt::train::{self, sgd_step, RunRecord, TrainedModel};
use ltprompt::{Baseline, ClsLossKind, RunConfig, Sample, SynthConfig};

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.synth = SynthConfig {
        num_classes: 6,
        num_samples: 180,
        dim: 16,
        ..SynthConfig::default()
    };
    cfg.train.epochs = 4;
    cfg.train.eval_samples = 300;
    cfg.prompt.context_len = 8;
    cfg
}

fn noiseless(num_classes: usize, dim: usize) -> SynthConfig {
    SynthConfig {
        num_classes,
        num_samples: 40 * num_classes,
        dim,
        cooccur_prob: 0.0,
        noise_std: 0.0,
        caption_noise_std: 0.0,
        ..SynthConfig::default()
    }
}

/// Records compared field by field, leaving out the wall clock.
fn same_record(a: &RunRecord, b: &RunRecord) -> bool {
    a.config == b.config
        && a.initial == b.initial
        && a.history == b.history
        && a.final_eval == b.final_eval
        && a.frozen_before == b.frozen_before
        && a.frozen_after == b.frozen_after
        && a.failure == b.failure
}

#[test]
fn prompts_at_prototypes_are_stationary_without_classification_loss() {
    let synth_cfg = noiseless(5, 24);
    let data = synth::generate(&synth_cfg).unwrap();
    let protos = dataset_prototypes(&synth_cfg).unwrap();
    let dim = synth_cfg.dim;

    // identity projection, one context token equal to the class token, both at the prototype
    let identity: Vec<f64> = (0..dim * dim).map(|k| if k / dim == k % dim { 1.0 } else { 0.0 }).collect();
    let encoder = FrozenTextEncoder::from_matrix(identity, dim, dim).unwrap();
    let tokens: Vec<Vec<f64>> = protos.vectors().to_vec();
    let mut prompts = PromptSet::from_parts(PromptMode::ClassSpecific, 1, tokens.concat(), tokens).unwrap();

    // margins stay below the smallest negative-pair distance (prototype |cos| < 0.5)
    let cfg = LossConfig {
        lambda: 0.0,
        eta: 0.4,
        ..LossConfig::default()
    };
    let priors = ClassPriors::new(&data.class_counts(), data.len(), &cfg).unwrap();
    let head = LogitHead::new(1.0).unwrap();
    let batch: Vec<&Sample> = data.samples().iter().collect();
    let report = losses::total_loss(&batch, &prompts, &encoder, &head, &priors, &cfg).unwrap();
    assert_eq!(report.total, 0.0);
    assert!(report.gradient.iter().all(|&g| g == 0.0));

    let before = prompts.contexts().to_vec();
    sgd_step(prompts.contexts_mut(), &report.gradient, 0.1).unwrap();
    assert_eq!(prompts.contexts(), before.as_slice());
}

#[test]
fn default_training_improves_map() {
    let cfg = RunConfig::default();
    let (train_set, eval_set) = runner::load_or_generate(&cfg, None, None).unwrap();
    let out = train::train(&train_set, &eval_set, &cfg).unwrap();
    let rec = &out.record;
    assert!(!rec.failed());
    assert_eq!(rec.history.len(), 30);
    let first = rec.initial.eval.as_ref().unwrap().map_total;
    let last = rec.final_eval.as_ref().unwrap().map_total;
    assert!(last > first, "{first} -> {last}");
}

#[test]
fn identical_runs_are_identical() {
    let cfg = small_config();
    let (train_set, eval_set) = runner::load_or_generate(&cfg, None, None).unwrap();
    let a = train::train(&train_set, &eval_set, &cfg).unwrap();
    let b = train::train(&train_set, &eval_set, &cfg).unwrap();
    assert!(same_record(&a.record, &b.record));
    assert_eq!(runner::metrics_csv(&a.record), runner::metrics_csv(&b.record));
    let (TrainedModel::Prompts(pa), TrainedModel::Prompts(pb)) = (&a.model, &b.model) else {
        panic!("expected prompt models");
    };
    assert_eq!(PromptCheckpoint::new(pa, 7).to_json(), PromptCheckpoint::new(pb, 7).to_json());

    let other = train::train(&train_set, &eval_set, &cfg.clone().with_seed(8)).unwrap();
    assert_ne!(runner::metrics_csv(&a.record), runner::metrics_csv(&other.record));
}

#[test]
fn training_touches_only_prompt_contexts() {
    let cfg = small_config();
    let (train_set, eval_set) = runner::load_or_generate(&cfg, None, None).unwrap();
    let snapshot = (train_set.to_json(), eval_set.to_json());
    let out = train::train(&train_set, &eval_set, &cfg).unwrap();
    assert_eq!(out.record.frozen_before, out.record.frozen_after);
    assert_eq!((train_set.to_json(), eval_set.to_json()), snapshot);

    let (_, initial, _) = train::build_model(&cfg, train_set.num_classes(), train_set.dim()).unwrap();
    let TrainedModel::Prompts(trained) = &out.model else { panic!("expected prompts") };
    assert_eq!(trained.class_tokens(), initial.class_tokens());
    assert_ne!(trained.contexts(), initial.contexts());
}

#[test]
fn full_batch_step_descends_for_smooth_objective() {
    let mut cfg = small_config();
    cfg.loss.lambda = 1.0;
    for kind in [ClsLossKind::Db, ClsLossKind::Bce, ClsLossKind::Focal] {
        cfg.loss.cls_loss_kind = kind;
        let data = synth::generate(&cfg.synth).unwrap();
        let priors = ClassPriors::new(&data.class_counts(), data.len(), &cfg.loss).unwrap();
        let (encoder, prompts, head) = train::build_model(&cfg, data.num_classes(), data.dim()).unwrap();
        let batch: Vec<&Sample> = data.samples().iter().collect();
        let report = losses::total_loss(&batch, &prompts, &encoder, &head, &priors, &cfg.loss).unwrap();

        let mut lr = 1.0;
        let descended = (0..40).any(|_| {
            let mut stepped = prompts.clone();
            sgd_step(stepped.contexts_mut(), &report.gradient, lr).unwrap();
            let after = losses::total_loss_value(&batch, &stepped, &encoder, &head, &priors, &cfg.loss).unwrap();
            lr *= 0.5;
            after <= report.total
        });
        assert!(descended, "{kind:?}: no step size reduced the loss");
    }
}

#[test]
fn exploding_run_keeps_partial_record() {
    let mut cfg = small_config();
    cfg.train.lr0 = 1e308;
    let (train_set, eval_set) = runner::load_or_generate(&cfg, None, None).unwrap();
    let out = train::train(&train_set, &eval_set, &cfg).unwrap();
    assert!(out.record.failed(), "run with lr0 = 1e308 should abort");
    assert!(out.record.history.len() < cfg.train.epochs);
    assert!(out.record.failure.as_ref().unwrap().contains("non-finite") || out.record.failure.as_ref().unwrap().contains("degenerate"));
}

#[test]
fn linear_probe_separates_noiseless_classes() {
    let mut cfg = RunConfig::default();
    cfg.synth = noiseless(5, 24);
    cfg.train.baseline = Baseline::LinearProbe;
    cfg.train.eval_samples = 200;
    let (train_set, eval_set) = runner::load_or_generate(&cfg, None, None).unwrap();
    let a = train::train(&train_set, &eval_set, &cfg).unwrap();
    assert!(!a.record.failed());
    let last = a.record.final_eval.as_ref().unwrap().map_total;
    assert_eq!(last, 1.0);
    assert!(matches!(a.model, TrainedModel::LinearProbe(_)));

    let b = train::train(&train_set, &eval_set, &cfg).unwrap();
    assert!(same_record(&a.record, &b.record));
}

#[test]
fn checkpoint_round_trips_through_run_directory() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let out = runner::run_one(&cfg, None, None, dir.path(), false).unwrap();
    let TrainedModel::Prompts(trained) = &out.model else { panic!("expected prompts") };
    let loaded = PromptCheckpoint::load(&dir.path().join("prompts.ckpt.json")).unwrap();
    assert_eq!(&loaded.to_prompts().unwrap(), trained);
    let echoed = RunConfig::load(dir.path().join("config.json")).unwrap();
    assert_eq!(echoed, cfg);
    assert_eq!(std::fs::read_to_string(dir.path().join("config.json")).unwrap(), out.record.config);
}
