mod common;

use ltprompt::data::signed_labels;
use ltprompt::losses::{self, class_weights, cse_forward, cse_term, ClassPriors, LossConfig};
use ltprompt::metrics::{average_precision, brute_force_ap};
use ltprompt::prompt::logits;
use ltprompt::train::cosine_lr;
use ltprompt::{ClsLossKind, RunConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn labels_with_positive(max_len: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..=1, 1..=max_len).prop_filter("needs a positive", |y| y.contains(&1))
}

proptest! {
    #[test]
    fn signed_labels_round_trip(y in prop::collection::vec(0u8..=1, 0..64)) {
        let s = signed_labels(&y).unwrap();
        prop_assert!(s.iter().all(|&v| v == 1 || v == -1));
        let back: Vec<u8> = s.iter().map(|&v| ((v + 1) / 2) as u8).collect();
        prop_assert_eq!(back, y);
    }

    #[test]
    fn weights_form_a_distribution(counts in prop::collection::vec(1usize..5000, 1..40), gamma in 0.0f64..3.0) {
        let w = class_weights(&counts, gamma).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..counts.len() {
            for j in 0..counts.len() {
                if counts[i] < counts[j] {
                    prop_assert!(w[i] >= w[j]);
                }
            }
        }
    }

    #[test]
    fn ap_matches_brute_force(pairs in prop::collection::vec((-3i32..3, 0u8..=1), 1..12)) {
        let scores: Vec<f64> = pairs.iter().map(|p| f64::from(p.0)).collect();
        let labels: Vec<u8> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(labels.contains(&1));
        prop_assert_eq!(average_precision(&scores, &labels).unwrap(), brute_force_ap(&scores, &labels).unwrap());
    }

    #[test]
    fn ap_ignores_increasing_transforms(labels in labels_with_positive(16), seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // small integers keep every transform exact, so ties survive unchanged
        let scores: Vec<f64> = labels.iter().map(|_| f64::from(rng.random_range(-4i32..4))).collect();
        let ap = average_precision(&scores, &labels).unwrap();
        for f in [|x: f64| 3.0 * x + 7.0, |x: f64| x * x * x, |x: f64| (x + 5.0).powi(2)] {
            let moved: Vec<f64> = scores.iter().map(|&x| f(x)).collect();
            prop_assert_eq!(average_precision(&moved, &labels).unwrap(), ap);
        }
        prop_assert!((0.0..=1.0).contains(&ap));
    }

    #[test]
    fn temperature_preserves_rankings(seed in any::<u64>(), log_tau in -3i32..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prompts: Vec<Vec<f64>> = (0..5).map(|_| common::unit_vector(&mut rng, 4)).collect();
        let images: Vec<Vec<f64>> = (0..12).map(|_| common::unit_vector(&mut rng, 4)).collect();
        let tau = 2f64.powi(log_tau);
        let base: Vec<Vec<f64>> = images.iter().map(|x| logits(x, &prompts, 1.0).unwrap()).collect();
        let scaled: Vec<Vec<f64>> = images.iter().map(|x| logits(x, &prompts, tau).unwrap()).collect();
        for class in 0..prompts.len() {
            let labels: Vec<u8> = (0..images.len()).map(|k| u8::from((k + class) % 3 == 0)).collect();
            let a: Vec<f64> = base.iter().map(|z| z[class]).collect();
            let b: Vec<f64> = scaled.iter().map(|z| z[class]).collect();
            prop_assert_eq!(average_precision(&a, &labels).unwrap(), average_precision(&b, &labels).unwrap());
        }
    }

    #[test]
    fn losses_are_non_negative(seed in any::<u64>(), kind in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = common::random_instance(&mut rng, 8, 16);
        let cfg = LossConfig {
            cls_loss_kind: [ClsLossKind::Db, ClsLossKind::Bce, ClsLossKind::Focal][kind],
            ..LossConfig::default()
        };
        let priors = ClassPriors::new(&inst.counts, inst.num_samples, &cfg).unwrap();
        let cse = cse_forward(&inst.batch(), &inst.embeddings, &priors, false).unwrap().value;
        prop_assert!(cse >= 0.0);
        let z: Vec<Vec<f64>> = inst.samples.iter().map(|s| logits(&s.image_embedding, &inst.embeddings, 0.5).unwrap()).collect();
        let cls = losses::classification_loss(&z, &inst.labels(), &priors, &cfg, false).unwrap().value;
        prop_assert!(cls >= 0.0);
    }

    #[test]
    fn embedding_loss_grows_with_eta(seed in any::<u64>(), eta in 0.0f64..2.0, bump in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = common::random_instance(&mut rng, 8, 16);
        let at = |eta: f64| {
            let cfg = LossConfig { eta, ..LossConfig::default() };
            let priors = ClassPriors::new(&inst.counts, inst.num_samples, &cfg).unwrap();
            cse_forward(&inst.batch(), &inst.embeddings, &priors, false).unwrap().value
        };
        prop_assert!(at(eta + bump) >= at(eta));
    }

    #[test]
    fn positive_term_grows_with_delta(a in 0.0f64..2.0, b in 0.0f64..2.0, w in 0.0f64..1.0, mu in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(cse_term(hi, 1, w, mu) >= cse_term(lo, 1, w, mu));
        prop_assert!(cse_term(hi, -1, w, mu) <= cse_term(lo, -1, w, mu));
    }

    #[test]
    fn cosine_schedule_strictly_decreases(total in 2usize..200, lr0 in 1e-6f64..1.0) {
        let lrs: Vec<f64> = (0..total).map(|t| cosine_lr(t, total, lr0).unwrap()).collect();
        prop_assert_eq!(lrs[0], lr0);
        prop_assert!(lrs.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(lrs.iter().all(|&l| l > 0.0));
        prop_assert!(cosine_lr(total, total, lr0).is_err());
    }

    #[test]
    fn config_json_round_trips(lambda in 0.0f64..=1.0, eta in 0.0f64..3.0, epochs in 1usize..100, seed in any::<u64>()) {
        let mut cfg = RunConfig::default().with_seed(seed);
        cfg.loss.lambda = lambda;
        cfg.loss.eta = eta;
        cfg.train.epochs = epochs;
        prop_assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }
}

#[test]
fn ap_matches_brute_force_exhaustively_up_to_eight() {
    // every label pattern against a fixed tie-heavy score vector and its reverse
    for n in 1..=8usize {
        let scores: Vec<f64> = (0..n).map(|k| (k % 3) as f64).collect();
        let reversed: Vec<f64> = scores.iter().rev().copied().collect();
        for pattern in 1u32..(1 << n) {
            let labels: Vec<u8> = (0..n).map(|k| ((pattern >> k) & 1) as u8).collect();
            for s in [&scores, &reversed] {
                assert_eq!(average_precision(s, &labels).unwrap(), brute_force_ap(s, &labels).unwrap());
            }
        }
    }
}
