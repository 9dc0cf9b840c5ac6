//! Scalar reference implementations and random instance builders shared by
//! the integration tests. Nothing here calls into the library's loss code.

#![allow(dead_code)]

use ltprompt::Sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// A random loss instance: a batch of samples, unit prompt embeddings, and
/// training-split class counts.
pub struct Instance {
    pub samples: Vec<Sample>,
    pub embeddings: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
    pub num_samples: usize,
}

impl Instance {
    pub fn batch(&self) -> Vec<&Sample> {
        self.samples.iter().collect()
    }

    pub fn labels(&self) -> Vec<&[u8]> {
        self.samples.iter().map(|s| s.labels.as_slice()).collect()
    }
}

pub fn random_instance(rng: &mut ChaCha8Rng, max_classes: usize, max_batch: usize) -> Instance {
    let c = rng.random_range(1..=max_classes);
    let b = rng.random_range(1..=max_batch);
    let dim = rng.random_range(2..=6);
    let num_samples = rng.random_range(50..=2000);
    let counts = (0..c).map(|_| rng.random_range(1..num_samples)).collect();
    let samples = (0..b)
        .map(|_| Sample {
            image_embedding: unit_vector(rng, dim),
            labels: (0..c).map(|_| u8::from(rng.random_bool(0.4))).collect(),
            caption_embedding: unit_vector(rng, dim),
        })
        .collect();
    let embeddings = (0..c).map(|_| unit_vector(rng, dim)).collect();
    Instance {
        samples,
        embeddings,
        counts,
        num_samples,
    }
}

pub struct CseParams {
    pub eta: f64,
    pub gamma: f64,
    pub mu_base: f64,
    pub class_aware_margin: bool,
    pub reweighting: bool,
}

/// Class-specific embedding loss computed loop by loop: for every sample
/// and class, derive the margin and weight from the counts, measure the
/// cosine distance, and apply the positive or hinged negative term.
pub fn cse_reference(samples: &[Sample], prompts: &[Vec<f64>], counts: &[usize], p: &CseParams) -> f64 {
    let c = counts.len();
    let mut loss_sum = 0.0;
    for s in samples {
        let mut l_cse = 0.0;
        for i in 0..c {
            let mu = if p.class_aware_margin {
                p.eta / (counts[i] as f64).sqrt().sqrt()
            } else {
                p.mu_base
            };
            let w = if p.reweighting {
                let denom: f64 = counts.iter().map(|&n| (n as f64).powf(-p.gamma)).sum();
                (counts[i] as f64).powf(-p.gamma) / denom
            } else {
                1.0
            };
            let d = 1.0 - cosine(&s.caption_embedding, &prompts[i]);
            let y_signed = 2 * i32::from(s.labels[i]) - 1;
            l_cse += if y_signed == 1 { w * d } else { f64::max(0.0, w * (mu - d)) };
        }
        loss_sum += l_cse;
    }
    loss_sum / samples.len() as f64
}

pub struct DbParams {
    pub alpha: f64,
    pub beta: f64,
    pub theta: f64,
    pub kappa: f64,
    pub zeta: f64,
    pub gamma: f64,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Distribution-balanced loss written term by term; summed over classes
/// and averaged over samples.
pub fn db_reference(logits: &[Vec<f64>], labels: &[&[u8]], counts: &[usize], total: usize, p: &DbParams) -> f64 {
    let inv_sum: f64 = counts.iter().map(|&n| 1.0 / n as f64).sum();
    let mut sum = 0.0;
    for (z, y) in logits.iter().zip(labels) {
        for i in 0..counts.len() {
            let n = counts[i] as f64;
            let r = p.alpha + logistic(p.beta * ((1.0 / n) / inv_sum - p.theta));
            let v = -p.kappa * -(1.0 / (n / total as f64) - 1.0).ln();
            // 1 - σ(x) = σ(-x) and log σ(x) = -log(1 + e^{-x}), kept exact for large |x|
            if y[i] == 1 {
                let x = z[i] - v;
                let log_q = -(-x).exp().ln_1p();
                sum += -r * logistic(-x).powf(p.gamma) * log_q;
            } else {
                let x = p.zeta * (z[i] - v);
                let log_one_minus_q = -x.exp().ln_1p();
                sum += -(r / p.zeta) * logistic(x).powf(p.gamma) * log_one_minus_q;
            }
        }
    }
    sum / logits.len() as f64
}
