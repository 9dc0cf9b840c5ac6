//! Long-tailed multi-label dataset generator.
//!
//! Each class owns a unit prototype vector. A sample's image embedding and
//! caption embedding are both the normalized sum of its classes' prototypes
//! plus independent isotropic Gaussian noise, so captions carry the same
//! class signal as images (at their own noise level).
//!
//! All randomness comes from ChaCha8 seeded with `seed`, with one stream per
//! purpose: prototypes on stream 0, the training split on stream 1, and the
//! held-out evaluation split on stream 2. ChaCha8 output is specified
//! bit-for-bit and independent of platform endianness or word size.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{MultiLabelDataset, Sample};
use crate::error::{Error, Result};
use crate::vecmath;

const STREAM_PROTOTYPES: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_EVAL: u64 = 2;

/// Rejection attempts before prototypes fall back to Gram-Schmidt.
const MAX_PROTOTYPE_ATTEMPTS: usize = 64;
const MAX_PROTOTYPE_ABS_COS: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub num_samples: usize,
    pub dim: usize,
    /// Class `i` (0-based) is drawn with probability proportional to `(i+1)^-s`.
    pub powerlaw_exponent: f64,
    pub cooccur_prob: f64,
    pub max_extra_labels: usize,
    pub noise_std: f64,
    pub caption_noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 20,
            num_samples: 2000,
            dim: 64,
            powerlaw_exponent: 1.5,
            cooccur_prob: 0.2,
            max_extra_labels: 1,
            noise_std: 0.15,
            caption_noise_std: 0.05,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::config("num_classes", "must be at least 1"));
        }
        if self.dim < 2 {
            return Err(Error::config("dim", "must be at least 2"));
        }
        if self.num_samples < self.num_classes {
            return Err(Error::config("num_samples", "num_samples < num_classes"));
        }
        if !(self.powerlaw_exponent >= 0.0 && self.powerlaw_exponent.is_finite()) {
            return Err(Error::config("powerlaw_exponent", "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.cooccur_prob) {
            return Err(Error::config("cooccur_prob", "must lie in [0, 1]"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise_std", "must be finite and >= 0"));
        }
        if !(self.caption_noise_std >= 0.0 && self.caption_noise_std.is_finite()) {
            return Err(Error::config("caption_noise_std", "must be finite and >= 0"));
        }
        Ok(())
    }

    /// Target class distribution, `p_i ∝ (i+1)^-s`, normalized.
    pub fn class_probs(&self) -> Vec<f64> {
        let raw: Vec<f64> = (0..self.num_classes)
            .map(|i| ((i + 1) as f64).powf(-self.powerlaw_exponent))
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|p| p / total).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototypes {
    vectors: Vec<Vec<f64>>,
}

impl ClassPrototypes {
    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn get(&self, class: usize) -> &[f64] {
        &self.vectors[class]
    }

    pub fn max_abs_cosine(&self) -> f64 {
        max_abs_cosine(&self.vectors)
    }
}

/// Draws `count` independent unit vectors (normalized standard Gaussians).
pub fn unit_gaussian_vectors(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            if let Some(u) = vecmath::normalized(&v) {
                break u;
            }
        })
        .collect()
}

fn max_abs_cosine(vs: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for a in 0..vs.len() {
        for b in a + 1..vs.len() {
            worst = worst.max(vecmath::dot(&vs[a], &vs[b]).abs());
        }
    }
    worst
}

/// Modified Gram-Schmidt on the rows; requires `vs.len() <= dim`.
fn orthonormalize(vs: &mut [Vec<f64>]) {
    for a in 0..vs.len() {
        let (done, rest) = vs.split_at_mut(a);
        let v = &mut rest[0];
        for u in done.iter() {
            let p = vecmath::dot(u, v);
            vecmath::axpy(-p, u, v);
        }
        *v = vecmath::normalized(v).expect("random rows are linearly independent");
    }
}

/// Class prototypes from stream 0 of `seed`.
///
/// With `dim >= 4C` the draw is repeated until every pair has
/// `|cos| < 0.5`. With `C <= dim < 4C` (or if rejection keeps failing) the
/// rows are orthonormalized instead. With `C > dim` the rows stay random.
pub fn make_prototypes(config: &SynthConfig) -> Result<ClassPrototypes> {
    if config.dim < 2 {
        return Err(Error::config("dim", "must be at least 2"));
    }
    let (c, d) = (config.num_classes, config.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(STREAM_PROTOTYPES);

    let mut vectors = unit_gaussian_vectors(&mut rng, c, d);
    if d >= 4 * c {
        let mut attempts = 1;
        while max_abs_cosine(&vectors) >= MAX_PROTOTYPE_ABS_COS && attempts < MAX_PROTOTYPE_ATTEMPTS {
            vectors = unit_gaussian_vectors(&mut rng, c, d);
            attempts += 1;
        }
        if max_abs_cosine(&vectors) >= MAX_PROTOTYPE_ABS_COS {
            orthonormalize(&mut vectors);
        }
    } else if c <= d && c > 1 {
        orthonormalize(&mut vectors);
    }
    Ok(ClassPrototypes { vectors })
}

/// One primary class from `class_probs`, then `max_extra_labels` attempts,
/// each made with probability `cooccur_prob`, to add a further class drawn
/// from the same distribution. A draw that repeats a class already present
/// adds nothing, so extras stay distinct without distorting the power law.
pub fn sample_label_set(config: &SynthConfig, class_probs: &[f64], rng: &mut ChaCha8Rng) -> Vec<u8> {
    let dist = WeightedIndex::new(class_probs).expect("class_probs has positive mass");
    let mut labels = vec![0u8; class_probs.len()];
    labels[dist.sample(rng)] = 1;
    for _ in 0..config.max_extra_labels {
        if rng.random_bool(config.cooccur_prob) {
            labels[dist.sample(rng)] = 1;
        }
    }
    labels
}

fn noisy_sum(prototypes: &ClassPrototypes, labels: &[u8], std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = prototypes.get(0).len();
    let mut v = vec![0.0; d];
    for (i, _) in labels.iter().enumerate().filter(|(_, &y)| y == 1) {
        vecmath::axpy(1.0, prototypes.get(i), &mut v);
    }
    for x in v.iter_mut() {
        let e: f64 = rng.sample(StandardNormal);
        *x += std * e;
    }
    v
}

fn embed(prototypes: &ClassPrototypes, labels: &[u8], config: &SynthConfig, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    loop {
        let img = noisy_sum(prototypes, labels, config.noise_std, rng);
        let cap = noisy_sum(prototypes, labels, config.caption_noise_std, rng);
        if let (Some(i), Some(c)) = (vecmath::normalized(&img), vecmath::normalized(&cap)) {
            return (i, c);
        }
    }
}

pub fn class_names(num_classes: usize) -> Vec<String> {
    (0..num_classes).map(|i| format!("class_{i:02}")).collect()
}

fn raw_split(config: &SynthConfig, prototypes: &ClassPrototypes, stream: u64, num_samples: usize) -> Vec<Sample> {
    let probs = config.class_probs();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);

    let mut samples = Vec::with_capacity(num_samples);
    for _ in 0..num_samples {
        let labels = sample_label_set(config, &probs, &mut rng);
        let (image_embedding, caption_embedding) = embed(prototypes, &labels, config, &mut rng);
        samples.push(Sample {
            image_embedding,
            labels,
            caption_embedding,
        });
    }
    repair_zero_counts(&mut samples, prototypes, config, &mut rng);
    samples
}

/// `order[new] = old`: classes by descending training count, ties by index.
fn frequency_order(train: &[Sample], num_classes: usize) -> Vec<usize> {
    let counts = crate::data::class_counts(train, num_classes).expect("num_samples >= num_classes >= 1");
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(counts[i]));
    order
}

fn relabel(samples: &mut [Sample], order: &[usize]) {
    for s in samples {
        s.labels = order.iter().map(|&old| s.labels[old]).collect();
    }
}

fn finish(config: &SynthConfig, mut samples: Vec<Sample>, order: &[usize]) -> Result<MultiLabelDataset> {
    relabel(&mut samples, order);
    MultiLabelDataset::new(samples, config.num_classes, class_names(config.num_classes), config.dim)
}

/// Prototypes indexed by dataset class, i.e. after the frequency relabeling
/// applied by [`generate`] and [`generate_eval`].
pub fn dataset_prototypes(config: &SynthConfig) -> Result<ClassPrototypes> {
    config.validate()?;
    let prototypes = make_prototypes(config)?;
    let train = raw_split(config, &prototypes, STREAM_TRAIN, config.num_samples);
    let order = frequency_order(&train, config.num_classes);
    Ok(ClassPrototypes {
        vectors: order.iter().map(|&old| prototypes.vectors[old].clone()).collect(),
    })
}

/// Gives every empty class one positive: a uniformly chosen sample of the
/// rarest non-empty class (lowest index on ties) gains the label, and its
/// embeddings are redrawn for the new label set.
fn repair_zero_counts(samples: &mut [Sample], prototypes: &ClassPrototypes, config: &SynthConfig, rng: &mut ChaCha8Rng) {
    let c = config.num_classes;
    let mut counts = crate::data::class_counts(samples, c).expect("num_samples >= num_classes >= 1");
    for empty in 0..c {
        if counts[empty] > 0 {
            continue;
        }
        let rarest = (0..c)
            .filter(|&j| counts[j] > 0)
            .min_by_key(|&j| (counts[j], j))
            .expect("at least one class is populated");
        let holders: Vec<usize> = (0..samples.len()).filter(|&k| samples[k].labels[rarest] == 1).collect();
        let k = holders[rng.random_range(0..holders.len())];
        samples[k].labels[empty] = 1;
        let (img, cap) = embed(prototypes, &samples[k].labels, config, rng);
        samples[k].image_embedding = img;
        samples[k].caption_embedding = cap;
        counts[empty] += 1;
    }
}

/// The training split. Classes are relabeled by descending empirical
/// count (ties by generation index), so per-class counts never increase
/// with the class index.
pub fn generate(config: &SynthConfig) -> Result<MultiLabelDataset> {
    config.validate()?;
    let prototypes = make_prototypes(config)?;
    let train = raw_split(config, &prototypes, STREAM_TRAIN, config.num_samples);
    let order = frequency_order(&train, config.num_classes);
    finish(config, train, &order)
}

/// A held-out split drawn from the same prototypes and label distribution
/// as [`generate`], on an independent stream, with the training split's
/// class order.
pub fn generate_eval(config: &SynthConfig, num_samples: usize) -> Result<MultiLabelDataset> {
    config.validate()?;
    if num_samples < config.num_classes {
        return Err(Error::config("eval_samples", "eval_samples < num_classes"));
    }
    let prototypes = make_prototypes(config)?;
    let train = raw_split(config, &prototypes, STREAM_TRAIN, config.num_samples);
    let order = frequency_order(&train, config.num_classes);
    let eval = raw_split(config, &prototypes, STREAM_EVAL, num_samples);
    finish(config, eval, &order)
}
