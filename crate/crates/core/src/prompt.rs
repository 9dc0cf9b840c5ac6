//! Frozen text encoder, learnable prompt contexts, and the cosine logit head.
//!
//! A prompt for class `i` is `M` context tokens followed by the class token.
//! The text encoder mean-pools the `M + 1` tokens, applies a fixed linear
//! projection into the shared embedding space, and L2-normalizes.
//! Contexts are the only trainable parameters; class tokens and the
//! projection never change once built.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::unit_gaussian_vectors;
use crate::vecmath;

const STREAM_PROJECTION: u64 = 0;
const STREAM_CLASS_TOKENS: u64 = 1;

/// Seed of the fixed "hand-crafted" template used by [`ContextInit::Template`].
const TEMPLATE_SEED: u64 = 0x5048_4f54_4f5f_4f46;

/// Fixed linear map `R^token_dim -> R^dim` applied to the pooled prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenTextEncoder {
    /// Row-major, `dim` rows of `token_dim` columns.
    projection: Vec<f64>,
    /// The same matrix column-major, so both products run as row updates.
    transposed: Vec<f64>,
    dim: usize,
    token_dim: usize,
    seed: u64,
}

impl FrozenTextEncoder {
    /// Entries are i.i.d. `N(0, 1/token_dim)` from stream 0 of `seed`.
    pub fn new(seed: u64, token_dim: usize, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_PROJECTION);
        let scale = 1.0 / (token_dim as f64).sqrt();
        let projection = (0..dim * token_dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::assemble(projection, dim, token_dim, seed)
    }

    fn assemble(projection: Vec<f64>, dim: usize, token_dim: usize, seed: u64) -> Self {
        let transposed = (0..token_dim)
            .flat_map(|j| (0..dim).map(move |i| (i, j)))
            .map(|(i, j)| projection[i * token_dim + j])
            .collect();
        Self {
            projection,
            transposed,
            dim,
            token_dim,
            seed,
        }
    }

    pub fn from_matrix(projection: Vec<f64>, dim: usize, token_dim: usize) -> Result<Self> {
        if projection.len() != dim * token_dim {
            return Err(Error::Shape(format!(
                "projection has {} entries, expected {dim}x{token_dim}",
                projection.len()
            )));
        }
        Ok(Self::assemble(projection, dim, token_dim, 0))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `projection · pooled`, accumulated column by column.
    pub fn project(&self, pooled: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (col, &u) in self.transposed.chunks_exact(self.dim).zip(pooled) {
            vecmath::axpy(u, col, &mut out);
        }
        out
    }

    /// `projectionᵀ · g`
    pub fn project_transpose(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.token_dim];
        for (row, &gi) in self.projection.chunks_exact(self.token_dim).zip(g) {
            vecmath::axpy(gi, row, &mut out);
        }
        out
    }

    pub fn checksum(&self) -> String {
        let mut h = crate::Fingerprint::new();
        h.update_f64s(&self.projection);
        h.finish()
    }
}

/// Class-name tokens: unit vectors from stream 1 of the encoder seed.
pub fn class_tokens(encoder_seed: u64, num_classes: usize, token_dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(encoder_seed);
    rng.set_stream(STREAM_CLASS_TOKENS);
    unit_gaussian_vectors(&mut rng, num_classes, token_dim)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// One context block per class.
    #[default]
    ClassSpecific,
    /// A single context block shared by every class.
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ContextInit {
    /// i.i.d. `N(0, std²)` per coordinate.
    Random { std: f64 },
    /// A fixed unit-token template, identical for every class and seed.
    Template,
}

impl Default for ContextInit {
    fn default() -> Self {
        ContextInit::Random { std: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    mode: PromptMode,
    context_len: usize,
    token_dim: usize,
    /// `blocks × context_len × token_dim`, row-major.
    contexts: Vec<f64>,
    class_tokens: Vec<Vec<f64>>,
}

impl PromptSet {
    pub fn new(
        mode: PromptMode,
        context_len: usize,
        class_tokens: Vec<Vec<f64>>,
        init: ContextInit,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if context_len == 0 {
            return Err(Error::config("prompt.context_len", "must be at least 1"));
        }
        let token_dim = class_tokens.first().map(Vec::len).ok_or_else(|| Error::config("prompt", "no classes"))?;
        if class_tokens.iter().any(|t| t.len() != token_dim) {
            return Err(Error::Shape("class tokens differ in length".into()));
        }
        let blocks = match mode {
            PromptMode::ClassSpecific => class_tokens.len(),
            PromptMode::Shared => 1,
        };
        let block_len = context_len * token_dim;
        let contexts = match init {
            ContextInit::Random { std } => {
                if !(std >= 0.0 && std.is_finite()) {
                    return Err(Error::config("prompt.init.random.std", "must be finite and >= 0"));
                }
                (0..blocks * block_len)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            }
            ContextInit::Template => {
                let mut t = ChaCha8Rng::seed_from_u64(TEMPLATE_SEED);
                let template: Vec<f64> = unit_gaussian_vectors(&mut t, context_len, token_dim).concat();
                template.repeat(blocks)
            }
        };
        Ok(Self {
            mode,
            context_len,
            token_dim,
            contexts,
            class_tokens,
        })
    }

    /// Builds a prompt set from explicit contexts (`blocks × M × token_dim`).
    pub fn from_parts(mode: PromptMode, context_len: usize, contexts: Vec<f64>, class_tokens: Vec<Vec<f64>>) -> Result<Self> {
        let token_dim = class_tokens.first().map(Vec::len).ok_or_else(|| Error::config("prompt", "no classes"))?;
        let blocks = match mode {
            PromptMode::ClassSpecific => class_tokens.len(),
            PromptMode::Shared => 1,
        };
        if context_len == 0 || contexts.len() != blocks * context_len * token_dim {
            return Err(Error::Shape(format!(
                "contexts have {} entries, expected {blocks}x{context_len}x{token_dim}",
                contexts.len()
            )));
        }
        if class_tokens.iter().any(|t| t.len() != token_dim) {
            return Err(Error::Shape("class tokens differ in length".into()));
        }
        Ok(Self {
            mode,
            context_len,
            token_dim,
            contexts,
            class_tokens,
        })
    }

    pub fn mode(&self) -> PromptMode {
        self.mode
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn num_classes(&self) -> usize {
        self.class_tokens.len()
    }

    pub fn contexts(&self) -> &[f64] {
        &self.contexts
    }

    pub fn contexts_mut(&mut self) -> &mut [f64] {
        &mut self.contexts
    }

    pub fn class_tokens(&self) -> &[Vec<f64>] {
        &self.class_tokens
    }

    pub fn num_blocks(&self) -> usize {
        match self.mode {
            PromptMode::ClassSpecific => self.num_classes(),
            PromptMode::Shared => 1,
        }
    }

    fn block_len(&self) -> usize {
        self.context_len * self.token_dim
    }

    fn block_index(&self, class: usize) -> usize {
        match self.mode {
            PromptMode::ClassSpecific => class,
            PromptMode::Shared => 0,
        }
    }

    /// Context tokens used by `class`, `M × token_dim`.
    pub fn context_block(&self, class: usize) -> &[f64] {
        let b = self.block_index(class) * self.block_len();
        &self.contexts[b..b + self.block_len()]
    }

    /// Mean of the class's `M` context tokens and its class token.
    pub fn pooled(&self, class: usize) -> Vec<f64> {
        let mut u = self.class_tokens[class].clone();
        for tok in self.context_block(class).chunks_exact(self.token_dim) {
            vecmath::axpy(1.0, tok, &mut u);
        }
        let inv = 1.0 / (self.context_len + 1) as f64;
        u.iter_mut().for_each(|x| *x *= inv);
        u
    }

    pub fn class_token_checksum(&self) -> String {
        let mut h = crate::Fingerprint::new();
        for t in &self.class_tokens {
            h.update_f64s(t);
        }
        h.finish()
    }
}

/// `normalize(projection · meanpool(contexts_i ++ class_token_i))`.
pub fn encode_prompt(encoder: &FrozenTextEncoder, prompts: &PromptSet, class: usize) -> Result<Vec<f64>> {
    if class >= prompts.num_classes() {
        return Err(Error::Shape(format!("class {class} out of range")));
    }
    let h = encoder.project(&prompts.pooled(class));
    vecmath::normalized(&h).ok_or(Error::DegenerateEmbedding { class })
}

/// Per-class prompt embeddings plus what the backward pass needs.
#[derive(Debug, Clone)]
pub struct PromptEmbeddings {
    embeddings: Vec<Vec<f64>>,
    /// `‖projection · pooled‖` per class.
    norms: Vec<f64>,
}

impl PromptEmbeddings {
    pub fn compute(encoder: &FrozenTextEncoder, prompts: &PromptSet) -> Result<Self> {
        if encoder.token_dim() != prompts.token_dim() {
            return Err(Error::Shape(format!(
                "encoder token_dim {} vs prompt token_dim {}",
                encoder.token_dim(),
                prompts.token_dim()
            )));
        }
        let mut embeddings = Vec::with_capacity(prompts.num_classes());
        let mut norms = Vec::with_capacity(prompts.num_classes());
        for class in 0..prompts.num_classes() {
            let h = encoder.project(&prompts.pooled(class));
            let n = vecmath::norm(&h);
            if n == 0.0 || !n.is_finite() {
                return Err(Error::DegenerateEmbedding { class });
            }
            embeddings.push(h.iter().map(|x| x / n).collect());
            norms.push(n);
        }
        Ok(Self { embeddings, norms })
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn get(&self, class: usize) -> &[f64] {
        &self.embeddings[class]
    }

    /// Chains `∂L/∂e_i` (one row per class) back to the context tokens.
    /// Every token of a block receives the same gradient, so one row per
    /// block is returned: `(I - e eᵀ)/‖h‖` through the normalization, then
    /// the transposed projection, then the `1/(M+1)` of the mean pool.
    /// In shared mode the classes' contributions are summed in class order.
    pub fn token_gradients(&self, encoder: &FrozenTextEncoder, prompts: &PromptSet, grad_embeddings: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut blocks = vec![vec![0.0; prompts.token_dim()]; prompts.num_blocks()];
        let inv_pool = 1.0 / (prompts.context_len() + 1) as f64;
        for (class, g_e) in grad_embeddings.iter().enumerate() {
            if g_e.iter().all(|&v| v == 0.0) {
                continue;
            }
            let e = &self.embeddings[class];
            let along = vecmath::dot(g_e, e);
            let inv_norm = 1.0 / self.norms[class];
            let g_h: Vec<f64> = g_e
                .iter()
                .zip(e)
                .map(|(g, ei)| (g - along * ei) * inv_norm)
                .collect();
            let g_u = encoder.project_transpose(&g_h);
            vecmath::axpy(inv_pool, &g_u, &mut blocks[prompts.block_index(class)]);
        }
        blocks
    }

    /// [`Self::token_gradients`] expanded to the flat context layout.
    pub fn backward(&self, encoder: &FrozenTextEncoder, prompts: &PromptSet, grad_embeddings: &[Vec<f64>]) -> Vec<f64> {
        let blocks = self.token_gradients(encoder, prompts, grad_embeddings);
        let mut grad = Vec::with_capacity(prompts.contexts().len());
        for g in &blocks {
            for _ in 0..prompts.context_len() {
                grad.extend_from_slice(g);
            }
        }
        grad
    }
}

/// Cosine-similarity logit head with a fixed temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogitHead {
    temperature: f64,
}

impl LogitHead {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::config("prompt.temperature", "must be finite and > 0"));
        }
        Ok(Self { temperature })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn logits(&self, image_embedding: &[f64], prompt_embeddings: &[Vec<f64>]) -> Vec<f64> {
        let inv = 1.0 / self.temperature;
        prompt_embeddings
            .iter()
            .map(|e| vecmath::dot(e, image_embedding) * inv)
            .collect()
    }
}

/// `z_i = cos(g(o_i), f(x)) / τ` for unit-norm inputs.
pub fn logits(image_embedding: &[f64], prompt_embeddings: &[Vec<f64>], tau: f64) -> Result<Vec<f64>> {
    Ok(LogitHead::new(tau)?.logits(image_embedding, prompt_embeddings))
}

/// Softmax with max-subtraction.
pub fn predict_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(d: usize) -> FrozenTextEncoder {
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            m[i * d + i] = 1.0;
        }
        FrozenTextEncoder::from_matrix(m, d, d).unwrap()
    }

    #[test]
    fn context_equal_to_class_token_with_identity_projection() {
        let tok = vec![3.0, 4.0, 0.0];
        let prompts = PromptSet::from_parts(PromptMode::ClassSpecific, 1, tok.clone(), vec![tok]).unwrap();
        let e = encode_prompt(&identity(3), &prompts, 0).unwrap();
        assert!((e[0] - 0.6).abs() < 1e-15 && (e[1] - 0.8).abs() < 1e-15 && e[2] == 0.0);
    }

    #[test]
    fn positive_scaling_is_invisible() {
        let enc = FrozenTextEncoder::new(7, 6, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let toks = class_tokens(7, 2, 6);
        let p = PromptSet::new(PromptMode::ClassSpecific, 3, toks.clone(), ContextInit::Random { std: 0.5 }, &mut rng).unwrap();
        let scaled_ctx: Vec<f64> = p.contexts().iter().map(|x| x * 2.5).collect();
        let scaled_tok: Vec<Vec<f64>> = toks.iter().map(|t| t.iter().map(|x| x * 2.5).collect()).collect();
        let q = PromptSet::from_parts(PromptMode::ClassSpecific, 3, scaled_ctx, scaled_tok).unwrap();
        for class in 0..2 {
            let a = encode_prompt(&enc, &p, class).unwrap();
            let b = encode_prompt(&enc, &q, class).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn random_prompt_embedding_is_unit() {
        let enc = FrozenTextEncoder::new(7, 16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = PromptSet::new(PromptMode::ClassSpecific, 4, class_tokens(7, 5, 16), ContextInit::default(), &mut rng).unwrap();
        for class in 0..5 {
            let e = encode_prompt(&enc, &p, class).unwrap();
            assert!((vecmath::norm(&e) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_pooled_vector_is_degenerate() {
        let tok = vec![1.0, 0.0];
        let prompts = PromptSet::from_parts(PromptMode::Shared, 1, vec![-1.0, 0.0], vec![tok]).unwrap();
        assert!(matches!(encode_prompt(&identity(2), &prompts, 0), Err(Error::DegenerateEmbedding { class: 0 })));
    }

    #[test]
    fn shared_mode_uses_one_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = PromptSet::new(PromptMode::Shared, 2, class_tokens(1, 4, 3), ContextInit::default(), &mut rng).unwrap();
        assert_eq!(p.contexts().len(), 2 * 3);
        assert_eq!(p.context_block(0), p.context_block(3));
    }

    #[test]
    fn logit_examples() {
        let a = vec![1.0, 0.0];
        let b = vec![0.0, 1.0];
        let neg = vec![-1.0, 0.0];
        assert_eq!(logits(&a, &[a.clone()], 1.0).unwrap(), vec![1.0]);
        assert_eq!(logits(&a, &[b], 0.5).unwrap(), vec![0.0]);
        assert_eq!(logits(&a, &[neg], 0.25).unwrap(), vec![-4.0]);
        assert!(logits(&a, &[a.clone()], 0.0).is_err());
        assert!(logits(&a, &[a.clone()], -1.0).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(predict_softmax(&[0.3, 0.3]), vec![0.5, 0.5]);
        let p = predict_softmax(&[1000.0, 0.0]);
        assert!((p[0] - 1.0).abs() < 1e-300 + 1e-15 && p[1] >= 0.0 && p[1] < 1e-300);
        let p = predict_softmax(&[2f64.ln(), 0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn template_init_is_seed_independent() {
        let toks = class_tokens(3, 2, 4);
        let a = PromptSet::new(PromptMode::ClassSpecific, 2, toks.clone(), ContextInit::Template, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = PromptSet::new(PromptMode::ClassSpecific, 2, toks, ContextInit::Template, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(a.contexts(), b.contexts());
        assert_eq!(a.context_block(0), a.context_block(1));
    }
}
