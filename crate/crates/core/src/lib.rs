//! Prompt tuning for long-tailed multi-label recognition with a
//! class-specific embedding loss, over frozen synthetic encoders.
//!
//! The crate covers the whole experimental loop: a long-tailed synthetic
//! data generator ([`synth`]), the frozen text encoder and learnable prompt
//! contexts ([`prompt`]), the objectives with analytic gradients
//! ([`losses`]), a finite-difference oracle ([`gradcheck`]), grouped mAP
//! evaluation ([`metrics`]), the SGD trainer ([`train`]), and run-directory
//! and sweep plumbing ([`runner`]) shared by the CLI and the C ABI.

pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod prompt;
pub mod runner;
pub mod synth;
pub mod train;
pub mod vecmath;

pub use config::{Baseline, PromptConfig, RunConfig, TrainConfig};
pub use data::{ClassGroup, ClassStats, GroupThresholds, MultiLabelDataset, Sample};
pub use error::{Error, Result};
pub use losses::{ClassPriors, ClsLossKind, LossConfig, LossReport};
pub use metrics::EvalResult;
pub use prompt::{FrozenTextEncoder, LogitHead, PromptMode, PromptSet};
pub use synth::SynthConfig;
pub use train::{RunRecord, TrainOutcome};

use sha2::{Digest, Sha256};

/// SHA-256 over the exact bit patterns of `f64` sequences.
pub struct Fingerprint(Sha256);

impl Fingerprint {
    pub fn new() -> Self {
        Self(Sha256::new())
    }

    pub fn update_f64s(&mut self, values: &[f64]) {
        for v in values {
            self.0.update(v.to_bits().to_le_bytes());
        }
    }

    pub fn finish(self) -> String {
        self.0.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl Default for Fingerprint {
    fn default() -> Self {
        Self::new()
    }
}
