//! Run configuration: TOML with dotted sections; unknown keys are errors.
//!
//! ```toml
//! seed = 0
//! [task]       # synthetic task generator
//! [model]      # transformer dimensions (vocabulary size comes from the data)
//! [sft]        # contrastive + rewrite training
//! [sft.loss]
//! [rl]         # GRPO refinement
//! [rl.reward]
//! [eval]
//! [checkpoints]
//! ```

use std::path::Path;

use anyhow::{Context, Result};
use rimeforge::grpo::RlConfig;
use rimeforge::objectives::LossConfig;
use rimeforge::retrieval::EvalConfig;
use rimeforge::seqmodel::ModelConfig;
use rimeforge::synthtask::TaskConfig;
use rimeforge::Error;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self { d_model: m.d_model, n_heads: m.n_heads, n_layers: m.n_layers, d_ff: m.d_ff, max_seq: m.max_seq }
    }
}

impl ModelSection {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            max_seq: self.max_seq,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    /// Pairs per micro-batch (one forward graph).
    pub micro_batch: usize,
    /// Micro-batches averaged per optimizer step.
    pub accumulation: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Linear warm-up length in optimizer steps.
    pub warmup_steps: usize,
    /// Cosine-decay the learning rate to `min_lr_ratio · lr` after warm-up.
    pub cosine: bool,
    pub min_lr_ratio: f64,
    pub grad_clip: f64,
    /// Epochs of rewrite-only training before the joint phase.
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub loss: LossConfig,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            micro_batch: 16,
            accumulation: 2,
            epochs: 3,
            lr: 5e-5,
            warmup_steps: 0,
            cosine: false,
            min_lr_ratio: 0.1,
            grad_clip: 1.0,
            pretrain_epochs: 0,
            pretrain_lr: 1e-3,
            loss: LossConfig::default(),
        }
    }
}

impl SftConfig {
    /// Learning rate for optimizer step `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if !self.cosine {
            return self.lr;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let floor = self.lr * self.min_lr_ratio;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckpointConfig {
    /// Save an SFT checkpoint every this many epochs (0: final only).
    pub sft_every_epochs: usize,
    /// Save an RL checkpoint every this many steps (0: final only).
    pub rl_every_steps: u64,
}

impl Default for CheckpointConfig {
    fn default() -> Self {
        Self { sft_every_epochs: 1, rl_every_steps: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskConfig,
    pub model: ModelSection,
    pub sft: SftConfig,
    pub rl: RlConfig,
    pub eval: EvalConfig,
    pub checkpoints: CheckpointConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::BadConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.task.validate()?;
        self.model.with_vocab(1).validate()?;
        self.sft.loss.validate()?;
        self.rl.validate()?;
        let s = &self.sft;
        if s.micro_batch == 0 || s.accumulation == 0 || s.epochs == 0 {
            return Err(Error::BadConfig("sft micro_batch, accumulation and epochs must be positive".into()));
        }
        if !(s.lr > 0.0 && s.lr.is_finite()) || !(0.0..=1.0).contains(&s.min_lr_ratio) {
            return Err(Error::BadConfig("sft lr must be positive and min_lr_ratio in [0, 1]".into()));
        }
        if s.micro_batch > self.task.pairs_per_group {
            return Err(Error::GroupTooSmall {
                group: 0,
                available: self.task.pairs_per_group,
                batch: s.micro_batch,
            });
        }
        Ok(())
    }

    /// Canonical text of the resolved config (defaults filled in).
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical text: changes iff a resolved value changes.
    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_method() {
        let c = RunConfig::default();
        assert_eq!(c.sft.loss.lambda, 1.0);
        assert_eq!(c.sft.loss.tau, 0.02);
        assert_eq!(c.sft.lr, 5e-5);
        assert_eq!((c.rl.k, c.rl.epsilon, c.rl.beta, c.rl.lr), (8, 0.2, 0.04, 5e-6));
        assert_eq!(c.sft.micro_batch * c.sft.accumulation, 32);
    }

    #[test]
    fn canonical_round_trip_and_hash() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.canonical()).unwrap(), c);
        let mut d = c.clone();
        assert_eq!(c.sha256(), d.sha256());
        d.sft.loss.lambda = 0.5;
        assert_ne!(c.sha256(), d.sha256());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[sft]\nlearning_rate = 1.0\n").is_err());
        assert!(RunConfig::from_toml("sed = 3\n").is_err());
        let c = RunConfig::from_toml("seed = 3\n[sft.loss]\nlambda = 0.0\n").unwrap();
        assert_eq!((c.seed, c.sft.loss.lambda), (3, 0.0));
    }

    #[test]
    fn schedule_shapes() {
        let s = SftConfig { warmup_steps: 2, cosine: true, lr: 1.0, min_lr_ratio: 0.1, ..SftConfig::default() };
        assert_eq!(s.lr_at(0, 12), 0.5);
        assert_eq!(s.lr_at(2, 12), 1.0);
        assert!((s.lr_at(12, 12) - 0.1).abs() < 1e-12);
        assert_eq!(SftConfig::default().lr_at(99, 10), 5e-5);
    }
}
