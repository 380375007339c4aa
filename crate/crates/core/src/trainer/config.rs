//! Run configuration.

use serde::{Deserialize, Serialize};

use crate::acquisition::Strategy;
use crate::classifier::ClassifierConfig;
use crate::env::{EnvConfig, EvalMode};
use crate::grpo::{ClipConfig, DEFAULT_DECAY_COEFF};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalModeName {
    Greedy,
    AvgAtK,
}

/// Everything needed to reproduce one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub seed: u64,
    pub group_size: usize,
    pub batch_size: usize,
    /// Surrogate updates per rollout batch.
    pub grpo_steps: usize,
    pub learning_rate: f64,
    /// Annotation budget ratio.
    pub p: f64,
    /// Fraction of each batch kept as reliable unsupervised prompts.
    pub p2: f64,
    pub warmup_steps: usize,
    pub epochs: usize,
    /// Caps the number of steps below `epochs` worth of batches.
    pub max_steps: Option<usize>,
    pub eval_every: usize,
    pub eval_mode: EvalModeName,
    pub eval_k: usize,
    pub eval_temperature: f64,
    /// Pay again for prompts annotated in an earlier epoch.
    pub charge_per_query: bool,
    /// Remove dropped prompts from the gradient average instead of zeroing them.
    pub drop_physically: bool,
    pub oracle_wrong_only: bool,
    pub decay_coeff: f64,
    pub env: EnvConfig,
    pub clip: ClipConfig,
    pub classifier: ClassifierConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Care,
            seed: 0,
            group_size: 8,
            batch_size: 64,
            grpo_steps: 1,
            learning_rate: 0.5,
            p: 0.2,
            p2: 0.25,
            warmup_steps: 10,
            epochs: 2,
            max_steps: None,
            eval_every: 10,
            eval_mode: EvalModeName::Greedy,
            eval_k: 8,
            eval_temperature: 1.0,
            charge_per_query: false,
            drop_physically: false,
            oracle_wrong_only: false,
            decay_coeff: DEFAULT_DECAY_COEFF,
            env: EnvConfig::default(),
            clip: ClipConfig::default(),
            classifier: ClassifierConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::config("group_size", "must be at least 2"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.grpo_steps == 0 {
            return Err(Error::config("grpo_steps", "must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::config("p", format!("{} is outside [0, 1]", self.p)));
        }
        if !(0.0..=1.0).contains(&self.p2) {
            return Err(Error::config("p2", format!("{} is outside [0, 1]", self.p2)));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.max_steps == Some(0) {
            return Err(Error::config("max_steps", "must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be positive"));
        }
        if self.eval_mode == EvalModeName::AvgAtK {
            if self.eval_k == 0 {
                return Err(Error::config("eval_k", "must be positive"));
            }
            if !(self.eval_temperature > 0.0) {
                return Err(Error::config("eval_temperature", "must be positive"));
            }
        }
        if !(self.decay_coeff.is_finite() && self.decay_coeff >= 0.0) {
            return Err(Error::config("decay_coeff", "must be non-negative"));
        }
        self.env.validate()?;
        self.clip.validate()?;
        self.classifier.validate()?;
        if self.batch_size > self.env.train_size {
            return Err(Error::config("batch_size", "exceeds env.train_size"));
        }
        Ok(())
    }

    pub fn eval_mode(&self) -> EvalMode {
        match self.eval_mode {
            EvalModeName::Greedy => EvalMode::Greedy,
            EvalModeName::AvgAtK => EvalMode::AvgAtK {
                k: self.eval_k,
                temperature: self.eval_temperature,
            },
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.env.train_size / self.batch_size
    }

    pub fn total_steps(&self) -> usize {
        let full = self.epochs * self.steps_per_epoch();
        self.max_steps.map_or(full, |m| m.min(full))
    }
}
