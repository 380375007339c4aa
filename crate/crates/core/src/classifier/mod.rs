//! Cascaded acquisition classifiers.
//!
//! Stage I scores how likely the majority vote of a group is correct. Stage II
//! predicts how many correct responses sit outside a wrong majority, which
//! feeds the expected corrective advantage gap.

mod adamw;
mod mlp;
mod replay;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cag::AdmissibleCounts;
use crate::env::ClassifierFeatures;
use crate::{Error, Result};

pub use adamw::AdamW;
pub use mlp::{
    class_balanced_weights, stage1_forward, stage1_loss, stage2_forward, stage2_loss, ClassWeights,
    LabeledSample, MlpParams, NetDims, StageKind, CLASS_WEIGHT_MAX, CLASS_WEIGHT_MIN,
};
pub use replay::ReplayBuffer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub lambda_aux: f64,
    pub replay_capacity: usize,
    pub replay_mix: usize,
    pub class_balanced: bool,
    /// Take a replay-only step when a round brings no fresh annotations.
    pub replay_when_idle: bool,
    pub dims: NetDims,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.01,
            lambda_aux: 1.5,
            replay_capacity: 2048,
            replay_mix: 16,
            class_balanced: true,
            replay_when_idle: true,
            dims: NetDims::default(),
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.learning_rate) {
            return Err(Error::config("classifier.learning_rate", "must be positive"));
        }
        for (name, b) in [("classifier.beta1", self.beta1), ("classifier.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(name, "must lie in [0, 1)"));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("classifier.weight_decay", "must be non-negative"));
        }
        if !(self.lambda_aux.is_finite() && self.lambda_aux >= 0.0) {
            return Err(Error::config("classifier.lambda_aux", "must be non-negative"));
        }
        let d = &self.dims;
        if [d.prompt_hidden, d.response_hidden, d.response_out, d.head_hidden].contains(&0) {
            return Err(Error::config("classifier.dims", "widths must be positive"));
        }
        Ok(())
    }
}

/// What one update did, including the label mix of the stage-1 buffer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub stage1_batch: usize,
    pub stage2_batch: usize,
    pub stage1_loss: Option<f64>,
    pub stage2_loss: Option<f64>,
    pub buffer1_len: usize,
    pub buffer2_len: usize,
    pub buffer1_reliable_fraction: f64,
}

#[derive(Clone, Debug)]
pub struct ClassifierState {
    pub config: ClassifierConfig,
    pub stage1: MlpParams,
    pub stage2: MlpParams,
    opt1: AdamW,
    opt2: AdamW,
    buffer1: ReplayBuffer<LabeledSample>,
    buffer2: ReplayBuffer<LabeledSample>,
    updates: u64,
}

impl ClassifierState {
    pub fn new<R: Rng>(
        config: ClassifierConfig,
        feature_dim: usize,
        group_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let stage1 = MlpParams::new(StageKind::Reliability, config.dims, feature_dim, group_size, rng);
        let stage2 =
            MlpParams::new(StageKind::CountDistribution, config.dims, feature_dim, group_size, rng);
        let betas = (config.beta1, config.beta2);
        let opt1 = AdamW::new(stage1.num_params(), config.learning_rate, betas, config.weight_decay);
        let opt2 = AdamW::new(stage2.num_params(), config.learning_rate, betas, config.weight_decay);
        Ok(Self {
            buffer1: ReplayBuffer::new(config.replay_capacity),
            buffer2: ReplayBuffer::new(config.replay_capacity),
            config,
            stage1,
            stage2,
            opt1,
            opt2,
            updates: 0,
        })
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn buffer1(&self) -> &ReplayBuffer<LabeledSample> {
        &self.buffer1
    }

    pub fn buffer2(&self) -> &ReplayBuffer<LabeledSample> {
        &self.buffer2
    }

    pub fn reliability(&self, feats: &ClassifierFeatures) -> Result<f64> {
        Ok(stage1_forward(&self.stage1, feats)?.0)
    }

    pub fn count_distribution(
        &self,
        feats: &ClassifierFeatures,
        admissible: &AdmissibleCounts,
    ) -> Result<Vec<f64>> {
        stage2_forward(&self.stage2, feats, admissible)
    }

    /// One optimizer step per stage on the fresh samples plus replayed history,
    /// then appends the fresh samples to the buffers.
    pub fn update<R: Rng>(&mut self, fresh: &[LabeledSample], rng: &mut R) -> Result<UpdateReport> {
        if fresh.is_empty() && !self.config.replay_when_idle {
            return Ok(self.report(0, 0, None, None));
        }
        let mix = self.config.replay_mix;

        let mut batch1: Vec<LabeledSample> = fresh.to_vec();
        batch1.extend(self.buffer1.sample_uniform(mix, rng).into_iter().cloned());

        let mut batch2: Vec<LabeledSample> =
            fresh.iter().filter(|s| s.count_label.is_some()).cloned().collect();
        batch2.extend(
            self.buffer2
                .sample_stratified(mix, |s| s.count_label, rng)
                .into_iter()
                .cloned(),
        );

        let g = self.stage2.group_size();
        let loss1 = if batch1.is_empty() {
            None
        } else {
            let weights = if self.config.class_balanced {
                let labels: Vec<usize> = batch1.iter().map(|s| s.reliable as usize).collect();
                class_balanced_weights(&labels, 2)
            } else {
                ClassWeights::uniform(2)
            };
            let (loss, grad) = stage1_loss(&self.stage1, &batch1, self.config.lambda_aux, &weights)?;
            self.opt1.step(&mut self.stage1.data, &grad)?;
            Some(loss)
        };
        let loss2 = if batch2.is_empty() {
            None
        } else {
            let weights = if self.config.class_balanced {
                let labels: Vec<usize> = batch2.iter().filter_map(|s| s.count_label).collect();
                class_balanced_weights(&labels, g + 1)
            } else {
                ClassWeights::uniform(g + 1)
            };
            let (loss, grad) = stage2_loss(&self.stage2, &batch2, &weights)?;
            self.opt2.step(&mut self.stage2.data, &grad)?;
            Some(loss)
        };

        for s in fresh {
            if s.count_label.is_some() {
                self.buffer2.push(s.clone());
            }
            self.buffer1.push(s.clone());
        }
        if loss1.is_some() || loss2.is_some() {
            self.updates += 1;
        }
        Ok(self.report(batch1.len(), batch2.len(), loss1, loss2))
    }

    fn report(&self, b1: usize, b2: usize, l1: Option<f64>, l2: Option<f64>) -> UpdateReport {
        let reliable = self.buffer1.iter().filter(|s| s.reliable).count();
        UpdateReport {
            stage1_batch: b1,
            stage2_batch: b2,
            stage1_loss: l1,
            stage2_loss: l2,
            buffer1_len: self.buffer1.len(),
            buffer2_len: self.buffer2.len(),
            buffer1_reliable_fraction: if self.buffer1.is_empty() {
                0.0
            } else {
                reliable as f64 / self.buffer1.len() as f64
            },
        }
    }

    /// JSON dump of both stages' parameters.
    pub fn checkpoint_json(&self) -> Result<String> {
        let v = serde_json::json!({
            "stage1": serde_json::from_str::<serde_json::Value>(&self.stage1.to_json()?)?,
            "stage2": serde_json::from_str::<serde_json::Value>(&self.stage2.to_json()?)?,
        });
        Ok(serde_json::to_string(&v)?)
    }
}
