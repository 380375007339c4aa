//! Reinforcement learning with actively acquired verifiable rewards.
//!
//! A desk-scale simulator of group-relative policy optimization (GRPO) where
//! ground-truth labels are bought under an annotation budget and mixed with
//! majority-vote pseudo-labels. The crate provides:
//!
//! - [`grpo`]: group-normalized advantages, the clipped surrogate and its
//!   analytic gradient for categorical policies, mixed advantages.
//! - [`env`]: the synthetic verifiable-reasoning testbed (prompt banks, a
//!   shared linear softmax policy, rollouts, verification, majority voting,
//!   acquisition-classifier features).
//! - [`cag`]: the corrective advantage gap and its class-wise / expected forms.
//! - [`classifier`]: the cascaded two-stage acquisition network, AdamW and
//!   replay buffers.
//! - [`acquisition`]: budget ledger and all selection strategies.
//! - [`theory`]: numerical checks of the gradient-cosine identity and the
//!   CAG alignment bound.
//! - [`trainer`]: the end-to-end training loop and strategy comparison.

pub mod acquisition;
pub mod cag;
pub mod classifier;
pub mod env;
mod error;
pub mod grpo;
pub mod rng;
pub mod theory;
pub mod trainer;

pub use acquisition::{AcquisitionDecision, BudgetLedger, Strategy};
pub use cag::{AdmissibleCounts, CagBasis, CagScore};
pub use classifier::{ClassifierConfig, ClassifierState};
pub use env::{
    ClassifierFeatures, ClusterSummary, EnvConfig, PolicySnapshot, Prompt, PromptBank,
    RolloutGroup, SyntheticEnv,
};
pub use error::{Error, Result};
pub use grpo::{AdvantageVector, ClipConfig, MixedAdvantage, RewardVector};
pub use trainer::{RunConfig, RunMetrics};
