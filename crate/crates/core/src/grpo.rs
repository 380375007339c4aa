//! Group-relative advantages and the clipped GRPO surrogate.

use serde::{Deserialize, Serialize};

use crate::env::{PolicySnapshot, RolloutGroup};
use crate::{Error, Result};

/// Binary verifier rewards for one rollout group.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardVector(Vec<f64>);

impl RewardVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|&&r| r != 0.0 && r != 1.0) {
            return Err(Error::structural(format!("reward {bad} is not 0 or 1")));
        }
        Ok(Self(values))
    }

    pub fn from_bools(bits: impl IntoIterator<Item = bool>) -> Self {
        Self(bits.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_ones(&self) -> usize {
        self.0.iter().filter(|&&r| r == 1.0).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdvantageVector {
    pub values: Vec<f64>,
    pub epsilon_used: f64,
    /// All rewards were equal; every value is exactly zero.
    pub degenerate: bool,
}

impl AdvantageVector {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
            epsilon_used: 0.0,
            degenerate: true,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `A_g = (r_g - mean(r)) / (std(r) + epsilon)` with the population standard
/// deviation. Zero-variance groups map to the all-zero vector.
pub fn compute_advantages(rewards: &RewardVector, epsilon: f64) -> Result<AdvantageVector> {
    if rewards.is_empty() {
        return Err(Error::structural("empty reward vector"));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::structural("epsilon must be non-negative"));
    }
    let r = rewards.values();
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        let mut zero = AdvantageVector::zeros(r.len());
        zero.epsilon_used = epsilon;
        return Ok(zero);
    }
    Ok(AdvantageVector {
        values: r.iter().map(|x| (x - mean) / (std + epsilon)).collect(),
        epsilon_used: epsilon,
        degenerate: false,
    })
}

/// Clip range, advantage stabilizer and optional KL coefficient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipConfig {
    pub delta: f64,
    pub epsilon: f64,
    pub kl_coeff: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            delta: 0.2,
            epsilon: 1e-6,
            kl_coeff: 0.0,
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("clip.delta", "must be in (0, 1)"));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::config("clip.epsilon", "must be non-negative"));
        }
        if !(self.kl_coeff >= 0.0) {
            return Err(Error::config("clip.kl_coeff", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdvantageSource {
    GroundTruth,
    WeightedPseudo,
    Dropped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Membership {
    Sup,
    Unsup,
    Drop,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedAdvantage {
    pub values: Vec<f64>,
    pub source: AdvantageSource,
    pub reliability: f64,
}

/// Ground-truth advantages for annotated prompts, reliability-scaled pseudo
/// advantages for retained unsupervised prompts, zeros for dropped prompts.
pub fn mix_advantages(
    gt_adv: Option<&AdvantageVector>,
    pseudo_adv: Option<&AdvantageVector>,
    membership: Membership,
    reliability: f64,
) -> Result<MixedAdvantage> {
    match membership {
        Membership::Sup => {
            let gt = gt_adv.ok_or_else(|| Error::structural("supervised prompt needs ground-truth advantages"))?;
            Ok(MixedAdvantage {
                values: gt.values.clone(),
                source: AdvantageSource::GroundTruth,
                reliability: 1.0,
            })
        }
        Membership::Unsup => {
            let pseudo = pseudo_adv.ok_or_else(|| Error::structural("unsupervised prompt needs pseudo advantages"))?;
            if !(0.0..=1.0).contains(&reliability) {
                return Err(Error::structural(format!("reliability {reliability} outside [0, 1]")));
            }
            Ok(MixedAdvantage {
                values: pseudo.values.iter().map(|a| reliability * a).collect(),
                source: AdvantageSource::WeightedPseudo,
                reliability,
            })
        }
        Membership::Drop => {
            let len = gt_adv.or(pseudo_adv).map(|a| a.len()).unwrap_or(0);
            Ok(MixedAdvantage {
                values: vec![0.0; len],
                source: AdvantageSource::Dropped,
                reliability: 0.0,
            })
        }
    }
}

pub const DEFAULT_DECAY_COEFF: f64 = 100.0;

/// Scales every ground-truth advantage by `exp(-coeff * cag)`.
pub fn oracle_decay_advantages(gt_adv: &AdvantageVector, cag: f64, coeff: f64) -> AdvantageVector {
    let factor = (-coeff * cag).exp();
    AdvantageVector {
        values: gt_adv.values.iter().map(|a| a * factor).collect(),
        epsilon_used: gt_adv.epsilon_used,
        degenerate: gt_adv.degenerate,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateOutput {
    pub objective: f64,
    /// Gradient with respect to the row-major policy weights.
    pub gradient: Vec<f64>,
}

/// Clipped surrogate for one prompt and its exact gradient.
///
/// Responses are single tokens, so the ratio is `pi(a|x) / pi_old(a|x)` with
/// `pi_old` taken from the probabilities recorded in `group`. Where the clipped
/// branch is selected by the `min`, it contributes no gradient. With
/// `clip.kl_coeff > 0` and a `reference`, `kl_coeff * KL(pi || pi_ref)` is
/// subtracted.
pub fn grpo_surrogate_and_gradient(
    policy: &PolicySnapshot,
    features: &[f64],
    group: &RolloutGroup,
    advantages: &[f64],
    clip: &ClipConfig,
    reference: Option<&PolicySnapshot>,
) -> Result<SurrogateOutput> {
    let g = group.group_size();
    if advantages.len() != g {
        return Err(Error::structural(format!(
            "advantage length {} does not match group size {g}",
            advantages.len()
        )));
    }
    if features.len() != policy.feature_dim() {
        return Err(Error::structural("feature dimension does not match policy"));
    }
    let c = policy.num_answers();
    let probs = policy.probs(features);
    let mut dlogits = vec![0.0; c];
    let mut objective = 0.0;
    let inv_g = 1.0 / g as f64;
    for ((&a, &p_old), &adv) in group.answers.iter().zip(&group.probs).zip(advantages) {
        if !(p_old > 0.0) {
            return Err(Error::Numeric(format!(
                "sampled answer {a} has old probability {p_old}"
            )));
        }
        let ratio = probs[a] / p_old;
        let clipped = ratio.clamp(1.0 - clip.delta, 1.0 + clip.delta);
        let unclipped_term = ratio * adv;
        let clipped_term = clipped * adv;
        objective += inv_g * unclipped_term.min(clipped_term);
        if adv != 0.0 && unclipped_term <= clipped_term {
            // d ratio / d z = ratio * (e_a - pi)
            let scale = inv_g * adv * ratio;
            for (k, d) in dlogits.iter_mut().enumerate() {
                *d -= scale * probs[k];
            }
            dlogits[a] += scale;
        }
    }
    if clip.kl_coeff > 0.0 {
        if let Some(reference) = reference {
            let ref_probs = reference.probs(features);
            let log_ratio: Vec<f64> = probs
                .iter()
                .zip(&ref_probs)
                .map(|(p, q)| p.ln() - q.ln())
                .collect();
            let kl: f64 = probs.iter().zip(&log_ratio).map(|(p, l)| p * l).sum();
            objective -= clip.kl_coeff * kl;
            for k in 0..c {
                dlogits[k] -= clip.kl_coeff * probs[k] * (log_ratio[k] - kl);
            }
        }
    }
    Ok(SurrogateOutput {
        objective,
        gradient: outer(&dlogits, features),
    })
}

/// `(1/G) sum_g A_g grad pi(a_g|x) / pi_old(a_g|x)`, the surrogate gradient at
/// `policy == old_policy`.
pub fn on_policy_gradient(
    policy: &PolicySnapshot,
    features: &[f64],
    group: &RolloutGroup,
    advantages: &[f64],
) -> Vec<f64> {
    let c = policy.num_answers();
    let probs = policy.probs(features);
    let inv_g = 1.0 / group.group_size() as f64;
    let mut dlogits = vec![0.0; c];
    for ((&a, &p_old), &adv) in group.answers.iter().zip(&group.probs).zip(advantages) {
        // grad pi_a = pi_a (e_a - pi)
        for k in 0..c {
            let indicator = if k == a { 1.0 } else { 0.0 };
            dlogits[k] += inv_g * adv * probs[a] * (indicator - probs[k]) / p_old;
        }
    }
    outer(&dlogits, features)
}

pub(crate) fn outer(rows: &[f64], cols: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &r in rows {
        out.extend(cols.iter().map(|&c| r * c));
    }
    out
}
