//! Synthetic verifiable-reasoning testbed.
//!
//! Each prompt is a feature vector with a ground-truth answer in `[0, C)`.
//! A single linear softmax policy `softmax(W x)` is shared across prompts, so
//! updates driven by one prompt move the answer distribution of every other
//! prompt. Responses are single-token answers; the verifier checks equality
//! with the truth.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::grpo::RewardVector;
use crate::rng::{self, stream};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: usize,
    pub features: Vec<f64>,
    pub truth: usize,
}

/// An immutable collection of prompts sharing an answer space and feature dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    num_answers: usize,
    feature_dim: usize,
    split: Split,
    seed: u64,
    prompts: Vec<Prompt>,
}

#[derive(Serialize, Deserialize)]
struct BankHeader {
    #[serde(rename = "C")]
    num_answers: usize,
    #[serde(rename = "d_p")]
    feature_dim: usize,
    seed: u64,
    #[serde(default)]
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct BankFile {
    header: BankHeader,
    prompts: Vec<Prompt>,
}

impl PromptBank {
    pub fn new(
        num_answers: usize,
        feature_dim: usize,
        split: Split,
        seed: u64,
        prompts: Vec<Prompt>,
    ) -> Result<Self> {
        if num_answers < 2 {
            return Err(Error::structural("answer space needs at least 2 answers"));
        }
        for p in &prompts {
            if p.features.len() != feature_dim {
                return Err(Error::structural(format!(
                    "prompt {} has {} features, expected {feature_dim}",
                    p.id,
                    p.features.len()
                )));
            }
            if p.truth >= num_answers {
                return Err(Error::structural(format!(
                    "prompt {} truth {} outside [0, {num_answers})",
                    p.id, p.truth
                )));
            }
            if p.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::structural(format!("prompt {} has non-finite features", p.id)));
            }
        }
        Ok(Self {
            num_answers,
            feature_dim,
            split,
            seed,
            prompts,
        })
    }

    pub fn num_answers(&self) -> usize {
        self.num_answers
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = BankFile {
            header: BankHeader {
                num_answers: self.num_answers,
                feature_dim: self.feature_dim,
                seed: self.seed,
                split: self.split,
            },
            prompts: self.prompts.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: BankFile = serde_json::from_str(text)?;
        Self::new(
            file.header.num_answers,
            file.header.feature_dim,
            file.header.split,
            file.header.seed,
            file.prompts,
        )
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    out
}

/// Index of the largest entry; ties resolve to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Parameters `W` (row-major `C x d_p`) of the shared linear softmax policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    num_answers: usize,
    feature_dim: usize,
    weights: Vec<f64>,
    version: u64,
}

impl PolicySnapshot {
    pub fn new(num_answers: usize, feature_dim: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != num_answers * feature_dim {
            return Err(Error::structural(format!(
                "policy weights have length {}, expected {}",
                weights.len(),
                num_answers * feature_dim
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numeric("policy weights must be finite".into()));
        }
        Ok(Self {
            num_answers,
            feature_dim,
            weights,
            version: 0,
        })
    }

    pub fn zeros(num_answers: usize, feature_dim: usize) -> Self {
        Self {
            num_answers,
            feature_dim,
            weights: vec![0.0; num_answers * feature_dim],
            version: 0,
        }
    }

    pub fn num_answers(&self) -> usize {
        self.num_answers
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_params(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.feature_dim);
        self.weights
            .chunks_exact(self.feature_dim)
            .map(|row| row.iter().zip(x).map(|(w, v)| w * v).sum())
            .collect()
    }

    pub fn probs(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    pub fn probs_at_temperature(&self, x: &[f64], temperature: f64) -> Vec<f64> {
        let logits: Vec<f64> = self.logits(x).into_iter().map(|z| z / temperature).collect();
        softmax(&logits)
    }

    pub fn greedy(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    /// Returns a new snapshot with `weights + scale * delta` and the next version number.
    pub fn stepped(&self, delta: &[f64], scale: f64) -> Self {
        debug_assert_eq!(delta.len(), self.weights.len());
        Self {
            num_answers: self.num_answers,
            feature_dim: self.feature_dim,
            weights: self
                .weights
                .iter()
                .zip(delta)
                .map(|(w, d)| w + scale * d)
                .collect(),
            version: self.version + 1,
        }
    }

    /// Replaces the weights, bumping the version.
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        let mut next = Self::new(self.num_answers, self.feature_dim, weights)?;
        next.version = self.version + 1;
        Ok(next)
    }
}

/// Synthetic response length: normal around `mean`, shifted by
/// `correct_shift` for correct answers, clamped to `[1, max_len]` and
/// normalized by `max_len`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LengthModel {
    pub mean: f64,
    pub std: f64,
    pub correct_shift: f64,
    pub max_len: f64,
}

impl Default for LengthModel {
    fn default() -> Self {
        Self {
            mean: 1800.0,
            std: 500.0,
            correct_shift: -600.0,
            max_len: 4000.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolloutConfig {
    pub group_size: usize,
    pub invalid_prob: f64,
    pub length: LengthModel,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            invalid_prob: 0.0,
            length: LengthModel::default(),
        }
    }
}

/// `G` sampled answers for one prompt with their sampling probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutGroup {
    pub prompt_id: usize,
    pub answers: Vec<usize>,
    /// `pi_old(a_g | x)` at sampling time.
    pub probs: Vec<f64>,
    pub valid: Vec<bool>,
    /// Normalized response lengths in `(0, 1]`.
    pub lengths: Vec<f64>,
    pub policy_version: u64,
}

impl RolloutGroup {
    pub fn group_size(&self) -> usize {
        self.answers.len()
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (c, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = c;
        }
        cum += p;
        if u < cum && p > 0.0 {
            return c;
        }
    }
    last_positive
}

/// Samples `G` i.i.d. answers from the policy for `prompt`.
///
/// The draw sequence is fixed per rollout (answer, validity, length), so a
/// given seed yields the same group regardless of configuration toggles.
pub fn sample_group(
    policy: &PolicySnapshot,
    prompt: &Prompt,
    cfg: &RolloutConfig,
    seed: u64,
) -> Result<RolloutGroup> {
    if cfg.group_size < 2 {
        return Err(Error::structural("group size must be at least 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probs = policy.probs(&prompt.features);
    let g = cfg.group_size;
    let mut group = RolloutGroup {
        prompt_id: prompt.id,
        answers: Vec::with_capacity(g),
        probs: Vec::with_capacity(g),
        valid: Vec::with_capacity(g),
        lengths: Vec::with_capacity(g),
        policy_version: policy.version(),
    };
    let lm = cfg.length;
    for _ in 0..g {
        let a = sample_categorical(&probs, rng.random::<f64>());
        let valid = rng.random::<f64>() >= cfg.invalid_prob;
        let noise: f64 = StandardNormal.sample(&mut rng);
        let shift = if a == prompt.truth && valid {
            lm.correct_shift
        } else {
            0.0
        };
        let len = (lm.mean + shift + lm.std * noise).clamp(1.0, lm.max_len);
        group.answers.push(a);
        group.probs.push(probs[a]);
        group.valid.push(valid);
        group.lengths.push(len / lm.max_len);
    }
    Ok(group)
}

/// Rule-based verifier: reward 1 iff the response is valid and equals the truth.
pub fn verify(group: &RolloutGroup, truth: usize) -> RewardVector {
    RewardVector::from_bools(
        group
            .answers
            .iter()
            .zip(&group.valid)
            .map(|(&a, &v)| v && a == truth),
    )
}

/// Answer clusters over valid rollouts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterSummary {
    /// `(answer, count)` sorted by count descending, then answer ascending.
    pub clusters: Vec<(usize, usize)>,
    pub majority: usize,
    pub majority_size: usize,
}

impl ClusterSummary {
    /// Position of `answer` in the cluster ordering.
    pub fn rank_of(&self, answer: usize) -> Option<usize> {
        self.clusters.iter().position(|&(a, _)| a == answer)
    }

    pub fn num_valid(&self) -> usize {
        self.clusters.iter().map(|&(_, n)| n).sum()
    }
}

/// Majority vote over valid rollouts; ties go to the smallest answer index.
pub fn majority_vote(group: &RolloutGroup) -> Result<ClusterSummary> {
    let mut counts: Vec<(usize, usize)> = Vec::new();
    for (&a, _) in group.answers.iter().zip(&group.valid).filter(|(_, &v)| v) {
        match counts.iter_mut().find(|(ans, _)| *ans == a) {
            Some(entry) => entry.1 += 1,
            None => counts.push((a, 1)),
        }
    }
    if counts.is_empty() {
        return Err(Error::NoValidRollouts(group.prompt_id));
    }
    counts.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));
    let (majority, majority_size) = counts[0];
    Ok(ClusterSummary {
        clusters: counts,
        majority,
        majority_size,
    })
}

/// Pseudo rewards induced by the vote: 1 for valid responses agreeing with the majority.
pub fn pseudo_rewards(group: &RolloutGroup, summary: &ClusterSummary) -> RewardVector {
    verify(group, summary.majority)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseFeatures {
    pub prob: f64,
    pub norm_length: f64,
    /// One-hot of the response's cluster rank; all zeros for invalid responses.
    pub rank_onehot: Vec<f64>,
}

/// Rollout-derived inputs to the acquisition classifiers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierFeatures {
    pub prompt_repr: Vec<f64>,
    pub valid_ratio: f64,
    /// Sorted cluster proportions, zero-padded to length `G`.
    pub cluster_dist: Vec<f64>,
    pub response_feats: Vec<ResponseFeatures>,
}

impl ClassifierFeatures {
    pub fn group_size(&self) -> usize {
        self.response_feats.len()
    }

    pub fn global_dim(feature_dim: usize, group_size: usize) -> usize {
        feature_dim + 1 + group_size
    }

    pub fn row_dim(group_size: usize) -> usize {
        2 + group_size
    }

    /// `[prompt_repr; valid_ratio; cluster_dist]`.
    pub fn global_input(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.prompt_repr.len() + 1 + self.cluster_dist.len());
        v.extend_from_slice(&self.prompt_repr);
        v.push(self.valid_ratio);
        v.extend_from_slice(&self.cluster_dist);
        v
    }

    /// `[prob; norm_length; rank_onehot]` for response `g`.
    pub fn row_input(&self, g: usize) -> Vec<f64> {
        let r = &self.response_feats[g];
        let mut v = Vec::with_capacity(2 + r.rank_onehot.len());
        v.push(r.prob);
        v.push(r.norm_length);
        v.extend_from_slice(&r.rank_onehot);
        v
    }
}

/// Builds classifier features. `summary` is `None` when the group has no valid rollouts.
pub fn extract_features(
    prompt: &Prompt,
    group: &RolloutGroup,
    summary: Option<&ClusterSummary>,
) -> ClassifierFeatures {
    let g = group.group_size();
    let n_valid = group.num_valid();
    let mut cluster_dist = vec![0.0; g];
    if let Some(s) = summary {
        for (slot, &(_, count)) in cluster_dist.iter_mut().zip(&s.clusters) {
            *slot = count as f64 / n_valid as f64;
        }
    }
    let response_feats = (0..g)
        .map(|i| {
            let mut rank_onehot = vec![0.0; g];
            if group.valid[i] {
                if let Some(rank) = summary.and_then(|s| s.rank_of(group.answers[i])) {
                    rank_onehot[rank] = 1.0;
                }
            }
            ResponseFeatures {
                prob: group.probs[i],
                norm_length: group.lengths[i],
                rank_onehot,
            }
        })
        .collect();
    ClassifierFeatures {
        prompt_repr: prompt.features.clone(),
        valid_ratio: n_valid as f64 / g as f64,
        cluster_dist,
        response_feats,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EvalMode {
    Greedy,
    /// Mean fraction of `k` samples at `temperature` that are correct.
    AvgAtK { k: usize, temperature: f64 },
}

/// Accuracy of `policy` on an evaluation bank.
pub fn evaluate_policy(
    policy: &PolicySnapshot,
    bank: &PromptBank,
    mode: EvalMode,
    seed: u64,
) -> Result<f64> {
    if bank.split() != Split::Eval {
        return Err(Error::structural("evaluation requires an eval-split bank"));
    }
    if bank.is_empty() {
        return Err(Error::structural("evaluation bank is empty"));
    }
    let total: f64 = match mode {
        EvalMode::Greedy => bank
            .prompts()
            .iter()
            .filter(|p| policy.greedy(&p.features) == p.truth)
            .count() as f64,
        EvalMode::AvgAtK { k, temperature } => {
            if k == 0 || temperature <= 0.0 {
                return Err(Error::structural("avg@k needs k >= 1 and temperature > 0"));
            }
            bank.prompts()
                .iter()
                .map(|p| {
                    let mut rng = rng::rng_from(seed, &[stream::EVAL, p.id as u64]);
                    let probs = policy.probs_at_temperature(&p.features, temperature);
                    let hits = (0..k)
                        .filter(|_| sample_categorical(&probs, rng.random::<f64>()) == p.truth)
                        .count();
                    hits as f64 / k as f64
                })
                .sum()
        }
    };
    Ok(total / bank.len() as f64)
}

/// Parameters of the generated testbed.
///
/// Truths come from a random linear teacher over the prompt features. The
/// initial policy knows a noisy, scaled copy of the teacher, plus a bias toward
/// a `distractor` answer calibrated so that about `hard_fraction` of training
/// prompts have a wrong modal answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub seed: u64,
    pub num_answers: usize,
    /// Includes the constant bias feature.
    pub feature_dim: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub hard_fraction: f64,
    pub knowledge_scale: f64,
    pub init_noise: f64,
    pub distractor: usize,
    pub invalid_prob: f64,
    pub length: LengthModel,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_answers: 4,
            feature_dim: 8,
            train_size: 2048,
            eval_size: 256,
            hard_fraction: 0.35,
            knowledge_scale: 1.5,
            init_noise: 0.3,
            distractor: 0,
            invalid_prob: 0.0,
            length: LengthModel::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_answers < 2 {
            return Err(Error::config("env.num_answers", "must be at least 2"));
        }
        if self.feature_dim < 2 {
            return Err(Error::config("env.feature_dim", "must be at least 2"));
        }
        if self.train_size == 0 {
            return Err(Error::config("env.train_size", "must be positive"));
        }
        if self.eval_size == 0 {
            return Err(Error::config("env.eval_size", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return Err(Error::config("env.hard_fraction", "must be in [0, 1]"));
        }
        if !(self.knowledge_scale > 0.0) {
            return Err(Error::config("env.knowledge_scale", "must be positive"));
        }
        if !(self.init_noise >= 0.0) {
            return Err(Error::config("env.init_noise", "must be non-negative"));
        }
        if self.distractor >= self.num_answers {
            return Err(Error::config("env.distractor", "must be a valid answer index"));
        }
        if !(0.0..=0.2).contains(&self.invalid_prob) {
            return Err(Error::config("env.invalid_prob", "must be in [0, 0.2]"));
        }
        if !(self.length.max_len > 0.0 && self.length.std >= 0.0) {
            return Err(Error::config("env.length", "max_len must be positive and std non-negative"));
        }
        Ok(())
    }
}

/// A generated environment: train/eval banks and the initial policy.
#[derive(Clone, Debug)]
pub struct SyntheticEnv {
    pub config: EnvConfig,
    /// Teacher weights, row-major `C x (d_p - 1)`.
    pub teacher: Vec<f64>,
    pub train: PromptBank,
    pub eval: PromptBank,
    pub initial_policy: PolicySnapshot,
    pub distractor_bias: f64,
    /// Fraction of training prompts whose initial modal answer is wrong.
    pub realized_hard_fraction: f64,
}

impl SyntheticEnv {
    pub fn generate(cfg: &EnvConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.num_answers;
        let d = cfg.feature_dim;
        let zd = d - 1;
        let mut rng = rng::rng_from(cfg.seed, &[stream::BANK]);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");

        let teacher: Vec<f64> = (0..c * zd).map(|_| normal.sample(&mut rng)).collect();
        let teacher_answer = |z: &[f64]| -> usize {
            let scores: Vec<f64> = teacher
                .chunks_exact(zd)
                .map(|row| row.iter().zip(z).map(|(w, v)| w * v).sum())
                .collect();
            argmax(&scores)
        };
        let mut make_bank = |n: usize, split: Split, offset: usize| -> Result<PromptBank> {
            let prompts = (0..n)
                .map(|i| {
                    let z: Vec<f64> = (0..zd).map(|_| normal.sample(&mut rng)).collect();
                    let truth = teacher_answer(&z);
                    let mut features = Vec::with_capacity(d);
                    features.push(1.0);
                    features.extend_from_slice(&z);
                    Prompt {
                        id: offset + i,
                        features,
                        truth,
                    }
                })
                .collect();
            PromptBank::new(c, d, split, cfg.seed, prompts)
        };
        let train = make_bank(cfg.train_size, Split::Train, 0)?;
        let eval = make_bank(cfg.eval_size, Split::Eval, cfg.train_size)?;

        let mut weights = vec![0.0; c * d];
        for (row, w_row) in weights.chunks_exact_mut(d).enumerate() {
            for j in 0..zd {
                let noise: f64 = normal.sample(&mut rng);
                w_row[1 + j] = cfg.knowledge_scale * (teacher[row * zd + j] + cfg.init_noise * noise);
            }
        }

        let hard_at = |bias: f64, weights: &mut Vec<f64>| -> f64 {
            weights[cfg.distractor * d] = bias;
            let policy = PolicySnapshot::new(c, d, weights.clone()).expect("shape");
            let wrong = train
                .prompts()
                .iter()
                .filter(|p| policy.greedy(&p.features) != p.truth)
                .count();
            wrong as f64 / train.len() as f64
        };

        let mut bias = 0.0;
        if hard_at(0.0, &mut weights) < cfg.hard_fraction {
            let (mut lo, mut hi) = (0.0, 1.0);
            while hard_at(hi, &mut weights) < cfg.hard_fraction && hi < 1e6 {
                lo = hi;
                hi *= 2.0;
            }
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if hard_at(mid, &mut weights) < cfg.hard_fraction {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            bias = hi;
        }
        let realized_hard_fraction = hard_at(bias, &mut weights);
        let initial_policy = PolicySnapshot::new(c, d, weights)?;

        Ok(Self {
            config: cfg.clone(),
            teacher,
            train,
            eval,
            initial_policy,
            distractor_bias: bias,
            realized_hard_fraction,
        })
    }

    pub fn rollout_config(&self, group_size: usize) -> RolloutConfig {
        RolloutConfig {
            group_size,
            invalid_prob: self.config.invalid_prob,
            length: self.config.length,
        }
    }
}
