//! Deterministic inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rlavr_core::classifier::LabeledSample;
use rlavr_core::env::{extract_features, majority_vote, sample_group, PolicySnapshot, Prompt, RolloutConfig};
use rlavr_core::{RewardVector, RolloutGroup};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn binary_rewards(r: &mut ChaCha8Rng, g: usize) -> RewardVector {
    let ones = r.random_range(1..g);
    let mut bits: Vec<bool> = (0..g).map(|i| i < ones).collect();
    rand::seq::SliceRandom::shuffle(bits.as_mut_slice(), r);
    RewardVector::from_bools(bits)
}

/// A policy, prompt and sampled group of size `g` over `c` answers in `d` features.
pub fn rollout(seed: u64, c: usize, d: usize, g: usize) -> (PolicySnapshot, Prompt, RolloutGroup) {
    let mut r = rng(seed);
    let policy = PolicySnapshot::new(c, d, (0..c * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let prompt = Prompt {
        id: 0,
        features: (0..d).map(|_| r.random_range(-1.0..1.0)).collect(),
        truth: r.random_range(0..c),
    };
    let cfg = RolloutConfig {
        group_size: g,
        ..RolloutConfig::default()
    };
    let group = sample_group(&policy, &prompt, &cfg, r.random()).unwrap();
    (policy, prompt, group)
}

/// Labeled classifier samples drawn from simulated rollouts.
pub fn labeled_samples(seed: u64, n: usize, d: usize, g: usize) -> Vec<LabeledSample> {
    (0..n)
        .map(|i| {
            let (_, prompt, group) = rollout(seed.wrapping_add(i as u64), 4, d, g);
            let summary = majority_vote(&group).ok();
            let features = extract_features(&prompt, &group, summary.as_ref());
            let m = summary.as_ref().map_or(0, |s| s.majority_size);
            let reliable = summary.as_ref().is_some_and(|s| s.majority == prompt.truth);
            let correct: Vec<bool> = group
                .answers
                .iter()
                .zip(&group.valid)
                .map(|(&a, &v)| v && a == prompt.truth)
                .collect();
            let k = correct.iter().filter(|&&c| c).count();
            LabeledSample {
                features,
                majority_size: m,
                reliable,
                count_label: (!reliable).then_some(k),
                response_correct: correct,
            }
        })
        .collect()
}
