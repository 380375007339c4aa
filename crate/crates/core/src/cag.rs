//! Corrective advantage gap (CAG) and the baseline uncertainty scores.
//!
//! The CAG of a prompt is the L2 distance between the advantage vectors
//! induced by ground-truth and pseudo rewards. Under a wrong vote it depends
//! only on the group size `G`, the majority size `m` and the number `k` of
//! correct responses outside the majority, which is what makes a pre-query
//! estimate via a predicted distribution over `k` possible.

use serde::{Deserialize, Serialize};

use crate::env::{ClusterSummary, RolloutGroup};
use crate::grpo::{compute_advantages, AdvantageVector, RewardVector};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CagBasis {
    Exact,
    ClassWise(usize),
    Expected,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CagScore {
    pub value: f64,
    pub basis: CagBasis,
}

/// The set of correct-count classes `k` consistent with a wrong vote of size `m`.
///
/// Correct responses share one answer and so form one cluster, which cannot
/// outgrow the majority: `0 <= k <= min(G - m, m)`. A group without a vote
/// (`m = 0`) admits the full range `0..=G`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdmissibleCounts {
    pub group_size: usize,
    pub majority_size: usize,
    pub counts: Vec<usize>,
}

impl AdmissibleCounts {
    pub fn new(group_size: usize, majority_size: usize) -> Result<Self> {
        if majority_size == 0 {
            return Ok(Self::unvoted(group_size));
        }
        if majority_size > group_size {
            return Err(Error::structural(format!(
                "majority size {majority_size} exceeds group size {group_size}"
            )));
        }
        let upper = (group_size - majority_size).min(majority_size);
        Ok(Self {
            group_size,
            majority_size,
            counts: (0..=upper).collect(),
        })
    }

    pub fn unvoted(group_size: usize) -> Self {
        Self {
            group_size,
            majority_size: 0,
            counts: (0..=group_size).collect(),
        }
    }

    pub fn contains(&self, k: usize) -> bool {
        self.counts.contains(&k)
    }

    /// Mask over the `G + 1` count classes.
    pub fn mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.group_size + 1];
        for &k in &self.counts {
            mask[k] = true;
        }
        mask
    }
}

/// `||A - A_pseudo||_2`.
pub fn cag_exact(gt_adv: &AdvantageVector, pseudo_adv: &AdvantageVector) -> Result<CagScore> {
    if gt_adv.len() != pseudo_adv.len() {
        return Err(Error::structural(format!(
            "advantage lengths differ: {} vs {}",
            gt_adv.len(),
            pseudo_adv.len()
        )));
    }
    let value = gt_adv
        .values
        .iter()
        .zip(&pseudo_adv.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(CagScore {
        value,
        basis: CagBasis::Exact,
    })
}

/// Class-wise CAG: the gap between the canonical pseudo rewards
/// `[1 x m, 0 x (G-m)]` and candidate truth rewards `[0 x m, 1 x k, 0 x (G-m-k)]`.
pub fn cag_classwise(group_size: usize, majority_size: usize, k: usize, epsilon: f64) -> Result<CagScore> {
    let admissible = AdmissibleCounts::new(group_size, majority_size)?;
    if !admissible.contains(k) {
        return Err(Error::structural(format!(
            "k = {k} is not admissible for G = {group_size}, m = {majority_size}"
        )));
    }
    let m = majority_size;
    let pseudo = RewardVector::from_bools((0..group_size).map(|i| i < m));
    let truth = RewardVector::from_bools((0..group_size).map(|i| i >= m && i < m + k));
    let gap = cag_exact(
        &compute_advantages(&truth, epsilon)?,
        &compute_advantages(&pseudo, epsilon)?,
    )?;
    Ok(CagScore {
        value: gap.value,
        basis: CagBasis::ClassWise(k),
    })
}

/// Class-wise scores for every count class `0..=G`; inadmissible entries are `None`.
pub fn classwise_table(group_size: usize, majority_size: usize) -> Result<Vec<Option<f64>>> {
    let admissible = AdmissibleCounts::new(group_size, majority_size)?;
    (0..=group_size)
        .map(|k| {
            if admissible.contains(k) {
                cag_classwise(group_size, majority_size, k, 0.0).map(|s| Some(s.value))
            } else {
                Ok(None)
            }
        })
        .collect()
}

/// `sum_k d_k * s(k)` for a distribution `d` indexed by `k` in `0..=G`.
pub fn expected_cag(
    count_dist: &[f64],
    group_size: usize,
    majority_size: usize,
    epsilon: f64,
) -> Result<CagScore> {
    if count_dist.len() != group_size + 1 {
        return Err(Error::structural(format!(
            "count distribution has {} classes, expected {}",
            count_dist.len(),
            group_size + 1
        )));
    }
    let admissible = AdmissibleCounts::new(group_size, majority_size)?;
    let mut total_mass = 0.0;
    let mut value = 0.0;
    for (k, &d) in count_dist.iter().enumerate() {
        if !(d >= 0.0) {
            return Err(Error::structural(format!("negative probability at k = {k}")));
        }
        if d == 0.0 {
            continue;
        }
        if !admissible.contains(k) {
            return Err(Error::structural(format!(
                "probability mass {d} on inadmissible k = {k}"
            )));
        }
        total_mass += d;
        value += d * cag_classwise(group_size, majority_size, k, epsilon)?.value;
    }
    if (total_mass - 1.0).abs() > 1e-9 {
        return Err(Error::structural(format!(
            "count distribution sums to {total_mass}"
        )));
    }
    Ok(CagScore {
        value,
        basis: CagBasis::Expected,
    })
}

/// Shannon entropy (natural log) of the answer-cluster proportions.
pub fn entropy_score(summary: &ClusterSummary) -> f64 {
    let n = summary.num_valid() as f64;
    summary
        .clusters
        .iter()
        .map(|&(_, c)| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum::<f64>()
        .max(0.0)
}

/// Mean sampling probability over valid responses.
pub fn prob_score(group: &RolloutGroup) -> Result<f64> {
    let (sum, n) = group
        .probs
        .iter()
        .zip(&group.valid)
        .filter(|(_, &v)| v)
        .fold((0.0, 0usize), |(s, n), (p, _)| (s + p, n + 1));
    if n == 0 {
        return Err(Error::NoValidRollouts(group.prompt_id));
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::majority_vote;

    /// Direct evaluation of the gap for canonical vectors, written out longhand.
    fn longhand(g: usize, m: usize, k: usize) -> f64 {
        let gf = g as f64;
        let adv = |ones: &[bool]| -> Vec<f64> {
            let mean = ones.iter().filter(|&&b| b).count() as f64 / gf;
            let sd = (mean * (1.0 - mean)).sqrt();
            ones.iter()
                .map(|&b| if sd == 0.0 { 0.0 } else { ((b as u8 as f64) - mean) / sd })
                .collect()
        };
        let pseudo: Vec<bool> = (0..g).map(|i| i < m).collect();
        let truth: Vec<bool> = (0..g).map(|i| i >= m && i < m + k).collect();
        adv(&pseudo)
            .iter()
            .zip(adv(&truth))
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn longhand_oracle_value() {
        assert!((longhand(8, 3, 2) - 4.812).abs() < 5e-4);
    }

    #[test]
    fn classwise_examples() {
        let s0 = cag_classwise(8, 3, 0, 0.0).unwrap();
        assert!((s0.value - 8f64.sqrt()).abs() < 1e-12);
        let s2 = cag_classwise(8, 3, 2, 0.0).unwrap();
        assert!((s2.value - longhand(8, 3, 2)).abs() < 1e-12);
        assert_eq!(s2.basis, CagBasis::ClassWise(2));
        assert!(cag_classwise(8, 8, 1, 0.0).is_err());
        // A unanimous wrong vote has a degenerate pseudo advantage too, so the gap vanishes.
        assert_eq!(cag_classwise(8, 8, 0, 0.0).unwrap().value, 0.0);
        assert!(cag_classwise(8, 3, 4, 0.0).is_err());
    }

    #[test]
    fn admissible_set_bounds() {
        assert_eq!(AdmissibleCounts::new(8, 3).unwrap().counts, vec![0, 1, 2, 3]);
        assert_eq!(AdmissibleCounts::new(8, 5).unwrap().counts, vec![0, 1, 2, 3]);
        assert_eq!(AdmissibleCounts::new(8, 8).unwrap().counts, vec![0]);
        assert_eq!(AdmissibleCounts::new(8, 1).unwrap().counts, vec![0, 1]);
        assert_eq!(AdmissibleCounts::unvoted(4).counts, vec![0, 1, 2, 3, 4]);
        assert!(AdmissibleCounts::new(4, 5).is_err());
    }

    #[test]
    fn exact_examples() {
        let a = compute_advantages(&RewardVector::from_bools([true, false, true, false]), 0.0).unwrap();
        assert_eq!(cag_exact(&a, &a).unwrap().value, 0.0);
        let zero = AdvantageVector::zeros(8);
        let pseudo = compute_advantages(&RewardVector::from_bools((0..8).map(|i| i < 3)), 0.0).unwrap();
        assert!((cag_exact(&zero, &pseudo).unwrap().value - 2.828427).abs() < 1e-6);
        assert!(cag_exact(&zero, &a).is_err());
    }

    #[test]
    fn expected_examples() {
        let mut d = vec![0.0; 9];
        d[0] = 1.0;
        assert!((expected_cag(&d, 8, 3, 0.0).unwrap().value - 8f64.sqrt()).abs() < 1e-12);
        let mut d = vec![0.0; 9];
        d[2] = 1.0;
        assert!((expected_cag(&d, 8, 3, 0.0).unwrap().value - longhand(8, 3, 2)).abs() < 1e-12);
        let mut d = vec![0.0; 9];
        d[..3].fill(1.0 / 3.0);
        let mean = (longhand(8, 3, 0) + longhand(8, 3, 1) + longhand(8, 3, 2)) / 3.0;
        assert!((expected_cag(&d, 8, 3, 0.0).unwrap().value - mean).abs() < 1e-12);
        let mut d = vec![0.0; 9];
        d[5] = 1.0;
        assert!(expected_cag(&d, 8, 3, 0.0).is_err());
        assert!(expected_cag(&[1.0; 3], 8, 3, 0.0).is_err());
    }

    fn group(answers: &[usize], probs: &[f64], valid: &[bool]) -> RolloutGroup {
        RolloutGroup {
            prompt_id: 0,
            answers: answers.to_vec(),
            probs: probs.to_vec(),
            valid: valid.to_vec(),
            lengths: vec![0.5; answers.len()],
            policy_version: 0,
        }
    }

    #[test]
    fn entropy_examples() {
        let s = majority_vote(&group(&[1; 4], &[0.5; 4], &[true; 4])).unwrap();
        assert_eq!(entropy_score(&s), 0.0);
        let s = majority_vote(&group(&[1, 1, 2, 2], &[0.5; 4], &[true; 4])).unwrap();
        assert!((entropy_score(&s) - 0.693147).abs() < 1e-6);
        let s = majority_vote(&group(&[0, 0, 1, 2, 0, 1, 0, 2], &[0.5; 8], &[true; 8])).unwrap();
        assert!((entropy_score(&s) - 1.5 * 2f64.ln()).abs() < 1e-12);
        assert!((entropy_score(&s) - 1.039721).abs() < 1e-6);
    }

    #[test]
    fn prob_examples() {
        assert!((prob_score(&group(&[0; 3], &[0.9; 3], &[true; 3])).unwrap() - 0.9).abs() < 1e-15);
        let g = group(&[0, 1, 2], &[0.5, 0.25, 0.25], &[true; 3]);
        assert!((prob_score(&g).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let g = group(&[0, 1], &[0.5, 0.5], &[true, false]);
        assert_eq!(prob_score(&g).unwrap(), 0.5);
        assert!(prob_score(&group(&[0], &[0.5], &[false])).is_err());
    }

    #[test]
    fn classwise_values_are_distinct_per_majority() {
        for g in 2..=16 {
            for m in 1..=g {
                let vals: Vec<f64> = classwise_table(g, m).unwrap().into_iter().flatten().collect();
                for i in 0..vals.len() {
                    for j in 0..i {
                        assert!((vals[i] - vals[j]).abs() > 1e-9, "G={g} m={m}");
                    }
                }
            }
        }
    }
}
