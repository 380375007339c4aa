//! Budget accounting and the strategies that split a rollout batch into
//! supervised, unsupervised and dropped prompts.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cag::{cag_exact, entropy_score, expected_cag, prob_score, AdmissibleCounts};
use crate::classifier::ClassifierState;
use crate::env::{verify, ClassifierFeatures, ClusterSummary, RolloutGroup};
use crate::grpo::compute_advantages;
use crate::{rng, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Ttrl,
    Random,
    Entropy,
    Prob,
    OracleCag,
    OracleDecay,
    Gt,
    Care,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::Ttrl,
        Strategy::Random,
        Strategy::Entropy,
        Strategy::Prob,
        Strategy::OracleCag,
        Strategy::OracleDecay,
        Strategy::Gt,
        Strategy::Care,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Ttrl => "ttrl",
            Strategy::Random => "random",
            Strategy::Entropy => "entropy",
            Strategy::Prob => "prob",
            Strategy::OracleCag => "oracle_cag",
            Strategy::OracleDecay => "oracle_decay",
            Strategy::Gt => "gt",
            Strategy::Care => "care",
        }
    }

    /// Reference strategies that see every label regardless of the budget.
    pub fn is_budgeted(self) -> bool {
        !matches!(self, Strategy::Gt | Strategy::OracleDecay)
    }

    pub fn needs_truths(self) -> bool {
        matches!(self, Strategy::OracleCag | Strategy::OracleDecay)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == norm)
            .ok_or_else(|| Error::config("strategy", format!("unknown strategy '{s}'")))
    }
}

/// Per-step quota with a fractional carry, so the running average tracks `p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub p: f64,
    pub per_step_quota: usize,
    pub cumulative_queried: usize,
    pub cumulative_seen: usize,
    pub deficit_carry: f64,
    /// Annotations made by unbudgeted reference strategies.
    pub unbudgeted_queried: usize,
}

impl BudgetLedger {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::config("p", format!("{p} is outside [0, 1]")));
        }
        Ok(Self {
            p,
            per_step_quota: 0,
            cumulative_queried: 0,
            cumulative_seen: 0,
            deficit_carry: 0.0,
            unbudgeted_queried: 0,
        })
    }

    /// `quota = floor(n * p + carry)`; the remainder carries to the next step.
    pub fn advance(&mut self, n: usize) -> usize {
        let target = n as f64 * self.p + self.deficit_carry;
        // Guard against products like 0.29 * 100 landing just under an integer.
        let quota = (target + 1e-9).floor().max(0.0);
        self.deficit_carry = (target - quota).max(0.0);
        self.per_step_quota = quota as usize;
        self.cumulative_seen += n;
        self.per_step_quota
    }

    /// Upper limit on cumulative budgeted annotations so far.
    pub fn allowance(&self) -> usize {
        (self.p * self.cumulative_seen as f64 - 1e-9).ceil().max(0.0) as usize
    }

    pub fn charge(&mut self, count: usize, budgeted: bool) -> Result<()> {
        if !budgeted {
            self.unbudgeted_queried += count;
            return Ok(());
        }
        if count > self.per_step_quota || self.cumulative_queried + count > self.allowance() {
            return Err(Error::structural(format!(
                "charging {count} annotations exceeds the budget (quota {}, used {}, allowance {})",
                self.per_step_quota,
                self.cumulative_queried,
                self.allowance()
            )));
        }
        self.cumulative_queried += count;
        Ok(())
    }

    pub fn budget_ratio(&self) -> f64 {
        if self.cumulative_seen == 0 {
            0.0
        } else {
            self.cumulative_queried as f64 / self.cumulative_seen as f64
        }
    }
}

/// One prompt of the current batch, as seen by a strategy.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub group: RolloutGroup,
    /// `None` when the group has no valid rollouts.
    pub summary: Option<ClusterSummary>,
    pub features: ClassifierFeatures,
    /// The truth is already known from an earlier annotation and costs nothing.
    pub cached: bool,
}

impl Candidate {
    pub fn prompt_id(&self) -> usize {
        self.group.prompt_id
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionDecision {
    pub strategy: Strategy,
    pub quota: usize,
    pub sup: Vec<usize>,
    pub unsup: Vec<(usize, f64)>,
    pub drop: Vec<usize>,
    /// Supervised prompts whose annotation is paid for this step.
    pub charged: Vec<usize>,
}

impl AcquisitionDecision {
    pub fn len(&self) -> usize {
        self.sup.len() + self.unsup.len() + self.drop.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Everything a strategy may consult beyond the batch itself.
#[derive(Clone, Copy, Debug)]
pub struct DecisionContext<'a> {
    pub quota: usize,
    pub classifiers: Option<&'a ClassifierState>,
    /// Ground-truth answers aligned with the batch; oracle strategies only.
    pub truths: Option<&'a [usize]>,
    pub p2: f64,
    pub in_warmup: bool,
    pub seed: u64,
    /// Oracle selection considers wrong-vote prompts only.
    pub oracle_wrong_only: bool,
}

/// Exact CAG against the ground truth; groups without a vote compare with all-zero pseudo rewards.
pub fn oracle_cag(candidate: &Candidate, truth: usize) -> Result<f64> {
    let group = &candidate.group;
    let gt = verify(group, truth);
    let pseudo = match &candidate.summary {
        Some(s) => crate::env::pseudo_rewards(group, s),
        None => crate::grpo::RewardVector::from_bools(vec![false; group.group_size()]),
    };
    Ok(cag_exact(&compute_advantages(&gt, 0.0)?, &compute_advantages(&pseudo, 0.0)?)?.value)
}

/// Expected CAG from the stage-2 count distribution.
pub fn predicted_cag(classifiers: &ClassifierState, candidate: &Candidate) -> Result<f64> {
    let g = candidate.group.group_size();
    let m = candidate.summary.as_ref().map_or(0, |s| s.majority_size);
    let admissible = AdmissibleCounts::new(g, m)?;
    let dist = classifiers.count_distribution(&candidate.features, &admissible)?;
    // Renormalize away float drift so the expectation accepts the distribution.
    let total: f64 = dist.iter().sum();
    let dist: Vec<f64> = dist.iter().map(|d| d / total).collect();
    Ok(expected_cag(&dist, g, m, 0.0)?.value)
}

/// Orders batch positions by descending score; ties keep batch order.
fn rank_desc(scores: &[f64], positions: &[usize]) -> Vec<usize> {
    let mut order = positions.to_vec();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Walks `ranked` filling the supervised set until `quota` paid annotations
/// are used; cached prompts join for free along the way.
fn take_quota(batch: &[Candidate], ranked: &[usize], quota: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut sup = Vec::new();
    let mut charged = Vec::new();
    let mut rest = Vec::new();
    for &i in ranked {
        if charged.len() < quota {
            sup.push(i);
            if !batch[i].cached {
                charged.push(i);
            }
        } else {
            rest.push(i);
        }
    }
    (sup, charged, rest)
}

pub fn decide(strategy: Strategy, batch: &[Candidate], ctx: &DecisionContext<'_>) -> Result<AcquisitionDecision> {
    if !(0.0..=1.0).contains(&ctx.p2) {
        return Err(Error::config("p2", format!("{} is outside [0, 1]", ctx.p2)));
    }
    if strategy.needs_truths() {
        match ctx.truths {
            Some(t) if t.len() == batch.len() => {}
            Some(_) => return Err(Error::structural("oracle truths do not align with the batch")),
            None => return Err(Error::structural(format!("{strategy} needs ground-truth answers"))),
        }
    }
    if strategy == Strategy::Care && ctx.classifiers.is_none() {
        return Err(Error::structural("care needs classifier state"));
    }

    let all: Vec<usize> = (0..batch.len()).collect();
    let id = |i: usize| batch[i].prompt_id();
    let mut sup_pos: Vec<usize> = Vec::new();
    let mut charged_pos: Vec<usize> = Vec::new();
    let mut unsup: Vec<(usize, f64)> = Vec::new();
    let mut drop_pos: Vec<usize> = Vec::new();

    match strategy {
        Strategy::Ttrl => unsup = all.iter().map(|&i| (i, 1.0)).collect(),
        Strategy::Gt | Strategy::OracleDecay => {
            sup_pos = all.clone();
            charged_pos = all.iter().copied().filter(|&i| !batch[i].cached).collect();
        }
        Strategy::Random | Strategy::Entropy | Strategy::Prob | Strategy::OracleCag => {
            let (ranked, ineligible) = match strategy {
                Strategy::Random => {
                    let mut order = all.clone();
                    let mut r = rng::rng_from(ctx.seed, &[rng::stream::ACQUISITION]);
                    order.shuffle(&mut r);
                    (order, Vec::new())
                }
                Strategy::Entropy => {
                    let scores: Vec<f64> = batch
                        .iter()
                        .map(|c| c.summary.as_ref().map_or(f64::INFINITY, entropy_score))
                        .collect();
                    (rank_desc(&scores, &all), Vec::new())
                }
                Strategy::Prob => {
                    // Lowest confidence first; a group without valid responses has none.
                    let scores: Vec<f64> = batch
                        .iter()
                        .map(|c| -prob_score(&c.group).unwrap_or(0.0))
                        .collect();
                    (rank_desc(&scores, &all), Vec::new())
                }
                _ => {
                    let truths = ctx.truths.unwrap_or_default();
                    let scores = batch
                        .iter()
                        .zip(truths)
                        .map(|(c, &t)| oracle_cag(c, t))
                        .collect::<Result<Vec<f64>>>()?;
                    let (eligible, ineligible): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&i| {
                        !ctx.oracle_wrong_only
                            || batch[i].summary.as_ref().is_none_or(|s| s.majority != truths[i])
                    });
                    (rank_desc(&scores, &eligible), ineligible)
                }
            };
            let (sup, charged, rest) = take_quota(batch, &ranked, ctx.quota);
            sup_pos = sup;
            charged_pos = charged;
            unsup = rest.into_iter().chain(ineligible).map(|i| (i, 1.0)).collect();
        }
        Strategy::Care => {
            let classifiers = ctx.classifiers.expect("checked above");
            let mut err_pos = all.clone();
            if !ctx.in_warmup && ctx.p2 > 0.0 {
                let take = (ctx.p2 * batch.len() as f64).round() as usize;
                let voted: Vec<usize> = all.iter().copied().filter(|&i| batch[i].summary.is_some()).collect();
                let mut rel = vec![0.0; batch.len()];
                for &i in &voted {
                    rel[i] = classifiers.reliability(&batch[i].features)?;
                }
                let ranked = rank_desc(&rel, &voted);
                let chosen: Vec<usize> = ranked.into_iter().take(take).collect();
                let mut is_chosen = vec![false; batch.len()];
                for &i in &chosen {
                    is_chosen[i] = true;
                    unsup.push((i, rel[i]));
                }
                err_pos = all.iter().copied().filter(|&i| !is_chosen[i]).collect();
            }
            let mut scores = vec![0.0; batch.len()];
            for &i in &err_pos {
                scores[i] = predicted_cag(classifiers, &batch[i])?;
            }
            let ranked = rank_desc(&scores, &err_pos);
            let (sup, charged, rest) = take_quota(batch, &ranked, ctx.quota);
            sup_pos = sup;
            charged_pos = charged;
            drop_pos = rest;
        }
    }

    let decision = AcquisitionDecision {
        strategy,
        quota: ctx.quota,
        sup: sup_pos.iter().map(|&i| id(i)).collect(),
        unsup: unsup.iter().map(|&(i, w)| (id(i), w)).collect(),
        drop: drop_pos.iter().map(|&i| id(i)).collect(),
        charged: charged_pos.iter().map(|&i| id(i)).collect(),
    };
    debug_assert_eq!(decision.len(), batch.len());
    Ok(decision)
}

/// Checks that the decision partitions `ids` exactly.
pub fn is_partition(decision: &AcquisitionDecision, ids: &[usize]) -> bool {
    let mut seen: Vec<usize> = decision
        .sup
        .iter()
        .copied()
        .chain(decision.unsup.iter().map(|&(i, _)| i))
        .chain(decision.drop.iter().copied())
        .collect();
    let mut expected = ids.to_vec();
    seen.sort_unstable();
    expected.sort_unstable();
    seen == expected
}
