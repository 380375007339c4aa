//! The training loop: rollouts, acquisition, mixed advantages, policy and
//! classifier updates, periodic evaluation.

mod config;
mod metrics;

use serde::{Deserialize, Serialize};

pub use config::{EvalModeName, RunConfig};
pub use metrics::{
    write_decisions, DecisionLogEntry, RunMetrics, RunSummary, StepRecord, METRIC_COLUMNS,
};

use crate::acquisition::{decide, oracle_cag, BudgetLedger, Candidate, DecisionContext, Strategy};
use crate::cag::AdmissibleCounts;
use crate::classifier::{ClassifierState, LabeledSample};
use crate::env::{
    evaluate_policy, extract_features, majority_vote, pseudo_rewards, sample_group, verify, PolicySnapshot,
    SyntheticEnv,
};
use crate::grpo::{
    compute_advantages, grpo_surrogate_and_gradient, mix_advantages, oracle_decay_advantages, Membership,
};
use crate::rng::{self, stream};
use crate::{Error, Result};
use rand::seq::SliceRandom;

/// Result of one run, including the best checkpoint.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub config: RunConfig,
    pub metrics: RunMetrics,
    pub decisions: Vec<DecisionLogEntry>,
    pub summary: RunSummary,
    pub best_policy: PolicySnapshot,
    pub final_policy: PolicySnapshot,
    /// JSON dump of both classifier stages at the best step (CARE only).
    pub best_classifiers: Option<String>,
}

/// Ground-truth labels for a supervised prompt, used to train the classifiers.
fn labeled_sample(candidate: &Candidate, truth: usize) -> LabeledSample {
    let group = &candidate.group;
    let response_correct: Vec<bool> = group
        .answers
        .iter()
        .zip(&group.valid)
        .map(|(&a, &v)| v && a == truth)
        .collect();
    let (reliable, majority_size) = match &candidate.summary {
        Some(s) => (s.majority == truth, s.majority_size),
        None => (false, 0),
    };
    let count_label = if reliable {
        None
    } else {
        Some(response_correct.iter().filter(|&&c| c).count())
    };
    LabeledSample {
        features: candidate.features.clone(),
        majority_size,
        reliable,
        count_label,
        response_correct,
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Stage accuracies on the current batch, measured against the truths.
fn classifier_accuracies(
    classifiers: &ClassifierState,
    batch: &[Candidate],
    truths: &[usize],
) -> Result<(Option<f64>, Option<f64>)> {
    let mut hits1 = Vec::new();
    let mut hits2 = Vec::new();
    for (c, &truth) in batch.iter().zip(truths) {
        let Some(summary) = &c.summary else { continue };
        let label = labeled_sample(c, truth);
        let rel = classifiers.reliability(&c.features)?;
        hits1.push(if (rel > 0.5) == label.reliable { 1.0 } else { 0.0 });
        if let Some(k) = label.count_label {
            let admissible = AdmissibleCounts::new(c.group.group_size(), summary.majority_size)?;
            let dist = classifiers.count_distribution(&c.features, &admissible)?;
            let top = crate::env::argmax(&dist);
            hits2.push(if top == k { 1.0 } else { 0.0 });
        }
    }
    Ok((mean(&hits1), mean(&hits2)))
}

pub fn run_experiment(config: &RunConfig) -> Result<RunOutput> {
    config.validate()?;
    let env = SyntheticEnv::generate(&config.env)?;
    let strategy = config.strategy;
    let g = config.group_size;
    let n = config.batch_size;
    let seed = config.seed;
    let rollout_cfg = env.rollout_config(g);
    let eval_mode = config.eval_mode();
    let train = env.train.prompts();

    let mut policy = env.initial_policy.clone();
    let mut reference = policy.clone();
    let mut ledger = BudgetLedger::new(config.p)?;
    let mut annotated = vec![false; train.len()];
    let mut classifiers = if strategy == Strategy::Care {
        let mut init = rng::rng_from(seed, &[stream::CLASSIFIER_INIT]);
        Some(ClassifierState::new(
            config.classifier.clone(),
            config.env.feature_dim,
            g,
            &mut init,
        )?)
    } else {
        None
    };
    let mut replay_rng = rng::rng_from(seed, &[stream::REPLAY]);

    let steps_per_epoch = config.steps_per_epoch();
    let total_steps = config.total_steps();
    let mut records = Vec::with_capacity(total_steps + 1);
    let mut decisions = Vec::with_capacity(total_steps);

    let eval_seed = rng::derive_seed(seed, &[stream::EVAL]);
    let initial_acc = evaluate_policy(&policy, &env.eval, eval_mode, rng::derive_seed(eval_seed, &[0]))?;
    records.push(StepRecord {
        step: 0,
        epoch: 0,
        eval_accuracy: Some(initial_acc),
        pseudo_label_accuracy: None,
        queried_count: 0,
        cumulative_queried: 0,
        cumulative_budget_ratio: 0.0,
        mean_cag_selected: None,
        stage1_accuracy: None,
        stage2_top1_accuracy: None,
        sup_count: 0,
        unsup_count: 0,
        drop_count: 0,
        objective: None,
    });
    let mut best_step = 0;
    let mut best_accuracy = initial_acc;
    let mut best_policy = policy.clone();
    let mut best_classifiers = match &classifiers {
        Some(c) => Some(c.checkpoint_json()?),
        None => None,
    };

    let mut order: Vec<usize> = Vec::new();
    for step in 1..=total_steps {
        let epoch = (step - 1) / steps_per_epoch;
        let pos = (step - 1) % steps_per_epoch;
        if pos == 0 {
            order = (0..train.len()).collect();
            order.shuffle(&mut rng::rng_from(seed, &[stream::BATCH_ORDER, epoch as u64]));
            reference = policy.clone();
        }
        let batch_idx = &order[pos * n..(pos + 1) * n];

        let quota = ledger.advance(n);
        let mut batch = Vec::with_capacity(n);
        let mut truths = Vec::with_capacity(n);
        for &i in batch_idx {
            let prompt = &train[i];
            let group_seed = rng::derive_seed(seed, &[stream::ROLLOUT, step as u64, prompt.id as u64]);
            let group = sample_group(&policy, prompt, &rollout_cfg, group_seed)?;
            let summary = match majority_vote(&group) {
                Ok(s) => Some(s),
                Err(Error::NoValidRollouts(_)) => None,
                Err(e) => return Err(e),
            };
            let features = extract_features(prompt, &group, summary.as_ref());
            batch.push(Candidate {
                group,
                summary,
                features,
                cached: !config.charge_per_query && annotated[i],
            });
            truths.push(prompt.truth);
        }

        let ctx = DecisionContext {
            quota,
            classifiers: classifiers.as_ref(),
            truths: strategy.needs_truths().then_some(truths.as_slice()),
            p2: config.p2,
            in_warmup: step <= config.warmup_steps,
            seed: rng::derive_seed(seed, &[stream::ACQUISITION, step as u64]),
            oracle_wrong_only: config.oracle_wrong_only,
        };
        let decision = decide(strategy, &batch, &ctx)?;
        ledger.charge(decision.charged.len(), strategy.is_budgeted())?;

        // Batch position of every prompt id in this step.
        let position = |id: usize| batch.iter().position(|c| c.prompt_id() == id).expect("id from batch");
        let mut membership = vec![(Membership::Drop, 0.0); n];
        for &id in &decision.sup {
            membership[position(id)] = (Membership::Sup, 1.0);
            annotated[id] = true;
        }
        for &(id, w) in &decision.unsup {
            membership[position(id)] = (Membership::Unsup, w);
        }

        let mut advantages = Vec::with_capacity(n);
        let mut sup_cags = Vec::new();
        let mut correct_votes = 0usize;
        for (i, c) in batch.iter().enumerate() {
            let truth = truths[i];
            if c.summary.as_ref().is_some_and(|s| s.majority == truth) {
                correct_votes += 1;
            }
            let (member, weight) = membership[i];
            let adv = match member {
                Membership::Sup => {
                    let gt = compute_advantages(&verify(&c.group, truth), config.clip.epsilon)?;
                    let cag = oracle_cag(c, truth)?;
                    sup_cags.push(cag);
                    if strategy == Strategy::OracleDecay {
                        let decayed = oracle_decay_advantages(&gt, cag, config.decay_coeff);
                        mix_advantages(Some(&decayed), None, member, 1.0)?
                    } else {
                        mix_advantages(Some(&gt), None, member, 1.0)?
                    }
                }
                Membership::Unsup => {
                    let pseudo = match &c.summary {
                        Some(s) => compute_advantages(&pseudo_rewards(&c.group, s), config.clip.epsilon)?,
                        None => crate::grpo::AdvantageVector::zeros(g),
                    };
                    mix_advantages(None, Some(&pseudo), member, weight)?
                }
                Membership::Drop => mix_advantages(None, Some(&crate::grpo::AdvantageVector::zeros(g)), member, 0.0)?,
            };
            advantages.push(adv.values);
        }

        let denom = if config.drop_physically {
            (n - decision.drop.len()).max(1)
        } else {
            n
        };
        let mut objective = None;
        for inner in 0..config.grpo_steps {
            let mut grad = vec![0.0; policy.num_params()];
            let mut obj = 0.0;
            for (i, c) in batch.iter().enumerate() {
                if config.drop_physically && membership[i].0 == Membership::Drop {
                    continue;
                }
                let out = grpo_surrogate_and_gradient(
                    &policy,
                    &train[batch_idx[i]].features,
                    &c.group,
                    &advantages[i],
                    &config.clip,
                    Some(&reference),
                )?;
                obj += out.objective;
                for (a, b) in grad.iter_mut().zip(&out.gradient) {
                    *a += b;
                }
            }
            if inner == 0 {
                objective = Some(obj / denom as f64);
            }
            policy = policy.stepped(&grad, config.learning_rate / denom as f64);
        }

        let (stage1_accuracy, stage2_top1_accuracy) = match &classifiers {
            Some(cls) => classifier_accuracies(cls, &batch, &truths)?,
            None => (None, None),
        };
        if let Some(cls) = classifiers.as_mut() {
            let fresh: Vec<LabeledSample> = decision
                .sup
                .iter()
                .map(|&id| {
                    let i = position(id);
                    labeled_sample(&batch[i], truths[i])
                })
                .collect();
            cls.update(&fresh, &mut replay_rng)?;
        }

        let eval_accuracy = if step % config.eval_every == 0 || step == total_steps {
            let acc = evaluate_policy(&policy, &env.eval, eval_mode, rng::derive_seed(eval_seed, &[step as u64]))?;
            if acc > best_accuracy {
                best_accuracy = acc;
                best_step = step;
                best_policy = policy.clone();
                if let Some(c) = &classifiers {
                    best_classifiers = Some(c.checkpoint_json()?);
                }
            }
            Some(acc)
        } else {
            None
        };

        records.push(StepRecord {
            step,
            epoch,
            eval_accuracy,
            pseudo_label_accuracy: Some(correct_votes as f64 / n as f64),
            queried_count: decision.charged.len(),
            cumulative_queried: ledger.cumulative_queried,
            cumulative_budget_ratio: ledger.budget_ratio(),
            mean_cag_selected: mean(&sup_cags),
            stage1_accuracy,
            stage2_top1_accuracy,
            sup_count: decision.sup.len(),
            unsup_count: decision.unsup.len(),
            drop_count: decision.drop.len(),
            objective,
        });
        decisions.push(DecisionLogEntry {
            step,
            strategy,
            quota: decision.quota,
            sup: decision.sup,
            unsup: decision.unsup,
            drop: decision.drop,
            charged: decision.charged,
            cumulative_queried: ledger.cumulative_queried,
            cumulative_seen: ledger.cumulative_seen,
            budgeted: strategy.is_budgeted(),
        });
    }

    let metrics = RunMetrics {
        strategy,
        seed,
        records,
        best_step,
        best_accuracy,
    };
    let summary = RunSummary {
        strategy,
        seed,
        steps: total_steps,
        best_step,
        best_accuracy,
        final_eval_accuracy: metrics.final_eval_accuracy(),
        cumulative_queried: ledger.cumulative_queried,
        cumulative_seen: ledger.cumulative_seen,
        budget_ratio: ledger.budget_ratio(),
        unbudgeted_queried: ledger.unbudgeted_queried,
        realized_hard_fraction: env.realized_hard_fraction,
    };
    Ok(RunOutput {
        config: config.clone(),
        metrics,
        decisions,
        summary,
        best_policy,
        final_policy: policy,
        best_classifiers,
    })
}

/// Checks a decision log against the budget: cumulative paid annotations never
/// exceed `ceil(p * prompts seen)`.
pub fn budget_respected(decisions: &[DecisionLogEntry], p: f64) -> bool {
    decisions.iter().all(|d| {
        !d.budgeted || d.cumulative_queried <= (p * d.cumulative_seen as f64 - 1e-9).ceil().max(0.0) as usize
    })
}

/// Best-checkpoint accuracy of one strategy across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyComparison {
    pub label: String,
    pub strategy: Strategy,
    pub seeds: Vec<u64>,
    pub best_accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// The config for replicate `seed`: the run seed is `seed` and the env seed is
/// shifted by it, so each replicate sees its own bank.
pub fn replicate(config: &RunConfig, seed: u64) -> RunConfig {
    let mut cfg = config.clone();
    cfg.seed = seed;
    cfg.env.seed = config.env.seed.wrapping_add(seed);
    cfg
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Runs every config on every seed. All configs must share one environment.
pub fn compare_strategies(configs: &[(String, RunConfig)], seeds: &[u64]) -> Result<Vec<StrategyComparison>> {
    if let Some((_, first)) = configs.first() {
        if let Some((label, _)) = configs.iter().find(|(_, c)| c.env != first.env) {
            return Err(Error::structural(format!(
                "config '{label}' uses a different environment (env seed {} vs {})",
                configs.iter().find(|(l, _)| l == label).map_or(0, |(_, c)| c.env.seed),
                first.env.seed
            )));
        }
    }
    configs
        .iter()
        .map(|(label, cfg)| {
            let best = seeds
                .iter()
                .map(|&s| run_experiment(&replicate(cfg, s)).map(|o| o.metrics.best_accuracy))
                .collect::<Result<Vec<f64>>>()?;
            let (mean, std) = mean_std(&best);
            Ok(StrategyComparison {
                label: label.clone(),
                strategy: cfg.strategy,
                seeds: seeds.to_vec(),
                best_accuracies: best,
                mean,
                std,
            })
        })
        .collect()
}

pub fn write_comparison_csv(rows: &[StrategyComparison], out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["label", "strategy", "seeds", "mean_best_accuracy", "std_best_accuracy", "per_seed"])?;
    for r in rows {
        let per_seed: Vec<String> = r.best_accuracies.iter().map(|a| a.to_string()).collect();
        w.write_record([
            r.label.clone(),
            r.strategy.to_string(),
            r.seeds.len().to_string(),
            r.mean.to_string(),
            r.std.to_string(),
            per_seed.join(";"),
        ])?;
    }
    w.flush()?;
    Ok(())
}
