//! Acceptance suite: one pass/fail line per criterion.
//!
//! Run with `cargo test -p rlavr-core --test acceptance`. The process exits
//! non-zero when any criterion fails.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rlavr_core::acquisition::Strategy;
use rlavr_core::cag::{cag_classwise, cag_exact};
use rlavr_core::classifier::{
    class_balanced_weights, stage1_loss, stage2_loss, ClassWeights, ClassifierConfig, ClassifierState, LabeledSample,
    MlpParams, NetDims, ReplayBuffer, StageKind,
};
use rlavr_core::env::{
    majority_vote, pseudo_rewards, sample_group, verify, ClassifierFeatures, PolicySnapshot, Prompt, ResponseFeatures,
    RolloutConfig, RolloutGroup,
};
use rlavr_core::grpo::{compute_advantages, grpo_surrogate_and_gradient, ClipConfig, RewardVector};
use rlavr_core::theory::{
    fuzz, instance_from_scores, lemma1_check, random_instance, theorem1_check, FuzzConfig, ScoreSource,
};
use rlavr_core::trainer::{budget_respected, mean_std, replicate, run_experiment, RunOutput};
use rlavr_core::RunConfig;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &str, elapsed: Duration, outcome: &Outcome) {
    println!(
        "criterion {id:>2} [{}] {name} ({:.2}s): {}",
        if outcome.pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        outcome.detail
    );
}

fn random_rewards(rng: &mut ChaCha8Rng, g: usize) -> Vec<bool> {
    let ones = rng.random_range(1..g);
    let mut bits: Vec<bool> = (0..g).map(|i| i < ones).collect();
    bits.shuffle(rng);
    bits
}

fn c1_advantage_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_mean: f64 = 0.0;
    let mut worst_norm: f64 = 0.0;
    for _ in 0..10_000 {
        let g = rng.random_range(2..=32);
        let r = RewardVector::from_bools(random_rewards(&mut rng, g));
        let a = compute_advantages(&r, 0.0).unwrap();
        let mean = a.values.iter().sum::<f64>() / g as f64;
        let norm2: f64 = a.values.iter().map(|v| v * v).sum();
        worst_mean = worst_mean.max(mean.abs());
        worst_norm = worst_norm.max((norm2 - g as f64).abs());
    }
    Outcome {
        pass: worst_mean < 1e-9 && worst_norm < 1e-9,
        detail: format!("max |mean| {worst_mean:.2e}, max |norm^2 - G| {worst_norm:.2e}"),
    }
}

/// Closed-form class-wise gap at `eps = 0` for disjoint majority (size m) and
/// correct (size k) sets.
fn classwise_closed_form(g: usize, m: usize, k: usize) -> f64 {
    let gf = g as f64;
    let mu = m as f64 / gf;
    let pseudo_degenerate = m == g;
    if k == 0 {
        return if pseudo_degenerate { 0.0 } else { gf.sqrt() };
    }
    if pseudo_degenerate {
        return gf.sqrt();
    }
    let nu = k as f64 / gf;
    let inner = -gf * nu * mu / ((nu * (1.0 - nu)).sqrt() * (mu * (1.0 - mu)).sqrt());
    (2.0 * gf - 2.0 * inner).sqrt()
}

fn group_from(answers: Vec<usize>, valid: Vec<bool>) -> RolloutGroup {
    let g = answers.len();
    RolloutGroup {
        prompt_id: 0,
        answers,
        probs: vec![0.5; g],
        valid,
        lengths: vec![0.5; g],
        policy_version: 0,
    }
}

fn c2_classwise_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut wrong = 0;
    let mut worst: f64 = 0.0;
    let mut worst_oracle: f64 = 0.0;
    let mut correct_nonzero = 0;
    let mut correct = 0;
    while wrong < 10_000 {
        let g = rng.random_range(2..=16);
        let c = rng.random_range(2..=6);
        let answers: Vec<usize> = (0..g).map(|_| rng.random_range(0..c)).collect();
        let valid: Vec<bool> = (0..g).map(|_| rng.random_bool(0.9)).collect();
        let truth = rng.random_range(0..c);
        let mut group = group_from(answers, valid);
        let Ok(summary) = majority_vote(&group) else { continue };
        let gap = |grp: &RolloutGroup| {
            let s = majority_vote(grp).unwrap();
            let gt = compute_advantages(&verify(grp, truth), 0.0).unwrap();
            let ps = compute_advantages(&pseudo_rewards(grp, &s), 0.0).unwrap();
            cag_exact(&gt, &ps).unwrap().value
        };
        if summary.majority == truth {
            correct += 1;
            if gap(&group) != 0.0 {
                correct_nonzero += 1;
            }
            continue;
        }
        wrong += 1;
        let m = summary.majority_size;
        let k = group
            .answers
            .iter()
            .zip(&group.valid)
            .filter(|(&a, &v)| v && a == truth)
            .count();
        let classwise = cag_classwise(g, m, k, 0.0).unwrap().value;
        worst_oracle = worst_oracle.max((classwise - classwise_closed_form(g, m, k)).abs());
        for _ in 0..3 {
            let mut perm: Vec<usize> = (0..g).collect();
            perm.shuffle(&mut rng);
            group = group_from(
                perm.iter().map(|&i| group.answers[i]).collect(),
                perm.iter().map(|&i| group.valid[i]).collect(),
            );
            // A tie for the majority may resolve to another cluster after permuting.
            let s = majority_vote(&group).unwrap();
            if s.majority == truth || s.majority_size != m {
                continue;
            }
            worst = worst.max((gap(&group) - classwise).abs());
        }
    }
    Outcome {
        pass: worst < 1e-9 && worst_oracle < 1e-9 && correct_nonzero == 0,
        detail: format!(
            "{wrong} wrong-vote groups: max |exact - classwise| {worst:.2e}, max |classwise - closed form| {worst_oracle:.2e}; {correct} correct-vote groups, {correct_nonzero} nonzero"
        ),
    }
}

fn c3_lemma_identity() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut degenerate = 0;
    let mut index = 0u64;
    while checked < 10_000 {
        let g = 2 + (index % 15) as usize;
        let source = if index % 2 == 0 { ScoreSource::Policy } else { ScoreSource::PolicyRepeated };
        let seed = rlavr_core::rng::derive_seed(303, &[index]);
        index += 1;
        let Some(inst) = random_instance(seed, g, source).unwrap() else {
            degenerate += 1;
            continue;
        };
        match lemma1_check(&inst) {
            Ok(r) => {
                worst = worst.max(r.abs_diff);
                checked += 1;
            }
            Err(_) => degenerate += 1,
        }
    }
    Outcome {
        pass: worst < 1e-8,
        detail: format!("{checked} instances, max gap {worst:.2e}, {degenerate} degenerate draws excluded"),
    }
}

fn c4_alignment_bound() -> Outcome {
    let cfg = FuzzConfig {
        instances: 100_000,
        keep_records: false,
        ..FuzzConfig::default()
    };
    let (_, summary) = fuzz(&cfg, 404).unwrap();

    // Isotropic kernels: orthonormal score columns give K = I and kappa = 1.
    let mut rng = ChaCha8Rng::seed_from_u64(405);
    let mut worst_identity: f64 = 0.0;
    let mut isotropic = 0;
    for _ in 0..2_000 {
        let g = rng.random_range(3..=16);
        let s = nalgebra::DMatrix::from_fn(2 * g, g, |_, _| rng.random_range(-1.0..1.0)).qr().q();
        let a = compute_advantages(&RewardVector::from_bools(random_rewards(&mut rng, g)), 0.0).unwrap();
        let b = compute_advantages(&RewardVector::from_bools(random_rewards(&mut rng, g)), 0.0).unwrap();
        let inst = instance_from_scores(
            s,
            nalgebra::DVector::from_vec(a.values),
            nalgebra::DVector::from_vec(b.values),
        )
        .unwrap();
        let Ok(rep) = theorem1_check(&inst) else { continue };
        let expected = 1.0 - rep.d * rep.d / (2.0 * g as f64);
        worst_identity = worst_identity.max((rep.cos_grad - expected).abs()).max((rep.bound - expected).abs());
        isotropic += 1;
    }

    let corner = |g: usize, flip: bool| -> (f64, f64) {
        let s = nalgebra::DMatrix::<f64>::identity(g, g);
        let half = g / 2;
        let a: Vec<bool> = (0..g).map(|i| i < half).collect();
        let b: Vec<bool> = if flip {
            a.iter().map(|x| !x).collect()
        } else {
            (0..g).map(|i| (half / 2..half / 2 + half).contains(&i)).collect()
        };
        let av = compute_advantages(&RewardVector::from_bools(a), 0.0).unwrap();
        let bv = compute_advantages(&RewardVector::from_bools(b), 0.0).unwrap();
        let inst = instance_from_scores(
            s,
            nalgebra::DVector::from_vec(av.values),
            nalgebra::DVector::from_vec(bv.values),
        )
        .unwrap();
        let rep = theorem1_check(&inst).unwrap();
        (rep.d * rep.d / g as f64, rep.cos_grad)
    };
    let (d2_orth, cos_orth) = corner(8, false);
    let (d2_anti, cos_anti) = corner(8, true);
    let corners_ok = (d2_orth - 2.0).abs() < 1e-12
        && cos_orth.abs() < 1e-8
        && (d2_anti - 4.0).abs() < 1e-12
        && (cos_anti + 1.0).abs() < 1e-8;

    Outcome {
        pass: summary.violations == 0 && worst_identity < 1e-8 && corners_ok && summary.checked > 0,
        detail: format!(
            "{} fuzzed ({} checked, {} skipped as singular/degenerate), {} violations, max cos - bound {:.2e}; {isotropic} isotropic, max identity error {worst_identity:.2e}; corners cos(d^2=2G)={cos_orth:.1e}, cos(d^2=4G)={cos_anti:.6}",
            summary.instances, summary.checked, summary.skipped, summary.violations, summary.max_bound_excess
        ),
    }
}

fn relative_error(numeric: &[f64], analytic: &[f64]) -> f64 {
    let diff = numeric.iter().zip(analytic).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = numeric
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
        .max(analytic.iter().map(|v| v * v).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn central_differences(params: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn random_features(rng: &mut ChaCha8Rng, d_p: usize, g: usize) -> ClassifierFeatures {
    ClassifierFeatures {
        prompt_repr: (0..d_p).map(|_| rng.random_range(-1.0..1.0)).collect(),
        valid_ratio: rng.random_range(0.5..1.0),
        cluster_dist: (0..g).map(|_| rng.random_range(0.0..1.0)).collect(),
        response_feats: (0..g)
            .map(|_| {
                let mut onehot = vec![0.0; g];
                onehot[rng.random_range(0..g)] = 1.0;
                ResponseFeatures {
                    prob: rng.random_range(0.05..1.0),
                    norm_length: rng.random_range(0.1..1.0),
                    rank_onehot: onehot,
                }
            })
            .collect(),
    }
}

fn random_sample(rng: &mut ChaCha8Rng, d_p: usize, g: usize, wrong: bool) -> LabeledSample {
    let m = rng.random_range(1..=g);
    let reliable = !wrong && rng.random_bool(0.5);
    let count_label = if reliable { None } else { Some(rng.random_range(0..=(g - m).min(m))) };
    LabeledSample {
        features: random_features(rng, d_p, g),
        majority_size: m,
        reliable,
        count_label,
        response_correct: (0..g).map(|_| rng.random_bool(0.4)).collect(),
    }
}

fn c5_gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);

    let mut worst_grpo: f64 = 0.0;
    for _ in 0..100 {
        let c = rng.random_range(2..=6);
        let d = rng.random_range(2..=6);
        let g = rng.random_range(2..=8);
        let old = PolicySnapshot::new(c, d, (0..c * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let prompt = Prompt {
            id: 0,
            features: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            truth: 0,
        };
        let cfg = RolloutConfig {
            group_size: g,
            ..RolloutConfig::default()
        };
        let group = sample_group(&old, &prompt, &cfg, rng.random()).unwrap();
        let delta: Vec<f64> = (0..c * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let current = old.stepped(&delta, rng.random_range(0.0..0.5));
        let reference = old.stepped(&delta, -0.3);
        let adv: Vec<f64> = (0..g).map(|_| rng.random_range(-2.0..2.0)).collect();
        let clip = ClipConfig {
            delta: 0.2,
            epsilon: 1e-6,
            kl_coeff: if rng.random_bool(0.5) { 0.1 } else { 0.0 },
        };
        let out = grpo_surrogate_and_gradient(&current, &prompt.features, &group, &adv, &clip, Some(&reference)).unwrap();
        let numeric = central_differences(current.weights(), 1e-6, |w| {
            let p = current.with_weights(w.to_vec()).unwrap();
            grpo_surrogate_and_gradient(&p, &prompt.features, &group, &adv, &clip, Some(&reference))
                .unwrap()
                .objective
        });
        worst_grpo = worst_grpo.max(relative_error(&numeric, &out.gradient));
    }

    let dims = NetDims {
        prompt_hidden: 6,
        response_hidden: 5,
        response_out: 7,
        head_hidden: 6,
    };
    let jitter = |p: &mut MlpParams, rng: &mut ChaCha8Rng| {
        for v in &mut p.data {
            *v += rng.random_range(-0.05..0.05);
        }
    };
    let mut worst1: f64 = 0.0;
    let mut worst2: f64 = 0.0;
    for _ in 0..100 {
        let (d_p, g) = (3, 4);
        let mut p1 = MlpParams::new(StageKind::Reliability, dims, d_p, g, &mut rng);
        jitter(&mut p1, &mut rng);
        let batch1: Vec<LabeledSample> = (0..3).map(|_| random_sample(&mut rng, d_p, g, false)).collect();
        let w1 = ClassWeights {
            weights: vec![rng.random_range(0.25..4.0), rng.random_range(0.25..4.0)],
        };
        let (_, grad1) = stage1_loss(&p1, &batch1, 1.5, &w1).unwrap();
        let mut probe = p1.clone();
        let numeric1 = central_differences(&p1.data, 1e-6, |w| {
            probe.data.copy_from_slice(w);
            stage1_loss(&probe, &batch1, 1.5, &w1).unwrap().0
        });
        worst1 = worst1.max(relative_error(&numeric1, &grad1));

        let mut p2 = MlpParams::new(StageKind::CountDistribution, dims, d_p, g, &mut rng);
        jitter(&mut p2, &mut rng);
        let batch2: Vec<LabeledSample> = (0..3).map(|_| random_sample(&mut rng, d_p, g, true)).collect();
        let w2 = ClassWeights {
            weights: (0..=g).map(|_| rng.random_range(0.25..4.0)).collect(),
        };
        let (_, grad2) = stage2_loss(&p2, &batch2, &w2).unwrap();
        let mut probe = p2.clone();
        let numeric2 = central_differences(&p2.data, 1e-6, |w| {
            probe.data.copy_from_slice(w);
            stage2_loss(&probe, &batch2, &w2).unwrap().0
        });
        worst2 = worst2.max(relative_error(&numeric2, &grad2));
    }
    Outcome {
        pass: worst_grpo < 1e-4 && worst1 < 1e-4 && worst2 < 1e-4,
        detail: format!(
            "max relative error: surrogate {worst_grpo:.2e}, stage-1 {worst1:.2e}, stage-2 {worst2:.2e} (100 instances each)"
        ),
    }
}

/// Every run needed by the dynamics criteria, keyed by (label, seed).
struct Matrix {
    runs: Vec<(String, u64, RunOutput)>,
}

impl Matrix {
    fn build() -> Self {
        let mut runs = Vec::new();
        let base = RunConfig::default();
        let mut push = |label: &str, cfg: RunConfig| {
            for &s in &SEEDS {
                let out = run_experiment(&replicate(&cfg, s)).expect("run");
                runs.push((label.to_string(), s, out));
            }
        };
        for st in [Strategy::Ttrl, Strategy::Gt, Strategy::Random, Strategy::OracleCag] {
            push(st.as_str(), RunConfig { strategy: st, ..base.clone() });
        }
        for p in [0.1, 0.2, 0.4, 0.8] {
            push(&format!("care@{p}"), RunConfig { strategy: Strategy::Care, p, ..base.clone() });
        }
        Self { runs }
    }

    fn get(&self, label: &str) -> Vec<&RunOutput> {
        self.runs.iter().filter(|(l, _, _)| l == label).map(|(_, _, o)| o).collect()
    }

    fn best(&self, label: &str) -> Vec<f64> {
        self.get(label).iter().map(|o| o.metrics.best_accuracy).collect()
    }
}

fn wins(a: &[f64], b: &[f64], strict: bool) -> usize {
    a.iter()
        .zip(b)
        .filter(|(x, y)| if strict { x > y } else { x >= y })
        .count()
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

fn c6_budget(m: &Matrix) -> Outcome {
    let mut budgeted = 0;
    let mut bad = Vec::new();
    for (label, seed, out) in &m.runs {
        if !out.config.strategy.is_budgeted() {
            continue;
        }
        budgeted += 1;
        if !budget_respected(&out.decisions, out.config.p) {
            bad.push(format!("{label}/{seed}"));
        }
    }
    Outcome {
        pass: bad.is_empty() && budgeted > 0,
        detail: format!("{budgeted} budgeted runs checked from decision logs, violations: {bad:?}"),
    }
}

fn c7_collapse(m: &Matrix) -> Outcome {
    let warm = RunConfig::default().warmup_steps;
    let ttrl = m.get("ttrl");
    let declines: Vec<(f64, f64)> = ttrl
        .iter()
        .map(|o| {
            let last = o.metrics.last_step();
            (
                o.metrics.mean_pseudo_accuracy(1, warm).unwrap(),
                o.metrics.mean_pseudo_accuracy(last + 1 - warm, last).unwrap(),
            )
        })
        .collect();
    let declined = declines.iter().filter(|(a, b)| b < a).count();
    let gt_wins = wins(&m.best("gt"), &m.best("ttrl"), true);
    Outcome {
        pass: declined >= 4 && gt_wins >= 4,
        detail: format!(
            "ttrl pseudo-label accuracy (first {warm} steps -> last {warm}) {}; declined {declined}/5; gt best {} vs ttrl best {}, gt ahead {gt_wins}/5",
            declines.iter().map(|(a, b)| format!("{a:.2}->{b:.2}")).collect::<Vec<_>>().join(" "),
            fmt(&m.best("gt")),
            fmt(&m.best("ttrl"))
        ),
    }
}

fn c8_oracle_vs_random(m: &Matrix) -> Outcome {
    let oracle = m.best("oracle_cag");
    let random = m.best("random");
    let w = wins(&oracle, &random, false);
    Outcome {
        pass: w >= 4,
        detail: format!("oracle_cag {} vs random {}, oracle >= random {w}/5", fmt(&oracle), fmt(&random)),
    }
}

fn c9_care(m: &Matrix) -> Outcome {
    let care = m.best("care@0.2");
    let ttrl = m.best("ttrl");
    let random = m.best("random");
    let gt = m.best("gt");
    let w_ttrl = wins(&care, &ttrl, false);
    let w_random = wins(&care, &random, false);
    let gap_care = gt.iter().zip(&care).map(|(a, b)| a - b).sum::<f64>() / 5.0;
    let gap_ttrl = gt.iter().zip(&ttrl).map(|(a, b)| a - b).sum::<f64>() / 5.0;
    Outcome {
        pass: w_ttrl >= 4 && w_random >= 4 && gap_care < gap_ttrl,
        detail: format!(
            "care {}; >= ttrl {w_ttrl}/5, >= random {w_random}/5; mean gap to gt: care {gap_care:.3}, ttrl {gap_ttrl:.3}",
            fmt(&care)
        ),
    }
}

fn sample_var(v: &[f64]) -> f64 {
    let (mean, _) = mean_std(v);
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}

fn c10_budget_monotonicity(m: &Matrix) -> Outcome {
    let ps = [0.1, 0.2, 0.4, 0.8];
    let series: Vec<Vec<f64>> = ps.iter().map(|p| m.best(&format!("care@{p}"))).collect();
    let means: Vec<f64> = series.iter().map(|s| mean_std(s).0).collect();
    let mut ok = true;
    for i in 0..ps.len() - 1 {
        let pooled = ((sample_var(&series[i]) + sample_var(&series[i + 1])) / 2.0).sqrt();
        if means[i + 1] < means[i] - pooled {
            ok = false;
        }
    }
    Outcome {
        pass: ok,
        detail: format!(
            "care mean best accuracy by p: {}",
            ps.iter().zip(&means).map(|(p, m)| format!("{p}: {m:.3}")).collect::<Vec<_>>().join(", ")
        ),
    }
}

fn c11_replay_and_weights() -> Outcome {
    let mut failures = Vec::new();

    let mut buf = ReplayBuffer::new(2048);
    for i in 0..2048 {
        buf.push(i);
    }
    let evicted = buf.push(2048);
    if evicted != Some(0) || buf.len() != 2048 || buf.iter().next() != Some(&1) {
        failures.push("fifo at capacity");
    }
    let order: Vec<usize> = (2049..2100).filter_map(|i| buf.push(i)).collect();
    if order != (1..52).collect::<Vec<_>>() {
        failures.push("eviction order");
    }
    if ClassifierConfig::default().replay_capacity != 2048 || ClassifierConfig::default().replay_mix != 16 {
        failures.push("default capacity or mix");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let cfg = ClassifierConfig {
        dims: NetDims {
            prompt_hidden: 4,
            response_hidden: 4,
            response_out: 4,
            head_hidden: 4,
        },
        ..ClassifierConfig::default()
    };
    let mut state = ClassifierState::new(cfg, 3, 4, &mut rng).unwrap();
    let history: Vec<LabeledSample> = (0..40).map(|_| random_sample(&mut rng, 3, 4, false)).collect();
    state.update(&history, &mut rng).unwrap();
    let fresh: Vec<LabeledSample> = (0..12).map(|_| random_sample(&mut rng, 3, 4, false)).collect();
    let rep = state.update(&fresh, &mut rng).unwrap();
    if rep.stage1_batch != 28 {
        failures.push("12 fresh + 16 replayed");
    }

    let mut labels = vec![0usize; 15];
    labels.push(1);
    let w = class_balanced_weights(&labels, 2);
    // Independent evaluation of the formula: mean frequency 0.5 over two classes.
    let expect = [(0.5f64 / 0.9375).sqrt(), (0.5f64 / 0.0625).sqrt()];
    if (w.weights[0] - expect[0]).abs() > 1e-12 || (w.weights[1] - expect[1]).abs() > 1e-12 {
        failures.push("weights (0.9375, 0.0625)");
    }
    if (w.weights[0] - 0.7303).abs() > 1e-4 || (w.weights[1] - 2.8284).abs() > 1e-4 {
        failures.push("weights to four decimals");
    }
    let mut labels = vec![0usize; 256];
    labels.push(1);
    let w = class_balanced_weights(&labels, 2);
    if w.weights[1] != 4.0 {
        failures.push("256:1 clipped to 4.0");
    }
    if class_balanced_weights(&[0, 1, 0, 1], 2).weights != vec![1.0, 1.0] {
        failures.push("balanced batch");
    }
    Outcome {
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            format!(
                "fifo order, capacity 2048, 28-sample mixed batch, weights ({:.4}, {:.4}), 256:1 -> 4.0",
                expect[0], expect[1]
            )
        } else {
            format!("failed: {failures:?}")
        },
    }
}

fn c12_determinism(m: &Matrix) -> Outcome {
    let cfg = replicate(
        &RunConfig {
            strategy: Strategy::Care,
            ..RunConfig::default()
        },
        3,
    );
    let a = run_experiment(&cfg).unwrap().metrics.to_csv_string().unwrap();
    let b = run_experiment(&cfg).unwrap().metrics.to_csv_string().unwrap();
    let from_matrix = m
        .runs
        .iter()
        .find(|(l, s, _)| l == "care@0.2" && *s == 3)
        .map(|(_, _, o)| o.metrics.to_csv_string().unwrap());
    let same = a == b && from_matrix.as_deref() == Some(a.as_str());
    Outcome {
        pass: same,
        detail: format!("three executions of care seed 3, metrics.csv {} bytes, identical: {same}", a.len()),
    }
}

fn main() {
    let mut failed = 0;
    let mut run = |id: usize, name: &str, limit: Option<Duration>, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let mut outcome = f();
        let elapsed = t.elapsed();
        if let Some(limit) = limit {
            if elapsed > limit {
                outcome.pass = false;
                outcome.detail += &format!("; exceeded {}s limit", limit.as_secs());
            }
        }
        report(id, name, elapsed, &outcome);
        if !outcome.pass {
            failed += 1;
        }
    };
    run(1, "advantage normalization", Some(Duration::from_secs(1)), &mut c1_advantage_normalization);
    run(2, "class-wise CAG exactness", Some(Duration::from_secs(5)), &mut c2_classwise_exactness);
    run(3, "gradient-cosine identity", Some(Duration::from_secs(30)), &mut c3_lemma_identity);
    run(4, "CAG alignment bound", Some(Duration::from_secs(300)), &mut c4_alignment_bound);
    run(5, "gradient checks", Some(Duration::from_secs(60)), &mut c5_gradient_checks);

    let t = Instant::now();
    let matrix = Matrix::build();
    println!("run matrix: {} runs in {:.1}s", matrix.runs.len(), t.elapsed().as_secs_f64());

    run(6, "budget invariant", None, &mut || c6_budget(&matrix));
    run(7, "collapse replication", None, &mut || c7_collapse(&matrix));
    run(8, "supervision-value ordering", None, &mut || c8_oracle_vs_random(&matrix));
    run(9, "CARE efficacy", None, &mut || c9_care(&matrix));
    run(10, "budget monotonicity", None, &mut || c10_budget_monotonicity(&matrix));
    run(11, "replay and class balancing", None, &mut c11_replay_and_weights);
    run(12, "determinism", None, &mut || c12_determinism(&matrix));

    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all 12 criteria passed");
}
