//! Property tests over advantages, CAG and acquisition decisions.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rlavr_core::acquisition::{decide, is_partition, Candidate, DecisionContext};
use rlavr_core::cag::{cag_classwise, cag_exact, expected_cag, AdmissibleCounts};
use rlavr_core::classifier::NetDims;
use rlavr_core::env::{
    extract_features, majority_vote, pseudo_rewards, sample_group, verify, PolicySnapshot, Prompt, RolloutConfig,
    RolloutGroup,
};
use rlavr_core::grpo::compute_advantages;
use rlavr_core::{ClassifierConfig, ClassifierState, RewardVector, Strategy as Acquire};

fn binary_rewards() -> impl Strategy<Value = Vec<bool>> {
    (2usize..=32).prop_flat_map(|g| proptest::collection::vec(any::<bool>(), g))
}

fn group(answers: Vec<usize>, valid: Vec<bool>) -> RolloutGroup {
    let g = answers.len();
    RolloutGroup {
        prompt_id: 7,
        answers,
        probs: vec![0.25; g],
        valid,
        lengths: vec![0.5; g],
        policy_version: 0,
    }
}

proptest! {
    #[test]
    fn advantages_are_centered_and_unit_scaled(bits in binary_rewards()) {
        let g = bits.len();
        let r = RewardVector::from_bools(bits);
        let a = compute_advantages(&r, 0.0).unwrap();
        let ones = r.num_ones();
        if ones == 0 || ones == g {
            prop_assert!(a.degenerate);
            prop_assert!(a.values.iter().all(|&v| v == 0.0));
        } else {
            let mean = a.values.iter().sum::<f64>() / g as f64;
            let norm2: f64 = a.values.iter().map(|v| v * v).sum();
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((norm2 - g as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn advantages_are_permutation_equivariant(bits in binary_rewards(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let g = bits.len();
        let mut perm: Vec<usize> = (0..g).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = compute_advantages(&RewardVector::from_bools(bits.clone()), 1e-6).unwrap();
        let permuted = RewardVector::from_bools(perm.iter().map(|&i| bits[i]));
        let b = compute_advantages(&permuted, 1e-6).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            prop_assert!((b.values[j] - a.values[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_cag_matches_classwise_form(
        g in 2usize..=16,
        seed in any::<u64>(),
    ) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let answers: Vec<usize> = (0..g).map(|_| r.random_range(0..4)).collect();
        let valid: Vec<bool> = (0..g).map(|_| r.random_bool(0.85)).collect();
        let truth = r.random_range(0..4);
        let grp = group(answers, valid);
        let Ok(summary) = majority_vote(&grp) else { return Ok(()) };
        let gt = compute_advantages(&verify(&grp, truth), 0.0).unwrap();
        let ps = compute_advantages(&pseudo_rewards(&grp, &summary), 0.0).unwrap();
        let exact = cag_exact(&gt, &ps).unwrap().value;
        if summary.majority == truth {
            prop_assert_eq!(exact, 0.0);
        } else {
            let k = grp.answers.iter().zip(&grp.valid).filter(|(&a, &v)| v && a == truth).count();
            prop_assert!(AdmissibleCounts::new(g, summary.majority_size).unwrap().contains(k));
            let classwise = cag_classwise(g, summary.majority_size, k, 0.0).unwrap().value;
            prop_assert!((exact - classwise).abs() < 1e-9, "{} vs {}", exact, classwise);
        }
    }

    #[test]
    fn expected_cag_is_linear_in_the_distribution(
        g in 2usize..=16,
        m_frac in 0.0f64..1.0,
        w1 in proptest::collection::vec(0.0f64..1.0, 17),
        w2 in proptest::collection::vec(0.0f64..1.0, 17),
        t in 0.0f64..=1.0,
    ) {
        let m = 1 + ((g - 1) as f64 * m_frac) as usize;
        let adm = AdmissibleCounts::new(g, m).unwrap();
        let mask = adm.mask();
        let normalize = |w: &[f64]| -> Option<Vec<f64>> {
            let v: Vec<f64> = (0..=g).map(|k| if mask[k] { w[k] } else { 0.0 }).collect();
            let s: f64 = v.iter().sum();
            (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
        };
        let (Some(d1), Some(d2)) = (normalize(&w1), normalize(&w2)) else { return Ok(()) };
        let mix: Vec<f64> = d1.iter().zip(&d2).map(|(a, b)| t * a + (1.0 - t) * b).collect();
        let e1 = expected_cag(&d1, g, m, 0.0).unwrap().value;
        let e2 = expected_cag(&d2, g, m, 0.0).unwrap().value;
        let em = expected_cag(&mix, g, m, 0.0).unwrap().value;
        prop_assert!((em - (t * e1 + (1.0 - t) * e2)).abs() < 1e-9);

        // A point mass reproduces the class-wise value.
        let k = (0..=g).find(|&k| mask[k]).unwrap();
        let mut point = vec![0.0; g + 1];
        point[k] = 1.0;
        let ek = expected_cag(&point, g, m, 0.0).unwrap().value;
        prop_assert_eq!(ek, cag_classwise(g, m, k, 0.0).unwrap().value);
    }
}

fn batch(seed: u64, n: usize, g: usize) -> (Vec<Candidate>, Vec<usize>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (c, d) = (4, 3);
    let weights: Vec<f64> = (0..c * d).map(|_| r.random_range(-2.0..2.0)).collect();
    let policy = PolicySnapshot::new(c, d, weights).unwrap();
    let cfg = RolloutConfig {
        group_size: g,
        invalid_prob: 0.1,
        ..RolloutConfig::default()
    };
    let mut out = Vec::new();
    let mut truths = Vec::new();
    for id in 0..n {
        let prompt = Prompt {
            id: 10 * id + 3,
            features: (0..d).map(|_| r.random_range(-1.0..1.0)).collect(),
            truth: r.random_range(0..c),
        };
        let grp = sample_group(&policy, &prompt, &cfg, r.random()).unwrap();
        let summary = majority_vote(&grp).ok();
        let features = extract_features(&prompt, &grp, summary.as_ref());
        truths.push(prompt.truth);
        out.push(Candidate {
            group: grp,
            summary,
            features,
            cached: r.random_bool(0.2),
        });
    }
    (out, truths)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_strategy_partitions_the_batch(
        seed in any::<u64>(),
        n in 1usize..24,
        g in 2usize..=8,
        quota in 0usize..10,
        warm in any::<bool>(),
        p2 in 0.0f64..=1.0,
    ) {
        let (cands, truths) = batch(seed, n, g);
        let cfg = ClassifierConfig {
            dims: NetDims { prompt_hidden: 4, response_hidden: 4, response_out: 4, head_hidden: 4 },
            ..ClassifierConfig::default()
        };
        let cls = ClassifierState::new(cfg, 3, g, &mut ChaCha8Rng::seed_from_u64(seed ^ 1)).unwrap();
        let ids: Vec<usize> = cands.iter().map(|c| c.prompt_id()).collect();
        for strategy in Acquire::ALL {
            let ctx = DecisionContext {
                quota,
                classifiers: Some(&cls),
                truths: Some(&truths),
                p2,
                in_warmup: warm,
                seed,
                oracle_wrong_only: false,
            };
            let d = decide(strategy, &cands, &ctx).unwrap();
            prop_assert!(is_partition(&d, &ids), "{strategy} is not a partition");
            if strategy.is_budgeted() {
                prop_assert!(d.charged.len() <= quota, "{strategy} charged {} over quota {quota}", d.charged.len());
            }
        }
    }
}
