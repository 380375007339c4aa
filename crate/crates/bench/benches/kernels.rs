use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use rlavr_bench::{binary_rewards, labeled_samples, rng, rollout};
use rlavr_core::cag::{cag_classwise, cag_exact, AdmissibleCounts};
use rlavr_core::classifier::{
    stage1_forward, stage1_loss, stage2_forward, stage2_loss, ClassWeights, MlpParams, NetDims, StageKind,
};
use rlavr_core::grpo::{compute_advantages, grpo_surrogate_and_gradient};
use rlavr_core::theory::{random_instance, theorem1_check, ScoreSource};
use rlavr_core::trainer::run_experiment;
use rlavr_core::{ClipConfig, RunConfig};

fn advantages(c: &mut Criterion) {
    let mut group = c.benchmark_group("advantages");
    for g in [8usize, 32] {
        let r = binary_rewards(&mut rng(1), g);
        group.bench_with_input(BenchmarkId::from_parameter(g), &r, |b, r| {
            b.iter(|| compute_advantages(black_box(r), 1e-6).unwrap())
        });
    }
    group.finish();
}

fn cag(c: &mut Criterion) {
    let mut r = rng(2);
    let gt = compute_advantages(&binary_rewards(&mut r, 8), 0.0).unwrap();
    let ps = compute_advantages(&binary_rewards(&mut r, 8), 0.0).unwrap();
    c.bench_function("cag/exact_g8", |b| b.iter(|| cag_exact(black_box(&gt), black_box(&ps)).unwrap()));
    c.bench_function("cag/classwise_g8", |b| {
        b.iter(|| cag_classwise(black_box(8), black_box(3), black_box(2), 0.0).unwrap())
    });
}

fn surrogate(c: &mut Criterion) {
    let (policy, prompt, group) = rollout(3, 4, 8, 8);
    let adv: Vec<f64> = (0..8).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let clip = ClipConfig::default();
    c.bench_function("grpo/surrogate_and_gradient", |b| {
        b.iter(|| grpo_surrogate_and_gradient(&policy, &prompt.features, &group, black_box(&adv), &clip, None).unwrap())
    });
}

fn classifier(c: &mut Criterion) {
    let (d, g) = (8, 8);
    let samples = labeled_samples(4, 32, d, g);
    let dims = NetDims::default();
    let p1 = MlpParams::new(StageKind::Reliability, dims, d, g, &mut rng(5));
    let p2 = MlpParams::new(StageKind::CountDistribution, dims, d, g, &mut rng(6));
    let feats = &samples[0].features;
    let adm = AdmissibleCounts::unvoted(g);
    c.bench_function("mlp/stage1_forward", |b| b.iter(|| stage1_forward(&p1, black_box(feats)).unwrap()));
    c.bench_function("mlp/stage2_forward", |b| b.iter(|| stage2_forward(&p2, black_box(feats), &adm).unwrap()));

    let w1 = ClassWeights::uniform(2);
    c.bench_function("mlp/stage1_loss_batch32", |b| {
        b.iter(|| stage1_loss(&p1, black_box(&samples), 1.5, &w1).unwrap())
    });
    let wrong: Vec<_> = samples.iter().filter(|s| !s.reliable).cloned().collect();
    let w2 = ClassWeights::uniform(g + 1);
    c.bench_function("mlp/stage2_loss_wrong_votes", |b| {
        b.iter(|| stage2_loss(&p2, black_box(&wrong), &w2).unwrap())
    });
}

fn theory(c: &mut Criterion) {
    let inst = (0..)
        .find_map(|s| random_instance(s, 8, ScoreSource::Policy).unwrap())
        .unwrap();
    c.bench_function("theory/alignment_check_g8", |b| b.iter(|| theorem1_check(black_box(&inst))));
}

fn training(c: &mut Criterion) {
    let mut cfg = RunConfig {
        max_steps: Some(1),
        ..RunConfig::default()
    };
    cfg.env.train_size = 256;
    cfg.env.eval_size = 64;
    let mut group = c.benchmark_group("trainer");
    group.sample_size(10);
    group.bench_function("care_single_step", |b| b.iter(|| run_experiment(black_box(&cfg)).unwrap()));
    group.finish();
}

criterion_group!(benches, advantages, cag, surrogate, classifier, theory, training);
criterion_main!(benches);
