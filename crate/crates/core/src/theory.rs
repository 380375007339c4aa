//! Numerical checks of how advantage errors bend the policy gradient.
//!
//! With score vectors `s_i = grad pi(a_i | x)` stacked as the columns of `S`,
//! the strict on-policy gradient is `g(A) = S A / G`, so
//! `cos(g(A), g(A_hat)) = cos(K^{1/2} A, K^{1/2} A_hat)` with `K = S^T S`.
//! On the mean-zero subspace with condition number `kappa`, the gradient cosine
//! is bounded by `1 - 2 / (4 kappa G / d^2 - (kappa - 1))` where
//! `d = ||A - A_hat||`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::PolicySnapshot;
use crate::grpo::{compute_advantages, RewardVector};
use crate::{rng, Error, Result};

/// Eigenvalues below this fraction of the largest are treated as zero when taking square roots.
pub const EIGEN_CLAMP: f64 = 1e-12;
/// A gradient smaller than this fraction of its terms' total size is treated as zero.
pub const GRADIENT_CANCEL_TOL: f64 = 1e-6;
/// Relative floor for the smallest restricted eigenvalue.
pub const SINGULAR_TOL: f64 = 1e-10;
const JACOBI_TOL: f64 = 1e-15;
const JACOBI_MAX_SWEEPS: usize = 60;
/// Slack allowed when checking the alignment bound.
pub const BOUND_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct TheoryInstance {
    /// Parameter-dim x G.
    pub s: DMatrix<f64>,
    pub a: DVector<f64>,
    pub a_hat: DVector<f64>,
    pub k: DMatrix<f64>,
}

impl TheoryInstance {
    pub fn group_size(&self) -> usize {
        self.a.len()
    }

    pub fn gap(&self) -> f64 {
        (&self.a - &self.a_hat).norm()
    }
}

/// Columns `grad_W pi(a_i | x)` for a linear softmax policy, flattened row-major.
pub fn score_matrix(policy: &PolicySnapshot, x: &[f64], answers: &[usize]) -> Result<DMatrix<f64>> {
    let c = policy.num_answers();
    let d = policy.feature_dim();
    if x.len() != d {
        return Err(Error::structural(format!("feature length {} != {d}", x.len())));
    }
    if let Some(&bad) = answers.iter().find(|&&a| a >= c) {
        return Err(Error::structural(format!("answer {bad} outside 0..{c}")));
    }
    let pi = policy.probs(x);
    let mut s = DMatrix::zeros(c * d, answers.len());
    for (col, &a) in answers.iter().enumerate() {
        for j in 0..c {
            let coeff = pi[a] * (if j == a { 1.0 } else { 0.0 } - pi[j]);
            for (t, &xt) in x.iter().enumerate() {
                s[(j * d + t, col)] = coeff * xt;
            }
        }
    }
    Ok(s)
}

fn advantages_strict(rewards: &RewardVector, which: &str) -> Result<DVector<f64>> {
    let adv = compute_advantages(rewards, 0.0)?;
    if adv.degenerate {
        return Err(Error::Degenerate(format!("{which} rewards are constant")));
    }
    Ok(DVector::from_vec(adv.values))
}

pub fn build_instance(
    policy: &PolicySnapshot,
    x: &[f64],
    answers: &[usize],
    rewards_true: &RewardVector,
    rewards_pseudo: &RewardVector,
) -> Result<TheoryInstance> {
    if rewards_true.len() != answers.len() || rewards_pseudo.len() != answers.len() {
        return Err(Error::structural("reward vectors must match the number of answers"));
    }
    let s = score_matrix(policy, x, answers)?;
    instance_from_scores(
        s,
        advantages_strict(rewards_true, "true")?,
        advantages_strict(rewards_pseudo, "pseudo")?,
    )
}

pub fn instance_from_scores(s: DMatrix<f64>, a: DVector<f64>, a_hat: DVector<f64>) -> Result<TheoryInstance> {
    if s.ncols() != a.len() || a.len() != a_hat.len() {
        return Err(Error::structural("score matrix and advantages disagree on G"));
    }
    let k = s.transpose() * &s;
    Ok(TheoryInstance { s, a, a_hat, k })
}

/// Symmetric square root via eigendecomposition.
pub fn sqrt_psd(k: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(k.clone());
    let floor = EIGEN_CLAMP * eig.eigenvalues.max().max(0.0);
    let roots = eig
        .eigenvalues
        .map(|l| if l <= floor { 0.0 } else { l.sqrt() });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `(S^T S)^{1/2}` taken from the singular values of `S`. Eigendecomposing the
/// Gram matrix instead squares small directions away.
pub fn gram_sqrt(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (sv, v_t) = tight_svd(s)?;
    Ok(v_t.transpose() * DMatrix::from_diagonal(&sv) * &v_t)
}

/// One-sided Jacobi SVD returning singular values and `V^T`. It keeps small
/// singular values to high relative accuracy, which matters for the
/// rank-deficient score matrices produced by repeated answers.
fn tight_svd(s: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = s.ncols();
    let mut a = s.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = a.column(p).norm_squared();
                let beta = a.column(q).norm_squared();
                let gamma = a.column(p).dot(&a.column(q));
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = c * t;
                for m in [&mut a, &mut v] {
                    for r in 0..m.nrows() {
                        let (x, y) = (m[(r, p)], m[(r, q)]);
                        m[(r, p)] = c * x - sn * y;
                        m[(r, q)] = sn * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            let sv = DVector::from_iterator(n, a.column_iter().map(|col| col.norm()));
            return Ok((sv, v.transpose()));
        }
    }
    Err(Error::Numeric("Jacobi SVD did not converge".into()))
}

fn cosine(u: &DVector<f64>, v: &DVector<f64>) -> Option<f64> {
    let nu = u.norm();
    let nv = v.norm();
    if nu == 0.0 || nv == 0.0 {
        return None;
    }
    Some((u.dot(v) / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub cos_grad: f64,
    pub cos_transformed: f64,
    pub abs_diff: f64,
}

/// Gradient cosine from explicit gradients versus the kernel-transformed
/// advantage cosine.
pub fn lemma1_check(inst: &TheoryInstance) -> Result<LemmaReport> {
    let g = inst.group_size() as f64;
    let grad = &inst.s * &inst.a / g;
    let grad_hat = &inst.s * &inst.a_hat / g;
    // Gradients that cancel down to roundoff carry no direction.
    let scale = |adv: &DVector<f64>| -> f64 {
        inst.s.column_iter().zip(adv.iter()).map(|(col, a)| col.norm() * a.abs()).sum::<f64>() / g
    };
    if grad.norm() <= GRADIENT_CANCEL_TOL * scale(&inst.a) || grad_hat.norm() <= GRADIENT_CANCEL_TOL * scale(&inst.a_hat) {
        return Err(Error::Degenerate("policy gradient cancels to zero".into()));
    }
    let cos_grad = cosine(&grad, &grad_hat).ok_or_else(|| Error::Degenerate("zero policy gradient".into()))?;
    let root = gram_sqrt(&inst.s)?;
    let cos_transformed = cosine(&(&root * &inst.a), &(&root * &inst.a_hat))
        .ok_or_else(|| Error::Degenerate("zero transformed advantage".into()))?;
    Ok(LemmaReport {
        cos_grad,
        cos_transformed,
        abs_diff: (cos_grad - cos_transformed).abs(),
    })
}

/// Orthonormal basis of `{v : 1^T v = 0}` (Helmert contrasts), `G x (G-1)`.
pub fn centered_basis(g: usize) -> DMatrix<f64> {
    let mut u = DMatrix::zeros(g, g.saturating_sub(1));
    for j in 1..g {
        let norm = ((j * (j + 1)) as f64).sqrt();
        for i in 0..j {
            u[(i, j - 1)] = 1.0 / norm;
        }
        u[(j, j - 1)] = -(j as f64) / norm;
    }
    u
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestrictedSpectrum {
    pub lambda_max: f64,
    pub lambda_min: f64,
    pub kappa: f64,
}

/// Extreme eigenvalues of `K` restricted to the mean-zero subspace.
pub fn restricted_condition_number(k: &DMatrix<f64>) -> Result<RestrictedSpectrum> {
    let g = k.nrows();
    if g < 2 || k.ncols() != g {
        return Err(Error::structural("kernel must be square with G >= 2"));
    }
    let u = centered_basis(g);
    let restricted = u.transpose() * k * &u;
    let eig = SymmetricEigen::new(restricted);
    spectrum(eig.eigenvalues.max(), eig.eigenvalues.min())
}

/// Same spectrum computed from the score factor, squaring singular values of `S U`.
pub fn restricted_condition_number_of_scores(s: &DMatrix<f64>) -> Result<RestrictedSpectrum> {
    let g = s.ncols();
    if g < 2 {
        return Err(Error::structural("kernel must be square with G >= 2"));
    }
    let projected = s * centered_basis(g);
    let (sv, _) = tight_svd(&projected)?;
    let lambda_max = sv.max().powi(2);
    // A short score matrix cannot span the whole mean-zero subspace.
    let lambda_min = if s.nrows() < g - 1 { 0.0 } else { sv.min().powi(2) };
    spectrum(lambda_max, lambda_min)
}

fn spectrum(lambda_max: f64, lambda_min: f64) -> Result<RestrictedSpectrum> {
    if lambda_min <= SINGULAR_TOL * lambda_max.max(f64::MIN_POSITIVE) {
        return Err(Error::SingularRestriction(lambda_min));
    }
    Ok(RestrictedSpectrum {
        lambda_max,
        lambda_min,
        kappa: lambda_max / lambda_min,
    })
}

/// `1 - 2 / (4 kappa G / d^2 - (kappa - 1))`.
pub fn alignment_bound(kappa: f64, g: usize, d: f64) -> Result<f64> {
    let d2 = d * d;
    bound_from_parts(kappa, d2, (4.0 * g as f64 - d2).max(0.0))
}

/// The bound rearranged as `1 - 2 d^2 / (kappa s^2 + d^2)` with `s^2 = 4G - d^2`.
/// Passing `s^2 = ||A + A_hat||^2` directly avoids cancellation near `A_hat = -A`.
fn bound_from_parts(kappa: f64, d2: f64, sum2: f64) -> Result<f64> {
    if !(d2 > 0.0) {
        return Err(Error::Degenerate("bound is undefined at d = 0".into()));
    }
    Ok(1.0 - 2.0 * d2 / (kappa * sum2 + d2))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub cos_grad: f64,
    pub cos_transformed: f64,
    pub d: f64,
    pub kappa: f64,
    pub bound: f64,
    pub satisfied: bool,
}

pub fn theorem1_check(inst: &TheoryInstance) -> Result<AlignmentReport> {
    let d = inst.gap();
    if d == 0.0 {
        return Err(Error::Degenerate("identical advantages".into()));
    }
    let lemma = lemma1_check(inst)?;
    let spectrum = restricted_condition_number_of_scores(&inst.s)?;
    // Unit-scaled advantages have ||A||^2 = G, so 4G - d^2 = ||A + A_hat||^2.
    let bound = bound_from_parts(spectrum.kappa, d * d, (&inst.a + &inst.a_hat).norm_squared())?;
    Ok(AlignmentReport {
        cos_grad: lemma.cos_grad,
        cos_transformed: lemma.cos_transformed,
        d,
        kappa: spectrum.kappa,
        bound,
        satisfied: lemma.cos_grad <= bound + BOUND_SLACK,
    })
}

/// How fuzzed score matrices are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    /// Linear softmax policy with distinct answers, which keeps `K` positive definite.
    Policy,
    /// Policy with answers drawn freely; repeated answers make `K` singular.
    PolicyRepeated,
    /// Gaussian columns in dimension `4G..=8G`.
    Gaussian,
    /// Alternates between the distinct-answer policy and Gaussian sources.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuzzConfig {
    pub instances: usize,
    pub min_group: usize,
    pub max_group: usize,
    pub source: ScoreSource,
    /// Keep every per-instance record (otherwise only the summary).
    pub keep_records: bool,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        Self {
            instances: 10_000,
            min_group: 2,
            max_group: 16,
            source: ScoreSource::Mixed,
            keep_records: true,
        }
    }
}

impl FuzzConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_group < 2 {
            return Err(Error::config("theory.min_group", "must be at least 2"));
        }
        if self.max_group < self.min_group {
            return Err(Error::config("theory.max_group", "must be at least min_group"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FuzzRecord {
    pub index: usize,
    pub seed: u64,
    pub group_size: usize,
    pub d: f64,
    pub kappa: f64,
    pub cos_grad: f64,
    pub cos_transformed: f64,
    pub bound: f64,
    pub satisfied: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FuzzSummary {
    pub instances: usize,
    pub checked: usize,
    pub skipped: usize,
    pub violations: usize,
    pub max_identity_gap: f64,
    /// Largest `cos_grad - bound` seen (negative when every instance is inside the bound).
    pub max_bound_excess: f64,
}

fn random_rewards<R: Rng>(rng: &mut R, g: usize) -> RewardVector {
    // Non-degenerate: at least one 0 and one 1.
    let ones = rng.random_range(1..g);
    let mut bits: Vec<bool> = (0..g).map(|i| i < ones).collect();
    bits.shuffle(rng);
    RewardVector::from_bools(bits)
}

/// Draws one instance; `None` when the draw is degenerate (identical advantage vectors).
pub fn random_instance(seed: u64, g: usize, source: ScoreSource) -> Result<Option<TheoryInstance>> {
    let mut rng = rng::rng_from(seed, &[g as u64]);
    let a = random_rewards(&mut rng, g);
    let a_hat = random_rewards(&mut rng, g);
    let source = match source {
        ScoreSource::Mixed if seed % 2 == 0 => ScoreSource::Policy,
        ScoreSource::Mixed => ScoreSource::Gaussian,
        s => s,
    };
    let inst = match source {
        ScoreSource::Gaussian => {
            let p = rng.random_range(4 * g..=8 * g);
            let s = DMatrix::from_fn(p, g, |_, _| StandardNormal.sample(&mut rng));
            instance_from_scores(
                s,
                advantages_strict(&a, "true")?,
                advantages_strict(&a_hat, "pseudo")?,
            )?
        }
        _ => {
            let c = g + 1 + rng.random_range(0..4);
            let d = rng.random_range(4..=8);
            let scale = rng.random_range(0.3..2.0);
            let weights: Vec<f64> = (0..c * d)
                .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            let policy = PolicySnapshot::new(c, d, weights)?;
            let mut x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            x[0] = 1.0;
            let answers: Vec<usize> = if source == ScoreSource::PolicyRepeated {
                (0..g).map(|_| rng.random_range(0..c)).collect()
            } else {
                let mut all: Vec<usize> = (0..c).collect();
                all.shuffle(&mut rng);
                all.truncate(g);
                all
            };
            build_instance(&policy, &x, &answers, &a, &a_hat)?
        }
    };
    if inst.a == inst.a_hat {
        return Ok(None);
    }
    Ok(Some(inst))
}

/// Fuzzes both the cosine identity and the alignment bound.
pub fn fuzz(config: &FuzzConfig, seed: u64) -> Result<(Vec<FuzzRecord>, FuzzSummary)> {
    config.validate()?;
    let mut summary = FuzzSummary {
        instances: config.instances,
        max_bound_excess: f64::NEG_INFINITY,
        ..FuzzSummary::default()
    };
    let mut records = Vec::new();
    let span = (config.max_group - config.min_group + 1) as u64;
    for index in 0..config.instances {
        let inst_seed = rng::derive_seed(seed, &[index as u64]);
        let g = config.min_group + (inst_seed % span) as usize;
        let Some(inst) = random_instance(inst_seed, g, config.source)? else {
            summary.skipped += 1;
            continue;
        };
        let report = match theorem1_check(&inst) {
            Ok(r) => r,
            Err(Error::Degenerate(_)) | Err(Error::SingularRestriction(_)) => {
                summary.skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        summary.checked += 1;
        summary.max_identity_gap = summary
            .max_identity_gap
            .max((report.cos_grad - report.cos_transformed).abs());
        summary.max_bound_excess = summary.max_bound_excess.max(report.cos_grad - report.bound);
        if !report.satisfied {
            summary.violations += 1;
        }
        if config.keep_records {
            records.push(FuzzRecord {
                index,
                seed: inst_seed,
                group_size: g,
                d: report.d,
                kappa: report.kappa,
                cos_grad: report.cos_grad,
                cos_transformed: report.cos_transformed,
                bound: report.bound,
                satisfied: report.satisfied,
            });
        }
    }
    Ok((records, summary))
}

/// Builds a kernel whose gradient cosine meets the bound with equality: the
/// larger eigenvalue `kappa` sits on the direction of `A + A_hat`.
pub fn tight_instance(a: &DVector<f64>, a_hat: &DVector<f64>, kappa: f64) -> Result<TheoryInstance> {
    let g = a.len();
    let root_g = (g as f64).sqrt();
    let u = a / root_g;
    let v = a_hat / root_g;
    let sum = &u + &v;
    let diff = &u - &v;
    if sum.norm() < 1e-12 || diff.norm() < 1e-12 {
        return Err(Error::Degenerate("A and A_hat are parallel".into()));
    }
    let p = &sum / sum.norm();
    let k = DMatrix::identity(g, g) + (kappa - 1.0) * &p * p.transpose();
    instance_from_scores(sqrt_psd(&k), a.clone(), a_hat.clone())
}
