//! Two-encoder MLP shared by both acquisition stages.
//!
//! ```text
//! global  [prompt_repr; valid_ratio; cluster_dist] -> Dense -> ReLU            (prompt_hidden)
//! row g   [prob; norm_length; rank_onehot]      -> Dense -> ReLU -> Dense -> ReLU (response_out)
//! pooled  mean over rows
//! head    [prompt; pooled] -> Dense -> ReLU -> Dense                         (out_dim)
//! aux     [prompt; row g]  -> Dense                                          (1 logit per row)
//! ```
//!
//! Parameters live in one flat buffer so the optimizer, gradient checks and
//! checkpoints treat them uniformly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cag::AdmissibleCounts;
use crate::env::ClassifierFeatures;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetDims {
    pub prompt_hidden: usize,
    pub response_hidden: usize,
    pub response_out: usize,
    pub head_hidden: usize,
}

impl Default for NetDims {
    fn default() -> Self {
        Self {
            prompt_hidden: 128,
            response_hidden: 64,
            response_out: 512,
            head_hidden: 256,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    /// One reliability logit plus a per-response correctness head.
    Reliability,
    /// `G + 1` count logits.
    CountDistribution,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Tensor {
    rows: usize,
    cols: usize,
    offset: usize,
}

impl Tensor {
    fn len(&self) -> usize {
        self.rows * self.cols
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

const TENSOR_NAMES: [&str; 12] = [
    "prompt.weight",
    "prompt.bias",
    "response1.weight",
    "response1.bias",
    "response2.weight",
    "response2.bias",
    "head1.weight",
    "head1.bias",
    "head2.weight",
    "head2.bias",
    "aux.weight",
    "aux.bias",
];

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    tensors: [Tensor; 12],
    total: usize,
}

// Indices into `Layout::tensors`.
const PW: usize = 0;
const PB: usize = 1;
const R1W: usize = 2;
const R1B: usize = 3;
const R2W: usize = 4;
const R2B: usize = 5;
const H1W: usize = 6;
const H1B: usize = 7;
const H2W: usize = 8;
const H2B: usize = 9;
const AW: usize = 10;
const AB: usize = 11;

impl Layout {
    fn new(dims: &NetDims, global_dim: usize, row_dim: usize, out_dim: usize, aux: bool) -> Self {
        let concat = dims.prompt_hidden + dims.response_out;
        let shapes = [
            (dims.prompt_hidden, global_dim),
            (dims.prompt_hidden, 1),
            (dims.response_hidden, row_dim),
            (dims.response_hidden, 1),
            (dims.response_out, dims.response_hidden),
            (dims.response_out, 1),
            (dims.head_hidden, concat),
            (dims.head_hidden, 1),
            (out_dim, dims.head_hidden),
            (out_dim, 1),
            (if aux { 1 } else { 0 }, concat),
            (if aux { 1 } else { 0 }, 1),
        ];
        let mut offset = 0;
        let tensors = shapes.map(|(rows, cols)| {
            let t = Tensor { rows, cols, offset };
            offset += rows * cols;
            t
        });
        Self {
            tensors,
            total: offset,
        }
    }
}

/// Parameters of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    kind: StageKind,
    dims: NetDims,
    global_dim: usize,
    row_dim: usize,
    group_size: usize,
    layout: Layout,
    pub data: Vec<f64>,
}

/// Serialized form: a shape header followed by named tensors.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    kind: StageKind,
    group_size: usize,
    global_dim: usize,
    row_dim: usize,
    dims: NetDims,
    tensors: Vec<CheckpointTensor>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointTensor {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

const CHECKPOINT_FORMAT: &str = "rlavr-mlp/1";

impl MlpParams {
    /// Fan-in uniform initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero biases.
    pub fn new<R: Rng>(
        kind: StageKind,
        dims: NetDims,
        feature_dim: usize,
        group_size: usize,
        rng: &mut R,
    ) -> Self {
        let global_dim = ClassifierFeatures::global_dim(feature_dim, group_size);
        let row_dim = ClassifierFeatures::row_dim(group_size);
        let (out_dim, aux) = match kind {
            StageKind::Reliability => (1, true),
            StageKind::CountDistribution => (group_size + 1, false),
        };
        let layout = Layout::new(&dims, global_dim, row_dim, out_dim, aux);
        let mut data = vec![0.0; layout.total];
        for idx in [PW, R1W, R2W, H1W, H2W, AW] {
            let t = layout.tensors[idx];
            let bound = 1.0 / (t.cols as f64).sqrt();
            for w in &mut data[t.range()] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Self {
            kind,
            dims,
            global_dim,
            row_dim,
            group_size,
            layout,
            data,
        }
    }

    pub fn kind(&self) -> StageKind {
        self.kind
    }

    pub fn dims(&self) -> NetDims {
        self.dims
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn out_dim(&self) -> usize {
        self.layout.tensors[H2W].rows
    }

    /// Zeroes the output layers (head and auxiliary), so every logit is 0.
    pub fn zero_output_layers(&mut self) {
        for idx in [H2W, H2B, AW, AB] {
            let r = self.layout.tensors[idx].range();
            self.data[r].fill(0.0);
        }
    }

    fn slice(&self, idx: usize) -> &[f64] {
        &self.data[self.layout.tensors[idx].range()]
    }

    fn check_input(&self, feats: &ClassifierFeatures) -> Result<()> {
        let gd = feats.prompt_repr.len() + 1 + feats.cluster_dist.len();
        if gd != self.global_dim || feats.group_size() != self.group_size {
            return Err(Error::structural(format!(
                "classifier expects global dim {} and {} responses, got {} and {}",
                self.global_dim,
                self.group_size,
                gd,
                feats.group_size()
            )));
        }
        if feats
            .response_feats
            .iter()
            .any(|r| 2 + r.rank_onehot.len() != self.row_dim)
        {
            return Err(Error::structural("response feature width mismatch"));
        }
        Ok(())
    }

    fn forward_cached(&self, feats: &ClassifierFeatures) -> Result<Cache> {
        self.check_input(feats)?;
        let t = &self.layout.tensors;
        let xg = feats.global_input();
        let mut hp = vec![0.0; self.dims.prompt_hidden];
        dense(self.slice(PW), self.slice(PB), &xg, &mut hp);
        relu(&mut hp);

        let g = self.group_size;
        let ro = self.dims.response_out;
        let mut rows = Vec::with_capacity(g);
        let mut pooled = vec![0.0; ro];
        for r in 0..g {
            let x = feats.row_input(r);
            let mut u = vec![0.0; self.dims.response_hidden];
            dense(self.slice(R1W), self.slice(R1B), &x, &mut u);
            relu(&mut u);
            let mut v = vec![0.0; ro];
            dense(self.slice(R2W), self.slice(R2B), &u, &mut v);
            relu(&mut v);
            axpy(1.0 / g as f64, &v, &mut pooled);
            rows.push(RowCache { x, u, v });
        }

        let mut hcat = Vec::with_capacity(hp.len() + ro);
        hcat.extend_from_slice(&hp);
        hcat.extend_from_slice(&pooled);
        let mut k = vec![0.0; self.dims.head_hidden];
        dense(self.slice(H1W), self.slice(H1B), &hcat, &mut k);
        relu(&mut k);
        let mut out = vec![0.0; t[H2W].rows];
        dense(self.slice(H2W), self.slice(H2B), &k, &mut out);

        let aux_logits = if t[AW].rows == 1 {
            let wa = self.slice(AW);
            let ba = self.slice(AB)[0];
            let (wa_p, wa_r) = wa.split_at(hp.len());
            let base = dot(wa_p, &hp) + ba;
            rows.iter().map(|row| base + dot(wa_r, &row.v)).collect()
        } else {
            Vec::new()
        };

        Ok(Cache {
            xg,
            hp,
            rows,
            hcat,
            k,
            out,
            aux_logits,
        })
    }

    /// Accumulates parameter gradients for one sample given output-logit and
    /// auxiliary-logit gradients.
    fn backward(&self, cache: &Cache, d_out: &[f64], d_aux: &[f64], grad: &mut [f64]) {
        let t = self.layout.tensors;
        let ph = self.dims.prompt_hidden;
        let hh = self.dims.head_hidden;

        // head2
        outer_acc(d_out, &cache.k, &mut grad[t[H2W].range()]);
        axpy(1.0, d_out, &mut grad[t[H2B].range()]);
        let mut dk = vec![0.0; hh];
        mat_t_vec_acc(self.slice(H2W), hh, d_out, &mut dk);
        relu_mask(&cache.k, &mut dk);

        // head1
        outer_acc(&dk, &cache.hcat, &mut grad[t[H1W].range()]);
        axpy(1.0, &dk, &mut grad[t[H1B].range()]);
        let mut dhcat = vec![0.0; cache.hcat.len()];
        mat_t_vec_acc(self.slice(H1W), cache.hcat.len(), &dk, &mut dhcat);
        let (dhp_head, dpooled) = dhcat.split_at(ph);
        let mut dhp = dhp_head.to_vec();

        let g = self.group_size;
        let inv_g = 1.0 / g as f64;
        let wa = if t[AW].rows == 1 { Some(self.slice(AW).to_vec()) } else { None };
        let mut dv = vec![0.0; self.dims.response_out];
        for (r, row) in cache.rows.iter().enumerate() {
            dv.iter_mut().zip(dpooled).for_each(|(d, p)| *d = p * inv_g);
            if let Some(wa) = &wa {
                let da = d_aux[r];
                if da != 0.0 {
                    let aw_range = t[AW].range();
                    let gw = &mut grad[aw_range];
                    axpy(da, &cache.hp, &mut gw[..ph]);
                    axpy(da, &row.v, &mut gw[ph..]);
                    grad[t[AB].offset] += da;
                    axpy(da, &wa[..ph], &mut dhp);
                    axpy(da, &wa[ph..], &mut dv);
                }
            }
            relu_mask(&row.v, &mut dv);
            outer_acc(&dv, &row.u, &mut grad[t[R2W].range()]);
            axpy(1.0, &dv, &mut grad[t[R2B].range()]);
            let mut du = vec![0.0; row.u.len()];
            mat_t_vec_acc(self.slice(R2W), row.u.len(), &dv, &mut du);
            relu_mask(&row.u, &mut du);
            outer_acc(&du, &row.x, &mut grad[t[R1W].range()]);
            axpy(1.0, &du, &mut grad[t[R1B].range()]);
        }

        relu_mask(&cache.hp, &mut dhp);
        outer_acc(&dhp, &cache.xg, &mut grad[t[PW].range()]);
        axpy(1.0, &dhp, &mut grad[t[PB].range()]);
    }

    pub fn to_json(&self) -> Result<String> {
        let tensors = TENSOR_NAMES
            .iter()
            .zip(self.layout.tensors.iter())
            .filter(|(_, t)| t.len() > 0)
            .map(|(name, t)| CheckpointTensor {
                name: name.to_string(),
                shape: [t.rows, t.cols],
                data: self.data[t.range()].to_vec(),
            })
            .collect();
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            kind: self.kind,
            group_size: self.group_size,
            global_dim: self.global_dim,
            row_dim: self.row_dim,
            dims: self.dims,
            tensors,
        };
        Ok(serde_json::to_string(&ckpt)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::structural(format!("unknown checkpoint format {}", ckpt.format)));
        }
        let (out_dim, aux) = match ckpt.kind {
            StageKind::Reliability => (1, true),
            StageKind::CountDistribution => (ckpt.group_size + 1, false),
        };
        let layout = Layout::new(&ckpt.dims, ckpt.global_dim, ckpt.row_dim, out_dim, aux);
        let mut data = vec![0.0; layout.total];
        for ct in &ckpt.tensors {
            let idx = TENSOR_NAMES
                .iter()
                .position(|n| *n == ct.name)
                .ok_or_else(|| Error::structural(format!("unknown tensor {}", ct.name)))?;
            let t = layout.tensors[idx];
            if ct.shape != [t.rows, t.cols] || ct.data.len() != t.len() {
                return Err(Error::structural(format!("tensor {} has the wrong shape", ct.name)));
            }
            data[t.range()].copy_from_slice(&ct.data);
        }
        Ok(Self {
            kind: ckpt.kind,
            dims: ckpt.dims,
            global_dim: ckpt.global_dim,
            row_dim: ckpt.row_dim,
            group_size: ckpt.group_size,
            layout,
            data,
        })
    }
}

struct RowCache {
    x: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
}

struct Cache {
    xg: Vec<f64>,
    hp: Vec<f64>,
    rows: Vec<RowCache>,
    hcat: Vec<f64>,
    k: Vec<f64>,
    out: Vec<f64>,
    aux_logits: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn dense(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for ((o, row), bias) in out.iter_mut().zip(w.chunks_exact(cols)).zip(b) {
        *o = dot(row, x) + bias;
    }
}

fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn relu_mask(activation: &[f64], grad: &mut [f64]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn outer_acc(rows: &[f64], cols: &[f64], out: &mut [f64]) {
    for (&r, chunk) in rows.iter().zip(out.chunks_exact_mut(cols.len())) {
        if r != 0.0 {
            axpy(r, cols, chunk);
        }
    }
}

/// `out += W^T d` for row-major `W` with `cols` columns.
fn mat_t_vec_acc(w: &[f64], cols: usize, d: &[f64], out: &mut [f64]) {
    for (&di, row) in d.iter().zip(w.chunks_exact(cols)) {
        if di != 0.0 {
            axpy(di, row, out);
        }
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of logit `z` against label `y`, computed stably.
fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Reliability `c` and per-response correctness probabilities.
pub fn stage1_forward(params: &MlpParams, feats: &ClassifierFeatures) -> Result<(f64, Vec<f64>)> {
    if params.kind != StageKind::Reliability {
        return Err(Error::structural("stage-1 forward needs reliability parameters"));
    }
    let cache = params.forward_cached(feats)?;
    Ok((
        sigmoid(cache.out[0]),
        cache.aux_logits.iter().map(|&z| sigmoid(z)).collect(),
    ))
}

fn masked_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&z, _)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&z, &m)| if m { (z - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    probs
}

/// Distribution over count classes `0..=G`; classes outside `admissible` get exactly 0.
pub fn stage2_forward(
    params: &MlpParams,
    feats: &ClassifierFeatures,
    admissible: &AdmissibleCounts,
) -> Result<Vec<f64>> {
    if params.kind != StageKind::CountDistribution {
        return Err(Error::structural("stage-2 forward needs count-distribution parameters"));
    }
    if admissible.counts.is_empty() {
        return Err(Error::structural("empty admissible count set"));
    }
    if admissible.group_size != params.group_size {
        return Err(Error::structural("admissible set group size mismatch"));
    }
    let cache = params.forward_cached(feats)?;
    Ok(masked_softmax(&cache.out, &admissible.mask()))
}

/// An annotated prompt used to train the classifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub features: ClassifierFeatures,
    /// 0 when the group had no valid rollouts.
    pub majority_size: usize,
    /// Vote equals the ground truth.
    pub reliable: bool,
    /// Correct responses outside a wrong majority; `None` when the vote was right.
    pub count_label: Option<usize>,
    pub response_correct: Vec<bool>,
}

/// Per-class loss weights; absent classes carry weight 0.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(num_classes: usize) -> Self {
        Self {
            weights: vec![1.0; num_classes],
        }
    }
}

pub const CLASS_WEIGHT_MIN: f64 = 0.25;
pub const CLASS_WEIGHT_MAX: f64 = 4.0;

/// `w_c = clip((mean_freq / freq_c)^0.5, 0.25, 4.0)` from batch label frequencies.
/// The mean is taken over classes present in the batch.
pub fn class_balanced_weights(labels: &[usize], num_classes: usize) -> ClassWeights {
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        counts[l] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count();
    if present == 0 {
        return ClassWeights {
            weights: vec![0.0; num_classes],
        };
    }
    let n = labels.len() as f64;
    let mean_freq = 1.0 / present as f64;
    ClassWeights {
        weights: counts
            .iter()
            .map(|&c| {
                if c == 0 {
                    0.0
                } else {
                    (mean_freq / (c as f64 / n))
                        .sqrt()
                        .clamp(CLASS_WEIGHT_MIN, CLASS_WEIGHT_MAX)
                }
            })
            .collect(),
    }
}

/// Class-weighted reliability cross-entropy plus `lambda_aux` times the mean
/// per-response correctness cross-entropy, with its exact gradient.
pub fn stage1_loss(
    params: &MlpParams,
    batch: &[LabeledSample],
    lambda_aux: f64,
    class_weights: &ClassWeights,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::structural("empty classifier batch"));
    }
    if params.kind != StageKind::Reliability {
        return Err(Error::structural("stage-1 loss needs reliability parameters"));
    }
    let n = batch.len() as f64;
    let mut grad = vec![0.0; params.num_params()];
    let mut loss = 0.0;
    for sample in batch {
        let cache = params.forward_cached(&sample.features)?;
        let y = if sample.reliable { 1.0 } else { 0.0 };
        let w = class_weights.weights[sample.reliable as usize];
        let z = cache.out[0];
        loss += w * bce_with_logit(z, y) / n;
        let d_out = [w * (sigmoid(z) - y) / n];

        let g = cache.aux_logits.len() as f64;
        let mut d_aux = vec![0.0; cache.aux_logits.len()];
        if lambda_aux != 0.0 {
            for ((d, &za), &correct) in d_aux
                .iter_mut()
                .zip(&cache.aux_logits)
                .zip(&sample.response_correct)
            {
                let ya = if correct { 1.0 } else { 0.0 };
                loss += lambda_aux * bce_with_logit(za, ya) / (n * g);
                *d = lambda_aux * (sigmoid(za) - ya) / (n * g);
            }
        }
        params.backward(&cache, &d_out, &d_aux, &mut grad);
    }
    Ok((loss, grad))
}

/// Class-weighted masked cross-entropy over count classes.
pub fn stage2_loss(
    params: &MlpParams,
    batch: &[LabeledSample],
    class_weights: &ClassWeights,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::structural("empty classifier batch"));
    }
    if params.kind != StageKind::CountDistribution {
        return Err(Error::structural("stage-2 loss needs count-distribution parameters"));
    }
    let n = batch.len() as f64;
    let mut grad = vec![0.0; params.num_params()];
    let mut loss = 0.0;
    for sample in batch {
        let k = sample
            .count_label
            .ok_or_else(|| Error::structural("stage-2 sample without a count label"))?;
        let admissible = AdmissibleCounts::new(params.group_size, sample.majority_size)?;
        if !admissible.contains(k) {
            return Err(Error::structural(format!("count label {k} is not admissible")));
        }
        let cache = params.forward_cached(&sample.features)?;
        let mask = admissible.mask();
        let probs = masked_softmax(&cache.out, &mask);
        let w = class_weights.weights[k];
        loss -= w * probs[k].ln() / n;
        let d_out: Vec<f64> = probs
            .iter()
            .zip(&mask)
            .enumerate()
            .map(|(j, (&p, &m))| {
                if !m {
                    0.0
                } else {
                    let target = if j == k { 1.0 } else { 0.0 };
                    w * (p - target) / n
                }
            })
            .collect();
        params.backward(&cache, &d_out, &[], &mut grad);
    }
    Ok((loss, grad))
}
