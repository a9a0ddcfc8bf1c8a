//! Network building blocks: parameter bundles, the Conv4 family, batch norm,
//! linear heads and the Adam optimizer.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Array, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Named parameter arrays in a fixed order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamBundle {
    pub entries: Vec<(String, Array)>,
}

impl ParamBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, a: Array) {
        self.entries.push((name.into(), a));
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.numel()).sum()
    }

    /// Trainable leaves, one per entry.
    pub fn to_params(&self) -> TensorParams {
        TensorParams {
            names: self.names(),
            tensors: self.entries.iter().map(|(_, a)| Tensor::param(a.clone())).collect(),
        }
    }

    pub fn to_constants(&self) -> TensorParams {
        TensorParams {
            names: self.names(),
            tensors: self
                .entries
                .iter()
                .map(|(_, a)| Tensor::constant(a.clone()))
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamBundle) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((n1, a1), (n2, a2))| n1 == n2 && a1.shape == a2.shape)
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, a)| a.all_finite())
    }
}

/// Parameters as graph tensors, addressable by name.
#[derive(Clone, Debug)]
pub struct TensorParams {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl TensorParams {
    pub fn get(&self, name: &str) -> &Tensor {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        &self.tensors[i]
    }

    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> TensorParams {
        assert_eq!(tensors.len(), self.tensors.len());
        TensorParams {
            names: self.names.clone(),
            tensors,
        }
    }

    pub fn to_bundle(&self) -> ParamBundle {
        ParamBundle {
            entries: self
                .names
                .iter()
                .cloned()
                .zip(self.tensors.iter().map(Tensor::to_array))
                .collect(),
        }
    }
}

/// Stored per-channel statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn identity(channels: usize) -> Self {
        BnStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Conv4,
    Conv4Small,
}

impl Architecture {
    pub fn filters(self) -> usize {
        match self {
            Architecture::Conv4 => 32,
            Architecture::Conv4Small => 16,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "conv4" => Ok(Architecture::Conv4),
            "conv4_small" => Ok(Architecture::Conv4Small),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Conv4 => "conv4",
            Architecture::Conv4Small => "conv4_small",
        }
    }
}

pub const ENCODER_BLOCKS: usize = 4;

/// Shape of a Conv4 encoder: four (conv 3x3, BN, ReLU, 2x2 max-pool) blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub architecture: Architecture,
    pub in_channels: usize,
    pub image_size: usize,
}

impl EncoderSpec {
    pub fn new(architecture: Architecture, in_channels: usize, image_size: usize) -> Self {
        EncoderSpec {
            architecture,
            in_channels,
            image_size,
        }
    }

    pub fn filters(&self) -> usize {
        self.architecture.filters()
    }

    /// Spatial side after `blocks` pooling stages.
    pub fn side_after(&self, blocks: usize) -> usize {
        (0..blocks).fold(self.image_size, |s, _| s / 2)
    }

    pub fn embedding_dim(&self) -> usize {
        let s = self.side_after(ENCODER_BLOCKS);
        self.filters() * s * s
    }

    pub fn validate(&self) -> Result<()> {
        if self.side_after(ENCODER_BLOCKS) == 0 {
            return Err(Error::Config(format!(
                "image size {} is too small for four pooling stages",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn init(&self, rng: &mut impl Rng) -> ParamBundle {
        let f = self.filters();
        let mut b = ParamBundle::new();
        let mut cin = self.in_channels;
        for i in 0..ENCODER_BLOCKS {
            b.push(format!("block{i}.conv.weight"), he_normal(&[f, 9 * cin], 9 * cin, rng));
            b.push(format!("block{i}.bn.gamma"), Array::full(&[f], 1.0));
            b.push(format!("block{i}.bn.beta"), Array::zeros(&[f]));
            cin = f;
        }
        b
    }

    /// Runs block `i` on NHWC input. Returns (output, pre-BN activation).
    pub fn block(&self, p: &TensorParams, i: usize, x: &Tensor, bn: BnUse<'_>) -> (Tensor, Tensor) {
        let pre = x.conv2d(p.get(&format!("block{i}.conv.weight")), None, 3, 1);
        let gamma = p.get(&format!("block{i}.bn.gamma"));
        let beta = p.get(&format!("block{i}.bn.beta"));
        let y = match bn {
            BnUse::Batch => batch_norm(&pre, gamma, beta).0,
            BnUse::Running(stats) => batch_norm_eval(&pre, &stats[i], gamma, beta),
        };
        (y.relu().max_pool2(), pre)
    }

    /// Runs blocks `from..ENCODER_BLOCKS`, returning NHWC features.
    pub fn forward_from(&self, p: &TensorParams, from: usize, x: &Tensor, bn: BnUse<'_>) -> Tensor {
        (from..ENCODER_BLOCKS).fold(x.clone(), |h, i| self.block(p, i, &h, bn).0)
    }

    /// Full encoder on NCHW images, flattened to `[batch, embedding_dim]`.
    pub fn embed(&self, p: &TensorParams, x_nchw: &Tensor, bn: BnUse<'_>) -> Tensor {
        let h = self.forward_from(p, 0, &nchw_to_nhwc(x_nchw), bn);
        flatten(&h)
    }

    /// Encoder pass that also returns every block's pre-BN activation.
    pub fn embed_with_taps(
        &self,
        p: &TensorParams,
        x_nchw: &Tensor,
        bn: BnUse<'_>,
    ) -> (Tensor, Vec<Tensor>) {
        let mut h = nchw_to_nhwc(x_nchw);
        let mut taps = Vec::with_capacity(ENCODER_BLOCKS);
        for i in 0..ENCODER_BLOCKS {
            let (out, pre) = self.block(p, i, &h, bn);
            taps.push(pre);
            h = out;
        }
        (flatten(&h), taps)
    }
}

/// Which normalisation statistics a forward pass uses.
#[derive(Clone, Copy, Debug)]
pub enum BnUse<'a> {
    Batch,
    Running(&'a [BnStats]),
}

pub fn flatten(x: &Tensor) -> Tensor {
    let b = x.shape()[0];
    let rest = x.numel() / b.max(1);
    x.reshape(&[b, rest])
}

pub fn nchw_to_nhwc(x: &Tensor) -> Tensor {
    x.permute(&[0, 2, 3, 1])
}

pub fn nhwc_to_nchw(x: &Tensor) -> Tensor {
    x.permute(&[0, 3, 1, 2])
}

/// Per-channel mean and biased variance over all but the last axis.
pub fn channel_stats(x: &Tensor) -> (Tensor, Tensor) {
    let c = *x.shape().last().expect("channel_stats on scalar");
    let n = (x.numel() / c) as f64;
    let mean = x.sum_to(&[c]).mul_scalar(1.0 / n);
    let centered = x.sub(&mean);
    let var = centered.square().sum_to(&[c]).mul_scalar(1.0 / n);
    (mean, var)
}

/// Training-mode batch norm on channel-last input. Returns (output, mean, biased var).
pub fn batch_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (mean, var) = channel_stats(x);
    let scale = var.add_scalar(BN_EPS).powf(-0.5).mul(gamma);
    let y = x.sub(&mean).mul(&scale).add(beta);
    (y, mean, var)
}

pub fn batch_norm_eval(x: &Tensor, stats: &BnStats, gamma: &Tensor, beta: &Tensor) -> Tensor {
    let c = stats.mean.len();
    let inv = Tensor::from_vec(
        &[c],
        stats.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect(),
    );
    let scale = inv.mul(gamma);
    let shift = beta.sub(&Tensor::from_vec(&[c], stats.mean.clone()).mul(&scale));
    x.mul(&scale).add(&shift)
}

/// Updates running statistics from a batch, PyTorch style (unbiased running var).
pub fn update_running(stats: &mut BnStats, pre_bn: &Tensor) {
    let (mean, var) = crate::tensor::no_grad(|| channel_stats(pre_bn));
    let c = stats.mean.len();
    let n = (pre_bn.numel() / c) as f64;
    let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
    for i in 0..c {
        stats.mean[i] = (1.0 - BN_MOMENTUM) * stats.mean[i] + BN_MOMENTUM * mean.data()[i];
        stats.var[i] = (1.0 - BN_MOMENTUM) * stats.var[i] + BN_MOMENTUM * var.data()[i] * unbias;
    }
}

/// `x · w + b` with `w` shaped `[in, out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    x.matmul(w).add(b)
}

pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Array {
    let std = (2.0 / fan_in as f64).sqrt();
    normal_array(shape, std, rng)
}

pub fn normal_array(shape: &[usize], std: f64, rng: &mut impl Rng) -> Array {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    Array {
        shape: shape.to_vec(),
        data: (0..n).map(|_| dist.sample(rng)).collect(),
    }
}

pub fn uniform_array(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Array {
    let n: usize = shape.iter().product();
    Array {
        shape: shape.to_vec(),
        data: (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
    }
}

/// Linear head `[in, out]` with PyTorch-style uniform init.
pub fn init_linear(b: &mut ParamBundle, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    b.push(format!("{prefix}.weight"), uniform_array(&[fan_in, fan_out], bound, rng));
    b.push(format!("{prefix}.bias"), uniform_array(&[fan_out], bound, rng));
}

/// Mean cross-entropy of logits against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Tensor {
    logits.log_softmax().pick(labels).mean().neg()
}

pub fn argmax_rows(x: &[f64], cols: usize) -> Vec<usize> {
    x.chunks(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

/// Adam optimizer over a parameter bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamBundle) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.entries.iter().map(|(_, a)| vec![0.0; a.numel()]).collect(),
            v: params.entries.iter().map(|(_, a)| vec![0.0; a.numel()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamBundle, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.entries.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, ((_, p), g)) in params.entries.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (pj, &gj)) in p.data.iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                *pj -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}
