//! The pool of pre-trained classifiers: training, persistence, pollution and
//! the parameter-averaging baseline.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle;
use crate::error::{Error, Result};
use crate::nn::{
    self, accuracy, argmax_rows, cross_entropy, init_linear, Adam, Architecture, BnStats, BnUse,
    EncoderSpec, ParamBundle, TensorParams, ENCODER_BLOCKS,
};
use crate::tasks::DatasetSplit;
use crate::tensor::{grad, no_grad, Array, Tensor};

/// Ground-truth reliability of a pool member. Evaluation-only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrustTruth {
    Trusted,
    Misleading,
    LowQuality,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PollutionMode {
    MisleadingLabels,
    LowQuality,
}

impl PollutionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "misleading_labels" | "misleading" => Ok(PollutionMode::MisleadingLabels),
            "low_quality" => Ok(PollutionMode::LowQuality),
            other => Err(Error::Config(format!("unknown pollution mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs: usize,
    pub learning_rate: f64,
    pub final_train_accuracy: f64,
}

/// Pre-training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 60,
            learning_rate: 0.01,
            batch_size: 50,
        }
    }
}

/// A pool member as seen by training code. Carries no trust information.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainedModel {
    pub model_id: String,
    pub encoder: EncoderSpec,
    pub params: ParamBundle,
    pub claimed_labels: Vec<usize>,
    pub bn_stats: Vec<BnStats>,
    pub train_meta: TrainMeta,
}

impl PretrainedModel {
    pub fn architecture(&self) -> Architecture {
        self.encoder.architecture
    }

    pub fn width(&self) -> usize {
        self.claimed_labels.len()
    }

    /// Column of a global class id in this model's output.
    pub fn column_of(&self, class_id: usize) -> Option<usize> {
        self.claimed_labels.iter().position(|&c| c == class_id)
    }

    /// Eval-mode logits for NCHW images. Parameters are constants, so gradients
    /// flow only into `x`.
    pub fn logits(&self, x: &Tensor) -> Tensor {
        self.logits_with_taps(x).0
    }

    /// Logits plus the pre-BN activation of every conv block.
    pub fn logits_with_taps(&self, x: &Tensor) -> (Tensor, Vec<Tensor>) {
        let p = self.params.to_constants();
        classifier_forward(&self.encoder, &p, x, BnUse::Running(&self.bn_stats))
    }

    pub fn predict(&self, x: &Array) -> Vec<usize> {
        let logits = no_grad(|| self.logits(&Tensor::constant(x.clone())));
        argmax_rows(logits.data(), self.width())
    }

    /// Parameters plus BN statistics as one bundle (`bn{i}.mean`, `bn{i}.var`).
    pub fn to_bundle(&self) -> ParamBundle {
        let mut b = self.params.clone();
        for (i, s) in self.bn_stats.iter().enumerate() {
            b.push(format!("bn{i}.mean"), Array::new(vec![s.mean.len()], s.mean.clone()).expect("1-d"));
            b.push(format!("bn{i}.var"), Array::new(vec![s.var.len()], s.var.clone()).expect("1-d"));
        }
        b
    }

    pub fn split_bundle(b: ParamBundle) -> Result<(ParamBundle, Vec<BnStats>)> {
        let mut params = ParamBundle::new();
        let mut stats: BTreeMap<usize, (Option<Vec<f64>>, Option<Vec<f64>>)> = BTreeMap::new();
        for (name, a) in b.entries {
            if let Some(rest) = name.strip_prefix("bn") {
                let (idx, kind) = rest
                    .split_once('.')
                    .ok_or_else(|| Error::Pool(format!("bad bn entry `{name}`")))?;
                let idx: usize = idx.parse().map_err(|_| Error::Pool(format!("bad bn entry `{name}`")))?;
                let slot = stats.entry(idx).or_default();
                match kind {
                    "mean" => slot.0 = Some(a.data),
                    "var" => slot.1 = Some(a.data),
                    _ => return Err(Error::Pool(format!("bad bn entry `{name}`"))),
                }
            } else {
                params.push(name, a);
            }
        }
        let bn = stats
            .into_iter()
            .map(|(i, (m, v))| match (m, v) {
                (Some(mean), Some(var)) => Ok(BnStats { mean, var }),
                _ => Err(Error::Pool(format!("incomplete statistics for bn layer {i}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((params, bn))
    }
}

/// Conv4 body plus linear head. Returns logits and pre-BN taps.
pub fn classifier_forward(
    encoder: &EncoderSpec,
    p: &TensorParams,
    x: &Tensor,
    bn: BnUse<'_>,
) -> (Tensor, Vec<Tensor>) {
    let (feat, taps) = encoder.embed_with_taps(p, x, bn);
    (nn::linear(&feat, p.get("head.weight"), p.get("head.bias")), taps)
}

/// A pool member together with its evaluation-only metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainedModelRecord {
    pub model: PretrainedModel,
    pub trust_truth: TrustTruth,
    /// Global ids of the classes the weights were actually trained on.
    pub trained_on: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolBuildConfig {
    pub pool_size: usize,
    pub n_way: usize,
    pub architecture_mix: Vec<(Architecture, f64)>,
    pub pretrain: PretrainConfig,
    pub seed: u64,
    pub pollution: Option<PollutionEcho>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PollutionEcho {
    pub rate: f64,
    pub mode: PollutionMode,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolManifest {
    pub pool_id: String,
    pub records: Vec<PretrainedModelRecord>,
    pub creation_config: PoolBuildConfig,
}

/// On-disk metadata of one record; weights live in `weight_file`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub model_id: String,
    pub architecture: Architecture,
    pub in_channels: usize,
    pub image_size: usize,
    pub claimed_labels: Vec<usize>,
    pub trust_truth: TrustTruth,
    pub trained_on: Vec<usize>,
    pub train_meta: TrainMeta,
    pub weight_file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    format_version: u32,
    pool_id: String,
    records: Vec<ManifestEntry>,
    creation_config: PoolBuildConfig,
}

pub const MANIFEST_FILE: &str = "pool.json";
const MANIFEST_VERSION: u32 = 1;

impl PoolManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// The models as handed to training code, trust metadata stripped.
    pub fn models(&self) -> Vec<PretrainedModel> {
        self.records.iter().map(|r| r.model.clone()).collect()
    }

    pub fn trusted_indices(&self) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.trust_truth == TrustTruth::Trusted)
            .map(|(i, _)| i)
            .collect()
    }

    /// Per-record content hashes, in pool order.
    pub fn fingerprints(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| bundle::fingerprint(&r.model.to_bundle()))
            .collect()
    }

    /// Writes `pool.json` and one weight file per model into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let weights = dir.join("weights");
        std::fs::create_dir_all(&weights).map_err(|e| Error::io(&weights, e))?;
        let mut entries = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let m = &r.model;
            let b = m.to_bundle();
            let rel = format!("weights/{}.dfmltb", m.model_id);
            bundle::save(&b, &dir.join(&rel))?;
            entries.push(ManifestEntry {
                model_id: m.model_id.clone(),
                architecture: m.encoder.architecture,
                in_channels: m.encoder.in_channels,
                image_size: m.encoder.image_size,
                claimed_labels: m.claimed_labels.clone(),
                trust_truth: r.trust_truth,
                trained_on: r.trained_on.clone(),
                train_meta: m.train_meta.clone(),
                weight_file: rel,
                sha256: bundle::fingerprint(&b),
            });
        }
        let file = ManifestFile {
            format_version: MANIFEST_VERSION,
            pool_id: self.pool_id.clone(),
            records: entries,
            creation_config: self.creation_config.clone(),
        };
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&file)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Loads a pool written by [`PoolManifest::save`], verifying every hash.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: ManifestFile = serde_json::from_str(&text)
            .map_err(|e| Error::Pool(format!("{}: {e}", path.display())))?;
        if file.format_version != MANIFEST_VERSION {
            return Err(Error::Pool(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                file.format_version
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut records = Vec::with_capacity(file.records.len());
        for e in file.records {
            if !seen.insert(e.model_id.clone()) {
                return Err(Error::Pool(format!("duplicate model id `{}`", e.model_id)));
            }
            let wpath: PathBuf = dir.join(&e.weight_file);
            let b = bundle::load(&wpath)?;
            if bundle::fingerprint(&b) != e.sha256 {
                return Err(Error::Pool(format!("hash mismatch for {}", wpath.display())));
            }
            let (params, bn_stats) = PretrainedModel::split_bundle(b)?;
            let encoder = EncoderSpec::new(e.architecture, e.in_channels, e.image_size);
            let model = PretrainedModel {
                model_id: e.model_id,
                encoder,
                params,
                claimed_labels: e.claimed_labels,
                bn_stats,
                train_meta: e.train_meta,
            };
            validate_model(&model)?;
            records.push(PretrainedModelRecord {
                model,
                trust_truth: e.trust_truth,
                trained_on: e.trained_on,
            });
        }
        Ok(PoolManifest {
            pool_id: file.pool_id,
            records,
            creation_config: file.creation_config,
        })
    }
}

fn validate_model(m: &PretrainedModel) -> Result<()> {
    if m.bn_stats.len() != ENCODER_BLOCKS {
        return Err(Error::Pool(format!(
            "{}: {} bn layers, expected {ENCODER_BLOCKS}",
            m.model_id,
            m.bn_stats.len()
        )));
    }
    if m.bn_stats.iter().any(|s| s.var.iter().any(|&v| !(v >= 0.0))) {
        return Err(Error::Pool(format!("{}: negative bn variance", m.model_id)));
    }
    let width = m.params.get("head.bias").map(|a| a.numel());
    if width != Some(m.claimed_labels.len()) {
        return Err(Error::Pool(format!(
            "{}: head width {width:?} differs from {} claimed labels",
            m.model_id,
            m.claimed_labels.len()
        )));
    }
    Ok(())
}

/// Gathers all examples of `classes` from `split`, labelled by position.
fn gather_examples(split: &DatasetSplit, classes: &[usize], fraction: f64, rng: &mut impl Rng) -> Result<(Array, Vec<usize>, Array, Vec<usize>)> {
    let mut train = Vec::new();
    let mut train_y = Vec::new();
    let mut rest = Vec::new();
    let mut rest_y = Vec::new();
    for (label, &cid) in classes.iter().enumerate() {
        let arr = split.examples(cid).ok_or_else(|| {
            Error::Dataset(format!("class {} has no examples in split `{}`", split.class_label(cid), split.name))
        })?;
        if arr.rows() == 0 {
            return Err(Error::Dataset(format!("{} has no examples", split.class_label(cid))));
        }
        let take = ((arr.rows() as f64 * fraction).round() as usize).clamp(1, arr.rows());
        let mut order: Vec<usize> = (0..arr.rows()).collect();
        if take < arr.rows() {
            order.shuffle(rng);
        }
        train.push(arr.select_rows(&order[..take]));
        train_y.extend(std::iter::repeat_n(label, take));
        if take < arr.rows() {
            rest.push(arr.select_rows(&order[take..]));
            rest_y.extend(std::iter::repeat_n(label, arr.rows() - take));
        }
    }
    let cat = |v: &Vec<Array>| -> Result<Array> {
        if v.is_empty() {
            let [c, h, w] = split.image_shape;
            Ok(Array::zeros(&[0, c, h, w]))
        } else {
            Array::concat_rows(&v.iter().collect::<Vec<_>>())
        }
    };
    Ok((cat(&train)?, train_y, cat(&rest)?, rest_y))
}

/// Supervised training of a Conv4 classifier on explicit data.
fn train_classifier(
    encoder: EncoderSpec,
    width: usize,
    x: &Array,
    y: &[usize],
    cfg: &PretrainConfig,
    rng: &mut impl Rng,
) -> Result<(ParamBundle, Vec<BnStats>, f64)> {
    encoder.validate()?;
    let mut params = encoder.init(rng);
    init_linear(&mut params, "head", encoder.embedding_dim(), width, rng);
    let stats: Vec<BnStats> = (0..ENCODER_BLOCKS).map(|_| BnStats::identity(encoder.filters())).collect();
    fit_classifier(encoder, params, stats, width, x, y, cfg, rng)
}

/// Trains a classifier from the given starting parameters (encoder and
/// `head.*` entries) and running statistics. Returns the trained weights,
/// statistics and training accuracy.
#[allow(clippy::too_many_arguments)]
pub fn fit_classifier(
    encoder: EncoderSpec,
    mut params: ParamBundle,
    mut stats: Vec<BnStats>,
    width: usize,
    x: &Array,
    y: &[usize],
    cfg: &PretrainConfig,
    rng: &mut impl Rng,
) -> Result<(ParamBundle, Vec<BnStats>, f64)> {
    encoder.validate()?;
    let mut opt = Adam::new(cfg.learning_rate, &params);
    let n = x.rows();
    let bs = cfg.batch_size.max(2).min(n.max(1));
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(bs) {
            // A single-example batch has no batch variance; fold it into training only
            // when it is the whole dataset.
            if chunk.len() < 2 && n >= 2 {
                continue;
            }
            let xb = Tensor::constant(x.select_rows(chunk));
            let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let p = params.to_params();
            let (logits, taps) = classifier_forward(&encoder, &p, &xb, BnUse::Batch);
            let loss = cross_entropy(&logits, &yb);
            if !loss.item().is_finite() {
                return Err(Error::NonFinite(format!("pre-training loss diverged at epoch {epoch}")));
            }
            let g = grad(&loss, &p.tensors, false);
            opt.step(&mut params, &g);
            for (s, t) in stats.iter_mut().zip(&taps) {
                nn::update_running(s, t);
            }
        }
    }
    if !params.all_finite() {
        return Err(Error::NonFinite("pre-trained parameters are not finite".into()));
    }
    let acc = eval_accuracy(&encoder, &params, &stats, x, y, width);
    Ok((params, stats, acc))
}

pub fn eval_accuracy(
    encoder: &EncoderSpec,
    params: &ParamBundle,
    stats: &[BnStats],
    x: &Array,
    y: &[usize],
    width: usize,
) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let p = params.to_constants();
    let logits = no_grad(|| classifier_forward(encoder, &p, &Tensor::constant(x.clone()), BnUse::Running(stats)).0);
    accuracy(&argmax_rows(logits.data(), width), y)
}

/// Trains a classifier on every example of `task_classes`.
pub fn pretrain_model(
    model_id: &str,
    task_classes: &[usize],
    split: &DatasetSplit,
    architecture: Architecture,
    cfg: &PretrainConfig,
    rng: &mut impl Rng,
) -> Result<PretrainedModelRecord> {
    if task_classes.is_empty() {
        return Err(Error::InvalidArgument("a model needs at least one class".into()));
    }
    let [c, h, _] = split.image_shape;
    let encoder = EncoderSpec::new(architecture, c, h);
    let (x, y, _, _) = gather_examples(split, task_classes, 1.0, rng)?;
    let (params, bn_stats, acc) = train_classifier(encoder, task_classes.len(), &x, &y, cfg, rng)?;
    Ok(PretrainedModelRecord {
        model: PretrainedModel {
            model_id: model_id.to_string(),
            encoder,
            params,
            claimed_labels: task_classes.to_vec(),
            bn_stats,
            train_meta: TrainMeta {
                epochs: cfg.epochs,
                learning_rate: cfg.learning_rate,
                final_train_accuracy: acc,
            },
        },
        trust_truth: TrustTruth::Trusted,
        trained_on: task_classes.to_vec(),
    })
}

/// Picks an architecture per model so that counts follow the mix fractions.
fn assign_architectures(mix: &[(Architecture, f64)], n: usize) -> Result<Vec<Architecture>> {
    let total: f64 = mix.iter().map(|(_, f)| *f).sum();
    if mix.is_empty() || !(total > 0.0) || mix.iter().any(|(_, f)| !(*f >= 0.0)) {
        return Err(Error::Config("architecture_mix must have nonnegative fractions with a positive sum".into()));
    }
    let mut out = Vec::with_capacity(n);
    let mut cum = 0.0;
    let mut assigned = 0;
    for (k, (arch, f)) in mix.iter().enumerate() {
        cum += f / total;
        let upto = if k + 1 == mix.len() { n } else { (cum * n as f64).round() as usize };
        while assigned < upto.min(n) {
            out.push(*arch);
            assigned += 1;
        }
    }
    Ok(out)
}

fn map_models<T: Send>(
    jobs: Vec<(usize, u64)>,
    f: impl Fn(usize, &mut ChaCha8Rng) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        jobs.into_par_iter()
            .map(|(i, seed)| f(i, &mut ChaCha8Rng::seed_from_u64(seed)))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        jobs.into_iter()
            .map(|(i, seed)| f(i, &mut ChaCha8Rng::seed_from_u64(seed)))
            .collect()
    }
}

/// Pre-trains `pool_size` models on independently sampled `n_way` class subsets.
pub fn build_pool(
    split: &DatasetSplit,
    pool_size: usize,
    n_way: usize,
    architecture_mix: &[(Architecture, f64)],
    pretrain: &PretrainConfig,
    seed: u64,
) -> Result<PoolManifest> {
    if split.classes.len() < n_way {
        return Err(Error::Dataset(format!(
            "split `{}` has {} classes, {n_way} needed per model",
            split.name,
            split.classes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let archs = assign_architectures(architecture_mix, pool_size)?;
    let ids = split.class_ids();
    let mut plans = Vec::with_capacity(pool_size);
    for _ in 0..pool_size {
        let classes: Vec<usize> = index::sample(&mut rng, ids.len(), n_way).into_iter().map(|i| ids[i]).collect();
        plans.push((classes, rng.next_u64()));
    }
    let jobs: Vec<(usize, u64)> = plans.iter().enumerate().map(|(i, p)| (i, p.1)).collect();
    let records = map_models(jobs, |i, r| {
        pretrain_model(&format!("m{i:03}"), &plans[i].0, split, archs[i], pretrain, r)
            .map_err(|e| e.context(format!("pre-training pool model {i}")))
    })?;
    Ok(PoolManifest {
        pool_id: format!("pool-{seed}"),
        records,
        creation_config: PoolBuildConfig {
            pool_size,
            n_way,
            architecture_mix: architecture_mix.to_vec(),
            pretrain: pretrain.clone(),
            seed,
            pollution: None,
        },
    })
}

/// Number of records replaced at a given pollution rate.
pub fn polluted_count(rate: f64, pool_size: usize) -> usize {
    // Tolerate float noise such as 0.4 * 10 = 4.000000000000001.
    ((rate * pool_size as f64) - 1e-9).ceil().max(0.0) as usize
}

const LOW_QUALITY_CEILING: f64 = 0.25;
const LOW_QUALITY_RETRIES: usize = 6;

/// Replaces `ceil(rate * |pool|)` uniformly chosen records with untrusted models.
///
/// `source_split` is the pool's own training split (used to build and check
/// low-quality models); `foreign_split` supplies the disguised training data
/// for misleading-label models.
pub fn inject_untrusted(
    pool: &PoolManifest,
    rate: f64,
    mode: PollutionMode,
    source_split: &DatasetSplit,
    foreign_split: Option<&DatasetSplit>,
    seed: u64,
) -> Result<PoolManifest> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("pollution rate {rate} outside [0, 1]")));
    }
    let count = polluted_count(rate, pool.len());
    if count == 0 {
        return Ok(pool.clone());
    }
    let foreign = match (mode, foreign_split) {
        (PollutionMode::MisleadingLabels, None) => {
            return Err(Error::Config("misleading-label pollution needs a foreign split".into()))
        }
        (PollutionMode::MisleadingLabels, Some(f)) => Some(f),
        (PollutionMode::LowQuality, _) => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = index::sample(&mut rng, pool.len(), count).into_vec();
    chosen.sort_unstable();
    let jobs: Vec<(usize, u64)> = chosen.iter().map(|&i| (i, rng.next_u64())).collect();
    let cfg = &pool.creation_config.pretrain;

    let replacements = map_models(jobs, |i, r| {
        let old = &pool.records[i].model;
        let width = old.width();
        let arch = old.architecture();
        let rec = match mode {
            PollutionMode::MisleadingLabels => {
                let f = foreign.expect("checked above");
                if f.classes.len() < width {
                    return Err(Error::Dataset(format!(
                        "foreign split has {} classes, {width} needed",
                        f.classes.len()
                    )));
                }
                let fids = f.class_ids();
                let classes: Vec<usize> = index::sample(r, fids.len(), width).into_iter().map(|k| fids[k]).collect();
                let mut rec = pretrain_model(&format!("{}-misleading", old.model_id), &classes, f, arch, cfg, r)?;
                rec.model.claimed_labels = old.claimed_labels.clone();
                rec.trust_truth = TrustTruth::Misleading;
                rec
            }
            PollutionMode::LowQuality => cripple(old, source_split, cfg, r)?,
        };
        Ok((i, rec))
    })?;

    let mut out = pool.clone();
    for (i, rec) in replacements {
        out.records[i] = rec;
    }
    out.creation_config.pollution = Some(PollutionEcho { rate, mode, seed });
    out.pool_id = format!("{}-polluted", pool.pool_id);
    Ok(out)
}

/// Trains a deliberately poor model on the displaced model's classes until its
/// held-out accuracy falls below the low-quality ceiling.
fn cripple(
    old: &PretrainedModel,
    split: &DatasetSplit,
    cfg: &PretrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PretrainedModelRecord> {
    let classes = &old.claimed_labels;
    let mut fraction = 0.1;
    let mut epochs = 2;
    let mut last = 1.0;
    for _ in 0..LOW_QUALITY_RETRIES {
        let (x, y, hx, hy) = gather_examples(split, classes, fraction, rng)?;
        let crippled = PretrainConfig {
            epochs,
            ..cfg.clone()
        };
        let (params, bn_stats, train_acc) = train_classifier(old.encoder, classes.len(), &x, &y, &crippled, rng)?;
        last = eval_accuracy(&old.encoder, &params, &bn_stats, &hx, &hy, classes.len());
        if last < LOW_QUALITY_CEILING {
            return Ok(PretrainedModelRecord {
                model: PretrainedModel {
                    model_id: format!("{}-lowq", old.model_id),
                    encoder: old.encoder,
                    params,
                    claimed_labels: classes.clone(),
                    bn_stats,
                    train_meta: TrainMeta {
                        epochs,
                        learning_rate: cfg.learning_rate,
                        final_train_accuracy: train_acc,
                    },
                },
                trust_truth: TrustTruth::LowQuality,
                trained_on: classes.clone(),
            });
        }
        fraction /= 2.0;
        epochs = epochs.saturating_sub(1).max(1);
    }
    Err(Error::Pool(format!(
        "could not cripple {} below {:.0}% held-out accuracy (last {:.1}%)",
        old.model_id,
        LOW_QUALITY_CEILING * 100.0,
        last * 100.0
    )))
}

/// Elementwise mean of all models' parameters and BN statistics.
pub fn average_pool_baseline(pool: &PoolManifest) -> Result<ParamBundle> {
    let first = pool
        .records
        .first()
        .ok_or_else(|| Error::Pool("cannot average an empty pool".into()))?;
    let mut acc = first.model.to_bundle();
    for r in &pool.records[1..] {
        let b = r.model.to_bundle();
        if r.model.encoder != first.model.encoder || !b.same_layout(&acc) {
            return Err(Error::Pool(format!(
                "cannot average heterogeneous architectures ({} vs {})",
                first.model.architecture().as_str(),
                r.model.architecture().as_str()
            )));
        }
        for ((_, a), (_, x)) in acc.entries.iter_mut().zip(&b.entries) {
            for (s, v) in a.data.iter_mut().zip(&x.data) {
                *s += v;
            }
        }
    }
    let n = pool.len() as f64;
    for (_, a) in acc.entries.iter_mut() {
        for s in a.data.iter_mut() {
            *s /= n;
        }
    }
    Ok(acc)
}

/// Splits an averaged bundle back into parameters and BN statistics.
pub fn split_bn_entries(b: ParamBundle) -> Result<(ParamBundle, Vec<BnStats>)> {
    PretrainedModel::split_bundle(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{make_synthetic_dataset, SyntheticSpec, TextureFamily};

    fn data() -> crate::tasks::DatasetTriple {
        let spec = SyntheticSpec::new(20, 16, 3, 20);
        make_synthetic_dataset(&spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
    }

    fn quick() -> PretrainConfig {
        PretrainConfig {
            epochs: 8,
            learning_rate: 0.01,
            batch_size: 25,
        }
    }

    #[test]
    fn five_class_model_fits_its_data() {
        let d = data();
        let classes: Vec<usize> = d.train.class_ids()[..5].to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = PretrainConfig::default();
        let rec = pretrain_model("m", &classes, &d.train, Architecture::Conv4Small, &cfg, &mut rng).unwrap();
        let (x, y, _, _) = gather_examples(&d.train, &classes, 1.0, &mut rng).unwrap();
        let acc = accuracy(&rec.model.predict(&x), &y);
        assert_eq!(acc, rec.model.train_meta.final_train_accuracy);
        assert!(acc >= 0.95, "{acc}");
    }

    #[test]
    fn single_class_model_is_trivially_right() {
        let d = data();
        let cid = d.train.class_ids()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = PretrainConfig { epochs: 1, ..quick() };
        let rec = pretrain_model("solo", &[cid], &d.train, Architecture::Conv4Small, &cfg, &mut rng).unwrap();
        assert_eq!(rec.model.train_meta.final_train_accuracy, 1.0);
        let other = d.test.examples(d.test.class_ids()[0]).unwrap();
        assert!(rec.model.predict(other).iter().all(|&p| p == 0));
    }

    #[test]
    fn pool_build_counts_mix_and_round_trip() {
        let d = data();
        let mix = [(Architecture::Conv4Small, 1.0)];
        let pool = build_pool(&d.train, 3, 5, &mix, &quick(), 11).unwrap();
        assert_eq!(pool.len(), 3);
        for r in &pool.records {
            assert_eq!(r.model.claimed_labels.len(), 5);
            assert_eq!(r.model.architecture(), Architecture::Conv4Small);
            assert_eq!(r.trust_truth, TrustTruth::Trusted);
            let x = Tensor::constant(d.train.examples(r.model.claimed_labels[0]).unwrap().clone());
            assert_eq!(no_grad(|| r.model.logits(&x)).shape()[1], 5);
        }
        let again = build_pool(&d.train, 3, 5, &mix, &quick(), 11).unwrap();
        assert_eq!(pool.fingerprints(), again.fingerprints());

        let dir = tempfile::tempdir().unwrap();
        pool.save(dir.path()).unwrap();
        let loaded = PoolManifest::load(dir.path()).unwrap();
        assert_eq!(loaded, pool);
    }

    #[test]
    fn architecture_assignment_follows_mix() {
        let a = assign_architectures(&[(Architecture::Conv4, 0.5), (Architecture::Conv4Small, 0.5)], 12).unwrap();
        assert_eq!(a.iter().filter(|&&x| x == Architecture::Conv4).count(), 6);
        assert_eq!(a.len(), 12);
    }

    #[test]
    fn polluted_count_rounds_up() {
        assert_eq!(polluted_count(0.4, 10), 4);
        assert_eq!(polluted_count(0.1, 12), 2);
        assert_eq!(polluted_count(0.0, 12), 0);
        assert_eq!(polluted_count(1.0, 7), 7);
    }

    #[test]
    fn misleading_pollution_keeps_claims_and_trains_on_foreign() {
        let d = data();
        let mut fspec = SyntheticSpec::new(20, 16, 3, 20);
        fspec.family = TextureFamily::Blobs;
        fspec.class_id_offset = 1000;
        let foreign = make_synthetic_dataset(&fspec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let cfg = PretrainConfig { epochs: 2, ..quick() };
        let pool = build_pool(&d.train, 4, 3, &[(Architecture::Conv4Small, 1.0)], &cfg, 2).unwrap();
        let before = pool.fingerprints();
        let out = inject_untrusted(&pool, 0.5, PollutionMode::MisleadingLabels, &d.train, Some(&foreign.train), 9).unwrap();
        let after = out.fingerprints();
        let mut changed = 0;
        for i in 0..4 {
            if out.records[i].trust_truth == TrustTruth::Trusted {
                assert_eq!(before[i], after[i]);
            } else {
                changed += 1;
                assert_eq!(out.records[i].model.claimed_labels, pool.records[i].model.claimed_labels);
                assert!(out.records[i].trained_on.iter().all(|c| foreign.train.classes.contains_key(c)));
            }
        }
        assert_eq!(changed, 2);
        assert_eq!(inject_untrusted(&pool, 0.0, PollutionMode::LowQuality, &d.train, None, 1).unwrap(), pool);
    }

    #[test]
    fn average_of_opposites_is_zero() {
        let d = data();
        let cfg = PretrainConfig { epochs: 1, ..quick() };
        let mut pool = build_pool(&d.train, 1, 2, &[(Architecture::Conv4Small, 1.0)], &cfg, 3).unwrap();
        let single = average_pool_baseline(&pool).unwrap();
        assert_eq!(single, pool.records[0].model.to_bundle());
        let mut neg = pool.records[0].clone();
        for (_, a) in neg.model.params.entries.iter_mut() {
            a.data.iter_mut().for_each(|v| *v = -*v);
        }
        for s in neg.model.bn_stats.iter_mut() {
            s.mean.iter_mut().for_each(|v| *v = -*v);
            s.var.iter_mut().for_each(|v| *v = -*v);
        }
        pool.records.push(neg);
        let avg = average_pool_baseline(&pool).unwrap();
        assert!(avg.entries.iter().all(|(_, a)| a.data.iter().all(|&v| v == 0.0)));
    }
}
