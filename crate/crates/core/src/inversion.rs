//! Conditional generator and data-free task generation by model inversion.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modelpool::PretrainedModel;
use crate::nn::{self, batch_norm, channel_stats, init_linear, Adam, BnStats, ParamBundle, TensorParams};
use crate::tasks::{ClassOrigin, Episode, Provenance};
use crate::tensor::{grad, no_grad, Array, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;
/// Added under the square root of each norm so its gradient stays finite at zero.
const NORM_EPS: f64 = 1e-20;

/// Generator hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub noise_dim: usize,
    pub filters: usize,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            noise_dim: 256,
            filters: 64,
            epochs: 200,
            learning_rate: 0.001,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorShape {
    pub noise_dim: usize,
    pub label_dim: usize,
    pub filters: usize,
    pub channels: usize,
    pub image_size: usize,
}

impl GeneratorShape {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 4 || self.image_size % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "generator image size {} must be a positive multiple of 4",
                self.image_size
            )));
        }
        if self.noise_dim == 0 || self.label_dim == 0 || self.filters == 0 || self.channels == 0 {
            return Err(Error::InvalidArgument("generator dimensions must be positive".into()));
        }
        Ok(())
    }

    fn seed_side(&self) -> usize {
        self.image_size / 4
    }
}

/// Generator parameters plus the best-loss snapshot of the current run.
#[derive(Clone, Debug)]
pub struct GeneratorState {
    pub shape: GeneratorShape,
    pub params: ParamBundle,
    pub best_loss: f64,
    pub best_batch: Option<(Array, Vec<usize>)>,
}

impl GeneratorState {
    pub fn init(shape: GeneratorShape, rng: &mut impl Rng) -> Result<Self> {
        shape.validate()?;
        let (nf, s4) = (shape.filters, shape.seed_side());
        let seed_units = nf * s4 * s4;
        let mut p = ParamBundle::new();
        init_linear(&mut p, "fc_z", shape.noise_dim, seed_units, rng);
        init_linear(&mut p, "fc_y", shape.label_dim, seed_units, rng);
        p.push("bn0.gamma", Array::full(&[2 * nf], 1.0));
        p.push("bn0.beta", Array::zeros(&[2 * nf]));
        conv(&mut p, "conv1", 2 * nf, 2 * nf, rng);
        p.push("bn1.gamma", Array::full(&[2 * nf], 1.0));
        p.push("bn1.beta", Array::zeros(&[2 * nf]));
        conv(&mut p, "conv2", 2 * nf, nf, rng);
        p.push("bn2.gamma", Array::full(&[nf], 1.0));
        p.push("bn2.beta", Array::zeros(&[nf]));
        conv(&mut p, "conv3", nf, shape.channels, rng);
        Ok(GeneratorState {
            shape,
            params: p,
            best_loss: f64::INFINITY,
            best_batch: None,
        })
    }
}

fn conv(p: &mut ParamBundle, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) {
    let fan_in = 9 * cin;
    let bound = 1.0 / (fan_in as f64).sqrt();
    p.push(format!("{name}.weight"), nn::uniform_array(&[cout, fan_in], bound, rng));
    p.push(format!("{name}.bias"), nn::uniform_array(&[cout], bound, rng));
}

/// Maps noise `[bs, d_z]` and (soft) one-hot labels `[bs, d_y]` to NCHW images in `[0, 1]`.
pub fn generator_forward(shape: &GeneratorShape, p: &TensorParams, z: &Tensor, y: &Tensor) -> Result<Tensor> {
    let bs = z.shape()[0];
    if z.shape() != [bs, shape.noise_dim] {
        return Err(Error::Shape(format!(
            "noise must be [batch, {}], got {:?}",
            shape.noise_dim,
            z.shape()
        )));
    }
    if y.shape() != [bs, shape.label_dim] {
        return Err(Error::Shape(format!(
            "labels must be [{bs}, {}], got {:?}",
            shape.label_dim,
            y.shape()
        )));
    }
    let (nf, s4) = (shape.filters, shape.seed_side());
    let hz = nn::linear(z, p.get("fc_z.weight"), p.get("fc_z.bias")).reshape(&[bs, s4, s4, nf]);
    let hy = nn::linear(y, p.get("fc_y.weight"), p.get("fc_y.bias")).reshape(&[bs, s4, s4, nf]);
    let h = Tensor::concat(&[hz, hy], 3);
    let h = batch_norm(&h, p.get("bn0.gamma"), p.get("bn0.beta")).0.upsample2();
    let h = h.conv2d(p.get("conv1.weight"), Some(p.get("conv1.bias")), 3, 1);
    let h = batch_norm(&h, p.get("bn1.gamma"), p.get("bn1.beta")).0.leaky_relu(LEAKY_SLOPE).upsample2();
    let h = h.conv2d(p.get("conv2.weight"), Some(p.get("conv2.bias")), 3, 1);
    let h = batch_norm(&h, p.get("bn2.gamma"), p.get("bn2.beta")).0.leaky_relu(LEAKY_SLOPE);
    let h = h.conv2d(p.get("conv3.weight"), Some(p.get("conv3.bias")), 3, 1).sigmoid();
    Ok(nn::nhwc_to_nchw(&h))
}

pub fn one_hot(labels: &[usize], width: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * width];
    for (i, &l) in labels.iter().enumerate() {
        data[i * width + l] = 1.0;
    }
    Tensor::from_vec(&[labels.len(), width], data)
}

/// Mean cross-entropy of the model's predictions against target columns.
pub fn loss_ce_inversion(model: &PretrainedModel, x_hat: &Tensor, y_hat: &[usize]) -> Result<Tensor> {
    let logits = model.logits(x_hat);
    ce_from_logits(&logits, y_hat, model.width())
}

fn ce_from_logits(logits: &Tensor, y_hat: &[usize], width: usize) -> Result<Tensor> {
    if let Some(&bad) = y_hat.iter().find(|&&y| y >= width) {
        return Err(Error::InvalidArgument(format!("target {bad} outside model width {width}")));
    }
    if !logits.data().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("model logits".into()));
    }
    Ok(nn::cross_entropy(logits, y_hat))
}

/// Sum over layers of `||mu(x) - mu_bn|| + ||var(x) - var_bn||`, with biased
/// batch statistics of channel-last activations.
pub fn bn_matching_loss(taps: &[Tensor], stats: &[BnStats]) -> Result<Tensor> {
    if taps.len() != stats.len() {
        return Err(Error::Shape(format!("{} taps for {} bn layers", taps.len(), stats.len())));
    }
    let mut total = Tensor::scalar(0.0);
    for (t, s) in taps.iter().zip(stats) {
        if t.shape()[0] < 2 {
            return Err(Error::InvalidArgument("variance undefined for a batch of 1".into()));
        }
        let c = s.mean.len();
        let (mu, var) = channel_stats(t);
        let dm = mu.sub(&Tensor::from_vec(&[c], s.mean.clone()));
        let dv = var.sub(&Tensor::from_vec(&[c], s.var.clone()));
        let l2 = |d: Tensor| d.square().sum().add_scalar(NORM_EPS).powf(0.5);
        total = total.add(&l2(dm)).add(&l2(dv));
    }
    Ok(total)
}

pub fn loss_bn(model: &PretrainedModel, x_hat: &Tensor) -> Result<Tensor> {
    let (_, taps) = model.logits_with_taps(x_hat);
    bn_matching_loss(&taps, &model.bn_stats)
}

/// `L_CE + L_BN` from a single forward pass through the model.
pub fn generator_loss(model: &PretrainedModel, x_hat: &Tensor, y_hat: &[usize]) -> Result<(Tensor, f64, f64)> {
    let (logits, taps) = model.logits_with_taps(x_hat);
    let ce = ce_from_logits(&logits, y_hat, model.width())?;
    let bn = bn_matching_loss(&taps, &model.bn_stats)?;
    let (ce_v, bn_v) = (ce.item(), bn.item());
    Ok((ce.add(&bn), ce_v, bn_v))
}

/// Per-epoch record of one generation run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub losses: Vec<f64>,
    pub best_loss: f64,
    pub best_epoch: usize,
}

fn gaussian(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::constant(nn::normal_array(shape, 1.0, rng))
}

/// Generator weights and optimizer state kept across generation calls for one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSession {
    pub shape: GeneratorShape,
    pub params: ParamBundle,
    pub optimizer: Adam,
}

fn check_request(model: &PretrainedModel, n_way: usize, k_shot: usize, k_query: usize) -> Result<()> {
    if n_way == 0 || k_shot == 0 {
        return Err(Error::InvalidArgument("n_way and k_shot must be positive".into()));
    }
    if n_way > model.width() {
        return Err(Error::InvalidArgument(format!(
            "{}-way task from a model with {} classes",
            n_way,
            model.width()
        )));
    }
    if n_way * (k_shot + k_query) < 2 {
        return Err(Error::InvalidArgument("a generation batch needs at least 2 images".into()));
    }
    Ok(())
}

fn shape_for(model: &PretrainedModel, cfg: &GeneratorConfig) -> GeneratorShape {
    GeneratorShape {
        noise_dim: cfg.noise_dim,
        label_dim: model.width(),
        filters: cfg.filters,
        channels: model.encoder.in_channels,
        image_size: model.encoder.image_size,
    }
}

/// Inverts `model` into an `n_way` episode with `k_shot + k_query` images per class,
/// starting from a freshly initialised generator.
pub fn generate_task(
    model: &PretrainedModel,
    model_index: usize,
    n_way: usize,
    k_shot: usize,
    k_query: usize,
    cfg: &GeneratorConfig,
    rng: &mut impl Rng,
) -> Result<(Episode, GenerationTrace)> {
    check_request(model, n_way, k_shot, k_query)?;
    let mut gen = GeneratorState::init(shape_for(model, cfg), rng)?;
    let mut opt = Adam::new(cfg.learning_rate, &gen.params);
    run_generation(model, model_index, n_way, k_shot, k_query, cfg, &mut gen, &mut opt, rng)
}

/// Like [`generate_task`] but continues the generator held in `session`,
/// creating it on first use.
#[allow(clippy::too_many_arguments)]
pub fn generate_task_warm(
    model: &PretrainedModel,
    model_index: usize,
    n_way: usize,
    k_shot: usize,
    k_query: usize,
    cfg: &GeneratorConfig,
    session: &mut Option<GeneratorSession>,
    rng: &mut impl Rng,
) -> Result<(Episode, GenerationTrace)> {
    check_request(model, n_way, k_shot, k_query)?;
    let shape = shape_for(model, cfg);
    if session.as_ref().is_some_and(|s| s.shape != shape) {
        return Err(Error::InvalidArgument("generator session does not fit this model".into()));
    }
    let s = match session.take() {
        Some(s) => s,
        None => {
            let gen = GeneratorState::init(shape, rng)?;
            let optimizer = Adam::new(cfg.learning_rate, &gen.params);
            GeneratorSession {
                shape,
                params: gen.params,
                optimizer,
            }
        }
    };
    let mut gen = GeneratorState {
        shape,
        params: s.params,
        best_loss: f64::INFINITY,
        best_batch: None,
    };
    let mut opt = s.optimizer;
    let out = run_generation(model, model_index, n_way, k_shot, k_query, cfg, &mut gen, &mut opt, rng);
    *session = Some(GeneratorSession {
        shape,
        params: gen.params,
        optimizer: opt,
    });
    out
}

#[allow(clippy::too_many_arguments)]
fn run_generation(
    model: &PretrainedModel,
    model_index: usize,
    n_way: usize,
    k_shot: usize,
    k_query: usize,
    cfg: &GeneratorConfig,
    gen: &mut GeneratorState,
    opt: &mut Adam,
    rng: &mut impl Rng,
) -> Result<(Episode, GenerationTrace)> {
    let shape = gen.shape;
    let per_class = k_shot + k_query;
    let bs = n_way * per_class;
    let columns: Vec<usize> = index::sample(rng, model.width(), n_way).into_vec();
    let targets: Vec<usize> = columns.iter().flat_map(|&c| std::iter::repeat_n(c, per_class)).collect();
    let y = one_hot(&targets, model.width());
    let mut trace = GenerationTrace {
        losses: Vec::with_capacity(cfg.epochs),
        best_loss: f64::INFINITY,
        best_epoch: 0,
    };
    for epoch in 0..cfg.epochs.max(1) {
        let z = gaussian(&[bs, cfg.noise_dim], rng);
        let p = gen.params.to_params();
        let x = generator_forward(&shape, &p, &z, &y)?;
        let (loss, _, _) = generator_loss(model, &x, &targets)
            .map_err(|e| e.context(format!("generation epoch {epoch}")))?;
        let v = loss.item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("generator loss at epoch {epoch}")));
        }
        trace.losses.push(v);
        if v < gen.best_loss {
            gen.best_loss = v;
            gen.best_batch = Some((x.to_array(), targets.clone()));
            trace.best_loss = v;
            trace.best_epoch = epoch;
        }
        if epoch + 1 < cfg.epochs {
            let g = grad(&loss, &p.tensors, false);
            opt.step(&mut gen.params, &g);
        }
    }
    let (images, _) = gen.best_batch.take().expect("at least one epoch ran");

    let mut s_rows = Vec::with_capacity(n_way * k_shot);
    let mut q_rows = Vec::with_capacity(n_way * k_query);
    for c in 0..n_way {
        let mut rows: Vec<usize> = (c * per_class..(c + 1) * per_class).collect();
        rows.shuffle(rng);
        s_rows.extend_from_slice(&rows[..k_shot]);
        q_rows.extend_from_slice(&rows[k_shot..]);
    }
    let episode = Episode {
        support_x: images.select_rows(&s_rows),
        support_y: (0..n_way).flat_map(|c| std::iter::repeat_n(c, k_shot)).collect(),
        query_x: images.select_rows(&q_rows),
        query_y: (0..n_way).flat_map(|c| std::iter::repeat_n(c, k_query)).collect(),
        n_way,
        class_origin: columns
            .iter()
            .map(|&col| ClassOrigin::Class {
                class_id: model.claimed_labels[col],
                source_model: Some(model_index),
            })
            .collect(),
        provenance: Provenance::Generated,
        source_model: Some(model_index),
    };
    Ok((episode, trace))
}

/// Accuracy of `model` on an episode's query set, mapping episode labels back
/// to the model's columns through `class_origin`.
pub fn source_model_query_accuracy(model: &PretrainedModel, ep: &Episode) -> Result<f64> {
    let cols: Vec<usize> = ep
        .class_origin
        .iter()
        .map(|o| {
            o.class_id()
                .and_then(|c| model.column_of(c))
                .ok_or_else(|| Error::InvalidArgument("episode class not claimed by model".into()))
        })
        .collect::<Result<_>>()?;
    let pred = model.predict(&ep.query_x);
    let truth: Vec<usize> = ep.query_y.iter().map(|&y| cols[y]).collect();
    Ok(nn::accuracy(&pred, &truth))
}

/// Writes an NCHW batch in `[0, 1]` as a PNG grid, `cols` images per row.
#[cfg(feature = "image-folder")]
pub fn write_image_grid(images: &Array, cols: usize, path: &std::path::Path) -> Result<()> {
    let (n, c, h, w) = (images.shape[0], images.shape[1], images.shape[2], images.shape[3]);
    let cols = cols.max(1).min(n.max(1));
    let rows = n.div_ceil(cols);
    let mut img = image::RgbImage::new((cols * (w + 1)) as u32, (rows * (h + 1)) as u32);
    for i in 0..n {
        let (gx, gy) = ((i % cols) * (w + 1), (i / cols) * (h + 1));
        let px = images.row(i);
        for y in 0..h {
            for x in 0..w {
                let ch = |k: usize| (px[(k.min(c - 1) * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                img.put_pixel((gx + x) as u32, (gy + y) as u32, image::Rgb([ch(0), ch(1), ch(2)]));
            }
        }
    }
    img.save(path)
        .map_err(|e| Error::Serde(format!("writing {}: {e}", path.display())))
}

/// No-grad sample of `n` images per listed column from a trained generator.
pub fn sample_images(gen: &GeneratorState, labels: &[usize], rng: &mut impl Rng) -> Result<Array> {
    let z = gaussian(&[labels.len(), gen.shape.noise_dim], rng);
    let y = one_hot(labels, gen.shape.label_dim);
    no_grad(|| generator_forward(&gen.shape, &gen.params.to_constants(), &z, &y)).map(|t| t.to_array())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> GeneratorShape {
        GeneratorShape {
            noise_dim: 8,
            label_dim: 3,
            filters: 4,
            channels: 3,
            image_size: 8,
        }
    }

    #[test]
    fn output_shape_range_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let shape = GeneratorShape {
            noise_dim: 256,
            label_dim: 5,
            filters: 8,
            channels: 3,
            image_size: 32,
        };
        let g = GeneratorState::init(shape, &mut rng).unwrap();
        let z = gaussian(&[2, 256], &mut rng);
        let y = one_hot(&[0, 4], 5);
        let p = g.params.to_constants();
        let a = generator_forward(&shape, &p, &z, &y).unwrap();
        assert_eq!(a.shape(), &[2, 3, 32, 32]);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let b = generator_forward(&shape, &p, &z, &y).unwrap();
        assert_eq!(a.data(), b.data());
        let err = generator_forward(&shape, &p, &gaussian(&[2, 7], &mut rng), &y).unwrap_err();
        assert!(err.to_string().contains("256"));
    }

    #[test]
    fn ce_closed_forms() {
        let two = Tensor::from_vec(&[1, 2], vec![10.0, -10.0]);
        assert!(ce_from_logits(&two, &[0], 2).unwrap().item() < 1e-4);
        let zero = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]);
        assert!((ce_from_logits(&zero, &[1], 2).unwrap().item() - 2f64.ln()).abs() < 1e-12);
        let five = Tensor::from_vec(&[2, 5], vec![0.3; 10]);
        assert!((ce_from_logits(&five, &[1, 4], 5).unwrap().item() - 5f64.ln()).abs() < 1e-12);
        assert!(ce_from_logits(&five, &[5], 5).is_err());
    }

    #[test]
    fn bn_loss_hand_values() {
        let exact = Tensor::from_vec(&[4, 1], vec![-1.0, 1.0, -1.0, 1.0]);
        let unit = [BnStats::identity(1)];
        assert!(bn_matching_loss(&[exact], &unit).unwrap().item() < 1e-9);
        let shifted = Tensor::from_vec(&[4, 1], vec![0.0, 2.0, 0.0, 2.0]);
        let v = bn_matching_loss(&[shifted], &unit).unwrap().item();
        assert!((v - 1.0).abs() < 1e-9, "{v}");
        let err = bn_matching_loss(&[Tensor::from_vec(&[1, 1], vec![0.0])], &unit).unwrap_err();
        assert!(err.to_string().contains("variance undefined"));
    }

    #[test]
    fn bn_loss_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = nn::normal_array(&[6, 2, 2, 3], 1.0, &mut rng);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let b = a.select_rows(&perm);
        let stats = [BnStats {
            mean: vec![0.1, -0.2, 0.3],
            var: vec![0.5, 1.5, 2.0],
        }];
        let la = bn_matching_loss(&[Tensor::constant(a)], &stats).unwrap().item();
        let lb = bn_matching_loss(&[Tensor::constant(b)], &stats).unwrap().item();
        assert!((la - lb).abs() < 1e-12);
    }

    #[test]
    fn generator_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = tiny();
        let g = GeneratorState::init(shape, &mut rng).unwrap();
        let z = gaussian(&[4, 8], &mut rng);
        let y = one_hot(&[0, 1, 2, 1], 3);
        let stats = [BnStats {
            mean: vec![0.4, 0.5, 0.6],
            var: vec![0.05, 0.1, 0.02],
        }];
        let loss_of = |p: &TensorParams| {
            let x = generator_forward(&shape, p, &z, &y).unwrap();
            let flat = nn::nchw_to_nhwc(&x);
            let target = Tensor::from_vec(&[1, 1, 1, 3], vec![0.9, 0.1, 0.5]);
            let fit = flat.sub(&target).square().mean();
            fit.add(&bn_matching_loss(&[flat], &stats).unwrap())
        };
        let p = g.params.to_params();
        let analytic = grad(&loss_of(&p), &p.tensors, false);
        let h = 1e-6;
        for (k, (name, arr)) in g.params.entries.iter().enumerate() {
            for j in [0, arr.numel() / 2, arr.numel() - 1] {
                let mut plus = g.params.clone();
                plus.entries[k].1.data[j] += h;
                let mut minus = g.params.clone();
                minus.entries[k].1.data[j] -= h;
                let fd = (loss_of(&plus.to_constants()).item() - loss_of(&minus.to_constants()).item()) / (2.0 * h);
                let an = analytic[k].data()[j];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < 1e-3, "{name}[{j}]: fd {fd} vs {an}");
            }
        }
    }
}
