//! Meta-learners (ProtoNet, MAML, ANIL) and the task losses that train them.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{MemoryTask, MixupEpisode};
use crate::modelpool::PretrainedModel;
use crate::nn::{
    self, flatten, init_linear, nchw_to_nhwc, Adam, Architecture, BnUse, EncoderSpec, ParamBundle, TensorParams,
    ENCODER_BLOCKS,
};
use crate::tasks::Episode;
use crate::tensor::{grad, no_grad, Array, GatherIndex, Tensor};

/// Added to squared distances so the Euclidean norm is differentiable at zero.
const DIST_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Protonet,
    Maml,
    Anil,
}

impl Algorithm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "protonet" => Ok(Algorithm::Protonet),
            "maml" => Ok(Algorithm::Maml),
            "anil" => Ok(Algorithm::Anil),
            _ => Err(Error::Config(format!("unknown algorithm {s:?} (protonet, maml, anil)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Protonet => "protonet",
            Algorithm::Maml => "maml",
            Algorithm::Anil => "anil",
        }
    }

    pub fn has_head(self) -> bool {
        self != Algorithm::Protonet
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub algorithm: Algorithm,
    pub architecture: Architecture,
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub outer_lr: f64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            algorithm: Algorithm::Protonet,
            architecture: Architecture::Conv4,
            inner_lr: 0.01,
            inner_steps: 1,
            outer_lr: 0.001,
        }
    }
}

/// Meta-parameters plus outer optimizer state.
///
/// Batch norm always normalises with the statistics of the current batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaLearnerState {
    pub algorithm: Algorithm,
    pub encoder: EncoderSpec,
    pub n_way: usize,
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub params: ParamBundle,
    pub optimizer: Adam,
    pub updates: u64,
}

impl MetaLearnerState {
    pub fn new(cfg: &MetaConfig, channels: usize, image_size: usize, n_way: usize, rng: &mut impl Rng) -> Result<Self> {
        let encoder = EncoderSpec::new(cfg.architecture, channels, image_size);
        encoder.validate()?;
        if n_way == 0 {
            return Err(Error::Config("n_way must be positive".into()));
        }
        if cfg.algorithm.has_head() && cfg.inner_steps == 0 {
            return Err(Error::Config("inner_steps must be positive for maml and anil".into()));
        }
        let mut params = encoder.init(rng);
        if cfg.algorithm.has_head() {
            init_linear(&mut params, "head", encoder.embedding_dim(), n_way, rng);
        }
        let optimizer = Adam::new(cfg.outer_lr, &params);
        Ok(MetaLearnerState {
            algorithm: cfg.algorithm,
            encoder,
            n_way,
            inner_lr: cfg.inner_lr,
            inner_steps: cfg.inner_steps,
            params,
            optimizer,
            updates: 0,
        })
    }

    /// Representation depths that are shared across tasks and may host a
    /// mixup blend (0 is the input). MAML adapts every layer, so none are.
    pub fn mixable_layers(&self) -> Option<usize> {
        match self.algorithm {
            Algorithm::Protonet | Algorithm::Anil => Some(ENCODER_BLOCKS + 1),
            Algorithm::Maml => None,
        }
    }

    fn embed(&self, p: &TensorParams, x: &Array) -> Tensor {
        self.encoder.embed(p, &Tensor::constant(x.clone()), BnUse::Batch)
    }

    /// Support and query embeddings from one joint pass.
    fn embed_episode(&self, p: &TensorParams, ep: &Episode) -> Result<(Tensor, Tensor)> {
        let x = Array::concat_rows(&[&ep.support_x, &ep.query_x])?;
        let e = self.embed(p, &x);
        let s = ep.support_x.rows();
        Ok((e.slice(0, 0, s), e.slice(0, s, ep.query_x.rows())))
    }

    /// Support and query embeddings of a mixup task: both source streams run
    /// through the encoder in one batch and merge at each class's layer.
    pub fn embed_mixup(&self, p: &TensorParams, m: &MixupEpisode) -> Result<(Tensor, Tensor)> {
        if m.layers.iter().any(|&l| l > ENCODER_BLOCKS) {
            return Err(Error::InvalidArgument(format!(
                "mixup layer beyond the encoder depth {ENCODER_BLOCKS}"
            )));
        }
        let f = &m.first;
        let labels: Vec<usize> = f.support_y.iter().chain(&f.query_y).copied().collect();
        let n_f = labels.len();
        let first = Array::concat_rows(&[&f.support_x, &f.query_x])?;
        let second = Array::concat_rows(&[&m.second.support_x, &m.second.query_x])?;
        if first.shape != second.shape {
            return Err(Error::Shape("mixup streams differ in shape".into()));
        }
        let mut h = nchw_to_nhwc(&Tensor::constant(Array::concat_rows(&[&first, &second])?));
        // For each pending second-stream row, the first-stream row it pairs with.
        let mut pending: Vec<usize> = (0..n_f).collect();
        for depth in 0..=ENCODER_BLOCKS {
            if depth > 0 {
                h = self.encoder.block(p, depth - 1, &h, BnUse::Batch).0;
            }
            let now: Vec<bool> = pending.iter().map(|&r| m.layers[labels[r]] == depth).collect();
            if !now.iter().any(|&b| b) {
                continue;
            }
            let mut partner = vec![None; n_f];
            for (i, &r) in pending.iter().enumerate() {
                if now[i] {
                    partner[r] = Some(n_f + i);
                }
            }
            let w: Vec<f64> = (0..n_f)
                .map(|r| if partner[r].is_some() { m.lambdas[labels[r]] } else { 1.0 })
                .collect();
            let mut wshape = vec![1; h.shape().len()];
            wshape[0] = n_f;
            let wt = Tensor::from_vec(&wshape, w.clone());
            let wc = Tensor::from_vec(&wshape, w.iter().map(|v| 1.0 - v).collect());
            let merged = h.slice(0, 0, n_f).mul(&wt).add(&take_rows(&h, &partner).mul(&wc));
            let keep: Vec<Option<usize>> = (0..pending.len()).filter(|&i| !now[i]).map(|i| Some(n_f + i)).collect();
            let mut it = now.iter();
            pending.retain(|_| !*it.next().expect("aligned"));
            h = if keep.is_empty() {
                merged
            } else {
                Tensor::concat(&[merged, take_rows(&h, &keep)], 0)
            };
        }
        let e = flatten(&h);
        let s = f.support_x.rows();
        Ok((e.slice(0, 0, s), e.slice(0, s, f.query_x.rows())))
    }

    fn head<'a>(&self, p: &'a TensorParams) -> (&'a Tensor, &'a Tensor) {
        (p.get("head.weight"), p.get("head.bias"))
    }

    /// Query log-probabilities `[queries, n_way]` after per-task adaptation.
    pub fn query_log_probs(&self, p: &TensorParams, task: TaskView<'_>, create_graph: bool) -> Result<Tensor> {
        let n = task.n_way();
        if self.algorithm.has_head() && n > self.n_way {
            return Err(Error::InvalidArgument(format!(
                "{n}-way task for a {}-way head",
                self.n_way
            )));
        }
        match self.algorithm {
            Algorithm::Protonet | Algorithm::Anil => {
                let (s, q) = match task {
                    TaskView::Plain(ep) => self.embed_episode(p, ep)?,
                    TaskView::Mixup(m) => self.embed_mixup(p, m)?,
                };
                let sy = task.support_y();
                if self.algorithm == Algorithm::Protonet {
                    prototype_log_probs(&s, sy, n, &q)
                } else {
                    let (w, b) = self.head(p);
                    let (w, b) = adapt_head(w, b, &s, sy, n, self.inner_lr, self.inner_steps, create_graph)?;
                    Ok(head_logits(&w, &b, &q, n).log_softmax())
                }
            }
            Algorithm::Maml => {
                let blended;
                let ep = match task {
                    TaskView::Plain(ep) => ep,
                    TaskView::Mixup(m) => {
                        blended = m.input_blend()?;
                        &blended
                    }
                };
                let psi = self.maml_adapt(p, ep, create_graph)?;
                let q = self.embed(&psi, &ep.query_x);
                let (w, b) = self.head(&psi);
                Ok(head_logits(w, b, &q, n).log_softmax())
            }
        }
    }

    /// Inner-loop adaptation on the support set. ANIL moves only the head.
    pub fn maml_adapt(&self, p: &TensorParams, ep: &Episode, create_graph: bool) -> Result<TensorParams> {
        let n = ep.n_way;
        match self.algorithm {
            Algorithm::Protonet => Err(Error::InvalidArgument("protonet has no inner loop".into())),
            Algorithm::Anil => {
                let s = self.embed(p, &ep.support_x);
                let (w, b) = self.head(p);
                let (w, b) = adapt_head(w, b, &s, &ep.support_y, n, self.inner_lr, self.inner_steps, create_graph)?;
                let tensors = p
                    .names
                    .iter()
                    .zip(&p.tensors)
                    .map(|(name, t)| match name.as_str() {
                        "head.weight" => w.clone(),
                        "head.bias" => b.clone(),
                        _ => t.clone(),
                    })
                    .collect();
                Ok(p.with_tensors(tensors))
            }
            Algorithm::Maml => {
                let mut psi = p.with_tensors(p.tensors.clone());
                for _ in 0..self.inner_steps {
                    let s = self.embed(&psi, &ep.support_x);
                    let (w, b) = self.head(&psi);
                    let loss = nn::cross_entropy(&head_logits(w, b, &s, n), &ep.support_y);
                    let g = grad(&loss, &psi.tensors, create_graph);
                    check_finite(&g)?;
                    let next = psi
                        .tensors
                        .iter()
                        .zip(&g)
                        .map(|(t, gi)| t.sub(&gi.mul_scalar(self.inner_lr)))
                        .collect();
                    psi = psi.with_tensors(next);
                }
                Ok(psi)
            }
        }
    }

    /// Query predictions after adaptation.
    pub fn predict(&self, ep: &Episode) -> Result<Vec<usize>> {
        let p = self.params.to_params();
        let lp = if self.algorithm == Algorithm::Protonet {
            no_grad(|| self.query_log_probs(&p, TaskView::Plain(ep), false))?
        } else {
            self.query_log_probs(&p, TaskView::Plain(ep), false)?
        };
        Ok(nn::argmax_rows(lp.data(), ep.n_way))
    }

    /// Query accuracy after adaptation on the support set.
    pub fn episode_accuracy(&self, ep: &Episode) -> Result<f64> {
        Ok(nn::accuracy(&self.predict(ep)?, &ep.query_y))
    }

    /// Class probabilities for an episode's queries.
    pub fn protonet_predict(&self, ep: &Episode) -> Result<Array> {
        if self.algorithm != Algorithm::Protonet {
            return Err(Error::InvalidArgument("protonet_predict on a non-protonet learner".into()));
        }
        let p = self.params.to_constants();
        let lp = no_grad(|| self.query_log_probs(&p, TaskView::Plain(ep), false))?;
        Ok(lp.exp().to_array())
    }
}

fn check_finite(g: &[Tensor]) -> Result<()> {
    if g.iter().all(|t| t.data().iter().all(|v| v.is_finite())) {
        Ok(())
    } else {
        Err(Error::NonFinite("inner-loop gradient".into()))
    }
}

/// Rows of `t` by index; `None` rows are zero.
fn take_rows(t: &Tensor, rows: &[Option<usize>]) -> Tensor {
    let sh = t.shape();
    let r = t.numel() / sh[0];
    let mut idx = Vec::with_capacity(rows.len() * r);
    for row in rows {
        match row {
            Some(i) => idx.extend((i * r..(i + 1) * r).map(|j| j as u32)),
            None => idx.extend(std::iter::repeat_n(GatherIndex::SKIP, r)),
        }
    }
    let mut out = sh.to_vec();
    out[0] = rows.len();
    t.gather(Rc::new(GatherIndex::new(idx, sh.to_vec(), out)))
}

/// The first `n` columns of a linear head.
fn head_logits(w: &Tensor, b: &Tensor, x: &Tensor, n: usize) -> Tensor {
    let width = w.shape()[1];
    let (w, b) = if n == width {
        (w.clone(), b.clone())
    } else {
        (w.slice(1, 0, n), b.slice(0, 0, n))
    };
    nn::linear(x, &w, &b)
}

/// Gradient steps on a linear head over fixed features. With `create_graph`
/// the result stays differentiable with respect to the initial head and the
/// features.
#[allow(clippy::too_many_arguments)]
pub fn adapt_head(
    w: &Tensor,
    b: &Tensor,
    features: &Tensor,
    labels: &[usize],
    n: usize,
    lr: f64,
    steps: usize,
    create_graph: bool,
) -> Result<(Tensor, Tensor)> {
    let (mut w, mut b) = (w.clone(), b.clone());
    for _ in 0..steps {
        let loss = nn::cross_entropy(&head_logits(&w, &b, features, n), labels);
        let g = grad(&loss, &[w.clone(), b.clone()], create_graph);
        check_finite(&g)?;
        w = w.sub(&g[0].mul_scalar(lr));
        b = b.sub(&g[1].mul_scalar(lr));
    }
    Ok((w, b))
}

/// Log-softmax over negative Euclidean distances to the class means of the support embeddings.
pub fn prototype_log_probs(support: &Tensor, support_y: &[usize], n_way: usize, query: &Tensor) -> Result<Tensor> {
    let s = support.shape()[0];
    if support_y.len() != s {
        return Err(Error::Shape("support labels do not match embeddings".into()));
    }
    let mut counts = vec![0usize; n_way];
    for &y in support_y {
        if y >= n_way {
            return Err(Error::InvalidArgument(format!("support label {y} outside {n_way} ways")));
        }
        counts[y] += 1;
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InvalidArgument(format!("class {c} has no support examples")));
    }
    let mut avg = vec![0.0; n_way * s];
    for (i, &y) in support_y.iter().enumerate() {
        avg[y * s + i] = 1.0 / counts[y] as f64;
    }
    let protos = Tensor::from_vec(&[n_way, s], avg).matmul(support);
    let d = support.shape()[1];
    let q = query.shape()[0];
    let diff = query.reshape(&[q, 1, d]).sub(&protos.reshape(&[1, n_way, d]));
    let dist = diff.square().sum_last().reshape(&[q, n_way]).add_scalar(DIST_EPS).powf(0.5);
    Ok(dist.neg().log_softmax())
}

/// Mean over rows of KL(p ‖ q) from log-probabilities.
pub fn kl_divergence(log_p: &Tensor, log_q: &Tensor) -> Tensor {
    let rows = log_p.shape()[0].max(1) as f64;
    log_p.exp().mul(&log_p.sub(log_q)).sum().mul_scalar(1.0 / rows)
}

/// Teacher log-probabilities over the episode's classes, renormalised.
pub fn teacher_log_probs(model: &PretrainedModel, query_x: &Array, class_ids: &[usize]) -> Result<Tensor> {
    let cols = class_ids
        .iter()
        .map(|&c| {
            model.column_of(c).ok_or_else(|| {
                Error::InvalidArgument(format!("class {c} is not claimed by model {}", model.model_id))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(no_grad(|| {
        model
            .logits(&Tensor::constant(query_x.clone()))
            .select_cols(&cols)
            .log_softmax()
            .detach()
    }))
}

/// Distillation loss on a generated task: KL(meta ‖ teacher) averaged over queries.
pub fn task_loss_new(
    meta_log_probs: &Tensor,
    model: &PretrainedModel,
    query_x: &Array,
    class_ids: &[usize],
) -> Result<Tensor> {
    let t = teacher_log_probs(model, query_x, class_ids)?;
    if t.shape() != meta_log_probs.shape() {
        return Err(Error::Shape(format!(
            "teacher {:?} vs meta-learner {:?}",
            t.shape(),
            meta_log_probs.shape()
        )));
    }
    Ok(kl_divergence(meta_log_probs, &t))
}

/// Hard-label cross-entropy from log-probabilities.
pub fn task_loss_memory(meta_log_probs: &Tensor, y: &[usize]) -> Result<Tensor> {
    let n = meta_log_probs.shape()[1];
    if let Some(&bad) = y.iter().find(|&&l| l >= n) {
        return Err(Error::InvalidArgument(format!("label {bad} outside {n} classes")));
    }
    if y.len() != meta_log_probs.shape()[0] {
        return Err(Error::Shape("label count does not match predictions".into()));
    }
    Ok(meta_log_probs.pick(y).mean().neg())
}

/// A task as the forward pass sees it.
#[derive(Clone, Copy, Debug)]
pub enum TaskView<'a> {
    Plain(&'a Episode),
    Mixup(&'a MixupEpisode),
}

impl TaskView<'_> {
    pub fn n_way(&self) -> usize {
        match self {
            TaskView::Plain(e) => e.n_way,
            TaskView::Mixup(m) => m.n_way(),
        }
    }

    pub fn support_y(&self) -> &[usize] {
        match self {
            TaskView::Plain(e) => &e.support_y,
            TaskView::Mixup(m) => m.support_y(),
        }
    }

    pub fn query_y(&self) -> &[usize] {
        match self {
            TaskView::Plain(e) => &e.query_y,
            TaskView::Mixup(m) => m.query_y(),
        }
    }
}

impl<'a> From<&'a MemoryTask> for TaskView<'a> {
    fn from(t: &'a MemoryTask) -> Self {
        match t {
            MemoryTask::Plain(e) => TaskView::Plain(e),
            MemoryTask::Mixup(m) => TaskView::Mixup(m),
        }
    }
}

/// Which loss a meta-update applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossBranch {
    /// Generated tasks: distillation against the source model, or hard labels when `soft` is off.
    New { soft: bool },
    /// Replayed or interpolated tasks: hard-label cross-entropy.
    Memory,
}

/// Mean task loss over a batch, as a differentiable scalar.
pub fn batch_loss(
    state: &MetaLearnerState,
    p: &TensorParams,
    tasks: &[TaskView<'_>],
    branch: LossBranch,
    pool: Option<&[PretrainedModel]>,
    create_graph: bool,
) -> Result<Tensor> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("empty task batch".into()));
    }
    let mut total: Option<Tensor> = None;
    for (i, task) in tasks.iter().enumerate() {
        let lp = state.query_log_probs(p, *task, create_graph)?;
        let loss = match (branch, task) {
            (LossBranch::New { soft: true }, TaskView::Plain(ep)) => {
                let pool = pool.ok_or_else(|| Error::InvalidArgument("distillation needs the model pool".into()))?;
                let m = ep
                    .source_model
                    .and_then(|m| pool.get(m))
                    .ok_or_else(|| Error::InvalidArgument(format!("task {i} has no valid source model")))?;
                let ids: Vec<usize> = ep
                    .class_origin
                    .iter()
                    .map(|o| o.class_id().ok_or_else(|| Error::InvalidArgument("mixed class in a new task".into())))
                    .collect::<Result<_>>()?;
                task_loss_new(&lp, m, &ep.query_x, &ids)?
            }
            (LossBranch::New { soft: true }, TaskView::Mixup(_)) => {
                return Err(Error::InvalidArgument("mixup task on the new-task branch".into()))
            }
            _ => task_loss_memory(&lp, task.query_y())?,
        };
        if !loss.item().is_finite() {
            let what = match task {
                TaskView::Plain(e) => format!("{:?} task from model {:?}", e.provenance, e.source_model),
                TaskView::Mixup(_) => "mixup task".to_string(),
            };
            return Err(Error::NonFinite(format!("loss of {what} (batch position {i})")));
        }
        total = Some(match total {
            None => loss,
            Some(t) => t.add(&loss),
        });
    }
    Ok(total.expect("non-empty").mul_scalar(1.0 / tasks.len() as f64))
}

/// One outer optimizer step on the mean batch loss. Returns the pre-step loss.
pub fn meta_update(
    state: &mut MetaLearnerState,
    tasks: &[TaskView<'_>],
    branch: LossBranch,
    pool: Option<&[PretrainedModel]>,
) -> Result<f64> {
    let p = state.params.to_params();
    let second_order = state.algorithm.has_head();
    let loss = batch_loss(state, &p, tasks, branch, pool, second_order)?;
    let g = grad(&loss, &p.tensors, false);
    check_finite(&g).map_err(|_| Error::NonFinite("outer gradient".into()))?;
    state.optimizer.step(&mut state.params, &g);
    state.updates += 1;
    Ok(loss.item())
}
