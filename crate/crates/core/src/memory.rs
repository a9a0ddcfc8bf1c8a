//! Reservoir memory over generated episodes and the task-interpolation
//! operators built on it.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::{ClassOrigin, Episode, Provenance};
use crate::tensor::{Array, Tensor};

/// Fixed-capacity uniform sample of every generated episode offered so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBuffer {
    pub capacity: usize,
    pub slots: Vec<Episode>,
    pub stream_count: u64,
}

impl MemoryBuffer {
    pub fn new(capacity: usize) -> Self {
        MemoryBuffer {
            capacity,
            slots: Vec::with_capacity(capacity),
            stream_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Algorithm R at episode granularity.
    pub fn reservoir_update(&mut self, task: Episode, rng: &mut impl Rng) -> Result<()> {
        if task.provenance != Provenance::Generated {
            return Err(Error::InvalidArgument(format!(
                "only generated episodes enter memory, got {:?}",
                task.provenance
            )));
        }
        self.stream_count += 1;
        if self.slots.len() < self.capacity {
            self.slots.push(task);
        } else if self.capacity > 0 {
            let j = rng.random_range(0..self.stream_count);
            if (j as usize) < self.capacity {
                self.slots[j as usize] = task;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Combination,
    Mixup,
    Hybrid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerPolicy {
    /// Any layer shared across tasks, drawn uniformly.
    UniformSharedLayers,
    /// Blend raw inputs only.
    InputOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpolationConfig {
    pub strategy: Strategy,
    pub hybrid_combination_fraction: f64,
    pub beta_alpha: f64,
    pub beta_beta: f64,
    pub mixup_layer_policy: LayerPolicy,
}

impl Default for InterpolationConfig {
    fn default() -> Self {
        InterpolationConfig {
            strategy: Strategy::Combination,
            hybrid_combination_fraction: 0.8,
            beta_alpha: 0.5,
            beta_beta: 0.5,
            mixup_layer_policy: LayerPolicy::UniformSharedLayers,
        }
    }
}

impl InterpolationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hybrid_combination_fraction) {
            return Err(Error::Config("hybrid_combination_fraction must lie in [0, 1]".into()));
        }
        if !(self.beta_alpha > 0.0 && self.beta_beta > 0.0) {
            return Err(Error::Config("Beta parameters must be positive".into()));
        }
        Ok(())
    }
}

/// One stored class: episode index, episode-local class, global origin id.
#[derive(Clone, Copy, Debug)]
struct Slot {
    episode: usize,
    class: usize,
}

/// Stored classes grouped by global class id.
fn classes_by_origin(buffer: &MemoryBuffer) -> BTreeMap<usize, Vec<Slot>> {
    let mut out: BTreeMap<usize, Vec<Slot>> = BTreeMap::new();
    for (e, ep) in buffer.slots.iter().enumerate() {
        for (c, o) in ep.class_origin.iter().enumerate() {
            if let Some(id) = o.class_id() {
                out.entry(id).or_default().push(Slot { episode: e, class: c });
            }
        }
    }
    out
}

fn check_pool(buffer: &MemoryBuffer, by_origin: &BTreeMap<usize, Vec<Slot>>, n_way: usize) -> Result<()> {
    if buffer.is_empty() {
        return Err(Error::InvalidArgument("memory buffer is empty".into()));
    }
    if by_origin.len() < n_way {
        return Err(Error::InvalidArgument(format!(
            "memory holds {} distinct classes, {n_way} needed",
            by_origin.len()
        )));
    }
    Ok(())
}

/// Draws `count` distinct origin classes and one stored occurrence of each,
/// retrying a few times to span at least two source episodes.
fn draw_slots(by_origin: &BTreeMap<usize, Vec<Slot>>, count: usize, rng: &mut impl Rng) -> Vec<(usize, Slot)> {
    let ids: Vec<usize> = by_origin.keys().copied().collect();
    let episodes_available = by_origin
        .values()
        .flatten()
        .map(|s| s.episode)
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    let mut pick = || -> Vec<(usize, Slot)> {
        let chosen: Vec<usize> = ids.choose_multiple(rng, count).copied().collect();
        chosen
            .into_iter()
            .map(|id| (id, *by_origin[&id].choose(rng).expect("non-empty")))
            .collect()
    };
    let mut best = pick();
    if count >= 2 && episodes_available >= 2 {
        for _ in 0..16 {
            if best.iter().any(|(_, s)| s.episode != best[0].1.episode) {
                break;
            }
            best = pick();
        }
    }
    best
}

fn class_rows(buffer: &MemoryBuffer, slot: Slot) -> (Array, Array) {
    let ep = &buffer.slots[slot.episode];
    (
        ep.support_x.select_rows(&ep.support_rows(slot.class)),
        ep.query_x.select_rows(&ep.query_rows(slot.class)),
    )
}

/// Assembles an episode from per-class (support, query) arrays.
fn assemble(parts: Vec<(Array, Array)>, origins: Vec<ClassOrigin>, provenance: Provenance) -> Result<Episode> {
    let n_way = parts.len();
    let k = parts[0].0.rows();
    let q = parts[0].1.rows();
    if parts.iter().any(|(s, qq)| s.rows() != k || qq.rows() != q) {
        return Err(Error::Dataset("stored classes have different shot counts".into()));
    }
    let support: Vec<&Array> = parts.iter().map(|p| &p.0).collect();
    let query: Vec<&Array> = parts.iter().map(|p| &p.1).collect();
    let ep = Episode {
        support_x: Array::concat_rows(&support)?,
        support_y: (0..n_way).flat_map(|c| std::iter::repeat_n(c, k)).collect(),
        query_x: Array::concat_rows(&query)?,
        query_y: (0..n_way).flat_map(|c| std::iter::repeat_n(c, q)).collect(),
        n_way,
        class_origin: origins,
        provenance,
        source_model: None,
    };
    ep.validate()?;
    Ok(ep)
}

/// Forms a new episode from whole classes of stored episodes.
pub fn interpolate_combination(buffer: &MemoryBuffer, n_way: usize, rng: &mut impl Rng) -> Result<Episode> {
    let by_origin = classes_by_origin(buffer);
    check_pool(buffer, &by_origin, n_way)?;
    let picks = draw_slots(&by_origin, n_way, rng);
    let origins = picks
        .iter()
        .map(|(_, s)| buffer.slots[s.episode].class_origin[s.class].clone())
        .collect();
    let parts = picks.iter().map(|(_, s)| class_rows(buffer, *s)).collect();
    assemble(parts, origins, Provenance::Interpolated)
}

/// A task whose classes are blends of two stored classes at a hidden layer.
///
/// `first` and `second` are aligned episodes: class `c` of the mixed task
/// blends class `c` of `first` with class `c` of `second` at `layers[c]` with
/// weight `lambdas[c]` on `first`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixupEpisode {
    pub first: Episode,
    pub second: Episode,
    pub layers: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub class_origin: Vec<ClassOrigin>,
}

impl MixupEpisode {
    pub fn n_way(&self) -> usize {
        self.first.n_way
    }

    pub fn support_y(&self) -> &[usize] {
        &self.first.support_y
    }

    pub fn query_y(&self) -> &[usize] {
        &self.first.query_y
    }

    /// The blended episode when every class mixes at the input.
    pub fn input_blend(&self) -> Result<Episode> {
        if self.layers.iter().any(|&l| l != 0) {
            return Err(Error::InvalidArgument("hidden-layer mixup cannot be materialised as images".into()));
        }
        let mix = |a: &Array, b: &Array, labels: &[usize]| -> Array {
            let r = a.row_len();
            let mut out = a.clone();
            for (i, &y) in labels.iter().enumerate() {
                let l = self.lambdas[y];
                for j in i * r..(i + 1) * r {
                    out.data[j] = l * a.data[j] + (1.0 - l) * b.data[j];
                }
            }
            out
        };
        let f = &self.first;
        let s = &self.second;
        Ok(Episode {
            support_x: mix(&f.support_x, &s.support_x, &f.support_y),
            query_x: mix(&f.query_x, &s.query_x, &f.query_y),
            class_origin: self.class_origin.clone(),
            provenance: Provenance::Interpolated,
            ..f.clone()
        })
    }
}

/// `lambda * a + (1 - lambda) * b`.
pub fn blend(a: &Tensor, b: &Tensor, lambda: f64) -> Tensor {
    a.mul_scalar(lambda).add(&b.mul_scalar(1.0 - lambda))
}

/// Builds a mixup task. `mixable_layers` is the number of task-shared
/// representation depths the meta-learner exposes (layer 0 is the input), or
/// `None` when it has no task-shared layers.
pub fn interpolate_mixup(
    buffer: &MemoryBuffer,
    n_way: usize,
    config: &InterpolationConfig,
    mixable_layers: Option<usize>,
    rng: &mut impl Rng,
) -> Result<MixupEpisode> {
    config.validate()?;
    let depths = match (config.mixup_layer_policy, mixable_layers) {
        (LayerPolicy::InputOnly, _) => 1,
        (LayerPolicy::UniformSharedLayers, Some(n)) if n > 0 => n,
        (LayerPolicy::UniformSharedLayers, _) => {
            return Err(Error::Config(
                "meta-learner has no task-shared layers; mixup needs the input_only policy".into(),
            ))
        }
    };
    let by_origin = classes_by_origin(buffer);
    check_pool(buffer, &by_origin, n_way)?;
    if by_origin.len() < 2 {
        return Err(Error::InvalidArgument("mixup needs two distinct stored classes".into()));
    }
    let beta = Beta::new(config.beta_alpha, config.beta_beta)
        .map_err(|e| Error::Config(format!("Beta distribution: {e}")))?;

    // Prefer 2 * n_way distinct classes; fall back to pairwise-distinct pairs.
    let pairs: Vec<((usize, Slot), (usize, Slot))> = if by_origin.len() >= 2 * n_way {
        let picks = draw_slots(&by_origin, 2 * n_way, rng);
        (0..n_way).map(|c| (picks[2 * c], picks[2 * c + 1])).collect()
    } else {
        (0..n_way)
            .map(|_| {
                let p = draw_slots(&by_origin, 2, rng);
                (p[0], p[1])
            })
            .collect()
    };

    let mut layers = Vec::with_capacity(n_way);
    let mut lambdas = Vec::with_capacity(n_way);
    let mut origins = Vec::with_capacity(n_way);
    let mut first_parts = Vec::with_capacity(n_way);
    let mut second_parts = Vec::with_capacity(n_way);
    let mut first_origins = Vec::with_capacity(n_way);
    let mut second_origins = Vec::with_capacity(n_way);
    for ((ia, sa), (ib, sb)) in pairs {
        let layer = rng.random_range(0..depths);
        let lambda: f64 = beta.sample(rng);
        layers.push(layer);
        lambdas.push(lambda);
        origins.push(ClassOrigin::Mixed {
            first: ia,
            second: ib,
            layer,
            lambda,
        });
        first_parts.push(class_rows(buffer, sa));
        second_parts.push(class_rows(buffer, sb));
        first_origins.push(buffer.slots[sa.episode].class_origin[sa.class].clone());
        second_origins.push(buffer.slots[sb.episode].class_origin[sb.class].clone());
    }
    Ok(MixupEpisode {
        first: assemble(first_parts, first_origins, Provenance::Interpolated)?,
        second: assemble(second_parts, second_origins, Provenance::Interpolated)?,
        layers,
        lambdas,
        class_origin: origins,
    })
}

/// A task replayed from memory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum MemoryTask {
    Plain(Episode),
    Mixup(MixupEpisode),
}

impl MemoryTask {
    pub fn is_mixup(&self) -> bool {
        matches!(self, MemoryTask::Mixup(_))
    }

    pub fn n_way(&self) -> usize {
        match self {
            MemoryTask::Plain(e) => e.n_way,
            MemoryTask::Mixup(m) => m.n_way(),
        }
    }

    pub fn query_y(&self) -> &[usize] {
        match self {
            MemoryTask::Plain(e) => &e.query_y,
            MemoryTask::Mixup(m) => m.query_y(),
        }
    }
}

/// Builds `batch` interpolated tasks per the configured strategy.
pub fn sample_interpolated_batch(
    buffer: &MemoryBuffer,
    batch: usize,
    n_way: usize,
    config: &InterpolationConfig,
    mixable_layers: Option<usize>,
    rng: &mut impl Rng,
) -> Result<Vec<MemoryTask>> {
    if buffer.is_empty() {
        return Err(Error::InvalidArgument("memory buffer is empty".into()));
    }
    config.validate()?;
    (0..batch)
        .map(|_| {
            let combine = match config.strategy {
                Strategy::Combination => true,
                Strategy::Mixup => false,
                Strategy::Hybrid => rng.random::<f64>() < config.hybrid_combination_fraction,
            };
            if combine {
                interpolate_combination(buffer, n_way, rng).map(MemoryTask::Plain)
            } else {
                interpolate_mixup(buffer, n_way, config, mixable_layers, rng).map(MemoryTask::Mixup)
            }
        })
        .collect()
}

/// Uniformly replays stored episodes unchanged.
pub fn sample_raw_batch(buffer: &MemoryBuffer, batch: usize, rng: &mut impl Rng) -> Result<Vec<MemoryTask>> {
    if buffer.is_empty() {
        return Err(Error::InvalidArgument("memory buffer is empty".into()));
    }
    Ok((0..batch)
        .map(|_| MemoryTask::Plain(buffer.slots.choose(rng).expect("non-empty").clone()))
        .collect())
}
