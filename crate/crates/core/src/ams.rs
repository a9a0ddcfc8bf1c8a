//! Automated model selection: a softmax reliability policy over the pool,
//! trained with REINFORCE.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metalearn::MetaLearnerState;
use crate::tasks::Episode;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineMode {
    /// Arithmetic mean of every past reward.
    RunningMean,
    /// `b <- decay * b + (1 - decay) * r`.
    Exponential { decay: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityPolicy {
    pub weights: Vec<f64>,
    pub baseline: f64,
    pub reward_history: Vec<f64>,
    pub select_batch_size: usize,
    pub baseline_mode: BaselineMode,
}

impl ReliabilityPolicy {
    /// Uniform prior over `pool_size` models.
    pub fn new(pool_size: usize, select_batch_size: usize) -> Result<Self> {
        if pool_size == 0 {
            return Err(Error::InvalidArgument("empty model pool".into()));
        }
        if select_batch_size == 0 || select_batch_size > pool_size {
            return Err(Error::Config(format!(
                "select_batch_size {select_batch_size} must lie in 1..={pool_size}"
            )));
        }
        Ok(ReliabilityPolicy {
            weights: vec![0.0; pool_size],
            baseline: 0.0,
            reward_history: Vec::new(),
            select_batch_size,
            baseline_mode: BaselineMode::RunningMean,
        })
    }

    pub fn probabilities(&self) -> Vec<f64> {
        selection_probabilities(&self.weights)
    }
}

/// Max-shifted softmax.
pub fn selection_probabilities(w: &[f64]) -> Vec<f64> {
    let m = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = w.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Draws `select_batch_size` distinct indices, each draw proportional to the
/// softmax mass of the remaining candidates.
pub fn select_models(policy: &ReliabilityPolicy, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let k = policy.select_batch_size;
    let n = policy.weights.len();
    if k > n {
        return Err(Error::InvalidArgument(format!("cannot select {k} of {n} models")));
    }
    let mut p = policy.probabilities();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = p.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &pi) in p.iter().enumerate() {
            if pi <= 0.0 {
                continue;
            }
            pick = Some(i);
            if u < pi {
                break;
            }
            u -= pi;
        }
        let i = pick.ok_or_else(|| Error::NonFinite("selection probabilities".into()))?;
        out.push(i);
        p[i] = 0.0;
    }
    Ok(out)
}

/// Uniform selection without replacement, used when AMS is off.
pub fn select_uniform(pool_size: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if k > pool_size {
        return Err(Error::InvalidArgument(format!("cannot select {k} of {pool_size} models")));
    }
    Ok(rand::seq::index::sample(rng, pool_size, k).into_vec())
}

/// Sum of log-softmax weights over the selected indices.
pub fn log_policy_prob(w: &[f64], selected: &[usize]) -> f64 {
    let m = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + w.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    selected.iter().map(|&i| w[i] - lse).sum()
}

/// Gradient of [`log_policy_prob`] with respect to `w`.
pub fn log_policy_grad(w: &[f64], selected: &[usize]) -> Vec<f64> {
    let p = selection_probabilities(w);
    let k = selected.len() as f64;
    let mut g: Vec<f64> = p.iter().map(|pj| -k * pj).collect();
    for &i in selected {
        g[i] += 1.0;
    }
    g
}

/// Mean query accuracy over validation tasks after per-task adaptation.
pub fn compute_reward(state: &MetaLearnerState, validation_tasks: &[Episode]) -> Result<f64> {
    if validation_tasks.is_empty() {
        return Err(Error::InvalidArgument("no validation tasks".into()));
    }
    let mut total = 0.0;
    for t in validation_tasks {
        total += state.episode_accuracy(t)?;
    }
    Ok(total / validation_tasks.len() as f64)
}

/// REINFORCE step with the pre-update baseline, then a baseline refresh.
pub fn reinforce_update(policy: &mut ReliabilityPolicy, selected: &[usize], reward: f64, policy_lr: f64) -> Result<()> {
    if !reward.is_finite() {
        return Err(Error::NonFinite(format!("reward {reward}")));
    }
    if let Some(&bad) = selected.iter().find(|&&i| i >= policy.weights.len()) {
        return Err(Error::InvalidArgument(format!("selected index {bad} outside the pool")));
    }
    let advantage = reward - policy.baseline;
    if advantage != 0.0 {
        let g = log_policy_grad(&policy.weights, selected);
        for (w, gi) in policy.weights.iter_mut().zip(g) {
            *w += policy_lr * gi * advantage;
        }
    }
    policy.reward_history.push(reward);
    policy.baseline = match policy.baseline_mode {
        BaselineMode::RunningMean => policy.reward_history.iter().sum::<f64>() / policy.reward_history.len() as f64,
        BaselineMode::Exponential { decay } => {
            if policy.reward_history.len() == 1 {
                reward
            } else {
                decay * policy.baseline + (1.0 - decay) * reward
            }
        }
    };
    Ok(())
}

/// Softmax mass on trusted models.
pub fn rsr(w: &[f64], trusted: &[usize]) -> f64 {
    let p = selection_probabilities(w);
    trusted.iter().map(|&i| p[i]).sum::<f64>().clamp(0.0, 1.0)
}
