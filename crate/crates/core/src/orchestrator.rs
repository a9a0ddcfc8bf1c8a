//! The meta-training loop: a coin flip per iteration between generating new
//! tasks from selected pool models and replaying tasks from memory.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ams::{self, ReliabilityPolicy};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::inversion::{generate_task, generate_task_warm, GeneratorSession};
use crate::memory::{sample_interpolated_batch, sample_raw_batch, MemoryBuffer, MemoryTask};
use crate::metalearn::{meta_update, LossBranch, MetaLearnerState, TaskView};
use crate::modelpool::{PoolManifest, PretrainedModel};
use crate::nn::ParamBundle;
use crate::tasks::{sample_episode, DatasetTriple, Episode, Role};

pub const CHECKPOINT_VERSION: u32 = 1;

const LOOP_STREAM: u64 = 0;
const INIT_STREAM: u64 = 1;
const VALIDATION_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    NewTasks,
    Memory,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::NewTasks => "new_tasks",
            Branch::Memory => "memory",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub branch: Branch,
    pub loss: f64,
    pub selected: Vec<usize>,
    pub reward: Option<f64>,
    pub baseline: Option<f64>,
    pub rsr: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRunReport {
    pub records: Vec<IterationRecord>,
    /// Iteration of the retained best-validation checkpoint.
    pub peak_iteration: Option<usize>,
    pub peak_val_acc: Option<f64>,
    pub last_checkpoint: Option<usize>,
}

impl TrainRunReport {
    pub fn validation_points(&self) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.val_acc.map(|a| (r.iteration, a)))
            .collect()
    }
}

/// Best-validation parameters seen so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeakSnapshot {
    pub iteration: usize,
    pub val_acc: f64,
    pub params: ParamBundle,
}

/// Everything that evolves during a run; serialised whole into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub format_version: u32,
    pub config: RunConfig,
    pub pool_fingerprints: Vec<String>,
    pub iteration: usize,
    pub meta: MetaLearnerState,
    pub memory: Option<MemoryBuffer>,
    pub policy: Option<ReliabilityPolicy>,
    pub generators: Vec<Option<GeneratorSession>>,
    pub peak: Option<PeakSnapshot>,
    pub rng: ChaCha8Rng,
    pub report: TrainRunReport,
}

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(s);
    r
}

/// The frozen validation and reward episodes, drawn once from the meta-val split.
pub fn frozen_validation_tasks(config: &RunConfig, data: &DatasetTriple) -> Result<(Vec<Episode>, Vec<Episode>)> {
    let split = data.split(Role::MetaVal);
    let n = config.n_way.min(split.classes.len());
    if n == 0 {
        return Err(Error::Dataset("meta-val split has no classes".into()));
    }
    let mut rng = stream(config.seed, VALIDATION_STREAM);
    let mut draw = |count: usize| -> Result<Vec<Episode>> {
        (0..count)
            .map(|_| sample_episode(split, n, config.k_shot, config.k_query, &mut rng))
            .collect()
    };
    let reward = draw(config.reward_tasks)?;
    let val = draw(config.validation_episodes)?;
    Ok((val, reward))
}

/// A meta-training run over a fixed pool and dataset.
pub struct Trainer<'a> {
    pub state: RunState,
    models: Vec<PretrainedModel>,
    trusted: Vec<usize>,
    validation: Vec<Episode>,
    reward_tasks: Vec<Episode>,
    checkpoint_dir: Option<PathBuf>,
    _data: &'a DatasetTriple,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &RunConfig, pool: &PoolManifest, data: &'a DatasetTriple) -> Result<Self> {
        config.validate()?;
        if pool.is_empty() {
            return Err(Error::Pool("model pool is empty".into()));
        }
        let [c, h, _] = data.train.image_shape;
        let meta = MetaLearnerState::new(&config.meta(), c, h, config.n_way, &mut stream(config.seed, INIT_STREAM))?;
        let policy = if config.ams_enabled {
            let mut p = ReliabilityPolicy::new(pool.len(), config.select_batch_size)?;
            p.baseline_mode = config.baseline_mode();
            Some(p)
        } else {
            None
        };
        let state = RunState {
            format_version: CHECKPOINT_VERSION,
            config: config.clone(),
            pool_fingerprints: pool.fingerprints(),
            iteration: 0,
            meta,
            memory: config.memory_enabled.then(|| MemoryBuffer::new(config.memory_capacity)),
            policy,
            generators: vec![None; pool.len()],
            peak: None,
            rng: stream(config.seed, LOOP_STREAM),
            report: TrainRunReport {
                records: Vec::new(),
                peak_iteration: None,
                peak_val_acc: None,
                last_checkpoint: None,
            },
        };
        Self::from_state(state, pool, data)
    }

    fn from_state(state: RunState, pool: &PoolManifest, data: &'a DatasetTriple) -> Result<Self> {
        let (validation, reward_tasks) = frozen_validation_tasks(&state.config, data)?;
        Ok(Trainer {
            models: pool.models(),
            trusted: pool.trusted_indices(),
            validation,
            reward_tasks,
            checkpoint_dir: None,
            _data: data,
            state,
        })
    }

    /// Writes periodic checkpoints under `dir` when `checkpoint_interval` is set.
    pub fn with_checkpoint_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    pub fn resume(path: &Path, pool: &PoolManifest, data: &'a DatasetTriple) -> Result<Self> {
        let state = load_checkpoint(path)?;
        if state.pool_fingerprints != pool.fingerprints() {
            return Err(Error::Checkpoint(format!(
                "{} was written for a different model pool",
                path.display()
            )));
        }
        Self::from_state(state, pool, data)
    }

    pub fn validation_tasks(&self) -> &[Episode] {
        &self.validation
    }

    pub fn reward_tasks(&self) -> &[Episode] {
        &self.reward_tasks
    }

    pub fn is_done(&self) -> bool {
        self.state.iteration >= self.state.config.total_iterations
    }

    /// Runs to `total_iterations`.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.state.config.total_iterations)
    }

    pub fn run_until(&mut self, iteration: usize) -> Result<()> {
        let end = iteration.min(self.state.config.total_iterations);
        while self.state.iteration < end {
            self.step()?;
        }
        Ok(())
    }

    /// One iteration of the loop.
    pub fn step(&mut self) -> Result<()> {
        let k = self.state.iteration + 1;
        let cfg = self.state.config.clone();
        let p: f64 = self.state.rng.random();
        let memory_ready = self.state.memory.as_ref().is_some_and(|m| !m.is_empty());
        let branch = if memory_ready && p >= cfg.branch_threshold {
            Branch::Memory
        } else {
            Branch::NewTasks
        };
        let mut record = match branch {
            Branch::NewTasks => self.new_task_step(&cfg),
            Branch::Memory => self.memory_step(&cfg),
        }
        .map_err(|e| e.context(format!("iteration {k}, {branch} branch")))?;
        record.iteration = k;
        if let Some(policy) = &self.state.policy {
            record.rsr = Some(ams::rsr(&policy.weights, &self.trusted));
        }
        if k % cfg.validation_interval == 0 || k == cfg.total_iterations {
            let acc = self
                .validation_accuracy()
                .map_err(|e| e.context(format!("validation at iteration {k}")))?;
            record.val_acc = Some(acc);
            if self.state.peak.as_ref().is_none_or(|p| acc > p.val_acc) {
                self.state.peak = Some(PeakSnapshot {
                    iteration: k,
                    val_acc: acc,
                    params: self.state.meta.params.clone(),
                });
                self.state.report.peak_iteration = Some(k);
                self.state.report.peak_val_acc = Some(acc);
            }
        }
        self.state.report.records.push(record);
        self.state.iteration = k;
        if cfg.checkpoint_interval > 0 && k % cfg.checkpoint_interval == 0 {
            if let Some(dir) = self.checkpoint_dir.clone() {
                self.checkpoint(&dir.join(format!("ckpt-{k:06}.json")))?;
            }
        }
        Ok(())
    }

    fn new_task_step(&mut self, cfg: &RunConfig) -> Result<IterationRecord> {
        let st = &mut self.state;
        let selected = match &st.policy {
            Some(policy) => ams::select_models(policy, &mut st.rng)?,
            None => ams::select_uniform(self.models.len(), cfg.select_batch_size, &mut st.rng)?,
        };
        let gen_cfg = cfg.generator();
        let mut tasks = Vec::with_capacity(selected.len());
        for &m in &selected {
            let model = &self.models[m];
            let (ep, _) = if cfg.gen_warm_start {
                generate_task_warm(
                    model,
                    m,
                    cfg.n_way,
                    cfg.k_shot,
                    cfg.gen_k_query,
                    &gen_cfg,
                    &mut st.generators[m],
                    &mut st.rng,
                )
            } else {
                generate_task(model, m, cfg.n_way, cfg.k_shot, cfg.gen_k_query, &gen_cfg, &mut st.rng)
            }
            .map_err(|e| e.context(format!("generating from model {m}")))?;
            tasks.push(ep);
        }
        if let Some(mem) = &mut st.memory {
            for t in &tasks {
                mem.reservoir_update(t.clone(), &mut st.rng)?;
            }
        }
        let views: Vec<TaskView> = tasks.iter().map(TaskView::Plain).collect();
        let loss = meta_update(
            &mut st.meta,
            &views,
            LossBranch::New {
                soft: cfg.soft_label_enabled,
            },
            Some(&self.models),
        )?;
        let (mut reward, mut baseline) = (None, None);
        if let Some(policy) = &mut st.policy {
            let r = ams::compute_reward(&st.meta, &self.reward_tasks)?;
            ams::reinforce_update(policy, &selected, r, cfg.policy_lr)?;
            reward = Some(r);
            baseline = Some(policy.baseline);
        }
        Ok(IterationRecord {
            iteration: 0,
            branch: Branch::NewTasks,
            loss,
            selected,
            reward,
            baseline,
            rsr: None,
            val_acc: None,
        })
    }

    fn memory_step(&mut self, cfg: &RunConfig) -> Result<IterationRecord> {
        let st = &mut self.state;
        let mem = st.memory.as_ref().expect("memory branch needs a buffer");
        let tasks: Vec<MemoryTask> = if cfg.interpolation_enabled {
            sample_interpolated_batch(
                mem,
                cfg.tasks_per_iteration,
                cfg.n_way,
                &cfg.interpolation(),
                st.meta.mixable_layers(),
                &mut st.rng,
            )?
        } else {
            sample_raw_batch(mem, cfg.tasks_per_iteration, &mut st.rng)?
        };
        let views: Vec<TaskView> = tasks.iter().map(TaskView::from).collect();
        let loss = meta_update(&mut st.meta, &views, LossBranch::Memory, None)?;
        Ok(IterationRecord {
            iteration: 0,
            branch: Branch::Memory,
            loss,
            selected: Vec::new(),
            reward: None,
            baseline: None,
            rsr: None,
            val_acc: None,
        })
    }

    pub fn validation_accuracy(&self) -> Result<f64> {
        let mut total = 0.0;
        for ep in &self.validation {
            total += self.state.meta.episode_accuracy(ep)?;
        }
        Ok(total / self.validation.len() as f64)
    }

    /// Meta-learner holding the best-validation parameters.
    pub fn peak_state(&self) -> Option<MetaLearnerState> {
        self.state.peak.as_ref().map(|p| MetaLearnerState {
            params: p.params.clone(),
            ..self.state.meta.clone()
        })
    }

    pub fn checkpoint(&mut self, path: &Path) -> Result<()> {
        self.state.report.last_checkpoint = Some(self.state.iteration);
        save_checkpoint(&self.state, path)
    }
}

pub fn save_checkpoint(state: &RunState, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = serde_json::to_vec(state)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<RunState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let v: serde_json::Value = serde_json::from_slice(&bytes)?;
    let version = v.get("format_version").and_then(|x| x.as_u64());
    if version != Some(CHECKPOINT_VERSION as u64) {
        return Err(Error::Checkpoint(format!(
            "{} has format version {version:?}, expected {CHECKPOINT_VERSION}",
            path.display()
        )));
    }
    Ok(serde_json::from_value(v)?)
}

/// Runs a full meta-training session.
pub fn run_meta_training(
    config: &RunConfig,
    pool: &PoolManifest,
    data: &DatasetTriple,
) -> Result<(TrainRunReport, MetaLearnerState, Option<MetaLearnerState>)> {
    let mut t = Trainer::new(config, pool, data)?;
    t.run()?;
    let peak = t.peak_state();
    Ok((t.state.report.clone(), t.state.meta.clone(), peak))
}
