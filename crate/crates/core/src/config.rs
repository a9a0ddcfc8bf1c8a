//! Flat run configuration shared by every pipeline stage.

use serde::{Deserialize, Serialize};

use crate::ams::BaselineMode;
use crate::error::{Error, Result};
use crate::inversion::GeneratorConfig;
use crate::memory::{InterpolationConfig, LayerPolicy, Strategy};
use crate::metalearn::{Algorithm, MetaConfig};
use crate::modelpool::{PollutionMode, PretrainConfig};
use crate::nn::Architecture;
use crate::tasks::{SyntheticSpec, TextureFamily};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic,
    ImageFolder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    RunningMean,
    Exponential,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationMode {
    V,
    VM,
    VMI,
    VMIS,
}

impl AblationMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace(['+', '-'], "_").as_str() {
            "V" => Ok(AblationMode::V),
            "V_M" => Ok(AblationMode::VM),
            "V_M_I" => Ok(AblationMode::VMI),
            "V_M_I_S" => Ok(AblationMode::VMIS),
            _ => Err(Error::Config(format!("unknown ablation mode {s:?} (V, V_M, V_M_I, V_M_I_S)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::V => "V",
            AblationMode::VM => "V_M",
            AblationMode::VMI => "V_M_I",
            AblationMode::VMIS => "V_M_I_S",
        }
    }
}

/// Every tunable of a run. Unknown keys are rejected when parsing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,

    pub dataset: DatasetSource,
    pub data_path: String,
    pub manifest_path: String,
    pub num_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub examples_per_class: usize,
    pub class_separation: f64,
    pub texture_family: TextureFamily,
    pub foreign_family: TextureFamily,

    pub pool_size: usize,
    pub pool_n_way: usize,
    pub pool_architecture: Architecture,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch_size: usize,
    pub pollution_rate: f64,
    pub pollution_mode: PollutionMode,

    pub total_iterations: usize,
    pub branch_threshold: f64,
    pub tasks_per_iteration: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub k_query: usize,
    pub gen_k_query: usize,
    pub ams_enabled: bool,
    pub memory_enabled: bool,
    pub interpolation_enabled: bool,
    pub soft_label_enabled: bool,
    pub validation_interval: usize,
    pub validation_episodes: usize,
    pub reward_tasks: usize,
    pub checkpoint_interval: usize,

    pub algorithm: Algorithm,
    pub architecture: Architecture,
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub outer_lr: f64,

    pub memory_capacity: usize,
    pub interpolation_strategy: Strategy,
    pub hybrid_combination_fraction: f64,
    pub beta_alpha: f64,
    pub beta_beta: f64,
    pub mixup_layer_policy: LayerPolicy,

    pub select_batch_size: usize,
    pub policy_lr: f64,
    pub baseline: BaselineKind,
    pub baseline_decay: f64,

    pub gen_noise_dim: usize,
    pub gen_filters: usize,
    pub gen_epochs: usize,
    pub gen_lr: f64,
    pub gen_warm_start: bool,

    pub test_episodes: usize,
    pub random_baseline_epochs: usize,
    pub random_baseline_lr: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: DatasetSource::Synthetic,
            data_path: String::new(),
            manifest_path: String::new(),
            num_classes: 20,
            image_size: 16,
            channels: 3,
            examples_per_class: 40,
            class_separation: 5.0,
            texture_family: TextureFamily::Waves,
            foreign_family: TextureFamily::Blobs,
            pool_size: 12,
            pool_n_way: 5,
            pool_architecture: Architecture::Conv4,
            pretrain_epochs: 60,
            pretrain_lr: 0.01,
            pretrain_batch_size: 50,
            pollution_rate: 0.0,
            pollution_mode: PollutionMode::MisleadingLabels,
            total_iterations: 2000,
            branch_threshold: 0.4,
            tasks_per_iteration: 4,
            n_way: 5,
            k_shot: 1,
            k_query: 15,
            gen_k_query: 15,
            ams_enabled: true,
            memory_enabled: true,
            interpolation_enabled: true,
            soft_label_enabled: true,
            validation_interval: 100,
            validation_episodes: 20,
            reward_tasks: 2,
            checkpoint_interval: 0,
            algorithm: Algorithm::Protonet,
            architecture: Architecture::Conv4,
            inner_lr: 0.01,
            inner_steps: 1,
            outer_lr: 0.001,
            memory_capacity: 20,
            interpolation_strategy: Strategy::Combination,
            hybrid_combination_fraction: 0.8,
            beta_alpha: 0.5,
            beta_beta: 0.5,
            mixup_layer_policy: LayerPolicy::UniformSharedLayers,
            select_batch_size: 4,
            policy_lr: 0.1,
            baseline: BaselineKind::RunningMean,
            baseline_decay: 0.9,
            gen_noise_dim: 256,
            gen_filters: 64,
            gen_epochs: 200,
            gen_lr: 0.001,
            gen_warm_start: false,
            test_episodes: 600,
            random_baseline_epochs: 50,
            random_baseline_lr: 0.01,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_table(text.parse::<toml::Table>().map_err(|e| Error::Config(e.to_string()))?)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| e.context(format!("config {}", path.display())))
    }

    /// Applies `key=value` overrides, parsing each value as a TOML literal
    /// and falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let (k, v) = (k.trim(), v.trim());
            if !table.contains_key(k) {
                return Err(Error::Config(format!("unknown config key {k:?}")));
            }
            let value = format!("v = {v}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(v.to_string()));
            table.insert(k.to_string(), value);
        }
        Self::from_table(table)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.branch_threshold) {
            return err(format!("branch_threshold {} outside [0, 1]", self.branch_threshold));
        }
        if self.interpolation_enabled && !self.memory_enabled {
            return err("interpolation_enabled requires memory_enabled".into());
        }
        if self.n_way == 0 || self.k_shot == 0 || self.k_query == 0 {
            return err("n_way, k_shot and k_query must be positive".into());
        }
        if self.n_way > self.pool_n_way {
            return err(format!("n_way {} exceeds the pool models' {} classes", self.n_way, self.pool_n_way));
        }
        if self.pool_size == 0 {
            return err("pool_size must be positive".into());
        }
        if self.select_batch_size == 0 || self.select_batch_size > self.pool_size {
            return err(format!(
                "select_batch_size {} must lie in 1..={}",
                self.select_batch_size, self.pool_size
            ));
        }
        if self.tasks_per_iteration == 0 {
            return err("tasks_per_iteration must be positive".into());
        }
        if self.validation_interval == 0 || self.validation_episodes == 0 {
            return err("validation_interval and validation_episodes must be positive".into());
        }
        if self.reward_tasks == 0 {
            return err("reward_tasks must be positive".into());
        }
        if self.memory_enabled && self.memory_capacity == 0 {
            return err("memory_capacity must be positive when memory is enabled".into());
        }
        if self.image_size % 4 != 0 {
            return err(format!("image_size {} must be a multiple of 4", self.image_size));
        }
        if !(0.0..=1.0).contains(&self.pollution_rate) {
            return err(format!("pollution_rate {} outside [0, 1]", self.pollution_rate));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return err("baseline_decay must lie in [0, 1)".into());
        }
        if self.algorithm == Algorithm::Maml
            && self.interpolation_enabled
            && self.interpolation_strategy != Strategy::Combination
            && self.mixup_layer_policy != LayerPolicy::InputOnly
        {
            return err("maml has no task-shared layers; set mixup_layer_policy = \"input_only\"".into());
        }
        self.interpolation().validate()?;
        Ok(())
    }

    pub fn ablation_mode(&self) -> AblationMode {
        match (self.memory_enabled, self.interpolation_enabled, self.soft_label_enabled) {
            (false, _, _) => AblationMode::V,
            (true, false, _) => AblationMode::VM,
            (true, true, false) => AblationMode::VMI,
            (true, true, true) => AblationMode::VMIS,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            class_separation: self.class_separation,
            family: self.texture_family,
            ..SyntheticSpec::new(self.num_classes, self.image_size, self.channels, self.examples_per_class)
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            learning_rate: self.pretrain_lr,
            batch_size: self.pretrain_batch_size,
        }
    }

    pub fn meta(&self) -> MetaConfig {
        MetaConfig {
            algorithm: self.algorithm,
            architecture: self.architecture,
            inner_lr: self.inner_lr,
            inner_steps: self.inner_steps,
            outer_lr: self.outer_lr,
        }
    }

    pub fn interpolation(&self) -> InterpolationConfig {
        InterpolationConfig {
            strategy: self.interpolation_strategy,
            hybrid_combination_fraction: self.hybrid_combination_fraction,
            beta_alpha: self.beta_alpha,
            beta_beta: self.beta_beta,
            mixup_layer_policy: self.mixup_layer_policy,
        }
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            noise_dim: self.gen_noise_dim,
            filters: self.gen_filters,
            epochs: self.gen_epochs,
            learning_rate: self.gen_lr,
        }
    }

    pub fn baseline_mode(&self) -> BaselineMode {
        match self.baseline {
            BaselineKind::RunningMean => BaselineMode::RunningMean,
            BaselineKind::Exponential => BaselineMode::Exponential {
                decay: self.baseline_decay,
            },
        }
    }
}

/// Sets the component flags of an ablation row.
pub fn set_ablation_mode(config: &RunConfig, mode: AblationMode) -> RunConfig {
    let (m, i, s) = match mode {
        AblationMode::V => (false, false, false),
        AblationMode::VM => (true, false, false),
        AblationMode::VMI => (true, true, false),
        AblationMode::VMIS => (true, true, true),
    };
    RunConfig {
        memory_enabled: m,
        interpolation_enabled: i,
        soft_label_enabled: s,
        ..config.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml_str(&c.to_toml()).unwrap(), c);
        assert_eq!(RunConfig::from_toml_str("").unwrap(), c);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(RunConfig::from_toml_str("bogus = 1").unwrap_err().is_config());
        assert!(RunConfig::from_toml_str("branch_threshold = 1.5").unwrap_err().is_config());
        assert!(RunConfig::from_toml_str("memory_enabled = false").unwrap_err().is_config());
        assert!(RunConfig::default().with_overrides(&["nope=3"]).unwrap_err().is_config());
    }

    #[test]
    fn overrides_are_typed() {
        let c = RunConfig::default()
            .with_overrides(&["seed=7", "algorithm=anil", "branch_threshold = 0.25", "ams_enabled=false"])
            .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.algorithm, Algorithm::Anil);
        assert_eq!(c.branch_threshold, 0.25);
        assert!(!c.ams_enabled);
        assert!(c.to_toml().contains("seed = 7"));
    }

    #[test]
    fn ablation_modes() {
        let base = RunConfig::default();
        let v = set_ablation_mode(&base, AblationMode::V);
        assert!(!v.memory_enabled && !v.interpolation_enabled);
        let vmi = set_ablation_mode(&base, AblationMode::VMI);
        assert!(vmi.memory_enabled && vmi.interpolation_enabled && !vmi.soft_label_enabled);
        assert_eq!(set_ablation_mode(&base, AblationMode::VMIS), base);
        for m in [AblationMode::V, AblationMode::VM, AblationMode::VMI, AblationMode::VMIS] {
            assert_eq!(set_ablation_mode(&base, m).ablation_mode(), m);
            assert_eq!(AblationMode::parse(m.as_str()).unwrap(), m);
        }
        assert_eq!(AblationMode::parse("V+M+I").unwrap(), AblationMode::VMI);
    }
}
