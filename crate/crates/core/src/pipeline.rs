//! Config-driven construction of datasets and model pools.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DatasetSource, RunConfig};
use crate::error::{Error, Result};
use crate::modelpool::{build_pool, inject_untrusted, PollutionMode, PoolManifest};
use crate::tasks::{make_synthetic_dataset, DatasetSplit, DatasetTriple, SyntheticSpec};

const FOREIGN_SEED_SALT: u64 = 0x5eed_f0e1;
const FOREIGN_CLASS_OFFSET: usize = 100_000;

/// The three-role dataset named by the config.
pub fn load_dataset(cfg: &RunConfig) -> Result<DatasetTriple> {
    match cfg.dataset {
        DatasetSource::Synthetic => {
            make_synthetic_dataset(&cfg.synthetic_spec(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))
        }
        DatasetSource::ImageFolder => load_image_folder(cfg),
    }
}

#[cfg(feature = "image-folder")]
fn load_image_folder(cfg: &RunConfig) -> Result<DatasetTriple> {
    if cfg.data_path.is_empty() || cfg.manifest_path.is_empty() {
        return Err(Error::Config("image_folder datasets need data_path and manifest_path".into()));
    }
    let manifest_path = std::path::Path::new(&cfg.manifest_path);
    let manifest = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    crate::tasks::ingest_image_folder(
        std::path::Path::new(&cfg.data_path),
        &manifest,
        [cfg.channels, cfg.image_size, cfg.image_size],
        cfg.k_shot + cfg.k_query,
    )
}

#[cfg(not(feature = "image-folder"))]
fn load_image_folder(_cfg: &RunConfig) -> Result<DatasetTriple> {
    Err(Error::Config("built without the image-folder feature".into()))
}

/// A synthetic split from a different texture family with disjoint class ids.
pub fn foreign_split(cfg: &RunConfig) -> Result<DatasetSplit> {
    let spec = SyntheticSpec {
        family: cfg.foreign_family,
        class_id_offset: FOREIGN_CLASS_OFFSET,
        class_separation: cfg.class_separation,
        ..SyntheticSpec::new(cfg.num_classes, cfg.image_size, cfg.channels, cfg.examples_per_class)
    };
    let triple = make_synthetic_dataset(&spec, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ FOREIGN_SEED_SALT))?;
    Ok(triple.train)
}

/// Pre-trains a trusted pool on the meta-train split.
pub fn build_pool_for(cfg: &RunConfig, data: &DatasetTriple) -> Result<PoolManifest> {
    build_pool(
        &data.train,
        cfg.pool_size,
        cfg.pool_n_way,
        &[(cfg.pool_architecture, 1.0)],
        &cfg.pretrain(),
        cfg.seed,
    )
}

/// Applies the config's pollution rate and mode to `pool`.
pub fn pollute_pool(cfg: &RunConfig, pool: &PoolManifest, data: &DatasetTriple) -> Result<PoolManifest> {
    let foreign = match cfg.pollution_mode {
        PollutionMode::MisleadingLabels => Some(foreign_split(cfg)?),
        PollutionMode::LowQuality => None,
    };
    inject_untrusted(
        pool,
        cfg.pollution_rate,
        cfg.pollution_mode,
        &data.train,
        foreign.as_ref(),
        cfg.seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;

    #[test]
    fn synthetic_pipeline_is_seeded() {
        let cfg = RunConfig {
            num_classes: 20,
            examples_per_class: 6,
            ..RunConfig::default()
        };
        assert_eq!(load_dataset(&cfg).unwrap(), load_dataset(&cfg).unwrap());
        let f = foreign_split(&cfg).unwrap();
        let d = load_dataset(&cfg).unwrap();
        assert!(f.class_ids().iter().all(|id| !d.train.classes.contains_key(id)));
    }

    #[test]
    fn pollution_follows_config() {
        let cfg = RunConfig {
            examples_per_class: 10,
            pool_size: 4,
            pool_architecture: Architecture::Conv4Small,
            pretrain_epochs: 1,
            pollution_rate: 0.5,
            ..RunConfig::default()
        };
        let data = load_dataset(&cfg).unwrap();
        let pool = build_pool_for(&cfg, &data).unwrap();
        assert_eq!(pool.trusted_indices().len(), 4);
        let polluted = pollute_pool(&cfg, &pool, &data).unwrap();
        assert_eq!(polluted.trusted_indices().len(), 2);
    }

    #[test]
    fn image_folder_needs_paths() {
        let cfg = RunConfig {
            dataset: DatasetSource::ImageFolder,
            ..RunConfig::default()
        };
        assert!(load_dataset(&cfg).is_err());
    }
}
