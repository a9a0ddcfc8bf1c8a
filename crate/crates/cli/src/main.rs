//! `dfml`: build pools, meta-train, evaluate and report.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dfml_core::config::RunConfig;
use dfml_core::evalharness::{
    average_baseline_on, emit_report, metrics_from, meta_test_on, random_baseline_on, sample_test_episodes,
    BaselineConfig, MetricsBlock, TestResult,
};
use dfml_core::metalearn::MetaLearnerState;
use dfml_core::modelpool::PoolManifest;
use dfml_core::orchestrator::{TrainRunReport, Trainer};
use dfml_core::pipeline::{build_pool_for, load_dataset, pollute_pool};
use dfml_core::selftest::run_selftest;
use dfml_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const CONFIG_ECHO: &str = "config.toml";
const REPORT_JSON: &str = "report.json";
const METRICS_JSON: &str = "metrics.json";
const EVALUATION_JSON: &str = "evaluation.json";
const MODEL_LAST: &str = "model_last.json";
const MODEL_PEAK: &str = "model_peak.json";
const FINAL_CHECKPOINT: &str = "final.json";
const EVAL_STREAM: u64 = 3;

#[derive(Parser)]
#[command(name = "dfml", version, about = "Data-free meta-learning experiments")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` applied after the config file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, env = "DFML_OUT")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Verb {
    /// Pre-train a trusted model pool on the meta-train split.
    BuildPool {
        #[command(flatten)]
        common: Common,
    },
    /// Replace part of a pool with untrusted models.
    Pollute {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pool: PathBuf,
    },
    /// Meta-train; writes a run directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Existing pool directory; built from the config when omitted.
        #[arg(long)]
        pool: Option<PathBuf>,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Meta-test the peak and last meta-learners of a run directory.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run: PathBuf,
        /// Also evaluate the RANDOM and AVERAGE baselines.
        #[arg(long)]
        baselines: bool,
        #[arg(long)]
        pool: Option<PathBuf>,
    },
    /// Regenerate report files from a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, env = "DFML_OUT")]
        out: Option<PathBuf>,
    },
    /// Run the fast invariant suite.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e.root() {
            Error::Config(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

#[derive(Serialize, Deserialize)]
struct Evaluation {
    peak: TestResult,
    last: TestResult,
    random: Option<TestResult>,
    average: Option<TestResult>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.verb) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(verb: Verb) -> CliResult<()> {
    match verb {
        Verb::BuildPool { common } => build_pool_cmd(&common),
        Verb::Pollute { common, pool } => pollute_cmd(&common, &pool),
        Verb::Train { common, pool, resume } => train_cmd(&common, pool.as_deref(), resume.as_deref()),
        Verb::Evaluate {
            common,
            run,
            baselines,
            pool,
        } => evaluate_cmd(&common, &run, baselines, pool.as_deref()),
        Verb::Report { run, out } => report_cmd(&run, out.as_deref().unwrap_or(&run)),
        Verb::Selftest { seed } => selftest_cmd(seed),
    }
}

/// Config file, then `DFML_SEED`, then `--override` values.
fn resolve_config(common: &Common, fallback: Option<&Path>) -> CliResult<RunConfig> {
    let base = match common.config.as_deref().or(fallback) {
        Some(p) => RunConfig::load(p).map_err(|e| Failure::Config(e.to_string()))?,
        None => RunConfig::default(),
    };
    let mut overrides = Vec::new();
    if let Ok(seed) = std::env::var("DFML_SEED") {
        overrides.push(format!("seed={seed}"));
    }
    overrides.extend(common.overrides.iter().cloned());
    base.with_overrides(&overrides).map_err(|e| Failure::Config(e.to_string()))
}

fn out_dir(common: &Common) -> CliResult<PathBuf> {
    common
        .out
        .clone()
        .ok_or_else(|| Failure::Config("no output directory: pass --out or set DFML_OUT".into()))
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e).into())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    write(path, text + "\n")
}

fn prepare(out: &Path, cfg: &RunConfig) -> CliResult<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join(CONFIG_ECHO), cfg.to_toml())
}

fn build_pool_cmd(common: &Common) -> CliResult<()> {
    let cfg = resolve_config(common, None)?;
    let out = out_dir(common)?;
    prepare(&out, &cfg)?;
    let data = load_dataset(&cfg)?;
    log::info!("pre-training {} models", cfg.pool_size);
    let pool = build_pool_for(&cfg, &data)?;
    pool.save(&out)?;
    log::info!("pool written to {}", out.display());
    Ok(())
}

fn pollute_cmd(common: &Common, pool_dir: &Path) -> CliResult<()> {
    let cfg = resolve_config(common, None)?;
    let out = out_dir(common)?;
    prepare(&out, &cfg)?;
    let data = load_dataset(&cfg)?;
    let pool = PoolManifest::load(pool_dir)?;
    let polluted = pollute_pool(&cfg, &pool, &data)?;
    polluted.save(&out)?;
    log::info!(
        "{} of {} models trusted, written to {}",
        polluted.trusted_indices().len(),
        polluted.len(),
        out.display()
    );
    Ok(())
}

fn train_cmd(common: &Common, pool_dir: Option<&Path>, resume: Option<&Path>) -> CliResult<()> {
    let out = out_dir(common)?;
    let mut cfg = resolve_config(common, None)?;
    if let Some(ckpt) = resume {
        cfg = dfml_core::orchestrator::load_checkpoint(ckpt)?.config;
    }
    prepare(&out, &cfg)?;
    let data = load_dataset(&cfg)?;
    let pool = match pool_dir {
        Some(dir) => PoolManifest::load(dir)?,
        None => {
            log::info!("pre-training {} models", cfg.pool_size);
            let mut pool = build_pool_for(&cfg, &data)?;
            if cfg.pollution_rate > 0.0 {
                pool = pollute_pool(&cfg, &pool, &data)?;
            }
            pool.save(&out.join("pool"))?;
            pool
        }
    };
    let ckpt_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let mut trainer = match resume {
        Some(ckpt) => Trainer::resume(ckpt, &pool, &data)?,
        None => Trainer::new(&cfg, &pool, &data)?,
    }
    .with_checkpoint_dir(&ckpt_dir);
    let every = (cfg.total_iterations / 10).max(1);
    while !trainer.is_done() {
        trainer.step()?;
        let k = trainer.state.iteration;
        if k % every == 0 {
            let last = trainer.state.report.records.last();
            log::info!(
                "iteration {k}/{} loss {:.4}{}",
                cfg.total_iterations,
                last.map(|r| r.loss).unwrap_or(f64::NAN),
                last.and_then(|r| r.val_acc).map(|a| format!(" val {a:.3}")).unwrap_or_default()
            );
        }
    }
    trainer.checkpoint(&ckpt_dir.join(FINAL_CHECKPOINT))?;
    let report = trainer.state.report.clone();
    write_json(&out.join(REPORT_JSON), &report)?;
    write_json(&out.join(MODEL_LAST), &trainer.state.meta)?;
    if let Some(peak) = trainer.peak_state() {
        write_json(&out.join(MODEL_PEAK), &peak)?;
    }
    emit_report(&report, None, &out)?;
    log::info!("run written to {}", out.display());
    Ok(())
}

fn evaluate_cmd(common: &Common, run: &Path, baselines: bool, pool_dir: Option<&Path>) -> CliResult<()> {
    let cfg = resolve_config(common, Some(&run.join(CONFIG_ECHO)))?;
    let out = common.out.clone().unwrap_or_else(|| run.to_path_buf());
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let report: TrainRunReport = read_json(&run.join(REPORT_JSON))?;
    let last: MetaLearnerState = read_json(&run.join(MODEL_LAST))?;
    let peak: MetaLearnerState = read_json(&run.join(MODEL_PEAK))?;
    let data = load_dataset(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(EVAL_STREAM);
    let episodes = sample_test_episodes(&data.test, cfg.test_episodes, cfg.n_way, cfg.k_shot, cfg.k_query, &mut rng)?;
    let at_peak = meta_test_on(&peak, &episodes)?;
    let at_last = meta_test_on(&last, &episodes)?;
    if report.validation_points().is_empty() {
        return Err(Failure::Runtime("run has no validation records".into()));
    }
    let metrics: MetricsBlock = metrics_from(&at_peak, &at_last);
    log::info!(
        "PEAK {:.2} ± {:.2}  LAST {:.2} ± {:.2}  VARIATION {:.2}",
        metrics.peak,
        metrics.ci95,
        metrics.last,
        metrics.last_ci95,
        metrics.variation
    );
    let (mut random, mut average) = (None, None);
    if baselines {
        let bcfg = BaselineConfig {
            epochs: cfg.random_baseline_epochs,
            learning_rate: cfg.random_baseline_lr,
            ..BaselineConfig::default()
        };
        let r = random_baseline_on(&episodes, &bcfg, &mut rng)?;
        log::info!("RANDOM {:.2} ± {:.2}", r.mean, r.ci95);
        random = Some(r);
        let pool_path = pool_dir.map(Path::to_path_buf).unwrap_or_else(|| run.join("pool"));
        let pool = PoolManifest::load(&pool_path)?;
        let a = average_baseline_on(&pool, &episodes, &bcfg, &mut rng)?;
        log::info!("AVERAGE {:.2} ± {:.2}", a.mean, a.ci95);
        average = Some(a);
    }
    write_json(
        &out.join(EVALUATION_JSON),
        &Evaluation {
            peak: at_peak,
            last: at_last,
            random,
            average,
        },
    )?;
    write_json(&out.join(METRICS_JSON), &metrics)?;
    emit_report(&report, Some(&metrics), &out)?;
    Ok(())
}

fn report_cmd(run: &Path, out: &Path) -> CliResult<()> {
    let report: TrainRunReport = read_json(&run.join(REPORT_JSON))?;
    let metrics_path = run.join(METRICS_JSON);
    let metrics: Option<MetricsBlock> = if metrics_path.exists() {
        Some(read_json(&metrics_path)?)
    } else {
        None
    };
    emit_report(&report, metrics.as_ref(), out)?;
    log::info!("report written to {}", out.display());
    Ok(())
}

fn selftest_cmd(seed: u64) -> CliResult<()> {
    let checks = run_selftest(seed);
    let passed = checks.iter().filter(|c| c.passed).count();
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    println!("{passed}/{} checks passed", checks.len());
    if passed == checks.len() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("{} selftest checks failed", checks.len() - passed)))
    }
}
