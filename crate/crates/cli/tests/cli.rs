use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
num_classes = 20
examples_per_class = 10
pool_size = 3
pool_architecture = "conv4_small"
architecture = "conv4_small"
pretrain_epochs = 2
total_iterations = 6
n_way = 3
k_query = 3
gen_k_query = 2
select_batch_size = 2
tasks_per_iteration = 2
validation_interval = 3
validation_episodes = 2
reward_tasks = 1
checkpoint_interval = 3
gen_noise_dim = 8
gen_filters = 4
gen_epochs = 2
gen_lr = 0.01
test_episodes = 3
random_baseline_epochs = 2
"#;

fn dfml(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfml"))
        .args(args)
        .env_remove("DFML_SEED")
        .env_remove("DFML_OUT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("dfml runs")
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p.to_string_lossy().into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn unknown_verb_is_usage_error() {
    let out = dfml(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = s(&dir.path().join("run"));
    let bad_key = dfml(&["train", "--config", &cfg, "--override", "no_such_key=1", "--out", &run]);
    assert_eq!(bad_key.status.code(), Some(2));
    let bad_value = dfml(&["train", "--config", &cfg, "--override", "n_way=0", "--out", &run]);
    assert_eq!(bad_value.status.code(), Some(2));
    let missing = dfml(&["train", "--config", &s(&dir.path().join("absent.toml")), "--out", &run]);
    assert_eq!(missing.status.code(), Some(2));
    let no_out = dfml(&["train", "--config", &cfg]);
    assert_eq!(no_out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dfml(&["report", "--run", &s(&dir.path().join("nothing"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn selftest_passes() {
    let out = dfml(&["selftest"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("6/6 checks passed"), "{text}");
    assert!(!text.contains("FAIL"));
}

#[test]
fn train_evaluate_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let out = dfml(&["train", "--config", &cfg, "--override", "seed=7", "--out", &s(&run)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let echo = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(echo.lines().any(|l| l.trim() == "seed = 7"), "{echo}");
    let report = std::fs::read_to_string(run.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 6);
    assert!(run.join("checkpoints/ckpt-000003.json").exists());
    assert!(run.join("checkpoints/final.json").exists());
    assert!(run.join("accuracy.svg").exists());

    let ev = dfml(&["evaluate", "--run", &s(&run), "--baselines"]);
    assert_eq!(ev.status.code(), Some(0), "{}", String::from_utf8_lossy(&ev.stderr));
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);

    let again = dir.path().join("again");
    let rep = dfml(&["report", "--run", &s(&run), "--out", &s(&again)]);
    assert_eq!(rep.status.code(), Some(0), "{}", String::from_utf8_lossy(&rep.stderr));
    for f in ["report.csv", "policy_trace.csv", "metrics.csv", "accuracy.svg"] {
        assert_eq!(
            std::fs::read(run.join(f)).unwrap(),
            std::fs::read(again.join(f)).unwrap(),
            "{f} differs on regeneration"
        );
    }

    let echoed = s(&run.join("config.toml"));
    let rerun = dir.path().join("rerun");
    let out = dfml(&["train", "--config", &echoed, "--out", &s(&rerun)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(
        std::fs::read(run.join("report.csv")).unwrap().len(),
        std::fs::read(rerun.join("report.csv")).unwrap().len()
    );
    let before = std::fs::read_to_string(rerun.join("report.csv")).unwrap();
    let resumed = dir.path().join("resumed");
    let ckpt = s(&rerun.join("checkpoints/ckpt-000003.json"));
    let out = dfml(&["train", "--resume", &ckpt, "--pool", &s(&rerun.join("pool")), "--out", &s(&resumed)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(before, std::fs::read_to_string(resumed.join("report.csv")).unwrap());
}

#[test]
fn pool_pollute_train_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let pool = dir.path().join("pool");
    let out = dfml(&["build-pool", "--config", &cfg, "--out", &s(&pool)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let polluted = dir.path().join("polluted");
    let out = dfml(&[
        "pollute",
        "--config",
        &cfg,
        "--override",
        "pollution_rate=0.34",
        "--pool",
        &s(&pool),
        "--out",
        &s(&polluted),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(std::fs::read_to_string(polluted.join("config.toml")).unwrap().contains("pollution_rate = 0.34"));

    let run = dir.path().join("run");
    let out = Command::new(env!("CARGO_BIN_EXE_dfml"))
        .args(["train", "--config", &cfg, "--pool", &s(&polluted)])
        .env("DFML_SEED", "11")
        .env("DFML_OUT", &run)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let echo = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(echo.lines().any(|l| l.trim() == "seed = 11"));
    let trace = std::fs::read_to_string(run.join("policy_trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,selected,reward,baseline,rsr\n"));
    assert!(!run.join("pool").exists());
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        dfml_core::config::RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}
