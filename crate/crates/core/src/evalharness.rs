//! Meta-testing, stability metrics, reference baselines and report files.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metalearn::MetaLearnerState;
use crate::modelpool::{average_pool_baseline, eval_accuracy, fit_classifier, PoolManifest, PretrainConfig, PretrainedModel};
use crate::nn::{init_linear, Architecture, BnStats, EncoderSpec, ParamBundle, ENCODER_BLOCKS};
use crate::orchestrator::TrainRunReport;
use crate::tasks::{sample_episode, DatasetSplit, Episode, Role};

/// Mean accuracy and normal-approximation 95% half-width, both in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub mean: f64,
    pub ci95: f64,
    pub accuracies: Vec<f64>,
}

pub fn summarize(accuracies: &[f64]) -> TestResult {
    let n = accuracies.len();
    if n == 0 {
        return TestResult {
            mean: 0.0,
            ci95: 0.0,
            accuracies: Vec::new(),
        };
    }
    let mean = accuracies.iter().sum::<f64>() / n as f64;
    let ci95 = if n > 1 {
        let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        1.96 * var.sqrt() / (n as f64).sqrt()
    } else {
        0.0
    };
    TestResult {
        mean: mean * 100.0,
        ci95: ci95 * 100.0,
        accuracies: accuracies.to_vec(),
    }
}

/// A fixed set of meta-test episodes, so every method sees the same tasks.
pub fn sample_test_episodes(
    split: &DatasetSplit,
    count: usize,
    n_way: usize,
    k_shot: usize,
    k_query: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Episode>> {
    if split.role != Role::MetaTest {
        return Err(Error::InvalidArgument(format!(
            "meta-testing on split `{}` with role {}",
            split.name, split.role
        )));
    }
    (0..count)
        .map(|_| sample_episode(split, n_way, k_shot, k_query, rng))
        .collect()
}

pub fn meta_test_on(state: &MetaLearnerState, episodes: &[Episode]) -> Result<TestResult> {
    let accs = episodes
        .iter()
        .map(|e| state.episode_accuracy(e))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(&accs))
}

#[allow(clippy::too_many_arguments)]
pub fn meta_test(
    state: &MetaLearnerState,
    split: &DatasetSplit,
    episodes: usize,
    n_way: usize,
    k_shot: usize,
    k_query: usize,
    rng: &mut impl Rng,
) -> Result<TestResult> {
    meta_test_on(state, &sample_test_episodes(split, episodes, n_way, k_shot, k_query, rng)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsBlock {
    pub peak: f64,
    pub last: f64,
    pub variation: f64,
    pub ci95: f64,
    pub last_ci95: f64,
    pub episode_count: usize,
}

/// PEAK is the test accuracy of the best-validation checkpoint, LAST that of the final one.
pub fn compute_metrics(report: &TrainRunReport, at_peak: &TestResult, at_last: &TestResult) -> Result<MetricsBlock> {
    if report.validation_points().is_empty() {
        return Err(Error::InvalidArgument("run report has no validation records".into()));
    }
    Ok(metrics_from(at_peak, at_last))
}

pub fn metrics_from(at_peak: &TestResult, at_last: &TestResult) -> MetricsBlock {
    MetricsBlock {
        peak: at_peak.mean,
        last: at_last.mean,
        variation: at_last.mean - at_peak.mean,
        ci95: at_peak.ci95,
        last_ci95: at_last.ci95,
        episode_count: at_peak.accuracies.len(),
    }
}

/// Training budget of the per-episode baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub architecture: Architecture,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            architecture: Architecture::Conv4,
            epochs: 50,
            learning_rate: 0.01,
        }
    }
}

fn support_fit(
    encoder: EncoderSpec,
    params: ParamBundle,
    stats: Vec<BnStats>,
    ep: &Episode,
    cfg: &BaselineConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let pre = PretrainConfig {
        epochs: cfg.epochs,
        learning_rate: cfg.learning_rate,
        batch_size: ep.support_x.rows(),
    };
    let (params, stats, _) = fit_classifier(encoder, params, stats, ep.n_way, &ep.support_x, &ep.support_y, &pre, rng)?;
    Ok(eval_accuracy(&encoder, &params, &stats, &ep.query_x, &ep.query_y, ep.n_way))
}

/// A fresh classifier per episode, trained on the support set only.
pub fn random_baseline_on(episodes: &[Episode], cfg: &BaselineConfig, rng: &mut impl Rng) -> Result<TestResult> {
    let mut accs = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let [c, h, _] = ep.image_shape();
        let encoder = EncoderSpec::new(cfg.architecture, c, h);
        let mut params = encoder.init(rng);
        init_linear(&mut params, "head", encoder.embedding_dim(), ep.n_way, rng);
        let stats = (0..ENCODER_BLOCKS).map(|_| BnStats::identity(encoder.filters())).collect();
        accs.push(support_fit(encoder, params, stats, ep, cfg, rng)?);
    }
    Ok(summarize(&accs))
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_random_baseline(
    split: &DatasetSplit,
    episodes: usize,
    n_way: usize,
    k_shot: usize,
    k_query: usize,
    cfg: &BaselineConfig,
    rng: &mut impl Rng,
) -> Result<TestResult> {
    let eps = sample_test_episodes(split, episodes, n_way, k_shot, k_query, rng)?;
    random_baseline_on(&eps, cfg, rng)
}

/// The pool's averaged encoder with a fresh head, fine-tuned on each support set.
pub fn average_baseline_on(
    pool: &PoolManifest,
    episodes: &[Episode],
    cfg: &BaselineConfig,
    rng: &mut impl Rng,
) -> Result<TestResult> {
    let (avg, stats) = PretrainedModel::split_bundle(average_pool_baseline(pool)?)?;
    let encoder = pool.records[0].model.encoder;
    let mut accs = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let mut params = ParamBundle::new();
        for (name, a) in &avg.entries {
            if !name.starts_with("head.") {
                params.push(name.clone(), a.clone());
            }
        }
        init_linear(&mut params, "head", encoder.embedding_dim(), ep.n_way, rng);
        accs.push(support_fit(encoder, params, stats.clone(), ep, cfg, rng)?);
    }
    Ok(summarize(&accs))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn report_csv(report: &TrainRunReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["iteration", "branch", "loss", "reward", "rsr", "val_acc"])?;
    for r in &report.records {
        w.write_record([
            r.iteration.to_string(),
            r.branch.to_string(),
            r.loss.to_string(),
            opt(r.reward),
            opt(r.rsr),
            opt(r.val_acc),
        ])?;
    }
    finish(w)
}

pub fn policy_trace_csv(report: &TrainRunReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["iteration", "selected", "reward", "baseline", "rsr"])?;
    for r in report.records.iter().filter(|r| r.reward.is_some()) {
        let sel: Vec<String> = r.selected.iter().map(|i| i.to_string()).collect();
        w.write_record([
            r.iteration.to_string(),
            sel.join(" "),
            opt(r.reward),
            opt(r.baseline),
            opt(r.rsr),
        ])?;
    }
    finish(w)
}

pub fn metrics_csv(metrics: Option<&MetricsBlock>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["peak", "last", "variation", "ci95", "last_ci95", "episode_count"])?;
    if let Some(m) = metrics {
        w.write_record([
            format!("{:.2}", m.peak),
            format!("{:.2}", m.last),
            format!("{:.2}", m.variation),
            format!("{:.2}", m.ci95),
            format!("{:.2}", m.last_ci95),
            m.episode_count.to_string(),
        ])?;
    }
    finish(w)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
}

/// Validation accuracy against iteration, with the PEAK checkpoint marked.
pub fn accuracy_svg(report: &TrainRunReport) -> String {
    let (w, h, m) = (640.0, 360.0, 48.0);
    let pts = report.validation_points();
    let max_it = pts.iter().map(|p| p.0).max().unwrap_or(1).max(1) as f64;
    let x = |it: usize| m + (w - 2.0 * m) * it as f64 / max_it;
    let y = |acc: f64| h - m - (h - 2.0 * m) * acc;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r##"<path d="M{m} {m} V{b} H{r}" fill="none" stroke="#444"/>"##,
        b = h - m,
        r = w - m
    );
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            m - 6.0,
            y(tick) + 4.0,
            tick
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">iteration</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{max_it}</text>"#, w - m, h - m + 16.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">validation accuracy</text>"#, h / 2.0, h / 2.0);
    let data: Vec<String> = pts.iter().map(|&(it, a)| format!("{it},{a}")).collect();
    let drawn: Vec<String> = pts.iter().map(|&(it, a)| format!("{:.2},{:.2}", x(it), y(a))).collect();
    let _ = writeln!(
        s,
        r##"<polyline id="val_acc" data-points="{}" points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##,
        data.join(" "),
        drawn.join(" ")
    );
    if let (Some(it), Some(acc)) = (report.peak_iteration, report.peak_val_acc) {
        let _ = writeln!(
            s,
            r##"<circle id="peak" data-iteration="{it}" data-acc="{acc}" cx="{:.2}" cy="{:.2}" r="5" fill="#d62728"/>"##,
            x(it),
            y(acc)
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">PEAK</text>"#, x(it) + 8.0, y(acc) - 8.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `report.csv`, `policy_trace.csv`, `metrics.csv` and `accuracy.svg`.
pub fn emit_report(report: &TrainRunReport, metrics: Option<&MetricsBlock>, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files = [
        ("report.csv", report_csv(report)?),
        ("policy_trace.csv", policy_trace_csv(report)?),
        ("metrics.csv", metrics_csv(metrics)?),
        ("accuracy.svg", accuracy_svg(report)),
    ];
    for (name, body) in files {
        let p = out_dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
