//! Acceptance suite. Each test writes one `[n] name: PASS|FAIL` line to stderr
//! (bypassing output capture) before asserting.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use dfml_core::ams::{
    log_policy_grad, log_policy_prob, reinforce_update, rsr, select_models, select_uniform, selection_probabilities,
    ReliabilityPolicy,
};
use dfml_core::config::{set_ablation_mode, AblationMode, RunConfig};
use dfml_core::evalharness::{
    compute_metrics, emit_report, meta_test_on, random_baseline_on, report_csv, sample_test_episodes, BaselineConfig,
    MetricsBlock, TestResult,
};
use dfml_core::inversion::{
    generate_task, generator_forward, generator_loss, one_hot, source_model_query_accuracy, GeneratorConfig,
    GeneratorShape, GeneratorState,
};
use dfml_core::memory::MemoryBuffer;
use dfml_core::metalearn::{adapt_head, kl_divergence, MetaLearnerState};
use dfml_core::modelpool::{build_pool, pretrain_model, PoolManifest, PretrainConfig, PretrainedModel};
use dfml_core::nn::{cross_entropy, linear, Architecture, ParamBundle};
use dfml_core::orchestrator::{Trainer, TrainRunReport};
use dfml_core::pipeline::{build_pool_for, load_dataset, pollute_pool};
use dfml_core::tasks::{make_synthetic_dataset, ClassOrigin, DatasetTriple, Episode, Provenance, SyntheticSpec};
use dfml_core::tensor::{grad, Array, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    let line = format!("[{id}] {name}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{name}: {detail}");
}

/// Compensated summation.
fn neumaier(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

/// `p_i = 1 / sum_j exp(x_j - x_i)`, without a max shift.
fn oracle_softmax(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|xi| 1.0 / neumaier(x.iter().map(|xj| (xj - xi).exp())))
        .collect()
}

fn oracle_log_softmax_at(x: &[f64], i: usize) -> f64 {
    -neumaier(x.iter().map(|xj| (xj - x[i]).exp())).ln()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-8)
}

#[test]
fn closed_form_oracles() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = [0.0f64; 5];
    for _ in 0..1000 {
        let n = rng.random_range(2..16);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-8.0..8.0)).collect();

        let want = oracle_softmax(&x);
        let got = selection_probabilities(&x);
        let tensor = Tensor::from_vec(&[1, n], x.clone()).softmax();
        for i in 0..n {
            worst[0] = worst[0].max((got[i] - want[i]).abs()).max((tensor.data()[i] - want[i]).abs());
        }

        let rows = rng.random_range(1..5);
        let logits: Vec<f64> = (0..rows * n).map(|_| rng.random_range(-8.0..8.0)).collect();
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..n)).collect();
        let ce = cross_entropy(&Tensor::from_vec(&[rows, n], logits.clone()), &labels).item();
        let want_ce = neumaier(
            labels
                .iter()
                .enumerate()
                .map(|(r, &y)| -oracle_log_softmax_at(&logits[r * n..(r + 1) * n], y)),
        ) / rows as f64;
        worst[1] = worst[1].max((ce - want_ce).abs());

        let p = oracle_softmax(&x);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-8.0..8.0)).collect();
        let q = oracle_softmax(&y);
        let lp = Tensor::from_vec(&[1, n], p.iter().map(|v| v.ln()).collect());
        let lq = Tensor::from_vec(&[1, n], q.iter().map(|v| v.ln()).collect());
        let want_kl = neumaier((0..n).map(|i| p[i] * (p[i] / q[i]).ln()));
        worst[2] = worst[2].max((kl_divergence(&lp, &lq).item() - want_kl).abs());

        let k = rng.random_range(1..=n);
        let subset = rand::seq::index::sample(&mut rng, n, k).into_vec();
        let want_rsr = neumaier(subset.iter().map(|&i| want[i]));
        worst[3] = worst[3].max((rsr(&x, &subset) - want_rsr).abs());

        let want_lp = neumaier(subset.iter().map(|&i| oracle_log_softmax_at(&x, i)));
        worst[4] = worst[4].max((log_policy_prob(&x, &subset) - want_lp).abs());
    }
    let pass = worst.iter().all(|&w| w <= 1e-8) && t.elapsed().as_secs() < 60;
    verdict(
        1,
        "closed-form oracles (softmax, CE, KL, RSR, log-policy)",
        pass,
        &format!(
            "max abs errors {:?} over 1000 instances each, {:?}",
            worst.map(|w| format!("{w:.2e}")),
            t.elapsed()
        ),
    );
}

fn tiny_model(seed: u64) -> PretrainedModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = make_synthetic_dataset(&SyntheticSpec::new(20, 16, 3, 8), &mut rng).unwrap();
    let ids: Vec<usize> = data.train.class_ids().into_iter().take(3).collect();
    let cfg = PretrainConfig {
        epochs: 2,
        learning_rate: 0.01,
        batch_size: 12,
    };
    pretrain_model("tiny", &ids, &data.train, Architecture::Conv4Small, &cfg, &mut rng)
        .unwrap()
        .model
}

fn generator_gradient_error() -> f64 {
    let model = tiny_model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let shape = GeneratorShape {
        noise_dim: 4,
        label_dim: model.width(),
        filters: 2,
        channels: 3,
        image_size: 16,
    };
    let gen = GeneratorState::init(shape, &mut rng).unwrap();
    let labels = vec![0, 1, 2, 0, 1, 2];
    let z = Tensor::from_vec(&[6, 4], (0..24).map(|_| rng.random_range(-1.0..1.0)).collect());
    let y = one_hot(&labels, model.width());
    let loss_of = |b: &ParamBundle| {
        let p = b.to_params();
        let x = generator_forward(&shape, &p, &z, &y).unwrap();
        (generator_loss(&model, &x, &labels).unwrap().0, p)
    };
    let (loss, p) = loss_of(&gen.params);
    let g = grad(&loss, &p.tensors, false);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (ti, (_, arr)) in gen.params.entries.iter().enumerate() {
        for _ in 0..3 {
            let j = rng.random_range(0..arr.data.len());
            let eval = |d: f64| {
                let mut b = gen.params.clone();
                b.entries[ti].1.data[j] += d;
                loss_of(&b).0.item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = g[ti].data()[j];
            if fd.abs() > 1e-7 || an.abs() > 1e-7 {
                worst = worst.max(rel(an, fd));
            }
        }
    }
    worst
}

fn maml_gradient_error() -> f64 {
    let feats_s = Tensor::from_vec(&[4, 1], vec![0.5, -1.0, 1.5, -0.3]);
    let ys = [0, 1, 0, 1];
    let feats_q = Tensor::from_vec(&[3, 1], vec![0.2, -0.7, 1.1]);
    let yq = [0, 1, 0];
    let b = Tensor::zeros(&[2]);
    let outer = |w: &Tensor, graph: bool| {
        let (wa, ba) = adapt_head(w, &b, &feats_s, &ys, 2, 0.5, 1, graph).unwrap();
        cross_entropy(&linear(&feats_q, &wa, &ba), &yq)
    };
    let w0 = [0.3, -0.4];
    let w = Tensor::param(Array::new(vec![1, 2], w0.to_vec()).unwrap());
    let g = grad(&outer(&w, true), &[w.clone()], false)[0].data().to_vec();
    let h = 1e-5;
    let f = |v: [f64; 2]| outer(&Tensor::param(Array::new(vec![1, 2], v.to_vec()).unwrap()), false).item();
    (0..2)
        .map(|i| {
            let (mut up, mut dn) = (w0, w0);
            up[i] += h;
            dn[i] -= h;
            rel(g[i], (f(up) - f(dn)) / (2.0 * h))
        })
        .fold(0.0, f64::max)
}

fn policy_gradient_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..12);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let k = rng.random_range(1..=n);
        let sel = rand::seq::index::sample(&mut rng, n, k).into_vec();
        let g = log_policy_grad(&w, &sel);
        for j in 0..n {
            let (mut up, mut dn) = (w.clone(), w.clone());
            up[j] += h;
            dn[j] -= h;
            let fd = (log_policy_prob(&up, &sel) - log_policy_prob(&dn, &sel)) / (2.0 * h);
            if fd.abs() > 1e-6 {
                worst = worst.max(rel(g[j], fd));
            }
        }
    }
    worst
}

#[test]
fn gradient_checks() {
    let t = Instant::now();
    let (a, b, c) = (generator_gradient_error(), maml_gradient_error(), policy_gradient_error());
    let pass = a <= 1e-3 && b <= 1e-3 && c <= 1e-5 && t.elapsed().as_secs() < 120;
    verdict(
        2,
        "gradient checks vs central differences",
        pass,
        &format!(
            "generator {a:.2e}, second-order MAML {b:.2e}, log-policy {c:.2e}, {:?}",
            t.elapsed()
        ),
    );
}

fn marker(i: usize) -> Episode {
    let one = || Array::new(vec![1, 1, 1, 1], vec![0.0]).unwrap();
    Episode {
        support_x: one(),
        support_y: vec![0],
        query_x: one(),
        query_y: vec![0],
        n_way: 1,
        class_origin: vec![ClassOrigin::real(0)],
        provenance: Provenance::Generated,
        source_model: Some(i),
    }
}

#[test]
fn reservoir_uniformity() {
    let t = Instant::now();
    let (capacity, offers, trials) = (20, 1000, 10_000);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut kept = vec![0usize; offers];
    for _ in 0..trials {
        let mut buf = MemoryBuffer::new(capacity);
        for i in 0..offers {
            buf.reservoir_update(marker(i), &mut rng).unwrap();
        }
        for s in &buf.slots {
            kept[s.source_model.unwrap()] += 1;
        }
    }
    let rates: Vec<f64> = kept.iter().map(|&c| c as f64 / trials as f64).collect();
    let (lo, hi) = rates
        .iter()
        .fold((f64::MAX, f64::MIN), |(l, h), &r| (l.min(r), h.max(r)));
    let pass = lo >= 0.015 && hi <= 0.025 && t.elapsed().as_secs() < 120;
    verdict(
        3,
        "reservoir retention is uniform",
        pass,
        &format!("per-offer retention in [{lo:.4}, {hi:.4}], target 0.02 ± 0.005, {:?}", t.elapsed()),
    );
}

#[test]
fn model_selection_bandit() {
    let t = Instant::now();
    let (pool, trusted, k, updates, lr) = (10, 5, 2, 500, 0.1);
    let trusted_ids: Vec<usize> = (0..trusted).collect();
    let mut hits = 0;
    let mut finals = Vec::new();
    let mut control = Vec::new();
    for seed in 0..40u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut policy = ReliabilityPolicy::new(pool, k).unwrap();
        for _ in 0..updates {
            let sel = select_models(&policy, &mut rng).unwrap();
            let reward = if sel.iter().all(|&i| i < trusted) { 1.0 } else { 0.0 };
            reinforce_update(&mut policy, &sel, reward, lr).unwrap();
        }
        let r = rsr(&policy.weights, &trusted_ids);
        hits += usize::from(r >= 0.9);
        finals.push(r);

        let uniform = ReliabilityPolicy::new(pool, k).unwrap();
        let mut picked_trusted = 0;
        for _ in 0..updates {
            let sel = select_uniform(pool, k, &mut rng).unwrap();
            picked_trusted += sel.iter().filter(|&&i| i < trusted).count();
        }
        let share = picked_trusted as f64 / (updates * k) as f64;
        control.push((rsr(&uniform.weights, &trusted_ids), share));
    }
    let control_ok = control
        .iter()
        .all(|&(r, s)| (r - 0.5).abs() <= 0.05 && (s - 0.5).abs() <= 0.05);
    let worst_share = control
        .iter()
        .map(|c| (c.1 - 0.5).abs())
        .fold(0.0, f64::max);
    let min = finals.iter().copied().fold(f64::MAX, f64::min);
    let pass = hits >= 38 && control_ok && t.elapsed().as_secs() < 60;
    verdict(
        4,
        "model-selection bandit",
        pass,
        &format!(
            "RSR >= 0.9 in {hits}/40 seeds (min {min:.3}), uniform control within 0.5 ± {worst_share:.3}, {:?}",
            t.elapsed()
        ),
    );
}

#[test]
fn inversion_self_consistency() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let data = make_synthetic_dataset(&SyntheticSpec::new(20, 16, 3, 40), &mut rng).unwrap();
    let pretrain = PretrainConfig {
        epochs: 30,
        ..PretrainConfig::default()
    };
    let pool = build_pool(&data.train, 5, 5, &[(Architecture::Conv4Small, 1.0)], &pretrain, 7).unwrap();
    let gen_cfg = GeneratorConfig {
        epochs: RunConfig::default().gen_epochs,
        ..desk_config().generator()
    };
    let mut accs = Vec::new();
    let mut monotone = true;
    for (i, model) in pool.models().iter().enumerate() {
        let (ep, trace) = generate_task(model, i, 5, 1, 15, &gen_cfg, &mut rng).unwrap();
        accs.push(source_model_query_accuracy(model, &ep).unwrap());
        monotone &= trace.losses.iter().all(|&l| trace.best_loss <= l);
    }
    let min = accs.iter().copied().fold(f64::MAX, f64::min);
    let pass = pool.trusted_indices().len() == 5 && min >= 0.8 && monotone && t.elapsed().as_secs() < 300;
    verdict(
        5,
        "inversion self-consistency",
        pass,
        &format!(
            "source-model query accuracy {:?}, best loss below every epoch: {monotone}, {:?}",
            accs.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>(),
            t.elapsed()
        ),
    );
}

/// Desk-scale end-to-end settings shared by the three end-to-end checks.
fn desk_config() -> RunConfig {
    RunConfig {
        seed: 0,
        num_classes: 20,
        image_size: 16,
        channels: 3,
        examples_per_class: 40,
        class_separation: 2.0,
        pool_size: 12,
        pool_architecture: Architecture::Conv4Small,
        architecture: Architecture::Conv4Small,
        pretrain_epochs: 30,
        total_iterations: 2000,
        n_way: 5,
        k_shot: 1,
        k_query: 15,
        gen_k_query: 3,
        gen_noise_dim: 32,
        gen_filters: 8,
        gen_epochs: 5,
        gen_lr: 0.02,
        gen_warm_start: true,
        select_batch_size: 2,
        tasks_per_iteration: 2,
        validation_interval: 100,
        ..RunConfig::default()
    }
}

const TEST_EPISODES: usize = 100;

struct Desk {
    data: DatasetTriple,
    pool: PoolManifest,
    episodes: Vec<Episode>,
    pool_secs: f64,
}

struct Run {
    report: TrainRunReport,
    last: MetaLearnerState,
    peak: MetaLearnerState,
    secs: f64,
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let t = Instant::now();
        let cfg = desk_config();
        let data = load_dataset(&cfg).unwrap();
        let pool = build_pool_for(&cfg, &data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let episodes = sample_test_episodes(&data.test, TEST_EPISODES, 5, 1, 15, &mut rng).unwrap();
        Desk {
            data,
            pool,
            episodes,
            pool_secs: t.elapsed().as_secs_f64(),
        }
    })
}

fn train(cfg: &RunConfig, pool: &PoolManifest, data: &DatasetTriple) -> Run {
    let t = Instant::now();
    let mut trainer = Trainer::new(cfg, pool, data).unwrap();
    trainer.run().unwrap();
    Run {
        report: trainer.state.report.clone(),
        last: trainer.state.meta.clone(),
        peak: trainer.peak_state().unwrap(),
        secs: t.elapsed().as_secs_f64(),
    }
}

fn full_run() -> &'static Run {
    static FULL: OnceLock<Run> = OnceLock::new();
    FULL.get_or_init(|| {
        let d = desk();
        train(&desk_config(), &d.pool, &d.data)
    })
}

fn metrics(run: &Run, episodes: &[Episode]) -> MetricsBlock {
    let at_peak = meta_test_on(&run.peak, episodes).unwrap();
    let at_last = meta_test_on(&run.last, episodes).unwrap();
    compute_metrics(&run.report, &at_peak, &at_last).unwrap()
}

#[test]
fn task_distribution_shift_end_to_end() {
    let d = desk();
    let full = full_run();
    let vanilla_cfg = set_ablation_mode(&desk_config(), AblationMode::V);
    let vanilla = train(&vanilla_cfg, &d.pool, &d.data);
    let t = Instant::now();
    let baseline = BaselineConfig {
        epochs: desk_config().random_baseline_epochs,
        learning_rate: desk_config().random_baseline_lr,
        ..BaselineConfig::default()
    };
    let random: TestResult = random_baseline_on(&d.episodes, &baseline, &mut ChaCha8Rng::seed_from_u64(100)).unwrap();
    let m_full = metrics(full, &d.episodes);
    let m_v = metrics(&vanilla, &d.episodes);
    let secs = d.pool_secs + full.secs + vanilla.secs + t.elapsed().as_secs_f64();
    let beats_random = m_full.peak - random.mean >= 10.0;
    let stable = m_full.variation.abs() <= 5.0;
    let vanilla_drifts = m_v.variation.abs() > m_full.variation.abs();
    let pass = beats_random && stable && vanilla_drifts && secs <= 20.0 * 60.0;
    verdict(
        6,
        "task-distribution shift, full method vs vanilla",
        pass,
        &format!(
            "full PEAK {:.2} LAST {:.2} VAR {:.2}; V PEAK {:.2} LAST {:.2} VAR {:.2}; RANDOM {:.2}; \
             {:.0}s (pool {:.0}, full {:.0}, V {:.0}, baseline {:.0})",
            m_full.peak,
            m_full.last,
            m_full.variation,
            m_v.peak,
            m_v.last,
            m_v.variation,
            random.mean,
            secs,
            d.pool_secs,
            full.secs,
            vanilla.secs,
            t.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn task_distribution_corruption_end_to_end() {
    let d = desk();
    let t = Instant::now();
    let cfg = RunConfig {
        pollution_rate: 0.5,
        ..desk_config()
    };
    let polluted = pollute_pool(&cfg, &d.pool, &d.data).unwrap();
    let pollute_secs = t.elapsed().as_secs_f64();
    let with_ams = train(&cfg, &polluted, &d.data);
    let without = train(
        &RunConfig {
            ams_enabled: false,
            ..cfg.clone()
        },
        &polluted,
        &d.data,
    );
    let acc_on = meta_test_on(&with_ams.last, &d.episodes).unwrap().mean;
    let acc_off = meta_test_on(&without.last, &d.episodes).unwrap().mean;
    let final_rsr = with_ams.report.records.last().and_then(|r| r.rsr).unwrap_or(0.0);
    let secs = d.pool_secs + pollute_secs + with_ams.secs + without.secs;
    let pass = polluted.trusted_indices().len() == 6 && final_rsr >= 0.7 && acc_on - acc_off >= 2.0 && secs <= 25.0 * 60.0;
    verdict(
        7,
        "task-distribution corruption, model selection on vs off",
        pass,
        &format!(
            "final RSR {final_rsr:.3}; final accuracy with selection {acc_on:.2}, without {acc_off:.2}; \
             {secs:.0}s (pool {:.0}, on {:.0}, off {:.0})",
            d.pool_secs + pollute_secs,
            with_ams.secs,
            without.secs
        ),
    );
}

const PUBLISHED_PAIRS: &str = "
36.26 27.01 52.67 40.53 30.46 24.00 41.00 31.32
35.31 26.40 51.63 41.24 30.20 23.05 40.78 29.60
30.43 29.35 36.21 35.28 27.56 25.22 30.19 28.43
40.39 39.69 55.31 52.92 32.58 29.76 43.63 42.45
40.80 40.28 57.11 55.69 32.61 31.97 42.93 41.28
28.59 28.59 34.77 34.77 25.06 25.06 28.10 28.10
53.90 47.12 68.01 64.51 31.62 27.23 45.36 35.32
51.34 45.02 67.26 62.54 31.29 25.05 43.34 32.08
55.28 54.86 69.03 68.52 35.65 34.32 47.24 46.28
57.31 56.79 71.12 70.60 37.47 36.67 48.68 47.64
";

#[test]
fn metrics_arithmetic() {
    let report = TrainRunReport {
        records: vec![dfml_core::orchestrator::IterationRecord {
            iteration: 1,
            branch: dfml_core::orchestrator::Branch::NewTasks,
            loss: 1.0,
            selected: vec![],
            reward: None,
            baseline: None,
            rsr: None,
            val_acc: Some(0.5),
        }],
        peak_iteration: Some(1),
        peak_val_acc: Some(0.5),
        last_checkpoint: None,
    };
    let result = |mean: f64| TestResult {
        mean,
        ci95: 0.0,
        accuracies: vec![],
    };
    let hundredths = |s: &str| -> i64 { s.replace('.', "").parse().unwrap() };
    let mut checked = 0;
    let mut bad = Vec::new();
    for row in PUBLISHED_PAIRS.lines().filter(|l| !l.trim().is_empty()) {
        let cells: Vec<&str> = row.split_whitespace().collect();
        for pair in cells.chunks(2) {
            let (peak, last) = (pair[0].parse::<f64>().unwrap(), pair[1].parse::<f64>().unwrap());
            let m = compute_metrics(&report, &result(peak), &result(last)).unwrap();
            let want = hundredths(pair[1]) - hundredths(pair[0]);
            let got = (m.variation * 100.0).round() as i64;
            let identity = m.variation == m.last - m.peak;
            let text = format!("{:.2}", m.variation);
            let want_text = format!("{}{}.{:02}", if want < 0 { "-" } else { "" }, want.abs() / 100, want.abs() % 100);
            if got != want || !identity || text != want_text {
                bad.push(format!("{} {} -> {}", pair[0], pair[1], text));
            }
            checked += 1;
        }
    }
    let m = compute_metrics(&report, &result(52.67), &result(40.53)).unwrap();
    let example = format!("{:.2}", m.variation);
    let pass = bad.is_empty() && example == "-12.14" && checked == 40;
    verdict(
        8,
        "PEAK/LAST/VARIATION arithmetic",
        pass,
        &format!("{checked} published pairs, 40.53 - 52.67 = {example}, mismatches {bad:?}"),
    );
}

#[test]
fn determinism_and_resume() {
    let d = desk();
    let first = full_run();
    let cfg = desk_config();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("mid.json");
    let t = Instant::now();
    let mut second = Trainer::new(&cfg, &d.pool, &d.data).unwrap();
    second.run_until(cfg.total_iterations / 2).unwrap();
    second.checkpoint(&ckpt).unwrap();
    second.run().unwrap();
    let mut resumed = Trainer::resume(&ckpt, &d.pool, &d.data).unwrap();
    resumed.run().unwrap();
    let secs = t.elapsed().as_secs_f64();

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    emit_report(&first.report, None, &a).unwrap();
    emit_report(&second.state.report, None, &b).unwrap();
    let paired = std::fs::read(a.join("report.csv")).unwrap() == std::fs::read(b.join("report.csv")).unwrap();
    let resumed_csv = report_csv(&resumed.state.report).unwrap() == report_csv(&first.report).unwrap();
    let resumed_params = resumed.state.meta.params == first.last.params && resumed.state.rng == second.state.rng;
    let pass = paired && resumed_csv && resumed_params;
    verdict(
        9,
        "determinism and checkpoint resume",
        pass,
        &format!(
            "same-seed report.csv identical: {paired}; resumed report identical: {resumed_csv}; resumed parameters identical: {resumed_params}; {secs:.0}s"
        ),
    );
}
