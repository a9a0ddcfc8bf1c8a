//! Fast invariant suite behind `dfml selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ams::{log_policy_grad, log_policy_prob, rsr, selection_probabilities};
use crate::memory::MemoryBuffer;
use crate::metalearn::kl_divergence;
use crate::nn::cross_entropy;
use crate::tasks::{ClassOrigin, Episode, Provenance};
use crate::tensor::{grad, Array, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, worst: f64, tol: f64) -> Check {
    Check {
        name,
        passed: worst.is_finite() && worst <= tol,
        detail: format!("max error {worst:.3e} (tolerance {tol:.0e})"),
    }
}

fn random_vec(n: usize, scale: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn softmax_identities(rng: &mut impl Rng) -> Check {
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..12);
        let w = random_vec(n, 10.0, rng);
        let p = selection_probabilities(&w);
        worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
        let c = rng.random_range(-50.0..50.0);
        let shifted: Vec<f64> = w.iter().map(|x| x + c).collect();
        for (a, b) in p.iter().zip(selection_probabilities(&shifted)) {
            worst = worst.max((a - b).abs());
        }
        let t = Tensor::from_vec(&[1, n], w.clone()).softmax();
        for (a, b) in p.iter().zip(t.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    check("softmax sums to one and ignores shifts", worst, 1e-12)
}

fn rsr_identities(rng: &mut impl Rng) -> Check {
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..12);
        let t = rng.random_range(1..=n);
        let trusted: Vec<usize> = (0..t).collect();
        worst = worst.max((rsr(&vec![rng.random_range(-3.0..3.0); n], &trusted) - t as f64 / n as f64).abs());
        let w = random_vec(n, 5.0, rng);
        let all: Vec<usize> = (0..n).collect();
        worst = worst.max((rsr(&w, &all) - 1.0).abs());
        let r = rsr(&w, &trusted);
        if !(0.0..=1.0).contains(&r) {
            worst = f64::INFINITY;
        }
    }
    check("RSR is uniform mass share and lies in [0, 1]", worst, 1e-12)
}

fn ce_kl_closed_forms(rng: &mut impl Rng) -> Check {
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..8);
        let ce = cross_entropy(&Tensor::from_vec(&[1, n], vec![0.0; n]), &[rng.random_range(0..n)]).item();
        worst = worst.max((ce - (n as f64).ln()).abs());
        let (a, b): (f64, f64) = (rng.random_range(0.01..0.99), rng.random_range(0.01..0.99));
        let lp = Tensor::from_vec(&[1, 2], vec![a.ln(), (1.0 - a).ln()]);
        let lq = Tensor::from_vec(&[1, 2], vec![b.ln(), (1.0 - b).ln()]);
        let want = a * (a / b).ln() + (1.0 - a) * ((1.0 - a) / (1.0 - b)).ln();
        worst = worst.max((kl_divergence(&lp, &lq).item() - want).abs());
        worst = worst.max(kl_divergence(&lp, &lp).item().abs());
    }
    check("cross-entropy and KL match closed forms", worst, 1e-12)
}

fn policy_gradient(rng: &mut impl Rng) -> Check {
    let mut worst = 0.0f64;
    let h = 1e-6;
    for _ in 0..50 {
        let n = rng.random_range(2..10);
        let w = random_vec(n, 2.0, rng);
        let k = rng.random_range(1..=n);
        let sel = rand::seq::index::sample(rng, n, k).into_vec();
        let g = log_policy_grad(&w, &sel);
        for j in 0..n {
            let (mut up, mut dn) = (w.clone(), w.clone());
            up[j] += h;
            dn[j] -= h;
            let fd = (log_policy_prob(&up, &sel) - log_policy_prob(&dn, &sel)) / (2.0 * h);
            worst = worst.max((g[j] - fd).abs() / fd.abs().max(1e-6));
        }
    }
    check("log-policy gradient matches finite differences", worst, 1e-5)
}

fn autograd_gradient(rng: &mut impl Rng) -> Check {
    let mut worst = 0.0f64;
    let h = 1e-5;
    let f = |x: &Tensor, c: &[f64]| {
        let n = c.len();
        x.log_softmax().mul(&Tensor::from_vec(&[1, n], c.to_vec())).sum().add(&x.square().sum().mul_scalar(0.1))
    };
    for _ in 0..20 {
        let n = rng.random_range(2..7);
        let x0 = random_vec(n, 2.0, rng);
        let c = random_vec(n, 1.0, rng);
        let x = Tensor::param(Array::new(vec![1, n], x0.clone()).expect("shape"));
        let g = grad(&f(&x, &c), &[x.clone()], false)[0].data().to_vec();
        for j in 0..n {
            let eval = |d: f64| {
                let mut v = x0.clone();
                v[j] += d;
                f(&Tensor::from_vec(&[1, n], v), &c).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            worst = worst.max((g[j] - fd).abs() / fd.abs().max(1e-6));
        }
    }
    check("autograd matches finite differences", worst, 1e-5)
}

fn marker_episode(id: usize) -> Episode {
    Episode {
        support_x: Array::new(vec![1, 1, 1, 1], vec![id as f64]).expect("shape"),
        support_y: vec![0],
        query_x: Array::new(vec![1, 1, 1, 1], vec![id as f64]).expect("shape"),
        query_y: vec![0],
        n_way: 1,
        class_origin: vec![ClassOrigin::real(0)],
        provenance: Provenance::Generated,
        source_model: Some(id),
    }
}

fn reservoir_uniformity(rng: &mut impl Rng) -> Check {
    let (capacity, offers, trials) = (5, 50, 4000);
    let mut kept = vec![0usize; offers];
    for _ in 0..trials {
        let mut buf = MemoryBuffer::new(capacity);
        for i in 0..offers {
            buf.reservoir_update(marker_episode(i), rng).expect("generated episode");
        }
        for s in &buf.slots {
            kept[s.source_model.expect("marker")] += 1;
        }
    }
    let want = capacity as f64 / offers as f64;
    let worst = kept
        .iter()
        .map(|&c| (c as f64 / trials as f64 - want).abs())
        .fold(0.0, f64::max);
    check("reservoir keeps every offer with equal probability", worst, 0.03)
}

/// Runs every check with a fixed seed.
pub fn run_selftest(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        softmax_identities(&mut rng),
        rsr_identities(&mut rng),
        ce_kl_closed_forms(&mut rng),
        policy_gradient(&mut rng),
        autograd_gradient(&mut rng),
        reservoir_uniformity(&mut rng),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for c in run_selftest(0) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
