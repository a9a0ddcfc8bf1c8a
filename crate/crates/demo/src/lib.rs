//! Browser bindings for three small experiments: model-selection RSR curves,
//! reservoir retention, and task-mixup previews.

use dfml_core::ams::{reinforce_update, rsr, select_models, select_uniform, ReliabilityPolicy};
use dfml_core::memory::MemoryBuffer;
use dfml_core::tasks::{make_synthetic_dataset, ClassOrigin, Episode, Provenance, SyntheticSpec, TextureFamily};
use dfml_core::tensor::Array;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use wasm_bindgen::prelude::*;

fn text(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// RSR after each policy update on a pool whose first `trusted` models are
/// reliable. The reward is the trusted fraction of each selection. With
/// `learned = false` models are drawn uniformly and the curve is the running
/// share of trusted picks.
pub fn rsr_curve_values(
    pool_size: usize,
    trusted: usize,
    select: usize,
    updates: usize,
    lr: f64,
    learned: bool,
    seed: u64,
) -> Result<Vec<f64>, String> {
    if trusted > pool_size {
        return Err(text("more trusted models than the pool holds"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut policy = ReliabilityPolicy::new(pool_size, select).map_err(text)?;
    let trusted_ids: Vec<usize> = (0..trusted).collect();
    let mut curve = Vec::with_capacity(updates + 1);
    curve.push(rsr(&policy.weights, &trusted_ids));
    let (mut hits, mut picks) = (0usize, 0usize);
    for _ in 0..updates {
        let sel = if learned {
            select_models(&policy, &mut rng)
        } else {
            select_uniform(pool_size, select, &mut rng)
        }
        .map_err(text)?;
        let good = sel.iter().filter(|&&i| i < trusted).count();
        if learned {
            reinforce_update(&mut policy, &sel, good as f64 / select as f64, lr).map_err(text)?;
            curve.push(rsr(&policy.weights, &trusted_ids));
        } else {
            hits += good;
            picks += select;
            curve.push(hits as f64 / picks as f64);
        }
    }
    Ok(curve)
}

fn marker(i: usize) -> Episode {
    let one = || Array::new(vec![1, 1, 1, 1], vec![i as f64]).expect("1x1 image");
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

/// Fraction of trials in which each of `offers` streamed tasks is still held
/// by a reservoir of `capacity` slots at the end.
pub fn reservoir_retention_values(capacity: usize, offers: usize, trials: usize, seed: u64) -> Result<Vec<f64>, String> {
    if trials == 0 {
        return Err(text("trials must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = vec![0usize; offers];
    for _ in 0..trials {
        let mut buf = MemoryBuffer::new(capacity);
        for i in 0..offers {
            buf.reservoir_update(marker(i), &mut rng).map_err(text)?;
        }
        for s in &buf.slots {
            if let Some(i) = s.source_model {
                kept[i] += 1;
            }
        }
    }
    Ok(kept.into_iter().map(|c| c as f64 / trials as f64).collect())
}

/// Normalized histogram of `samples` draws of the mixing coefficient.
pub fn beta_histogram_values(alpha: f64, beta: f64, samples: usize, bins: usize, seed: u64) -> Result<Vec<f64>, String> {
    let dist = Beta::new(alpha, beta).map_err(text)?;
    let bins = bins.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = vec![0.0; bins];
    for _ in 0..samples {
        let x: f64 = dist.sample(&mut rng);
        h[((x * bins as f64) as usize).min(bins - 1)] += 1.0;
    }
    let total = samples.max(1) as f64;
    Ok(h.into_iter().map(|c| c / total).collect())
}

/// RGBA strip of `steps` images blending two synthetic classes from
/// `lambda = 1` (first class) to `lambda = 0` (second class).
pub fn mixup_strip_values(size: usize, steps: usize, blobs: bool, seed: u64) -> Result<Vec<u8>, String> {
    let steps = steps.max(2);
    let spec = SyntheticSpec {
        family: if blobs { TextureFamily::Blobs } else { TextureFamily::Waves },
        ..SyntheticSpec::new(20, size, 3, 1)
    };
    let data = make_synthetic_dataset(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(text)?;
    let mut ids = data.train.classes.values();
    let (a, b) = match (ids.next(), ids.next()) {
        (Some(a), Some(b)) => (a.row(0).to_vec(), b.row(0).to_vec()),
        _ => return Err(text("synthetic dataset has fewer than two classes")),
    };
    let width = size * steps;
    let mut out = vec![0u8; width * size * 4];
    for s in 0..steps {
        let lambda = 1.0 - s as f64 / (steps - 1) as f64;
        for y in 0..size {
            for x in 0..size {
                let px = ((y * width) + s * size + x) * 4;
                for ch in 0..3 {
                    let i = (ch * size + y) * size + x;
                    let v = lambda * a[i] + (1.0 - lambda) * b[i];
                    out[px + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
                out[px + 3] = 255;
            }
        }
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn rsr_curve(
    pool_size: usize,
    trusted: usize,
    select: usize,
    updates: usize,
    lr: f64,
    learned: bool,
    seed: u32,
) -> Result<Vec<f64>, JsError> {
    rsr_curve_values(pool_size, trusted, select, updates, lr, learned, u64::from(seed)).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn reservoir_retention(capacity: usize, offers: usize, trials: usize, seed: u32) -> Result<Vec<f64>, JsError> {
    reservoir_retention_values(capacity, offers, trials, u64::from(seed)).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn beta_histogram(alpha: f64, beta: f64, samples: usize, bins: usize, seed: u32) -> Result<Vec<f64>, JsError> {
    beta_histogram_values(alpha, beta, samples, bins, u64::from(seed)).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn mixup_strip(size: usize, steps: usize, blobs: bool, seed: u32) -> Result<Vec<u8>, JsError> {
    mixup_strip_values(size, steps, blobs, u64::from(seed)).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learned_policy_concentrates_on_trusted_models() {
        let learned = rsr_curve_values(10, 5, 2, 500, 0.1, true, 0).unwrap();
        assert_eq!(learned.len(), 501);
        assert!((learned[0] - 0.5).abs() < 1e-12);
        assert!(*learned.last().unwrap() > 0.9);
        let uniform = rsr_curve_values(10, 5, 2, 500, 0.1, false, 0).unwrap();
        assert!((uniform.last().unwrap() - 0.5).abs() < 0.05);
    }

    #[test]
    fn retention_is_flat() {
        let r = reservoir_retention_values(4, 20, 3000, 1).unwrap();
        assert!(r.iter().all(|p| (p - 0.2).abs() < 0.04), "{r:?}");
    }

    #[test]
    fn histogram_and_strip_shapes() {
        let h = beta_histogram_values(0.5, 0.5, 2000, 10, 0).unwrap();
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(h[0] > h[5] && h[9] > h[5]);
        assert!(beta_histogram_values(-1.0, 1.0, 10, 4, 0).is_err());
        let strip = mixup_strip_values(8, 5, false, 3).unwrap();
        assert_eq!(strip.len(), 8 * 8 * 5 * 4);
        let first = &strip[..4];
        let last_x = (8 * 5 - 1) * 4;
        assert_ne!(first, &strip[last_x..last_x + 4]);
    }
}
