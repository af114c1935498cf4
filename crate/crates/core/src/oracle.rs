//! Slow reference implementations used to cross-check the optimized code:
//! brute-force contrastive loss, per-sample four-pass rotation ensemble,
//! exhaustive AUC pair counting and central finite differences.

use crate::augment::{rotate, ROTATIONS};
use crate::error::Result;
use crate::model::ModelState;

/// Supervised contrastive loss by direct O(B²) summation over explicit
/// positive and denominator sets. `z` is `b × d`, rows assumed unit-norm.
pub fn supcon_brute_force(z: &[f64], d: usize, labels: &[usize], tau: f64) -> f64 {
    let b = labels.len();
    let sim = |i: usize, j: usize| -> f64 { (0..d).map(|k| z[i * d + k] * z[j * d + k]).sum::<f64>() / tau };
    let mut total = 0.0;
    for i in 0..b {
        let denom: f64 = (0..b).filter(|&a| a != i).map(|a| sim(i, a).exp()).sum();
        let positives: Vec<usize> = (0..b).filter(|&p| p != i && labels[p] == labels[i]).collect();
        let inner: f64 = positives.iter().map(|&p| (sim(i, p).exp() / denom).ln()).sum();
        total += -inner / positives.len() as f64;
    }
    total / b as f64
}

/// Rotation-ensemble logits of one sample computed pass by pass with scalar
/// loops in f64.
pub fn ensemble_four_pass(model: &ModelState, task: usize, x: &[f32], s: f32) -> Result<Vec<f64>> {
    model.check_task(task)?;
    let head = &model.tasks[task].classifier;
    let r_count = head.num_rotations;
    let mut f = vec![0.0; head.num_classes];
    for (r, &deg) in ROTATIONS.iter().take(r_count).enumerate() {
        let mut h: Vec<f64> = rotate(x, model.arch.kind, deg)?.into_iter().map(f64::from).collect();
        for layer in &model.layers {
            let (w, b) = (layer.linear.weight.data(), layer.linear.bias.data());
            let e = layer.embeddings[task].data();
            let n_in = h.len();
            h = (0..layer.units())
                .map(|i| {
                    let pre = b[i] as f64 + (0..n_in).map(|j| w[i * n_in + j] as f64 * h[j]).sum::<f64>();
                    let gate = 1.0 / (1.0 + (-(s as f64) * e[i] as f64).exp());
                    pre.max(0.0) * gate
                })
                .collect();
        }
        let (w, b) = (head.linear.weight.data(), head.linear.bias.data());
        for (j, fj) in f.iter_mut().enumerate() {
            let o = j * r_count + r;
            *fj += b[o] as f64 + h.iter().enumerate().map(|(k, &v)| w[o * h.len() + k] as f64 * v).sum::<f64>();
        }
    }
    Ok(f.into_iter().map(|v| v / r_count as f64).collect())
}

/// `(2 · #wins + #ties, 2 · n · m)` over all in/out pairs.
pub fn auc_pair_count(in_scores: &[f32], out_scores: &[f32]) -> (u64, u64) {
    let mut twice = 0u64;
    for &a in in_scores {
        for &b in out_scores {
            if a > b {
                twice += 2;
            } else if a == b {
                twice += 1;
            }
        }
    }
    (twice, 2 * in_scores.len() as u64 * out_scores.len() as u64)
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a - b‖ / max(‖a‖ + ‖b‖, tiny)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}
