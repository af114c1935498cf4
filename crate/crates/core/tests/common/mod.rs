#![allow(dead_code)]

use clom::autodiff::Tape;
use clom::config::{DataSource, ExperimentConfig};
use clom::selftest::GradCase;
use clom::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small synthetic experiment that trains in well under a second per task.
pub fn synthetic_config(n_tasks: usize, epochs: usize, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.data.source = DataSource::Synthetic;
    cfg.data.n_tasks = n_tasks;
    cfg.data.synthetic_dim = 8;
    cfg.data.synthetic_samples_per_class = 60;
    cfg.data.synthetic_test_per_class = 30;
    cfg.model.hidden_width = 32;
    cfg.model.depth = 2;
    cfg.model.proj_dim = 16;
    cfg.train.epochs = epochs;
    cfg.train.warmup_epochs = 1;
    cfg.train.batch_size = 32;
    cfg.train.finetune_epochs = epochs;
    cfg.train.finetune_batch_size = 32;
    cfg.memory.per_class = 5;
    cfg.calib.iterations = 40;
    cfg
}

/// Central finite differences of `f` at `x`, written independently of the
/// library's own helper.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        out.push((plus - minus) / (2.0 * h));
    }
    out
}

fn random_inputs(case: &GradCase, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    case.shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            (0..n)
                .map(|_| loop {
                    let v: f64 = rng.random_range(-2.0..2.0);
                    if v.abs() >= case.margin.max(1e-3) {
                        break v;
                    }
                })
                .collect()
        })
        .collect()
}

/// `sum(out * weights)` for the case at `inputs`; returns the value and the
/// analytic gradient with respect to every input, concatenated.
fn evaluate(case: &GradCase, inputs: &[Vec<f64>], weights: &[f64]) -> (f64, Vec<f64>) {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<_> = inputs
        .iter()
        .zip(&case.shapes)
        .map(|(x, s)| tape.param(Tensor::new(s.clone(), x.clone()).unwrap()))
        .collect();
    let out = (case.build)(&mut tape, &vars).unwrap();
    let shape = tape.value(out).shape().to_vec();
    let n = tape.value(out).numel();
    let w = tape.constant(Tensor::new(shape, weights[..n].to_vec()).unwrap());
    let loss = tape.dot(out, w).unwrap();
    let value = tape.scalar_value(loss);
    let mut grads = tape.backward(loss).unwrap();
    let g = vars.iter().flat_map(|&v| grads.take(v).unwrap()).collect();
    (value, g)
}

/// Worst norm-wise relative error between the tape gradient and central
/// differences over `points` random inputs.
pub fn worst_gradient_error(case: &GradCase, points: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let inputs = random_inputs(case, &mut rng);
        let weights: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, analytic) = evaluate(case, &inputs, &weights);
        let flat: Vec<f64> = inputs.concat();
        let sizes: Vec<usize> = inputs.iter().map(Vec::len).collect();
        let mut f = |x: &[f64]| {
            let mut parts = Vec::new();
            let mut at = 0;
            for &n in &sizes {
                parts.push(x[at..at + n].to_vec());
                at += n;
            }
            evaluate(case, &parts, &weights).0
        };
        let numeric = central_difference(&mut f, &flat, 1e-6);
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
        worst = worst.max(diff / scale.max(1e-12));
    }
    worst
}
