//! Built-in verification suites run by `clom selftest`. Everything here uses
//! synthetic inputs only, so it runs without any dataset on disk.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::config::ExperimentConfig;
use crate::contrastive::train_task_representation;
use crate::data::{make_synthetic_tasks, InputKind};
use crate::error::Result;
use crate::inference::ensemble_logits;
use crate::masknet::{bias_gate, weight_gate};
use crate::metrics::auc;
use crate::model::{Architecture, ModelState};
use crate::oracle::{auc_pair_count, ensemble_four_pass, numeric_gradient, relative_error, supcon_brute_force};
use crate::rng::rng_for;
use crate::tensor::Tensor;

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const ORACLE_TOLERANCE: f64 = 1e-6;

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub trials: usize,
    /// Largest observed error (0 for exact checks).
    pub worst: f64,
    pub passed: bool,
}

/// One differentiable case: input shapes and a builder producing the output.
pub struct GradCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    /// Keep inputs at least this far from zero (kinks of relu/max).
    pub margin: f64,
    pub build: fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
}

pub fn gradient_cases() -> Vec<GradCase> {
    vec![
        GradCase { name: "matmul", shapes: vec![vec![3, 4], vec![4, 2]], margin: 0.0, build: |t, v| t.matmul(v[0], v[1], false) },
        GradCase { name: "matmul_trans_b", shapes: vec![vec![3, 4], vec![2, 4]], margin: 0.0, build: |t, v| t.matmul(v[0], v[1], true) },
        GradCase { name: "add_bias", shapes: vec![vec![3, 4], vec![4]], margin: 0.0, build: |t, v| t.add_bias(v[0], v[1]) },
        GradCase { name: "add", shapes: vec![vec![3, 4], vec![3, 4]], margin: 0.0, build: |t, v| t.add(v[0], v[1]) },
        GradCase { name: "mul", shapes: vec![vec![3, 4], vec![3, 4]], margin: 0.0, build: |t, v| t.mul(v[0], v[1]) },
        GradCase { name: "max", shapes: vec![vec![3, 4], vec![3, 4]], margin: 0.0, build: |t, v| t.max(v[0], v[1]) },
        GradCase { name: "relu", shapes: vec![vec![3, 4]], margin: 0.05, build: |t, v| Ok(t.relu(v[0])) },
        GradCase { name: "sigmoid", shapes: vec![vec![3, 4]], margin: 0.0, build: |t, v| Ok(t.sigmoid(v[0])) },
        GradCase { name: "affine", shapes: vec![vec![3, 4]], margin: 0.0, build: |t, v| Ok(t.affine(v[0], 1.7, -0.3)) },
        GradCase { name: "mul_row", shapes: vec![vec![3, 4], vec![4]], margin: 0.0, build: |t, v| t.mul_row(v[0], v[1]) },
        GradCase { name: "l2_normalize", shapes: vec![vec![3, 4]], margin: 0.0, build: |t, v| Ok(t.l2_normalize(v[0], 1e-12)) },
        GradCase { name: "dot", shapes: vec![vec![5], vec![5]], margin: 0.0, build: |t, v| t.dot(v[0], v[1]) },
        GradCase { name: "sum", shapes: vec![vec![3, 4]], margin: 0.0, build: |t, v| Ok(t.sum(v[0])) },
        GradCase { name: "mean", shapes: vec![vec![3, 4]], margin: 0.0, build: |t, v| t.mean(v[0]) },
        GradCase { name: "log_sum_exp", shapes: vec![vec![3, 4]], margin: 0.0, build: |t, v| Ok(t.log_sum_exp(v[0])) },
        GradCase {
            name: "softmax_cross_entropy",
            shapes: vec![vec![4, 3]],
            margin: 0.0,
            build: |t, v| t.softmax_cross_entropy(v[0], &[0, 2, 1, 2]),
        },
        GradCase {
            name: "supcon",
            shapes: vec![vec![6, 3]],
            margin: 0.0,
            build: |t, v| t.supcon(v[0], &[0, 0, 1, 1, 2, 2], 0.5),
        },
        GradCase {
            name: "supcon_normalized",
            shapes: vec![vec![6, 3]],
            margin: 0.0,
            build: |t, v| {
                let z = t.l2_normalize(v[0], 1e-12);
                t.supcon(z, &[0, 1, 0, 1, 1, 0], 0.07)
            },
        },
        GradCase {
            name: "masked_layer",
            shapes: vec![vec![3, 4], vec![5, 4], vec![5], vec![5]],
            margin: 0.0,
            build: |t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                let y = t.relu(y);
                let se = t.affine(v[3], 2.0, 0.0);
                let a = t.sigmoid(se);
                t.mul_row(y, a)
            },
        },
    ]
}

fn draw(rng: &mut ChaCha8Rng, n: usize, margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v: f64 = StandardNormal.sample(rng);
            if v.abs() >= margin {
                break v;
            }
        })
        .collect()
}

/// Scalar objective: the case output contracted with fixed weights `r`.
fn objective(case: &GradCase, inputs: &[Vec<f64>], r: &[f64], fault: bool, params: bool) -> Result<(Tape<f64>, Var, Vec<Var>)> {
    let mut tape = Tape::<f64>::new();
    if fault {
        tape.inject_sigmoid_fault();
    }
    let vars: Vec<Var> = inputs
        .iter()
        .zip(&case.shapes)
        .map(|(x, s)| {
            let t = Tensor::new(s.clone(), x.clone()).expect("consistent case shape");
            if params { tape.param(t) } else { tape.constant(t) }
        })
        .collect();
    let out = (case.build)(&mut tape, &vars)?;
    let w = tape.constant(Tensor::new(tape.value(out).shape().to_vec(), r[..tape.value(out).numel()].to_vec())?);
    let loss = tape.dot(out, w)?;
    Ok((tape, loss, vars))
}

/// Central finite-difference check of every case at `points` random inputs.
pub fn gradient_suite(points: usize, seed: u64, fault: bool) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (ci, case) in gradient_cases().iter().enumerate() {
        let mut rng = rng_for(seed, &[ci as u64]);
        let mut worst = 0.0f64;
        for _ in 0..points {
            let mut inputs: Vec<Vec<f64>> =
                case.shapes.iter().map(|s| draw(&mut rng, s.iter().product(), case.margin)).collect();
            if case.name == "max" {
                // keep the two arguments apart so the subgradient is unique
                for (a, b) in inputs[0].clone().iter().zip(inputs[1].iter_mut()) {
                    if (a - *b).abs() < 0.05 {
                        *b = a + if rng.random::<bool>() { 0.1 } else { -0.1 };
                    }
                }
            }
            let r = draw(&mut rng, 64, 0.0);
            let (mut tape, loss, vars) = objective(case, &inputs, &r, fault, true)?;
            let grads = tape.backward(loss)?;
            for (k, v) in vars.iter().enumerate() {
                let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
                let mut f = |x: &[f64]| -> f64 {
                    let mut p = inputs.clone();
                    p[k] = x.to_vec();
                    let (t, l, _) = objective(case, &p, &r, false, false).expect("case evaluates");
                    t.scalar_value(l)
                };
                let numeric = numeric_gradient(&mut f, &inputs[k], 1e-6);
                worst = worst.max(relative_error(&analytic, &numeric));
            }
        }
        out.push(Check {
            suite: "gradient",
            name: case.name.to_string(),
            trials: points,
            worst,
            passed: worst <= GRADIENT_TOLERANCE,
        });
    }
    Ok(out)
}

/// Fused contrastive loss against the brute-force sum on random batches.
pub fn supcon_suite(batches: usize, seed: u64) -> Result<Check> {
    let mut rng = rng_for(seed, &[100]);
    let mut worst = 0.0f64;
    for _ in 0..batches {
        let b = rng.random_range(2..20usize);
        let d = rng.random_range(1..9usize);
        let n_labels = rng.random_range(1..=b / 2);
        // every label appears at least twice
        let mut labels: Vec<usize> = (0..b).map(|i| (i / 2).min(n_labels - 1)).collect();
        labels.rotate_left(rng.random_range(0..b));
        let mut z = draw(&mut rng, b * d, 0.0);
        for row in z.chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        let tau = rng.random_range(0.05..1.0);
        let mut tape = Tape::<f64>::new();
        let zv = tape.constant(Tensor::matrix(b, d, z.clone())?);
        let l = tape.supcon(zv, &labels, tau)?;
        worst = worst.max((tape.scalar_value(l) - supcon_brute_force(&z, d, &labels, tau)).abs());
    }
    Ok(Check { suite: "oracle", name: "supcon_brute_force".into(), trials: batches, worst, passed: worst <= ORACLE_TOLERANCE })
}

fn random_model(kind: InputKind, rng: &mut ChaCha8Rng, seed: u64) -> Result<ModelState> {
    let arch = Architecture { kind, hidden_width: 12, depth: 2, proj_dim: 4, num_rotations: 4 };
    let mut m = ModelState::new(arch, seed)?;
    m.add_task(&[0, 1, 2], seed)?;
    for v in m.tasks[0].classifier.linear.weight.data_mut() {
        *v = rng.random_range(-0.5..0.5);
    }
    for v in m.tasks[0].classifier.linear.bias.data_mut() {
        *v = rng.random_range(-0.5..0.5);
    }
    Ok(m)
}

/// Batched rotation ensemble against the per-sample four-pass oracle.
pub fn ensemble_suite(trials: usize, seed: u64) -> Result<Check> {
    let mut rng = rng_for(seed, &[200]);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let kind = if trial % 2 == 0 { InputKind::Image { rows: 5, cols: 5 } } else { InputKind::Vector { dim: 7 } };
        let m = random_model(kind, &mut rng, seed + trial as u64)?;
        let rows = 3;
        let x: Vec<f32> = (0..rows * kind.dim()).map(|_| rng.random_range(0.0..1.0)).collect();
        let s = [1.0, 5.0, 700.0][trial % 3];
        let fast = ensemble_logits(&m, 0, &x, rows, s)?;
        for (i, row) in x.chunks(kind.dim()).enumerate() {
            let slow = ensemble_four_pass(&m, 0, row, s)?;
            for (a, b) in fast[i * 3..(i + 1) * 3].iter().zip(&slow) {
                worst = worst.max((*a as f64 - b).abs() / b.abs().max(1.0));
            }
        }
    }
    Ok(Check { suite: "oracle", name: "ensemble_four_pass".into(), trials, worst, passed: worst <= ORACLE_TOLERANCE })
}

/// Rank-statistic AUC against exhaustive pair counting on tie-heavy scores.
pub fn auc_suite(trials: usize, seed: u64) -> Result<Check> {
    let mut rng = rng_for(seed, &[300]);
    let mut mismatches = 0;
    for _ in 0..trials {
        let n = rng.random_range(1..=200usize);
        let m = rng.random_range(1..=200usize);
        let levels = rng.random_range(1..=20u32);
        let mut gen = |k: usize| (0..k).map(|_| rng.random_range(0..levels) as f32 * 0.25).collect::<Vec<f32>>();
        let (a, b) = (gen(n), gen(m));
        let (num, den) = auc_pair_count(&a, &b);
        if auc(&a, &b)? != num as f64 / den as f64 {
            mismatches += 1;
        }
    }
    Ok(Check { suite: "oracle", name: "auc_pair_count".into(), trials, worst: mismatches as f64, passed: mismatches == 0 })
}

/// Trains two small synthetic tasks and verifies every trunk parameter whose
/// gate is zero after task 1 is bit-identical after task 2.
pub fn protection_suite(seed: u64) -> Result<Check> {
    let tasks = make_synthetic_tasks(2, 2, 8, 40, seed)?;
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.train.epochs = 4;
    cfg.train.warmup_epochs = 1;
    cfg.train.batch_size = 16;
    let arch = Architecture { kind: tasks[0].kind, hidden_width: 16, depth: 2, proj_dim: 8, num_rotations: 4 };
    let mut m = ModelState::new(arch, seed)?;
    m.add_task(&tasks[0].classes, seed)?;
    train_task_representation(&mut m, 0, &tasks[0], &cfg)?;
    let masks = m.task_masks(0, cfg.masknet.s_max)?;
    m.accumulated.accumulate(&masks)?;
    // saturate the accumulated mask so gates are exactly 0 or 1
    for l in &mut m.accumulated.layers {
        l.iter_mut().for_each(|v| *v = v.round());
    }
    let before = m.clone();
    m.add_task(&tasks[1].classes, seed)?;
    train_task_representation(&mut m, 1, &tasks[1], &cfg)?;
    let mut frozen = 0usize;
    let mut moved = 0usize;
    for l in 0..m.layers.len() {
        let prev = (l > 0).then(|| before.accumulated.layers[l - 1].as_slice());
        let wg = weight_gate(&before.accumulated.layers[l], prev, m.layers[l].linear.input_dim());
        let bg = bias_gate(&before.accumulated.layers[l]);
        let pairs = [
            (wg, m.layers[l].linear.weight.data(), before.layers[l].linear.weight.data()),
            (bg, m.layers[l].linear.bias.data(), before.layers[l].linear.bias.data()),
        ];
        for (gate, new, old) in pairs {
            for ((g, a), b) in gate.iter().zip(new).zip(old) {
                if *g == 0.0 {
                    frozen += 1;
                    if a.to_bits() != b.to_bits() {
                        moved += 1;
                    }
                }
            }
        }
        if m.layers[l].embeddings[0] != before.layers[l].embeddings[0] {
            moved += 1;
        }
    }
    Ok(Check {
        suite: "protection",
        name: format!("gated_parameters_frozen ({frozen} protected)"),
        trials: 1,
        worst: moved as f64,
        passed: moved == 0 && frozen > 0,
    })
}

/// Runs every suite. With `fault` the sigmoid backward is deliberately
/// corrupted so the gradient suite must fail.
pub fn run_all(seed: u64, fault: bool) -> Result<Vec<Check>> {
    let mut checks = gradient_suite(20, seed, fault)?;
    checks.push(supcon_suite(100, seed)?);
    checks.push(ensemble_suite(30, seed)?);
    checks.push(auc_suite(100, seed)?);
    checks.push(protection_suite(seed)?);
    Ok(checks)
}

pub fn render(checks: &[Check]) -> String {
    let mut out = format!("{:<11} {:<40} {:>6} {:>12}  result\n", "suite", "check", "trials", "worst");
    for c in checks {
        out.push_str(&format!(
            "{:<11} {:<40} {:>6} {:>12.3e}  {}\n",
            c.suite,
            c.name,
            c.trials,
            c.worst,
            if c.passed { "PASS" } else { "FAIL" }
        ));
    }
    out
}
