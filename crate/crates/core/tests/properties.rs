//! Property-based invariants of the metrics, the contrastive loss and the
//! inference rules.

mod common;

use clom::autodiff::Tape;
use clom::calibration::{apply_calibration, CalibrationParams};
use clom::config::OodScore;
use clom::inference::{detect_task, predict_cil, predict_til, TaskOutputs};
use clom::metrics::{auc, avg_incremental_accuracy, forgetting_rate, AccuracyMatrix};
use clom::tensor::Tensor;
use num_rational::Ratio;
use proptest::prelude::*;

/// Exhaustive pair count as an exact fraction.
fn pair_auc(a: &[f32], b: &[f32]) -> Ratio<u64> {
    let mut twice = 0u64;
    for &x in a {
        for &y in b {
            twice += match x.partial_cmp(&y).unwrap() {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    Ratio::new(twice, 2 * a.len() as u64 * b.len() as u64)
}

fn supcon_reference(z: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let b = z.len();
    let s = |i: usize, j: usize| z[i].iter().zip(&z[j]).map(|(x, y)| x * y).sum::<f64>() / tau;
    let mut total = 0.0;
    for i in 0..b {
        let log_denom = (0..b).filter(|&k| k != i).map(|k| s(i, k).exp()).sum::<f64>().ln();
        let pos: Vec<usize> = (0..b).filter(|&p| p != i && labels[p] == labels[i]).collect();
        total += pos.iter().map(|&p| log_denom - s(i, p)).sum::<f64>() / pos.len() as f64;
    }
    total / b as f64
}

fn tape_supcon(z: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let d = z[0].len();
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(Tensor::matrix(z.len(), d, z.concat()).unwrap());
    let l = tape.supcon(v, labels, tau).unwrap();
    tape.scalar_value(l)
}

fn unit_rows(raw: &[Vec<f64>]) -> Vec<Vec<f64>> {
    raw.iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

/// Orthogonal matrix from Gram-Schmidt on a random square matrix.
fn orthogonal(raw: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    for v in raw {
        let mut u = v.clone();
        for e in &q {
            let p: f64 = u.iter().zip(e).map(|(a, b)| a * b).sum();
            u.iter_mut().zip(e).for_each(|(a, b)| *a -= p * b);
        }
        let n = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        q.push(u.into_iter().map(|a| a / n).collect());
    }
    q
}

/// A batch of paired views: every label appears at least twice.
fn batch_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    (2usize..12, 2usize..6).prop_flat_map(|(pairs, d)| {
        (
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), 2 * pairs),
            prop::collection::vec(0usize..3, pairs),
        )
            .prop_map(|(z, base)| {
                let labels = base.iter().flat_map(|&l| [l, l]).collect();
                (z, labels)
            })
    })
}

fn outputs_strategy() -> impl Strategy<Value = TaskOutputs> {
    (1usize..4, 1usize..20).prop_flat_map(|(tasks, rows)| {
        prop::collection::vec(prop::collection::vec(-64i32..64, rows * 2), tasks).prop_map(move |logits| {
            TaskOutputs {
                rows,
                per_task: logits.into_iter().map(|v| v.into_iter().map(|x| x as f32 / 8.0).collect()).collect(),
                classes: (0..tasks).map(|t| vec![2 * t, 2 * t + 1]).collect(),
            }
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn auc_equals_exact_pair_count(
        a in prop::collection::vec(-5i8..5, 1..40),
        b in prop::collection::vec(-5i8..5, 1..40),
    ) {
        let a: Vec<f32> = a.into_iter().map(f32::from).collect();
        let b: Vec<f32> = b.into_iter().map(f32::from).collect();
        let got = auc(&a, &b).unwrap();
        let den = 2 * a.len() as u64 * b.len() as u64;
        let num = (got * den as f64).round();
        prop_assert_eq!(num / den as f64, got);
        prop_assert_eq!(Ratio::new(num as u64, den), pair_auc(&a, &b));
    }

    #[test]
    fn auc_is_antisymmetric(a in prop::collection::vec(-3i8..3, 1..30), b in prop::collection::vec(-3i8..3, 1..30)) {
        let a: Vec<f32> = a.into_iter().map(f32::from).collect();
        let b: Vec<f32> = b.into_iter().map(f32::from).collect();
        prop_assert_eq!(auc(&a, &b).unwrap() + auc(&b, &a).unwrap(), 1.0);
    }

    #[test]
    fn auc_ignores_monotone_rescaling(a in prop::collection::vec(-50i16..50, 1..30), b in prop::collection::vec(-50i16..50, 1..30)) {
        let f = |v: &Vec<i16>, k: f32| v.iter().map(|&x| k * f32::from(x) - 3.0).collect::<Vec<f32>>();
        prop_assert_eq!(auc(&f(&a, 1.0), &f(&b, 1.0)).unwrap(), auc(&f(&a, 4.0), &f(&b, 4.0)).unwrap());
    }

    #[test]
    fn forgetting_of_constant_columns_is_zero(diag in prop::collection::vec(0u8..=100, 2..8)) {
        let n = diag.len();
        let rows: Vec<Vec<f64>> = (0..n).map(|k| diag[..=k].iter().map(|&v| f64::from(v) / 100.0).collect()).collect();
        let a = AccuracyMatrix::from_rows(rows).unwrap();
        for t in 2..=n {
            prop_assert_eq!(forgetting_rate(&a, t).unwrap(), 0.0);
        }
    }

    #[test]
    fn forgetting_is_mean_drop(vals in prop::collection::vec(0u8..=64, 28)) {
        // dyadic accuracies keep every sum exact
        let n = 7;
        let mut it = vals.into_iter();
        let rows: Vec<Vec<f64>> = (0..n).map(|k| (0..=k).map(|_| f64::from(it.next().unwrap()) / 64.0).collect()).collect();
        let a = AccuracyMatrix::from_rows(rows.clone()).unwrap();
        let expected: f64 = (0..n - 1).map(|j| rows[j][j] - rows[n - 1][j]).sum::<f64>() / (n - 1) as f64;
        prop_assert!((forgetting_rate(&a, n).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn average_incremental_accuracy_is_bounded(steps in prop::collection::vec(0.0f64..1.0, 1..10)) {
        let v = avg_incremental_accuracy(&steps).unwrap();
        let lo = steps.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = steps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
    }

    #[test]
    fn supcon_matches_direct_summation((raw, labels) in batch_strategy(), tau in 0.05f64..1.0) {
        let z = unit_rows(&raw);
        let a = tape_supcon(&z, &labels, tau);
        let b = supcon_reference(&z, &labels, tau);
        prop_assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{} vs {}", a, b);
    }

    #[test]
    fn supcon_is_rotation_invariant((raw, labels) in batch_strategy(), seed in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 8), 8)) {
        let z = unit_rows(&raw);
        let d = z[0].len();
        let q = orthogonal(&seed[..d].iter().map(|r| r[..d].to_vec()).collect::<Vec<_>>());
        let rotated: Vec<Vec<f64>> = z.iter().map(|r| (0..d).map(|i| (0..d).map(|k| q[i][k] * r[k]).sum()).collect()).collect();
        let (a, b) = (tape_supcon(&z, &labels, 0.1), tape_supcon(&rotated, &labels, 0.1));
        prop_assert!((a - b).abs() < 1e-5, "{} vs {}", a, b);
    }

    #[test]
    fn positive_affine_calibration_keeps_til_predictions(
        out in outputs_strategy(),
        params in prop::collection::vec((-2i8..3, -8i8..8), 3),
    ) {
        let n = out.num_tasks();
        let cal = CalibrationParams {
            sigma: params[..n].iter().map(|&(r, _)| 2f32.powi(i32::from(r))).collect(),
            mu: params[..n].iter().map(|&(_, m)| f32::from(m) / 4.0).collect(),
        };
        let mut calibrated = out.clone();
        apply_calibration(&mut calibrated, &cal).unwrap();
        for t in 0..n {
            prop_assert_eq!(predict_til(&out, t).unwrap(), predict_til(&calibrated, t).unwrap());
        }
        prop_assert_eq!(predict_cil(&calibrated, None).unwrap(), predict_cil(&out, Some(&cal)).unwrap());
    }

    #[test]
    fn cil_winner_lies_in_detected_task(out in outputs_strategy()) {
        let cil = predict_cil(&out, None).unwrap();
        let detected = detect_task(&out, OodScore::MaxLogit);
        for (c, t) in cil.iter().zip(&detected) {
            prop_assert_eq!(c / 2, *t);
        }
    }

    #[test]
    fn single_task_cil_equals_til(out in outputs_strategy()) {
        let one = TaskOutputs { rows: out.rows, per_task: vec![out.per_task[0].clone()], classes: vec![vec![0, 1]] };
        prop_assert_eq!(predict_cil(&one, None).unwrap(), predict_til(&one, 0).unwrap());
    }
}

#[test]
fn memory_census_after_five_tasks() {
    let cfg = common::synthetic_config(5, 1, 3);
    let tasks = clom::experiment::load_tasks(&cfg).unwrap();
    let mut mem = clom::data::MemoryBuffer::new();
    for t in &tasks {
        mem.update(t, 5, 3).unwrap();
    }
    assert_eq!(mem.len(), 50);
    assert!(mem.census().values().all(|&c| c == 5));
    let before = mem.clone();
    mem.update(&tasks[0], 0, 3).unwrap();
    assert_eq!(mem, before);
}
