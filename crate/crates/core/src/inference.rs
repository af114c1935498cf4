//! Rotation-ensemble scoring, task-incremental and class-incremental
//! prediction, and task inference from out-of-distribution scores.

use crate::augment::{rotate, ROTATIONS};
use crate::calibration::CalibrationParams;
use crate::config::OodScore;
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::tensor::{argmax, log_sum_exp};

/// Ensemble logits of one task: for class `j`, the mean over rotations `r` of
/// the rotation-class logit `j * R + r` evaluated on the input rotated by `r`.
/// Returns `rows × num_classes` values.
pub fn ensemble_logits(model: &ModelState, task: usize, x: &[f32], rows: usize, s: f32) -> Result<Vec<f32>> {
    model.check_task(task)?;
    let kind = model.arch.kind;
    let dim = kind.dim();
    if x.len() != rows * dim {
        return Err(Error::shape("ensemble_logits", format!("{} values for {rows} x {dim}", x.len())));
    }
    let head = &model.tasks[task].classifier;
    let (c, r_count) = (head.num_classes, head.num_rotations);
    let masks = model.task_masks(task, s)?;
    let mut out = vec![0.0f32; rows * c];
    for (r, &deg) in ROTATIONS.iter().take(r_count).enumerate() {
        let mut rotated = Vec::with_capacity(x.len());
        for row in x.chunks(dim) {
            rotated.extend(rotate(row, kind, deg)?);
        }
        let h = model.forward_with_masks(&rotated, rows, &masks).pop().unwrap_or_default();
        let logits = head.linear.forward(&h, rows);
        for (o, l) in out.chunks_mut(c).zip(logits.chunks(c * r_count)) {
            for (j, v) in o.iter_mut().enumerate() {
                *v += l[j * r_count + r];
            }
        }
    }
    let inv = 1.0 / r_count as f32;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(out)
}

/// Ensemble logits of every learned task for a set of inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskOutputs {
    pub rows: usize,
    /// `per_task[t]` is `rows × |classes of t|`.
    pub per_task: Vec<Vec<f32>>,
    /// Global class ids of each task, in local order.
    pub classes: Vec<Vec<usize>>,
}

impl TaskOutputs {
    pub fn num_tasks(&self) -> usize {
        self.per_task.len()
    }

    pub fn row(&self, task: usize, i: usize) -> &[f32] {
        let c = self.classes[task].len();
        &self.per_task[task][i * c..(i + 1) * c]
    }
}

/// Evaluates every task's ensemble on `x`, `batch_size` rows at a time.
pub fn task_outputs(model: &ModelState, x: &[f32], rows: usize, s: f32, batch_size: usize) -> Result<TaskOutputs> {
    let dim = model.arch.kind.dim();
    let mut per_task = vec![Vec::new(); model.num_tasks()];
    for start in (0..rows).step_by(batch_size.max(1)) {
        let n = batch_size.min(rows - start);
        let chunk = &x[start * dim..(start + n) * dim];
        for (t, out) in per_task.iter_mut().enumerate() {
            out.extend(ensemble_logits(model, t, chunk, n, s)?);
        }
    }
    let classes = model.tasks.iter().map(|t| t.classes.clone()).collect();
    Ok(TaskOutputs { rows, per_task, classes })
}

/// Task-incremental prediction: local class with the highest ensemble logit.
pub fn predict_til(outputs: &TaskOutputs, task: usize) -> Result<Vec<usize>> {
    if task >= outputs.num_tasks() {
        return Err(Error::UnknownTask(task + 1));
    }
    Ok((0..outputs.rows).map(|i| argmax(outputs.row(task, i)).unwrap_or(0)).collect())
}

/// Class-incremental prediction: global class with the highest (optionally
/// calibrated) logit over the concatenation of all task heads.
pub fn predict_cil(outputs: &TaskOutputs, calibration: Option<&CalibrationParams>) -> Result<Vec<usize>> {
    if outputs.num_tasks() == 0 {
        return Err(Error::Empty("model has no tasks"));
    }
    if let Some(c) = calibration {
        c.check(outputs.num_tasks())?;
    }
    let mut preds = Vec::with_capacity(outputs.rows);
    for i in 0..outputs.rows {
        let mut best: Option<(f32, usize)> = None;
        for t in 0..outputs.num_tasks() {
            for (j, &v) in outputs.row(t, i).iter().enumerate() {
                let v = calibration.map_or(v, |c| c.apply(t, v));
                if best.is_none_or(|(b, _)| v > b) {
                    best = Some((v, outputs.classes[t][j]));
                }
            }
        }
        preds.push(best.map_or(0, |(_, c)| c));
    }
    Ok(preds)
}

/// Out-of-distribution score of one ensemble-logit row; larger means more
/// in-distribution.
pub fn ood_score(logits: &[f32], kind: OodScore) -> f32 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    match kind {
        OodScore::MaxLogit => max,
        OodScore::MaxSoftmax => (max - log_sum_exp(logits)).exp(),
    }
}

/// Scores of one task's detector on every row.
pub fn task_scores(outputs: &TaskOutputs, task: usize, kind: OodScore) -> Vec<f32> {
    (0..outputs.rows).map(|i| ood_score(outputs.row(task, i), kind)).collect()
}

/// Inferred task per row: the task whose detector scores highest.
pub fn detect_task(outputs: &TaskOutputs, kind: OodScore) -> Vec<usize> {
    (0..outputs.rows)
        .map(|i| {
            let scores: Vec<f32> = (0..outputs.num_tasks()).map(|t| ood_score(outputs.row(t, i), kind)).collect();
            argmax(&scores).unwrap_or(0)
        })
        .collect()
}
