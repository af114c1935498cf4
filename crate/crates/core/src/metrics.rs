//! Continual-learning metrics: accuracy, the per-task accuracy matrix,
//! forgetting, average incremental accuracy, AUC and task detection.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub fn average_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Empty("accuracy input"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Lower-triangular accuracy matrix: `get(j, k)` is the accuracy on task `j`
/// after learning task `k` (0-based, `j <= k`).
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self { rows: Vec::new() }
    }

    /// Builds a matrix from rows where `rows[k]` holds the accuracies on tasks
    /// `0..=k` after learning task `k`.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    /// Appends the evaluation after the next task.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::InvalidInput(format!(
                "row after task {} must have {} entries, got {}",
                self.rows.len() + 1,
                self.rows.len() + 1,
                row.len()
            )));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("accuracy {v} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Number of learned tasks.
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, task: usize, after: usize) -> Option<f64> {
        self.rows.get(after).and_then(|r| r.get(task)).copied()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Accuracy right after each task was learned (the diagonal).
    pub fn initial(&self) -> Vec<f64> {
        (0..self.len()).map(|j| self.rows[j][j]).collect()
    }

    /// Mean accuracy over tasks `0..=after` as evaluated after task `after`.
    pub fn mean_after(&self, after: usize) -> Option<f64> {
        self.rows.get(after).map(|r| r.iter().sum::<f64>() / r.len() as f64)
    }
}

impl Default for AccuracyMatrix {
    fn default() -> Self {
        Self::new()
    }
}

/// `F^t = 1/(t-1) Σ_{j<t} (A_j^init - A_j^t)` with `t` the 1-based number of
/// learned tasks considered.
pub fn forgetting_rate(a: &AccuracyMatrix, t: usize) -> Result<f64> {
    if t < 2 {
        return Err(Error::InvalidInput(format!("forgetting needs at least two tasks, got t = {t}")));
    }
    if t > a.len() {
        return Err(Error::InvalidInput(format!("t = {t} but only {} tasks recorded", a.len())));
    }
    let last = &a.rows[t - 1];
    let total: f64 = (0..t - 1).map(|j| a.rows[j][j] - last[j]).sum();
    Ok(total / (t - 1) as f64)
}

/// Mean of the all-seen-task accuracies measured after each task.
pub fn avg_incremental_accuracy(per_step: &[f64]) -> Result<f64> {
    if per_step.is_empty() {
        return Err(Error::Empty("incremental accuracies"));
    }
    Ok(per_step.iter().sum::<f64>() / per_step.len() as f64)
}

/// `P(in > out) + 0.5 P(in = out)` from the Mann-Whitney rank sum with
/// average ranks for ties. The rank sum is accumulated in half-units so the
/// computation is exact up to the final division.
pub fn auc(in_scores: &[f32], out_scores: &[f32]) -> Result<f64> {
    if in_scores.is_empty() || out_scores.is_empty() {
        return Err(Error::Empty("AUC score list"));
    }
    if in_scores.iter().chain(out_scores).any(|v| v.is_nan()) {
        return Err(Error::InvalidInput("AUC scores contain NaN".into()));
    }
    let mut all: Vec<(f32, bool)> = in_scores
        .iter()
        .map(|&v| (v, true))
        .chain(out_scores.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // twice the rank sum of the in-distribution scores
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the average (i + j + 2) / 2
        let n_in = all[i..=j].iter().filter(|e| e.1).count() as u128;
        twice_rank_sum += n_in * (i + j + 2) as u128;
        i = j + 1;
    }
    let (n, m) = (in_scores.len() as u128, out_scores.len() as u128);
    let twice_u = twice_rank_sum - n * (n + 1);
    Ok(twice_u as f64 / (2 * n * m) as f64)
}

pub fn task_detection_rate(detected: &[usize], truth: &[usize]) -> Result<f64> {
    average_accuracy(detected, truth)
}

/// One `(metric, task, value)` CSV row; `task` is 1-based or `all`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub task: Option<usize>,
    pub value: f64,
}

impl MetricRow {
    pub fn task(metric: &str, task_index: usize, value: f64) -> Self {
        Self { metric: metric.to_string(), task: Some(task_index + 1), value }
    }

    pub fn aggregate(metric: &str, value: f64) -> Self {
        Self { metric: metric.to_string(), task: None, value }
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("metric,task,value\n");
    for r in rows {
        let task = r.task.map_or_else(|| "all".to_string(), |t| t.to_string());
        let _ = writeln!(out, "{},{},{}", r.metric, task, r.value);
    }
    out
}

/// Lower-triangular matrix as CSV with columns `after_task,task,accuracy`.
pub fn matrix_csv(a: &AccuracyMatrix) -> String {
    let mut out = String::from("after_task,task,accuracy\n");
    for (k, row) in a.rows().iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", k + 1, j + 1, v);
        }
    }
    out
}
