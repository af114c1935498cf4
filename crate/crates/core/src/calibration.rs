//! Per-task affine calibration `σ_t f + μ_t` of ensemble logits, fitted on
//! the memory buffer by minimizing cross-entropy over all seen classes.

use rand::seq::SliceRandom;

use crate::config::CalibConfig;
use crate::data::MemoryBuffer;
use crate::error::{Error, Result};
use crate::inference::{task_outputs, TaskOutputs};
use crate::model::ModelState;
use crate::rng::{rng_for, stream};

/// `σ_t` and `μ_t` for every task; `σ_t = exp(ρ_t)` during fitting so it stays
/// positive.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationParams {
    pub sigma: Vec<f32>,
    pub mu: Vec<f32>,
}

impl CalibrationParams {
    pub fn identity(n_tasks: usize) -> Self {
        Self { sigma: vec![1.0; n_tasks], mu: vec![0.0; n_tasks] }
    }

    pub fn num_tasks(&self) -> usize {
        self.sigma.len()
    }

    pub fn apply(&self, task: usize, logit: f32) -> f32 {
        self.sigma[task] * logit + self.mu[task]
    }

    pub(crate) fn check(&self, n_tasks: usize) -> Result<()> {
        if self.sigma.len() != n_tasks || self.mu.len() != n_tasks {
            return Err(Error::InvalidInput(format!(
                "calibration covers {} tasks, model has {n_tasks}",
                self.sigma.len()
            )));
        }
        Ok(())
    }
}

/// Applies the calibration to every task's logits in place.
pub fn apply_calibration(outputs: &mut TaskOutputs, params: &CalibrationParams) -> Result<()> {
    params.check(outputs.num_tasks())?;
    for (t, logits) in outputs.per_task.iter_mut().enumerate() {
        logits.iter_mut().for_each(|v| *v = params.apply(t, *v));
    }
    Ok(())
}

/// Mean cross-entropy over `rows` and its gradient w.r.t. `(ρ, μ)`.
pub fn calibration_loss_and_grad(
    outputs: &TaskOutputs,
    labels: &[usize],
    rows: &[usize],
    rho: &[f64],
    mu: &[f64],
) -> (f64, Vec<f64>, Vec<f64>) {
    let n_tasks = outputs.num_tasks();
    let mut g_rho = vec![0.0; n_tasks];
    let mut g_mu = vec![0.0; n_tasks];
    let mut loss = 0.0;
    let sigma: Vec<f64> = rho.iter().map(|r| r.exp()).collect();
    let mut z = Vec::new();
    for &i in rows {
        z.clear();
        for t in 0..n_tasks {
            z.extend(outputs.row(t, i).iter().map(|&f| sigma[t] * f as f64 + mu[t]));
        }
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let mut k = 0;
        for t in 0..n_tasks {
            for (j, &f) in outputs.row(t, i).iter().enumerate() {
                let target = if outputs.classes[t][j] == labels[i] { 1.0 } else { 0.0 };
                if target == 1.0 {
                    loss += lse - z[k];
                }
                let d = (z[k] - lse).exp() - target;
                g_mu[t] += d;
                g_rho[t] += d * sigma[t] * f as f64;
                k += 1;
            }
        }
    }
    let inv = 1.0 / rows.len().max(1) as f64;
    g_rho.iter_mut().chain(g_mu.iter_mut()).for_each(|g| *g *= inv);
    (loss * inv, g_rho, g_mu)
}

/// Gradient-descent fit of the calibration on precomputed ensemble outputs
/// with global class `labels`. Mini-batches of `cfg.batch_size` are drawn by
/// reshuffling; smaller sets use full-batch steps.
pub fn fit_calibration_from_outputs(
    outputs: &TaskOutputs,
    labels: &[usize],
    cfg: &CalibConfig,
    seed: u64,
) -> Result<CalibrationParams> {
    let n_tasks = outputs.num_tasks();
    if labels.len() != outputs.rows {
        return Err(Error::shape("fit_calibration", format!("{} labels for {} rows", labels.len(), outputs.rows)));
    }
    if outputs.rows == 0 {
        return Err(Error::Empty("calibration memory"));
    }
    let mut rho = vec![0.0f64; n_tasks];
    let mut mu = vec![0.0f64; n_tasks];
    let mut rng = rng_for(seed, &[stream::CALIBRATION, n_tasks as u64]);
    let mut order: Vec<usize> = (0..outputs.rows).collect();
    let bs = cfg.batch_size.min(outputs.rows);
    let mut cursor = order.len();
    for it in 0..cfg.iterations {
        if cursor + bs > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let rows = &order[cursor..cursor + bs];
        cursor += bs;
        let (loss, g_rho, g_mu) = calibration_loss_and_grad(outputs, labels, rows, &rho, &mu);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: 0, batch: it });
        }
        for t in 0..n_tasks {
            rho[t] -= cfg.lr * g_rho[t];
            mu[t] -= cfg.lr * g_mu[t];
        }
    }
    Ok(CalibrationParams {
        sigma: rho.iter().map(|r| r.exp() as f32).collect(),
        mu: mu.iter().map(|&m| m as f32).collect(),
    })
}

/// Ensemble outputs and global labels of every memory sample.
pub fn memory_outputs(model: &ModelState, memory: &MemoryBuffer, s: f32, batch: usize) -> Result<(TaskOutputs, Vec<usize>)> {
    let mut xs = Vec::with_capacity(memory.len() * memory.dim());
    let mut labels = Vec::with_capacity(memory.len());
    for (&(_, _), class) in memory.entries() {
        xs.extend_from_slice(&class.samples);
        labels.extend(std::iter::repeat_n(class.global_class, class.samples.len() / memory.dim().max(1)));
    }
    let out = task_outputs(model, &xs, labels.len(), s, batch)?;
    Ok((out, labels))
}

/// Fits the calibration of `model` on `memory`. An empty memory yields the
/// identity calibration.
pub fn fit_calibration(
    model: &ModelState,
    memory: &MemoryBuffer,
    cfg: &CalibConfig,
    s: f32,
    seed: u64,
) -> Result<CalibrationParams> {
    if memory.is_empty() {
        log::warn!("calibration memory is empty; using identity calibration");
        return Ok(CalibrationParams::identity(model.num_tasks()));
    }
    let (outputs, labels) = memory_outputs(model, memory, s, 512)?;
    fit_calibration_from_outputs(&outputs, &labels, cfg, seed)
}
