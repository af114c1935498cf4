//! Hard attention over trunk units: per-task gates, the accumulated mask of
//! finished tasks, gradient gating and the capacity regularizer.

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::tensor::{sigmoid, Scalar, Tensor};

/// Largest `|s e|` passed to `cosh` in the embedding compensation.
pub const COSH_CLAMP: f32 = 50.0;
/// Embeddings are clamped to `[-EMBEDDING_CLAMP, EMBEDDING_CLAMP]` after each step.
pub const EMBEDDING_CLAMP: f32 = 6.0;

/// `sigmoid(s * e)` element-wise.
pub fn attention(e: &[f32], s: f32) -> Vec<f32> {
    e.iter().map(|&v| sigmoid(s * v)).collect()
}

/// Scale for batch `batch` of `num_batches` within an epoch, linear from
/// `1/s_max` up to `s_max`.
pub fn anneal_s(batch: usize, num_batches: usize, s_max: f32) -> f32 {
    if num_batches <= 1 {
        return s_max;
    }
    let lo = 1.0 / s_max;
    lo + (s_max - lo) * batch as f32 / (num_batches - 1) as f32
}

/// Element-wise maximum of the attention of every finished task, per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AccumulatedMask {
    pub layers: Vec<Vec<f32>>,
}

impl AccumulatedMask {
    pub fn zeros(units: &[usize]) -> Self {
        Self { layers: units.iter().map(|&n| vec![0.0; n]).collect() }
    }

    /// Folds a finished task's attention into the mask.
    pub fn accumulate(&mut self, attention: &[Vec<f32>]) -> Result<()> {
        if attention.len() != self.layers.len()
            || attention.iter().zip(&self.layers).any(|(a, l)| a.len() != l.len())
        {
            return Err(Error::shape("accumulate_mask", "attention does not match trunk layout"));
        }
        for (acc, a) in self.layers.iter_mut().zip(attention) {
            for (m, &v) in acc.iter_mut().zip(a) {
                *m = m.max(v);
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(|l| l.iter().all(|&v| v == 0.0))
    }
}

/// Functional form of [`AccumulatedMask::accumulate`].
pub fn accumulate_mask(acc: &AccumulatedMask, attention: &[Vec<f32>]) -> Result<AccumulatedMask> {
    let mut out = acc.clone();
    out.accumulate(attention)?;
    Ok(out)
}

/// Gate for an `out × in` weight matrix: `1 - min(acc_out[i], acc_in[j])`.
///
/// `acc_in = None` marks the input layer; raw inputs count as fully attended,
/// so a unit claimed by an earlier task keeps all of its incoming weights.
pub fn weight_gate(acc_out: &[f32], acc_in: Option<&[f32]>, input_dim: usize) -> Vec<f32> {
    let mut gate = Vec::with_capacity(acc_out.len() * input_dim);
    for &ai in acc_out {
        match acc_in {
            Some(prev) => gate.extend(prev.iter().map(|&aj| 1.0 - ai.min(aj))),
            None => gate.extend(std::iter::repeat_n(1.0 - ai, input_dim)),
        }
    }
    gate
}

pub fn bias_gate(acc_out: &[f32]) -> Vec<f32> {
    acc_out.iter().map(|&a| 1.0 - a).collect()
}

/// Multiplies a weight gradient by its gate.
pub fn gate_gradients(grad: &[f32], acc_out: &[f32], acc_in: Option<&[f32]>) -> Result<Vec<f32>> {
    let input_dim = if acc_out.is_empty() { 0 } else { grad.len() / acc_out.len() };
    if input_dim * acc_out.len() != grad.len() || acc_in.is_some_and(|p| p.len() != input_dim) {
        return Err(Error::shape("gate_gradients", format!("gradient of {} for {} units", grad.len(), acc_out.len())));
    }
    let gate = weight_gate(acc_out, acc_in, input_dim);
    Ok(grad.iter().zip(gate).map(|(g, k)| g * k).collect())
}

/// Rescales an embedding gradient so that its magnitude does not depend on
/// the annealed scale, then clamps `cosh` to stay finite.
pub fn compensate_embedding_grad(grad: &mut [f32], e: &[f32], s: f32, s_max: f32) {
    for (g, &v) in grad.iter_mut().zip(e) {
        let num = (s * v).clamp(-COSH_CLAMP, COSH_CLAMP).cosh() + 1.0;
        let den = v.cosh() + 1.0;
        *g *= s_max / s * num / den;
    }
}

pub fn clamp_embedding(e: &mut [f32]) {
    e.iter_mut().for_each(|v| *v = v.clamp(-EMBEDDING_CLAMP, EMBEDDING_CLAMP));
}

/// Normalizer of the capacity regularizer; zero means every unit is taken.
fn free_capacity(acc: &AccumulatedMask) -> f64 {
    acc.layers.iter().flatten().map(|&a| 1.0 - a as f64).sum()
}

/// `lambda * Σ a (1 - acc) / Σ (1 - acc)` over all trunk units.
pub fn mask_regularizer(attention: &[Vec<f32>], acc: &AccumulatedMask, lambda: f64) -> f64 {
    let den = free_capacity(acc);
    if den <= 0.0 {
        log::warn!("no free trunk capacity left; capacity regularizer disabled");
        return 0.0;
    }
    let num: f64 = attention
        .iter()
        .zip(&acc.layers)
        .flat_map(|(a, m)| a.iter().zip(m))
        .map(|(&a, &m)| a as f64 * (1.0 - m as f64))
        .sum();
    lambda * num / den
}

/// Tape version of [`mask_regularizer`]. Returns `None` when the trunk has no
/// free capacity.
pub fn mask_regularizer_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    attention: &[Var],
    acc: &AccumulatedMask,
    lambda: f64,
) -> Result<Option<Var>> {
    let den = free_capacity(acc);
    if den <= 0.0 {
        log::warn!("no free trunk capacity left; capacity regularizer disabled");
        return Ok(None);
    }
    let mut total: Option<Var> = None;
    for (&a, m) in attention.iter().zip(&acc.layers) {
        let free = tape.constant(Tensor::vector(m.iter().map(|&v| T::of(1.0 - v as f64)).collect()));
        let d = tape.dot(a, free)?;
        total = Some(match total {
            Some(t) => tape.add(t, d)?,
            None => d,
        });
    }
    Ok(total.map(|t| tape.affine(t, T::of(lambda / den), T::zero())))
}

/// Tape handles of the trunk for one forward pass.
#[derive(Clone, Debug)]
pub struct TrunkVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    pub embeddings: Vec<Var>,
    /// `sigmoid(s e)` per layer.
    pub attention: Vec<Var>,
    /// Output of the last masked layer.
    pub features: Var,
}

/// Records the masked trunk forward of task `task` at scale `s` on `x`
/// (a `rows × input_dim` tape value).
pub fn trunk_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    model: &ModelState,
    task: usize,
    s: T,
    x: Var,
) -> Result<TrunkVars> {
    model.check_task(task)?;
    let mut vars = TrunkVars {
        weights: Vec::new(),
        biases: Vec::new(),
        embeddings: Vec::new(),
        attention: Vec::new(),
        features: x,
    };
    let mut h = x;
    for layer in &model.layers {
        let w = tape.param(layer.linear.weight.cast());
        let b = tape.param(layer.linear.bias.cast());
        let e = tape.param(layer.embeddings[task].cast());
        let se = tape.affine(e, s, T::zero());
        let a = tape.sigmoid(se);
        let y = tape.linear(h, w, b)?;
        let r = tape.relu(y);
        h = tape.mul_row(r, a)?;
        vars.weights.push(w);
        vars.biases.push(b);
        vars.embeddings.push(e);
        vars.attention.push(a);
    }
    vars.features = h;
    Ok(vars)
}

/// Share of each layer's units claimed by finished tasks.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCapacity {
    pub layer: usize,
    pub units: usize,
    /// Units with accumulated attention at least 0.5.
    pub used: usize,
    pub mean_attention: f64,
}

pub fn capacity_report(acc: &AccumulatedMask) -> Vec<LayerCapacity> {
    acc.layers
        .iter()
        .enumerate()
        .map(|(layer, a)| LayerCapacity {
            layer,
            units: a.len(),
            used: a.iter().filter(|&&v| v >= 0.5).count(),
            mean_attention: if a.is_empty() { 0.0 } else { a.iter().map(|&v| v as f64).sum::<f64>() / a.len() as f64 },
        })
        .collect()
}
