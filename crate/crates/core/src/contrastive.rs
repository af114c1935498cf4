//! Stage 1: supervised contrastive training of the masked trunk and the task's
//! projection head on rotation-expanded views.

use rand::seq::SliceRandom;

use crate::augment::build_contrastive_batch;
use crate::autodiff::{Tape, Var};
use crate::config::ExperimentConfig;
use crate::data::{Samples, TaskDataset};
use crate::error::{Error, Result};
use crate::masknet::{
    anneal_s, bias_gate, clamp_embedding, compensate_embedding_grad, mask_regularizer_on_tape,
    trunk_on_tape, weight_gate,
};
use crate::model::{ModelState, NORM_EPS};
use crate::optim::{clip_grad_norm, scheduled_lr, ParamUpdate, Sgd};
use crate::rng::{derive_seed, rng_for, stream};
use crate::tensor::{Scalar, Tensor};

/// Per-epoch mean losses of one training stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageReport {
    pub losses: Vec<f64>,
}

impl StageReport {
    pub fn last_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Rows and labels of `samples` at `idx`.
pub fn gather(samples: &Samples, idx: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let mut xs = Vec::with_capacity(idx.len() * samples.dim);
    let mut ys = Vec::with_capacity(idx.len());
    for &i in idx {
        xs.extend_from_slice(samples.row(i));
        ys.push(samples.y[i]);
    }
    (xs, ys)
}

/// Shuffled mini-batches of `0..n` for one epoch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, path: &[u64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, path));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Unit-norm projection of trunk features, recorded on the tape.
pub fn project_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    model: &ModelState,
    task: usize,
    features: Var,
) -> Result<(Var, [Var; 4])> {
    let head = &model.tasks[task].projection;
    let w1 = tape.param(head.hidden.weight.cast());
    let b1 = tape.param(head.hidden.bias.cast());
    let w2 = tape.param(head.out.weight.cast());
    let b2 = tape.param(head.out.bias.cast());
    let h = tape.linear(features, w1, b1)?;
    let h = tape.relu(h);
    let z = tape.linear(h, w2, b2)?;
    Ok((tape.l2_normalize(z, T::of(NORM_EPS as f64)), [w1, b1, w2, b2]))
}

/// Trains the trunk (through task `task`'s attention) and the projection head
/// with the supervised contrastive loss plus the capacity regularizer.
/// Trunk gradients are gated by the accumulated mask of earlier tasks.
pub fn train_task_representation(
    model: &mut ModelState,
    task: usize,
    data: &TaskDataset,
    cfg: &ExperimentConfig,
) -> Result<StageReport> {
    model.check_task(task)?;
    if data.train.is_empty() {
        return Err(Error::Empty("task training set"));
    }
    let tc = &cfg.train;
    let s_max = cfg.masknet.s_max;
    let lambda = cfg.masknet.lambda_for(task);
    let tau = tc.temperature as f32;
    let mut sgd = Sgd::new(tc.momentum as f32);
    let mut report = StageReport::default();

    let depth = model.layers.len();
    let w_gates: Vec<Vec<f32>> = (0..depth)
        .map(|l| {
            let prev = (l > 0).then(|| model.accumulated.layers[l - 1].as_slice());
            weight_gate(&model.accumulated.layers[l], prev, model.layers[l].linear.input_dim())
        })
        .collect();
    let b_gates: Vec<Vec<f32>> = model.accumulated.layers.iter().map(|a| bias_gate(a)).collect();

    for epoch in 0..tc.epochs {
        let lr = scheduled_lr(epoch, tc.base_lr, tc.warmup_epochs, tc.epochs, tc.peak_lr)? as f32;
        let batches = epoch_batches(
            data.train.len(),
            tc.batch_size,
            cfg.seed,
            &[stream::CONTRASTIVE, stream::SHUFFLE, task as u64, epoch as u64],
        );
        let mut total = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let s = if cfg.masknet.anneal { anneal_s(b, batches.len(), s_max) } else { s_max };
            let (xs, ys) = gather(&data.train, idx);
            let batch_seed = derive_seed(cfg.seed, &[stream::CONTRASTIVE, task as u64, epoch as u64, b as u64]);
            let batch = build_contrastive_batch(&xs, &ys, data.kind, &cfg.augment, batch_seed)?;

            let mut tape = Tape::<f32>::new();
            let x = tape.constant(Tensor::matrix(batch.len(), batch.dim, batch.samples)?);
            let trunk = trunk_on_tape(&mut tape, model, task, s, x)?;
            let (z, head) = project_on_tape(&mut tape, model, task, trunk.features)?;
            let mut loss = tape.supcon(z, &batch.labels, tau)?;
            if let Some(r) = mask_regularizer_on_tape(&mut tape, &trunk.attention, &model.accumulated, lambda)? {
                loss = tape.add(loss, r)?;
            }
            let value = tape.scalar_value(loss);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            total += value as f64;
            let mut grads = tape.backward(loss)?;
            let mut take = |v: Var| grads.take(v).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]);

            let mut trunk_grads = Vec::with_capacity(depth);
            for l in 0..depth {
                let gw = take(trunk.weights[l]);
                let gb = take(trunk.biases[l]);
                let mut ge = take(trunk.embeddings[l]);
                compensate_embedding_grad(&mut ge, model.layers[l].embeddings[task].data(), s, s_max);
                trunk_grads.push((gw, gb, ge));
            }
            let mut head_grads: Vec<Vec<f32>> = head.iter().map(|&v| take(v)).collect();
            let mut all: Vec<&mut [f32]> = trunk_grads
                .iter_mut()
                .flat_map(|(w, b, e)| [&mut w[..], &mut b[..], &mut e[..]])
                .chain(head_grads.iter_mut().map(|g| &mut g[..]))
                .collect();
            let norm = clip_grad_norm(&mut all, tc.max_grad_norm as f32);

            let names: Vec<[String; 3]> = (0..depth)
                .map(|l| [format!("layer{l}.weight"), format!("layer{l}.bias"), format!("layer{l}.embedding")])
                .collect();
            let mut updates = Vec::with_capacity(3 * depth + 4);
            let proj = &mut model.tasks[task].projection;
            let [hw, hb, ow, ob] = [
                &mut proj.hidden.weight,
                &mut proj.hidden.bias,
                &mut proj.out.weight,
                &mut proj.out.bias,
            ];
            for (((layer, (gw, gb, ge)), name), (wg, bg)) in model
                .layers
                .iter_mut()
                .zip(&trunk_grads)
                .zip(&names)
                .zip(w_gates.iter().zip(&b_gates))
            {
                updates.push(ParamUpdate { name: &name[0], param: &mut layer.linear.weight, grad: gw, gate: Some(wg) });
                updates.push(ParamUpdate { name: &name[1], param: &mut layer.linear.bias, grad: gb, gate: Some(bg) });
                updates.push(ParamUpdate { name: &name[2], param: &mut layer.embeddings[task], grad: ge, gate: None });
            }
            for ((param, grad), name) in [hw, hb, ow, ob]
                .into_iter()
                .zip(&head_grads)
                .zip(["proj.hidden.weight", "proj.hidden.bias", "proj.out.weight", "proj.out.bias"])
            {
                updates.push(ParamUpdate { name, param, grad, gate: None });
            }
            if log::log_enabled!(log::Level::Trace) {
                let norms: Vec<String> = updates
                    .iter()
                    .map(|u| format!("{}={:.3e}", u.name, u.grad.iter().map(|g| g * g).sum::<f32>().sqrt()))
                    .collect();
                log::trace!("epoch {epoch} batch {b} s {s:.3} norm {norm:.3e}: {}", norms.join(" "));
            }
            sgd.step(&mut updates, lr)?;
            for layer in &mut model.layers {
                clamp_embedding(layer.embeddings[task].data_mut());
            }
        }
        let mean = total / batches.len() as f64;
        log::debug!("task {} contrastive epoch {epoch}: loss {mean:.4} lr {lr:.4}", task + 1);
        report.losses.push(mean);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::AugmentConfig;
    use crate::data::make_synthetic_tasks;
    use crate::model::Architecture;

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.train.epochs = 3;
        cfg.train.warmup_epochs = 1;
        cfg.train.batch_size = 16;
        cfg.augment = AugmentConfig { noise_sigma: 0.02, ..AugmentConfig::default() };
        cfg
    }

    fn tiny_model(n: usize) -> ModelState {
        let arch = Architecture {
            kind: crate::data::InputKind::Vector { dim: 6 },
            hidden_width: 16,
            depth: 2,
            proj_dim: 8,
            num_rotations: 4,
        };
        ModelState::new(arch, n as u64).unwrap()
    }

    #[test]
    fn batches_cover_every_index_once() {
        let b = epoch_batches(10, 4, 0, &[1]);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn training_is_deterministic_and_finite() {
        let tasks = make_synthetic_tasks(1, 2, 6, 24, 5).unwrap();
        let cfg = tiny_cfg();
        let run = || {
            let mut m = tiny_model(1);
            m.add_task(&tasks[0].classes, 2).unwrap();
            let rep = train_task_representation(&mut m, 0, &tasks[0], &cfg).unwrap();
            (m, rep)
        };
        let (m1, r1) = run();
        let (m2, r2) = run();
        assert_eq!(r1, r2);
        assert_eq!(m1, m2);
        assert!(r1.losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn fully_claimed_units_do_not_move() {
        let tasks = make_synthetic_tasks(2, 2, 6, 24, 5).unwrap();
        let cfg = tiny_cfg();
        let mut m = tiny_model(2);
        m.add_task(&tasks[0].classes, 0).unwrap();
        m.add_task(&tasks[1].classes, 0).unwrap();
        m.accumulated.layers[0] = (0..16).map(|i| if i < 8 { 1.0 } else { 0.0 }).collect();
        m.accumulated.layers[1] = vec![1.0; 16];
        let before = m.clone();
        train_task_representation(&mut m, 1, &tasks[1], &cfg).unwrap();
        // layer 1: all units are claimed but only inputs 0..8 are, so only
        // those columns (and every bias) are frozen
        let (w1, w1b) = (m.layers[1].linear.weight.data(), before.layers[1].linear.weight.data());
        for i in 0..16 {
            assert_eq!(&w1[i * 16..i * 16 + 8], &w1b[i * 16..i * 16 + 8]);
        }
        assert_ne!(w1, w1b);
        assert_eq!(m.layers[1].linear.bias, before.layers[1].linear.bias);
        let w0 = m.layers[0].linear.weight.data();
        let w0b = before.layers[0].linear.weight.data();
        assert_eq!(&w0[..8 * 6], &w0b[..8 * 6]);
        assert_ne!(&w0[8 * 6..], &w0b[8 * 6..]);
        assert_eq!(m.layers[0].embeddings[0], before.layers[0].embeddings[0]);
    }
}
