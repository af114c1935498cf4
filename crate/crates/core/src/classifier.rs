//! Stage 2: fine-tuning the task's rotation classifier on frozen, masked trunk
//! features.

use crate::augment::build_batch;
use crate::autodiff::Tape;
use crate::config::ExperimentConfig;
use crate::contrastive::{epoch_batches, gather, StageReport};
use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::optim::{step_decay_lr, ParamUpdate, Sgd};
use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor;

/// Logits over `num_classes × num_rotations` rotation classes for a batch.
pub fn rotation_logits(model: &ModelState, task: usize, x: &[f32], rows: usize, s: f32) -> Result<Vec<f32>> {
    let h = model.features(x, rows, task, s)?;
    Ok(model.tasks[task].classifier.linear.forward(&h, rows))
}

/// Trains only the classifier of `task` with cross-entropy over rotation
/// classes. The trunk and projection heads are left bit-identical.
pub fn finetune_classifier(
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
    let s = cfg.masknet.s_max;
    let masks = model.task_masks(task, s)?;
    let mut sgd = Sgd::new(tc.momentum as f32);
    let mut report = StageReport::default();
    let n_out = model.tasks[task].classifier.num_outputs();

    for epoch in 0..tc.finetune_epochs {
        let lr = step_decay_lr(epoch, tc.finetune_epochs, tc.finetune_lr) as f32;
        let batches = epoch_batches(
            data.train.len(),
            tc.finetune_batch_size,
            cfg.seed,
            &[stream::FINETUNE, stream::SHUFFLE, task as u64, epoch as u64],
        );
        let mut total = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let (xs, ys) = gather(&data.train, idx);
            let seed = derive_seed(cfg.seed, &[stream::FINETUNE, task as u64, epoch as u64, b as u64]);
            let batch = build_batch(&xs, &ys, data.kind, &cfg.augment, cfg.augment.finetune_views, seed)?;
            let rows = batch.len();
            let feats = model.forward_with_masks(&batch.samples, rows, &masks).pop().unwrap_or_default();

            let head = &mut model.tasks[task].classifier.linear;
            let mut tape = Tape::<f32>::new();
            let h = tape.constant(Tensor::matrix(rows, feats.len() / rows, feats)?);
            let w = tape.param(head.weight.clone());
            let bias = tape.param(head.bias.clone());
            let logits = tape.linear(h, w, bias)?;
            debug_assert_eq!(tape.value(logits).shape(), &[rows, n_out]);
            let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
            let value = tape.scalar_value(loss);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            total += value as f64;
            let mut grads = tape.backward(loss)?;
            let gw = grads.take(w).expect("classifier weight is a parameter");
            let gb = grads.take(bias).expect("classifier bias is a parameter");
            sgd.step(
                &mut [
                    ParamUpdate { name: "classifier.weight", param: &mut head.weight, grad: &gw, gate: None },
                    ParamUpdate { name: "classifier.bias", param: &mut head.bias, grad: &gb, gate: None },
                ],
                lr,
            )?;
        }
        let mean = total / batches.len() as f64;
        log::debug!("task {} finetune epoch {epoch}: loss {mean:.4} lr {lr:.5}", task + 1);
        report.losses.push(mean);
    }
    Ok(report)
}
