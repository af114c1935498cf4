//! End-to-end pipeline: sequential task training, evaluation after every
//! task, calibration, checkpoints and the ablation sweeps.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::calibration::{fit_calibration, CalibrationParams};
use crate::checkpoint;
use crate::classifier::finetune_classifier;
use crate::config::{DataSource, ExperimentConfig, OodScore};
use crate::contrastive::train_task_representation;
use crate::data::{
    attach_test_split, generate_synthetic, load_mnist_dir, make_task_sequence, LabeledData, MemoryBuffer,
    TaskDataset,
};
use crate::error::{Error, Result};
use crate::inference::{detect_task, predict_cil, predict_til, task_outputs, task_scores, TaskOutputs};
use crate::masknet::capacity_report;
use crate::metrics::{
    auc, average_accuracy, avg_incremental_accuracy, forgetting_rate, matrix_csv, metrics_csv,
    task_detection_rate, AccuracyMatrix, MetricRow,
};
use crate::model::{Architecture, ModelState};

/// Everything needed to continue or evaluate an experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentState {
    pub config: ExperimentConfig,
    pub model: ModelState,
    pub memory: MemoryBuffer,
    pub calibration: Option<CalibrationParams>,
    /// Task-incremental accuracy matrix.
    pub til: AccuracyMatrix,
    /// Class-incremental accuracy without calibration.
    pub cil: AccuracyMatrix,
    /// Class-incremental accuracy with the calibration fitted after each task.
    pub cil_calibrated: AccuracyMatrix,
    /// Index of the next task to learn.
    pub next_task: usize,
}

impl ExperimentState {
    pub fn new(config: ExperimentConfig, kind: crate::data::InputKind) -> Result<Self> {
        config.validate()?;
        let arch = Architecture {
            kind,
            hidden_width: config.model.hidden_width,
            depth: config.model.depth,
            proj_dim: config.model.proj_dim,
            num_rotations: config.augment.num_rotations(),
        };
        let model = ModelState::new(arch, config.seed)?;
        Ok(Self {
            config,
            model,
            memory: MemoryBuffer::new(),
            calibration: None,
            til: AccuracyMatrix::new(),
            cil: AccuracyMatrix::new(),
            cil_calibrated: AccuracyMatrix::new(),
            next_task: 0,
        })
    }
}

/// Loads (or generates) the task sequence described by the configuration.
pub fn load_tasks(cfg: &ExperimentConfig) -> Result<Vec<TaskDataset>> {
    let d = &cfg.data;
    match d.source {
        DataSource::Synthetic => generate_synthetic(&d.synthetic_spec(), cfg.seed),
        DataSource::Mnist => {
            let (train, test) = load_mnist_dir(&d.mnist_dir)?;
            let train = match d.max_train_per_class {
                Some(cap) => cap_per_class(&train, cap),
                None => train,
            };
            let mut tasks = make_task_sequence(&train, d.classes_per_task, d.val_fraction, cfg.seed)?;
            if tasks.len() < d.n_tasks {
                return Err(Error::Data(format!("{} tasks requested, data has {}", d.n_tasks, tasks.len())));
            }
            tasks.truncate(d.n_tasks);
            let owned: Vec<usize> = tasks.iter().flat_map(|t| t.classes.clone()).collect();
            let mut test = test;
            test.samples = keep_classes(&test.samples, &owned);
            attach_test_split(&mut tasks, &test)?;
            Ok(tasks)
        }
    }
}

fn keep_classes(s: &crate::data::Samples, classes: &[usize]) -> crate::data::Samples {
    let idx: Vec<usize> = (0..s.len()).filter(|&i| classes.contains(&s.y[i])).collect();
    s.subset(&idx)
}

fn cap_per_class(data: &LabeledData, cap: usize) -> LabeledData {
    let mut seen = std::collections::BTreeMap::<usize, usize>::new();
    let idx: Vec<usize> = (0..data.samples.len())
        .filter(|&i| {
            let n = seen.entry(data.samples.y[i]).or_default();
            *n += 1;
            *n <= cap
        })
        .collect();
    LabeledData { kind: data.kind, samples: data.samples.subset(&idx) }
}

/// Results of evaluating every learned task.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub til: Vec<f64>,
    pub cil: Vec<f64>,
    pub cil_calibrated: Option<Vec<f64>>,
    pub til_overall: f64,
    pub cil_overall: f64,
    pub cil_calibrated_overall: Option<f64>,
    /// Per-task AUC of each head against the other tasks' test data; empty
    /// until two tasks are learned.
    pub auc_max_logit: Vec<f64>,
    pub auc_max_softmax: Vec<f64>,
    pub task_detection: f64,
}

impl Evaluation {
    pub fn mean_auc(&self, score: OodScore) -> Option<f64> {
        let v = match score {
            OodScore::MaxLogit => &self.auc_max_logit,
            OodScore::MaxSoftmax => &self.auc_max_softmax,
        };
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn rows(&self) -> Vec<MetricRow> {
        let mut rows = Vec::new();
        let per_task = |rows: &mut Vec<MetricRow>, name: &str, v: &[f64]| {
            rows.extend(v.iter().enumerate().map(|(t, &x)| MetricRow::task(name, t, x)));
        };
        per_task(&mut rows, "til_accuracy", &self.til);
        rows.push(MetricRow::aggregate("til_accuracy", self.til_overall));
        per_task(&mut rows, "cil_accuracy", &self.cil);
        rows.push(MetricRow::aggregate("cil_accuracy", self.cil_overall));
        if let (Some(v), Some(o)) = (&self.cil_calibrated, self.cil_calibrated_overall) {
            per_task(&mut rows, "cil_accuracy_calibrated", v);
            rows.push(MetricRow::aggregate("cil_accuracy_calibrated", o));
        }
        per_task(&mut rows, "auc_max_logit", &self.auc_max_logit);
        if let Some(m) = self.mean_auc(OodScore::MaxLogit) {
            rows.push(MetricRow::aggregate("auc_max_logit", m));
        }
        per_task(&mut rows, "auc_max_softmax", &self.auc_max_softmax);
        if let Some(m) = self.mean_auc(OodScore::MaxSoftmax) {
            rows.push(MetricRow::aggregate("auc_max_softmax", m));
        }
        rows.push(MetricRow::aggregate("task_detection_rate", self.task_detection));
        rows
    }
}

/// Test inputs of tasks `0..n`, their global labels and owning task.
pub fn pooled_test(tasks: &[TaskDataset], n: usize) -> (Vec<f32>, Vec<usize>, Vec<usize>) {
    let mut xs = Vec::new();
    let mut labels = Vec::new();
    let mut owner = Vec::new();
    for t in &tasks[..n] {
        xs.extend_from_slice(&t.test.x);
        labels.extend(t.test.y.iter().map(|&l| t.classes[l]));
        owner.extend(std::iter::repeat_n(t.index, t.test.len()));
    }
    (xs, labels, owner)
}

/// Evaluates `model` on the test sets of its learned tasks.
pub fn evaluate(
    model: &ModelState,
    calibration: Option<&CalibrationParams>,
    tasks: &[TaskDataset],
    cfg: &ExperimentConfig,
) -> Result<Evaluation> {
    let n = model.num_tasks();
    if n == 0 {
        return Err(Error::Empty("model has no tasks"));
    }
    if tasks.len() < n {
        return Err(Error::Data(format!("model has {n} tasks but only {} datasets were given", tasks.len())));
    }
    if tasks[..n].iter().any(|t| t.test.is_empty()) {
        return Err(Error::Empty("task test split"));
    }
    let (xs, labels, owner) = pooled_test(tasks, n);
    let s = cfg.masknet.s_max;
    let outputs = task_outputs(model, &xs, labels.len(), s, cfg.eval.batch_size)?;
    evaluate_outputs(&outputs, calibration, &labels, &owner, tasks)
}

/// Metrics from precomputed ensemble outputs on the pooled test set.
pub fn evaluate_outputs(
    outputs: &TaskOutputs,
    calibration: Option<&CalibrationParams>,
    labels: &[usize],
    owner: &[usize],
    tasks: &[TaskDataset],
) -> Result<Evaluation> {
    let n = outputs.num_tasks();
    let ranges = task_ranges(owner, n);
    let cil_pred = predict_cil(outputs, None)?;
    let cal_pred = calibration.map(|c| predict_cil(outputs, Some(c))).transpose()?;
    let mut til = Vec::with_capacity(n);
    let mut cil = Vec::with_capacity(n);
    let mut cil_cal = Vec::with_capacity(n);
    for (t, r) in ranges.iter().enumerate() {
        let local: Vec<usize> = tasks[t].test.y.clone();
        let pred = predict_til(outputs, t)?;
        til.push(average_accuracy(&pred[r.clone()], &local)?);
        cil.push(average_accuracy(&cil_pred[r.clone()], &labels[r.clone()])?);
        if let Some(p) = &cal_pred {
            cil_cal.push(average_accuracy(&p[r.clone()], &labels[r.clone()])?);
        }
    }
    let til_hits: f64 = ranges.iter().zip(&til).map(|(r, a)| a * r.len() as f64).sum();
    let mut auc_logit = Vec::new();
    let mut auc_softmax = Vec::new();
    if n >= 2 {
        for (t, r) in ranges.iter().enumerate() {
            for (kind, out) in [(OodScore::MaxLogit, &mut auc_logit), (OodScore::MaxSoftmax, &mut auc_softmax)] {
                let scores = task_scores(outputs, t, kind);
                let inside: Vec<f32> = scores[r.clone()].to_vec();
                let outside: Vec<f32> =
                    scores.iter().enumerate().filter(|(i, _)| !r.contains(i)).map(|(_, &v)| v).collect();
                out.push(auc(&inside, &outside)?);
            }
        }
    }
    let detected = detect_task(outputs, OodScore::MaxLogit);
    Ok(Evaluation {
        til,
        cil,
        cil_calibrated: cal_pred.as_ref().map(|_| cil_cal),
        til_overall: til_hits / labels.len() as f64,
        cil_overall: average_accuracy(&cil_pred, labels)?,
        cil_calibrated_overall: cal_pred.as_ref().map(|p| average_accuracy(p, labels)).transpose()?,
        auc_max_logit: auc_logit,
        auc_max_softmax: auc_softmax,
        task_detection: task_detection_rate(&detected, owner)?,
    })
}

fn task_ranges(owner: &[usize], n: usize) -> Vec<std::ops::Range<usize>> {
    (0..n)
        .map(|t| {
            let start = owner.iter().position(|&o| o == t).unwrap_or(owner.len());
            let end = owner.iter().rposition(|&o| o == t).map_or(start, |e| e + 1);
            start..end
        })
        .collect()
}

/// Summary of one learned task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskReport {
    pub task: usize,
    pub contrastive_losses: Vec<f64>,
    pub finetune_losses: Vec<f64>,
    pub evaluation: Evaluation,
}

/// Trains, protects and evaluates the next task of the sequence.
pub fn train_next_task(state: &mut ExperimentState, tasks: &[TaskDataset]) -> Result<TaskReport> {
    let t = state.next_task;
    let data = tasks.get(t).ok_or(Error::UnknownTask(t + 1))?;
    let run = |state: &mut ExperimentState| -> Result<TaskReport> {
        if data.index != t {
            return Err(Error::Data(format!("dataset {} given for task {}", data.id(), t + 1)));
        }
        let cfg = state.config.clone();
        let model = &mut state.model;
        model.add_task(&data.classes, cfg.seed)?;
        log::info!("task {}: contrastive training on {} samples", t + 1, data.train.len());
        let rep1 = train_task_representation(model, t, data, &cfg)?;
        log::info!("task {}: classifier fine-tuning", t + 1);
        let rep2 = finetune_classifier(model, t, data, &cfg)?;
        let masks = model.task_masks(t, cfg.masknet.s_max)?;
        model.accumulated.accumulate(&masks)?;
        for c in capacity_report(&model.accumulated) {
            log::info!("layer {} capacity used: {}/{} units", c.layer, c.used, c.units);
        }
        state.memory.update(data, cfg.memory.per_class, cfg.seed)?;
        state.calibration = if state.memory.is_empty() {
            None
        } else {
            Some(fit_calibration(&state.model, &state.memory, &cfg.calib, cfg.masknet.s_max, cfg.seed)?)
        };
        let ev = evaluate(&state.model, state.calibration.as_ref(), tasks, &cfg)?;
        state.til.push_row(ev.til.clone())?;
        state.cil.push_row(ev.cil.clone())?;
        state.cil_calibrated.push_row(ev.cil_calibrated.clone().unwrap_or_else(|| ev.cil.clone()))?;
        state.next_task += 1;
        log::info!(
            "task {}: TIL {:.4} CIL {:.4} CIL(cal) {:.4}",
            t + 1,
            ev.til_overall,
            ev.cil_overall,
            ev.cil_calibrated_overall.unwrap_or(ev.cil_overall)
        );
        Ok(TaskReport {
            task: t,
            contrastive_losses: rep1.losses,
            finetune_losses: rep2.losses,
            evaluation: ev,
        })
    };
    run(state).map_err(|e| e.in_task(t))
}

/// Trains tasks until `state.next_task == until` (or the whole sequence).
pub fn train_until(
    state: &mut ExperimentState,
    tasks: &[TaskDataset],
    until: usize,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<TaskReport>> {
    let until = until.min(tasks.len()).min(state.config.data.n_tasks);
    let mut reports = Vec::new();
    while state.next_task < until {
        reports.push(train_next_task(state, tasks)?);
        if let Some(dir) = checkpoint_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(format!("task_{}.ckpt", state.next_task));
            checkpoint::save(state, &path)?;
            checkpoint::save(state, &dir.join("latest.ckpt"))?;
        }
    }
    Ok(reports)
}

/// Summary numbers of a finished run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub tasks: usize,
    pub til: f64,
    pub cil: f64,
    pub cil_calibrated: f64,
    pub forgetting: Option<f64>,
    pub avg_incremental_til: f64,
    pub avg_incremental_cil: f64,
    pub mean_auc: Option<f64>,
    pub task_detection: f64,
}

pub fn summarize(state: &ExperimentState, last: &Evaluation) -> Result<RunSummary> {
    let n = state.til.len();
    let steps = |m: &AccuracyMatrix| (0..m.len()).filter_map(|k| m.mean_after(k)).collect::<Vec<_>>();
    Ok(RunSummary {
        tasks: n,
        til: last.til_overall,
        cil: last.cil_overall,
        cil_calibrated: last.cil_calibrated_overall.unwrap_or(last.cil_overall),
        forgetting: (n >= 2).then(|| forgetting_rate(&state.til, n)).transpose()?,
        avg_incremental_til: avg_incremental_accuracy(&steps(&state.til))?,
        avg_incremental_cil: avg_incremental_accuracy(&steps(&state.cil_calibrated))?,
        mean_auc: last.mean_auc(state.config.eval.ood_score),
        task_detection: last.task_detection,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the resolved configuration next to a results file.
pub fn write_manifest(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    write(&dir.join("config.resolved.toml"), &cfg.to_toml_string())
}

/// Full training run: resumes from `resume` when given, writes a checkpoint
/// after every task and CSV reports into the output directory.
pub fn run_train(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<(ExperimentState, RunSummary)> {
    let mut state = match resume {
        Some(p) => {
            let mut st = checkpoint::load(p)?;
            st.config.out_dir = cfg.out_dir.clone();
            st
        }
        None => {
            let tasks = load_tasks(cfg)?;
            let kind = tasks.first().ok_or(Error::Empty("task sequence"))?.kind;
            ExperimentState::new(cfg.clone(), kind)?
        }
    };
    let tasks = load_tasks(&state.config)?;
    let out = state.config.out_dir.clone();
    write_manifest(&out, &state.config)?;
    let reports = train_until(&mut state, &tasks, usize::MAX, Some(&out.join("checkpoints")))?;
    let last = match reports.last() {
        Some(r) => r.evaluation.clone(),
        None => evaluate(&state.model, state.calibration.as_ref(), &tasks, &state.config)?,
    };
    let summary = summarize(&state, &last)?;
    write_reports(&out, &state, &last, &summary)?;
    Ok((state, summary))
}

pub fn write_reports(out: &Path, state: &ExperimentState, last: &Evaluation, summary: &RunSummary) -> Result<()> {
    write(&out.join("til_matrix.csv"), &matrix_csv(&state.til))?;
    write(&out.join("cil_matrix.csv"), &matrix_csv(&state.cil))?;
    write(&out.join("cil_calibrated_matrix.csv"), &matrix_csv(&state.cil_calibrated))?;
    let mut rows = last.rows();
    if let Some(f) = summary.forgetting {
        rows.push(MetricRow::aggregate("forgetting_rate", f));
    }
    rows.push(MetricRow::aggregate("avg_incremental_til", summary.avg_incremental_til));
    rows.push(MetricRow::aggregate("avg_incremental_cil", summary.avg_incremental_cil));
    write(&out.join("metrics.csv"), &metrics_csv(&rows))?;
    let json = serde_json::to_string_pretty(summary).expect("summary is serializable");
    write(&out.join("summary.json"), &json)
}

/// Evaluation mode of [`run_eval`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Til,
    Cil,
}

/// Evaluates a checkpoint and writes `eval_<mode>.csv` into `out`.
pub fn run_eval(checkpoint_path: &Path, mode: EvalMode, calibrated: bool, out: &Path) -> Result<Vec<MetricRow>> {
    let state = checkpoint::load(checkpoint_path)?;
    if mode == EvalMode::Cil && calibrated && state.calibration.is_none() {
        return Err(Error::InvalidInput(
            "calibrated CIL evaluation requested but the checkpoint has no calibration (empty memory)".into(),
        ));
    }
    let tasks = load_tasks(&state.config)?;
    let cal = if calibrated { state.calibration.as_ref() } else { None };
    let ev = evaluate(&state.model, cal, &tasks, &state.config)?;
    let mut rows = Vec::new();
    let n = ev.til.len();
    match mode {
        EvalMode::Til => {
            rows.extend(ev.til.iter().enumerate().map(|(t, &v)| MetricRow::task("til_accuracy", t, v)));
            rows.push(MetricRow::aggregate("til_accuracy", ev.til_overall));
        }
        EvalMode::Cil => {
            let (per, all) = match (&ev.cil_calibrated, ev.cil_calibrated_overall) {
                (Some(p), Some(a)) => (p.clone(), a),
                _ => (ev.cil.clone(), ev.cil_overall),
            };
            rows.extend(per.iter().enumerate().map(|(t, &v)| MetricRow::task("cil_accuracy", t, v)));
            rows.push(MetricRow::aggregate("cil_accuracy", all));
        }
    }
    let score = state.config.eval.ood_score;
    let aucs = match score {
        OodScore::MaxLogit => &ev.auc_max_logit,
        OodScore::MaxSoftmax => &ev.auc_max_softmax,
    };
    rows.extend(aucs.iter().enumerate().map(|(t, &v)| MetricRow::task("auc", t, v)));
    if let Some(m) = ev.mean_auc(score) {
        rows.push(MetricRow::aggregate("auc", m));
    }
    rows.push(MetricRow::aggregate("task_detection_rate", ev.task_detection));
    debug_assert!(rows.len() >= n);
    let name = match mode {
        EvalMode::Til => "eval_til.csv",
        EvalMode::Cil if calibrated => "eval_cil_calibrated.csv",
        EvalMode::Cil => "eval_cil.csv",
    };
    write(&out.join(name), &metrics_csv(&rows))?;
    write_manifest(out, &state.config)?;
    Ok(rows)
}

/// Refits the calibration of a checkpoint on its memory (optionally
/// truncated to `per_class` samples) and saves the result to `output`.
pub fn run_calibrate(checkpoint_path: &Path, per_class: Option<usize>, output: &Path) -> Result<CalibrationParams> {
    let mut state = checkpoint::load(checkpoint_path)?;
    let memory = per_class.map_or_else(|| state.memory.clone(), |k| state.memory.truncated(k));
    let cfg = &state.config;
    let params = fit_calibration(&state.model, &memory, &cfg.calib, cfg.masknet.s_max, cfg.seed)?;
    state.calibration = Some(params.clone());
    checkpoint::save(&state, output)?;
    Ok(params)
}

/// Which ablation to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sweep {
    S,
    Memory,
    Augment,
}

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub setting: String,
    pub values: Vec<(String, f64)>,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("setting");
    if let Some(first) = rows.first() {
        for (k, _) in &first.values {
            out.push(',');
            out.push_str(k);
        }
    }
    out.push('\n');
    for r in rows {
        out.push_str(&r.setting);
        for (_, v) in &r.values {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

/// Trains a full sequence in memory (no checkpoints) and returns the final
/// state with its last evaluation.
pub fn train_full(cfg: &ExperimentConfig, tasks: &[TaskDataset]) -> Result<(ExperimentState, Evaluation)> {
    let kind = tasks.first().ok_or(Error::Empty("task sequence"))?.kind;
    let mut state = ExperimentState::new(cfg.clone(), kind)?;
    let reports = train_until(&mut state, tasks, usize::MAX, None)?;
    let last = reports.last().map(|r| r.evaluation.clone()).ok_or(Error::Empty("task sequence"))?;
    Ok((state, last))
}

pub const S_SWEEP: [f32; 3] = [1.0, 100.0, 700.0];
pub const MEMORY_SWEEP: [usize; 4] = [0, 5, 10, 20];

pub fn s_sweep(cfg: &ExperimentConfig, tasks: &[TaskDataset]) -> Result<Vec<AblationRow>> {
    S_SWEEP
        .iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.masknet.s_max = s;
            let (state, last) = train_full(&c, tasks)?;
            let summary = summarize(&state, &last)?;
            Ok(AblationRow {
                setting: format!("s={s}"),
                values: vec![
                    ("forgetting".into(), summary.forgetting.unwrap_or(0.0)),
                    ("auc".into(), summary.mean_auc.unwrap_or(f64::NAN)),
                    ("cil".into(), summary.cil_calibrated),
                ],
            })
        })
        .collect()
}

/// CIL of one trained model calibrated with the first `k` memory samples per
/// class, for every `k` in [`MEMORY_SWEEP`]; `k = 0` is uncalibrated.
pub fn memory_sweep_on(state: &ExperimentState, tasks: &[TaskDataset]) -> Result<Vec<AblationRow>> {
    let cfg = &state.config;
    let n = state.model.num_tasks();
    let (xs, labels, _) = pooled_test(tasks, n);
    let outputs = task_outputs(&state.model, &xs, labels.len(), cfg.masknet.s_max, cfg.eval.batch_size)?;
    MEMORY_SWEEP
        .iter()
        .map(|&k| {
            let mem = state.memory.truncated(k);
            let pred = if mem.is_empty() {
                predict_cil(&outputs, None)?
            } else {
                let p = fit_calibration(&state.model, &mem, &cfg.calib, cfg.masknet.s_max, cfg.seed)?;
                predict_cil(&outputs, Some(&p))?
            };
            Ok(AblationRow {
                setting: format!("per_class={k}"),
                values: vec![("cil".into(), average_accuracy(&pred, &labels)?)],
            })
        })
        .collect()
}

pub fn memory_sweep(cfg: &ExperimentConfig, tasks: &[TaskDataset]) -> Result<Vec<AblationRow>> {
    let mut c = cfg.clone();
    c.memory.per_class = c.memory.per_class.max(*MEMORY_SWEEP.last().expect("non-empty"));
    let (state, _) = train_full(&c, tasks)?;
    memory_sweep_on(&state, tasks)
}

/// Augmentation variants: each single augmentation and all of them, with
/// and without rotation classes.
pub fn augment_variants(cfg: &ExperimentConfig) -> Vec<(String, crate::augment::AugmentConfig)> {
    let base = cfg.augment.clone();
    let none = crate::augment::AugmentConfig { hflip_p: 0.0, jitter_p: 0.0, pad: 0, ..base.clone() };
    let mut out = Vec::new();
    for rotation in [false, true] {
        let tag = if rotation { "+rot" } else { "" };
        let variants = [
            ("hflip", crate::augment::AugmentConfig { hflip_p: base.hflip_p, ..none.clone() }),
            ("jitter", crate::augment::AugmentConfig { jitter_p: base.jitter_p, ..none.clone() }),
            ("crop", crate::augment::AugmentConfig { pad: base.pad, ..none.clone() }),
            ("all", base.clone()),
        ];
        for (name, mut a) in variants {
            a.rotation = rotation;
            out.push((format!("{name}{tag}"), a));
        }
    }
    out
}

pub fn augment_sweep(cfg: &ExperimentConfig, tasks: &[TaskDataset]) -> Result<Vec<AblationRow>> {
    augment_variants(cfg)
        .into_iter()
        .map(|(name, a)| {
            let mut c = cfg.clone();
            c.augment = a;
            let (_, last) = train_full(&c, tasks)?;
            Ok(AblationRow {
                setting: name,
                values: vec![
                    ("til".into(), last.til_overall),
                    ("cil".into(), last.cil_calibrated_overall.unwrap_or(last.cil_overall)),
                ],
            })
        })
        .collect()
}

/// Runs one ablation sweep and writes `ablation_<name>.csv` plus the resolved
/// configuration into the output directory.
pub fn run_ablation(cfg: &ExperimentConfig, sweep: Sweep) -> Result<(PathBuf, Vec<AblationRow>)> {
    let tasks = load_tasks(cfg)?;
    let (name, rows) = match sweep {
        Sweep::S => ("s", s_sweep(cfg, &tasks)?),
        Sweep::Memory => ("memory", memory_sweep(cfg, &tasks)?),
        Sweep::Augment => ("augment", augment_sweep(cfg, &tasks)?),
    };
    let path = cfg.out_dir.join(format!("ablation_{name}.csv"));
    write(&path, &ablation_csv(&rows))?;
    write_manifest(&cfg.out_dir, cfg)?;
    Ok((path, rows))
}

/// Reads a checkpoint and renders its accuracy matrices and summary.
pub fn run_report(checkpoint_path: &Path) -> Result<String> {
    let state = checkpoint::load(checkpoint_path)?;
    let mut out = String::new();
    for (name, m) in [("TIL", &state.til), ("CIL", &state.cil), ("CIL calibrated", &state.cil_calibrated)] {
        out.push_str(&format!("{name} accuracy (row = after task, column = task)\n"));
        for (k, row) in m.rows().iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format!("{:6.2}", 100.0 * v)).collect();
            out.push_str(&format!("  {:>2} | {}\n", k + 1, cells.join(" ")));
        }
    }
    let n = state.til.len();
    if n >= 2 {
        out.push_str(&format!("forgetting rate F^{n}: {:.3}%\n", 100.0 * forgetting_rate(&state.til, n)?));
    }
    for c in capacity_report(&state.model.accumulated) {
        out.push_str(&format!("layer {} capacity: {}/{} units claimed\n", c.layer + 1, c.used, c.units));
    }
    Ok(out)
}
