//! Parameter containers: the shared masked trunk, per-task attention
//! embeddings, projection heads and rotation classifiers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::InputKind;
use crate::error::{Error, Result};
use crate::masknet::{attention, AccumulatedMask};
use crate::rng::{rng_for, stream};
use crate::tensor::{self, Tensor};

/// Affine layer `y = x Wᵀ + b` with `W` stored out × in.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
}

impl Linear {
    /// Uniform(-1/sqrt(in), 1/sqrt(in)) for weights and bias.
    pub fn init(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (input as f32).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..bound)).collect::<Vec<f32>>();
        let w = draw(output * input);
        let b = draw(output);
        Self {
            weight: Tensor::matrix(output, input, w).expect("consistent shape"),
            bias: Tensor::vector(b),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Tensor::zeros(&[output, input]), bias: Tensor::zeros(&[output]) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &[f32], rows: usize) -> Vec<f32> {
        tensor::linear(x, rows, self.weight.data(), self.bias.data(), self.output_dim())
    }
}

/// Trunk layer with one attention embedding per learned task.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedLayer {
    pub linear: Linear,
    pub embeddings: Vec<Tensor<f32>>,
}

impl MaskedLayer {
    pub fn units(&self) -> usize {
        self.linear.output_dim()
    }
}

/// Two affine layers with a ReLU between; output is normalized downstream.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl ProjectionHead {
    pub fn forward(&self, features: &[f32], rows: usize) -> Vec<f32> {
        let mut h = self.hidden.forward(features, rows);
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        self.out.forward(&h, rows)
    }
}

/// Linear map from trunk features to `num_rotations × |classes|` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskClassifier {
    pub linear: Linear,
    pub num_classes: usize,
    pub num_rotations: usize,
}

impl TaskClassifier {
    pub fn num_outputs(&self) -> usize {
        self.num_classes * self.num_rotations
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskHeads {
    /// Global class ids in local-label order.
    pub classes: Vec<usize>,
    pub projection: ProjectionHead,
    pub classifier: TaskClassifier,
}

/// Architecture hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub kind: InputKind,
    pub hidden_width: usize,
    pub depth: usize,
    pub proj_dim: usize,
    pub num_rotations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub arch: Architecture,
    pub layers: Vec<MaskedLayer>,
    pub tasks: Vec<TaskHeads>,
    /// Element-wise max of the attentions of every finished task.
    pub accumulated: AccumulatedMask,
}

impl ModelState {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        if arch.depth == 0 || arch.hidden_width == 0 || arch.proj_dim == 0 {
            return Err(Error::Config("model depth, width and projection size must be positive".into()));
        }
        if !matches!(arch.num_rotations, 1 | 4) {
            return Err(Error::Config(format!("num_rotations must be 1 or 4, got {}", arch.num_rotations)));
        }
        let mut rng = rng_for(seed, &[stream::INIT]);
        let mut input = arch.kind.dim();
        let mut layers = Vec::with_capacity(arch.depth);
        for _ in 0..arch.depth {
            layers.push(MaskedLayer {
                linear: Linear::init(input, arch.hidden_width, &mut rng),
                embeddings: Vec::new(),
            });
            input = arch.hidden_width;
        }
        let accumulated = AccumulatedMask::zeros(&vec![arch.hidden_width; arch.depth]);
        Ok(Self { arch, layers, tasks: Vec::new(), accumulated })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.hidden_width
    }

    pub fn layer_units(&self) -> Vec<usize> {
        self.layers.iter().map(MaskedLayer::units).collect()
    }

    /// Registers a new task: standard-normal attention embeddings, a fresh
    /// projection head and a zero classifier. Returns the task index.
    pub fn add_task(&mut self, classes: &[usize], seed: u64) -> Result<usize> {
        if classes.is_empty() {
            return Err(Error::InvalidInput("a task needs at least one class".into()));
        }
        let t = self.tasks.len();
        let mut rng = rng_for(seed, &[stream::EMBEDDING, t as u64]);
        for layer in &mut self.layers {
            let e: Vec<f32> = (0..layer.units()).map(|_| StandardNormal.sample(&mut rng)).collect();
            layer.embeddings.push(Tensor::vector(e));
        }
        let width = self.arch.hidden_width;
        let projection = ProjectionHead {
            hidden: Linear::init(width, width, &mut rng),
            out: Linear::init(width, self.arch.proj_dim, &mut rng),
        };
        let classifier = TaskClassifier {
            linear: Linear::zeros(width, classes.len() * self.arch.num_rotations),
            num_classes: classes.len(),
            num_rotations: self.arch.num_rotations,
        };
        self.tasks.push(TaskHeads { classes: classes.to_vec(), projection, classifier });
        Ok(t)
    }

    pub fn check_task(&self, task: usize) -> Result<()> {
        if task < self.tasks.len() {
            Ok(())
        } else {
            Err(Error::UnknownTask(task + 1))
        }
    }

    /// Per-layer attention of `task` at scale `s`.
    pub fn task_masks(&self, task: usize, s: f32) -> Result<Vec<Vec<f32>>> {
        self.check_task(task)?;
        Ok(self.layers.iter().map(|l| attention(l.embeddings[task].data(), s)).collect())
    }

    /// Masked trunk forward with explicit per-layer masks; returns every
    /// layer's masked output.
    pub fn forward_with_masks(&self, x: &[f32], rows: usize, masks: &[Vec<f32>]) -> Vec<Vec<f32>> {
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (layer, mask) in self.layers.iter().zip(masks) {
            let mut y = layer.linear.forward(&h, rows);
            for row in y.chunks_mut(layer.units()) {
                for (v, &m) in row.iter_mut().zip(mask) {
                    *v = v.max(0.0) * m;
                }
            }
            outputs.push(y.clone());
            h = y;
        }
        outputs
    }

    /// Masked trunk features `h(x, t)` for a batch of `rows` samples.
    pub fn features(&self, x: &[f32], rows: usize, task: usize, s: f32) -> Result<Vec<f32>> {
        let dim = self.arch.kind.dim();
        if x.len() != rows * dim {
            return Err(Error::shape("masked_forward", format!("{} values for {rows} x {dim}", x.len())));
        }
        let masks = self.task_masks(task, s)?;
        Ok(self.forward_with_masks(x, rows, &masks).pop().unwrap_or_default())
    }

    /// Unit-norm contrastive representation of a batch.
    pub fn project(&self, x: &[f32], rows: usize, task: usize, s: f32) -> Result<Vec<f32>> {
        let h = self.features(x, rows, task, s)?;
        let mut z = self.tasks[task].projection.forward(&h, rows);
        for row in z.chunks_mut(self.arch.proj_dim) {
            normalize_row(row);
        }
        Ok(z)
    }

    /// Little-endian bytes of every trunk weight, bias and embedding; used to
    /// check that a stage leaves the trunk untouched.
    pub fn trunk_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for t in [&layer.linear.weight, &layer.linear.bias].into_iter().chain(&layer.embeddings) {
                out.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
            }
        }
        out
    }
}

pub(crate) const NORM_EPS: f32 = 1e-12;

pub fn normalize_row(row: &mut [f32]) {
    let n = row.iter().map(|v| v * v).sum::<f32>().sqrt() + NORM_EPS;
    row.iter_mut().for_each(|v| *v /= n);
}
