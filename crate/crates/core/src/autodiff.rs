//! Tape-based reverse-mode automatic differentiation.
//!
//! Every primitive evaluates eagerly and appends a node to the [`Tape`]; the
//! tape is therefore topologically ordered by construction. [`Tape::backward`]
//! walks it once in reverse and returns the gradient of a scalar loss with
//! respect to every node that requires one.

use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, matmul_into, rows_cols, sigmoid, Scalar, Tensor};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    AddBias { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Relu(Var),
    Sigmoid(Var),
    Mul { a: Var, b: Var },
    MulRow { x: Var, row: Var },
    Max { a: Var, b: Var },
    L2Normalize { x: Var, norms: Vec<T> },
    Dot { a: Var, b: Var },
    Affine { x: Var, scale: T },
    Sum(Var),
    Mean(Var),
    LogSumExp(Var),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    SupCon { z: Var, labels: Vec<usize>, tau: T, sims: Vec<T> },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Writes the gradient for `v` into the tensor's gradient slot (zeros if
    /// the loss does not depend on `v`).
    pub fn write_into(&self, v: Var, tensor: &mut Tensor<T>) -> Result<()> {
        let g = self.get(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); tensor.numel()]);
        tensor.set_grad(g)
    }
}

/// The computation record: primitives applied during one forward pass.
#[derive(Debug)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    fault_sigmoid: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false, fault_sigmoid: false }
    }

    /// Corrupts the sigmoid derivative. Only used to show that the gradient
    /// self-test catches a broken backward rule.
    #[doc(hidden)]
    pub fn inject_sigmoid_fault(&mut self) {
        self.fault_sigmoid = true;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: receives a gradient on backward.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-trainable leaf (data, labels, frozen weights).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.consumed = false;
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape_of(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data_of(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn make(shape: Vec<usize>, data: Vec<T>) -> Tensor<T> {
        Tensor::new(shape, data).expect("primitive produced inconsistent shape")
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape_of(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    /// `a · b` (or `a · bᵀ` when `trans_b`).
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (br, bc) = self.matrix_dims("matmul", b)?;
        let (bk, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != bk {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?} (trans_b={trans_b})", self.shape_of(a), self.shape_of(b)),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(m, k, n, self.data_of(a), false, self.data_of(b), trans_b, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Self::make(vec![m, n], out), Op::MatMul { a, b, trans_b }, rg))
    }

    /// Adds a bias vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("add_bias", x)?;
        if self.nodes[bias.0].value.numel() != c {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} for input {:?}", self.shape_of(bias), self.shape_of(x)),
            ));
        }
        let b = self.data_of(bias);
        let mut out = self.data_of(x).to_vec();
        for row in out.chunks_mut(c) {
            for (v, &bb) in row.iter_mut().zip(b) {
                *v = *v + bb;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Self::make(vec![r, c], out), Op::AddBias { x, bias }, rg))
    }

    /// `x · wᵀ + b`, the affine layer used throughout the model.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight, true)?;
        self.add_bias(y, bias)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape_of(a), self.shape_of(b))));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let out: Vec<T> =
            self.data_of(a).iter().zip(self.data_of(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape_of(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Self::make(shape, out), op, rg)
    }

    fn map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let out: Vec<T> = self.data_of(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape_of(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Self::make(shape, out), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, Op::Add { a, b }, |x, y| x + y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, Op::Mul { a, b }, |x, y| x * y))
    }

    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("max", a, b)?;
        Ok(self.zip_map(a, b, Op::Max { a, b }, |x, y| if x >= y { x } else { y }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    /// `scale * x + shift`, element-wise with scalar constants.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        self.map(x, Op::Affine { x, scale }, |v| scale * v + shift)
    }

    /// Multiplies every row of `x` element-wise by `row`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = rows_cols(self.shape_of(x));
        if self.nodes[row.0].value.numel() != c {
            return Err(Error::shape(
                "mul_row",
                format!("row {:?} for input {:?}", self.shape_of(row), self.shape_of(x)),
            ));
        }
        let w = self.data_of(row);
        let mut out = self.data_of(x).to_vec();
        for chunk in out.chunks_mut(c.max(1)) {
            for (v, &m) in chunk.iter_mut().zip(w) {
                *v = *v * m;
            }
        }
        let shape = self.shape_of(x).to_vec();
        debug_assert_eq!(out.len(), r * c);
        let rg = self.rg(&[x, row]);
        Ok(self.push(Self::make(shape, out), Op::MulRow { x, row }, rg))
    }

    /// Divides each row by its L2 norm plus `eps`.
    pub fn l2_normalize(&mut self, x: Var, eps: T) -> Var {
        let (_, c) = rows_cols(self.shape_of(x));
        let mut out = self.data_of(x).to_vec();
        let mut norms = Vec::with_capacity(out.len() / c.max(1));
        for row in out.chunks_mut(c.max(1)) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let d = n + eps;
            row.iter_mut().for_each(|v| *v = *v / d);
            norms.push(n);
        }
        let shape = self.shape_of(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Self::make(shape, out), Op::L2Normalize { x, norms: norms_with_eps(norms, eps) }, rg)
    }

    /// Inner product of two same-shape tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let v = self.data_of(a).iter().zip(self.data_of(b)).map(|(&x, &y)| x * y).sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(v), Op::Dot { a, b }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.data_of(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(v), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.data_of(x).len();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let v = self.data_of(x).iter().copied().sum::<T>() / T::of(n as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(v), Op::Mean(x), rg))
    }

    /// Row-wise log-sum-exp: `rows × cols -> rows`.
    pub fn log_sum_exp(&mut self, x: Var) -> Var {
        let (r, c) = rows_cols(self.shape_of(x));
        let out: Vec<T> = self.data_of(x).chunks(c.max(1)).map(log_sum_exp).collect();
        debug_assert_eq!(out.len(), r);
        let rg = self.rg(&[x]);
        self.push(Self::make(vec![r], out), Op::LogSumExp(x), rg)
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix_dims("softmax_cross_entropy", logits)?;
        if labels.len() != r || r == 0 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for logits {:?}", labels.len(), self.shape_of(logits)),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::shape("softmax_cross_entropy", format!("label {bad} >= {c} classes")));
        }
        let mut probs = Vec::with_capacity(r * c);
        let mut total = T::zero();
        for (row, &y) in self.data_of(logits).chunks(c).zip(labels) {
            let lse = log_sum_exp(row);
            total = total + lse - row[y];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let loss = total / T::of(r as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
            rg,
        ))
    }

    /// Supervised contrastive loss over the rows of `z` (assumed unit-norm).
    ///
    /// For each anchor the positives are the other rows with the same label and
    /// the denominator runs over every row except the anchor. Anchor terms are
    /// averaged over the batch.
    pub fn supcon(&mut self, z: Var, labels: &[usize], tau: T) -> Result<Var> {
        let (b, d) = self.matrix_dims("supcon", z)?;
        if labels.len() != b {
            return Err(Error::shape("supcon", format!("{} labels for {b} rows", labels.len())));
        }
        if tau <= T::zero() {
            return Err(Error::InvalidInput(format!("temperature must be positive, got {tau}")));
        }
        let counts = label_counts(labels);
        if let Some((&lbl, _)) = counts.iter().find(|(_, &n)| n < 2) {
            return Err(Error::InvalidInput(format!(
                "label {lbl} occurs once in the batch; every anchor needs a positive"
            )));
        }
        let zd = self.data_of(z);
        let mut sims = vec![T::zero(); b * b];
        matmul_into(b, d, b, zd, false, zd, true, &mut sims, false);
        let inv_tau = T::one() / tau;
        sims.iter_mut().for_each(|v| *v = *v * inv_tau);

        let mut total = T::zero();
        for i in 0..b {
            let row = &sims[i * b..(i + 1) * b];
            let lse = masked_lse(row, i);
            let mut pos_sum = T::zero();
            let mut n_pos = 0usize;
            for (j, &s) in row.iter().enumerate() {
                if j != i && labels[j] == labels[i] {
                    pos_sum = pos_sum + s;
                    n_pos += 1;
                }
            }
            total = total - (pos_sum / T::of(n_pos as f64) - lse);
        }
        let loss = total / T::of(b as f64);
        let rg = self.rg(&[z]);
        Ok(self.push(Tensor::scalar(loss), Op::SupCon { z, labels: labels.to_vec(), tau, sims }, rg))
    }

    /// Reverse pass from a scalar `loss`. Can run once per forward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        let loss_shape = self.shape_of(loss);
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = rows_cols(self.shape_of(*a));
                let n = node.value.shape()[1];
                if wants(a) {
                    // dA = G · op(B)^T
                    let mut da = vec![T::zero(); m * k];
                    matmul_into(m, n, k, g, false, self.data_of(*b), !*trans_b, &mut da, false);
                    accumulate(grads, *a, da);
                }
                if wants(b) {
                    let mut db = vec![T::zero(); k * n];
                    if *trans_b {
                        // B is n×k: dB = G^T · A
                        matmul_into(n, m, k, g, true, self.data_of(*a), false, &mut db, false);
                    } else {
                        // B is k×n: dB = A^T · G
                        matmul_into(k, m, n, self.data_of(*a), true, g, false, &mut db, false);
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::AddBias { x, bias } => {
                let c = self.nodes[bias.0].value.numel();
                if wants(x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if wants(bias) {
                    let mut db = vec![T::zero(); c];
                    for row in g.chunks(c) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    accumulate(grads, *bias, db);
                }
            }
            Op::Add { a, b } => {
                if wants(a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if wants(b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Relu(x) => {
                let dx = g
                    .iter()
                    .zip(out)
                    .map(|(&gv, &y)| if y > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let fault = self.fault_sigmoid;
                let dx = g
                    .iter()
                    .zip(out)
                    .map(|(&gv, &y)| if fault { gv * y } else { gv * y * (T::one() - y) })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::Mul { a, b } => {
                if wants(a) {
                    let da = g.iter().zip(self.data_of(*b)).map(|(&gv, &bv)| gv * bv).collect();
                    accumulate(grads, *a, da);
                }
                if wants(b) {
                    let db = g.iter().zip(self.data_of(*a)).map(|(&gv, &av)| gv * av).collect();
                    accumulate(grads, *b, db);
                }
            }
            Op::MulRow { x, row } => {
                let w = self.data_of(*row);
                let c = w.len().max(1);
                if wants(x) {
                    let mut dx = g.to_vec();
                    for chunk in dx.chunks_mut(c) {
                        for (v, &m) in chunk.iter_mut().zip(w) {
                            *v = *v * m;
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if wants(row) {
                    let mut dr = vec![T::zero(); w.len()];
                    for (gc, xc) in g.chunks(c).zip(self.data_of(*x).chunks(c)) {
                        for ((acc, &gv), &xv) in dr.iter_mut().zip(gc).zip(xc) {
                            *acc = *acc + gv * xv;
                        }
                    }
                    accumulate(grads, *row, dr);
                }
            }
            Op::Max { a, b } => {
                let (ad, bd) = (self.data_of(*a), self.data_of(*b));
                if wants(a) {
                    let da = g
                        .iter()
                        .zip(ad.iter().zip(bd))
                        .map(|(&gv, (&x, &y))| if x >= y { gv } else { T::zero() })
                        .collect();
                    accumulate(grads, *a, da);
                }
                if wants(b) {
                    let db = g
                        .iter()
                        .zip(ad.iter().zip(bd))
                        .map(|(&gv, (&x, &y))| if x >= y { T::zero() } else { gv })
                        .collect();
                    accumulate(grads, *b, db);
                }
            }
            Op::L2Normalize { x, norms } => {
                // norms holds (n, n + eps) pairs flattened.
                let c = rows_cols(self.shape_of(*x)).1.max(1);
                let xd = self.data_of(*x);
                let mut dx = vec![T::zero(); xd.len()];
                for (r, ((gr, xr), dr)) in
                    g.chunks(c).zip(xd.chunks(c)).zip(dx.chunks_mut(c)).enumerate()
                {
                    let n = norms[2 * r];
                    let d = norms[2 * r + 1];
                    let xg: T = xr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    let coef = if n > T::zero() { xg / (d * d * n) } else { T::zero() };
                    for ((o, &gv), &xv) in dr.iter_mut().zip(gr).zip(xr) {
                        *o = gv / d - xv * coef;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Dot { a, b } => {
                let s = g[0];
                if wants(a) {
                    accumulate(grads, *a, self.data_of(*b).iter().map(|&v| v * s).collect());
                }
                if wants(b) {
                    accumulate(grads, *b, self.data_of(*a).iter().map(|&v| v * s).collect());
                }
            }
            Op::Affine { x, scale } => {
                accumulate(grads, *x, g.iter().map(|&v| v * *scale).collect());
            }
            Op::Sum(x) => {
                let n = self.data_of(*x).len();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.data_of(*x).len();
                accumulate(grads, *x, vec![g[0] / T::of(n as f64); n]);
            }
            Op::LogSumExp(x) => {
                let c = rows_cols(self.shape_of(*x)).1.max(1);
                let xd = self.data_of(*x);
                let mut dx = Vec::with_capacity(xd.len());
                for ((row, &lse), &gv) in xd.chunks(c).zip(out).zip(g) {
                    dx.extend(row.iter().map(|&v| gv * (v - lse).exp()));
                }
                accumulate(grads, *x, dx);
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let r = labels.len();
                let c = probs.len() / r;
                let scale = g[0] / T::of(r as f64);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    dx[i * c + y] = dx[i * c + y] - scale;
                }
                accumulate(grads, *logits, dx);
            }
            Op::SupCon { z, labels, tau, sims } => {
                let b = labels.len();
                let d = self.data_of(*z).len() / b;
                let scale = g[0] / T::of(b as f64);
                // dL/dS, row i: softmax over j != i minus positive indicator / |P(i)|
                let mut ds = vec![T::zero(); b * b];
                for i in 0..b {
                    let row = &sims[i * b..(i + 1) * b];
                    let lse = masked_lse(row, i);
                    let n_pos = labels
                        .iter()
                        .enumerate()
                        .filter(|&(j, &l)| j != i && l == labels[i])
                        .count();
                    let inv_pos = T::one() / T::of(n_pos as f64);
                    for j in 0..b {
                        if j == i {
                            continue;
                        }
                        let mut v = (row[j] - lse).exp();
                        if labels[j] == labels[i] {
                            v = v - inv_pos;
                        }
                        ds[i * b + j] = v * scale;
                    }
                }
                // S = Z Z^T / tau  =>  dZ = (dS + dS^T) Z / tau
                let mut sym = vec![T::zero(); b * b];
                for i in 0..b {
                    for j in 0..b {
                        sym[i * b + j] = ds[i * b + j] + ds[j * b + i];
                    }
                }
                let mut dz = vec![T::zero(); b * d];
                matmul_into(b, b, d, &sym, false, self.data_of(*z), false, &mut dz, false);
                let inv_tau = T::one() / *tau;
                dz.iter_mut().for_each(|v| *v = *v * inv_tau);
                accumulate(grads, *z, dz);
            }
        }
    }
}

fn norms_with_eps<T: Scalar>(norms: Vec<T>, eps: T) -> Vec<T> {
    norms.into_iter().flat_map(|n| [n, n + eps]).collect()
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e = *e + x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// log-sum-exp over a row, skipping entry `skip`.
fn masked_lse<T: Scalar>(row: &[T], skip: usize) -> T {
    let m = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != skip)
        .map(|(_, &v)| v)
        .fold(T::neg_infinity(), T::max);
    let s: T = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != skip)
        .map(|(_, &v)| (v - m).exp())
        .sum();
    m + s.ln()
}

fn label_counts(labels: &[usize]) -> std::collections::BTreeMap<usize, usize> {
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0) += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_t(tape: &mut Tape<f64>, v: &[f64]) -> Var {
        tape.param(Tensor::vector(v.to_vec()))
    }

    #[test]
    fn relu_forward() {
        let mut t = Tape::<f64>::new();
        let x = vec_t(&mut t, &[-1.0, 0.0, 2.0]);
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut t = Tape::<f64>::new();
        let x = vec_t(&mut t, &[3.0, 4.0]);
        let y = t.l2_normalize(x, 1e-12);
        let d = t.value(y).data();
        assert!((d[0] - 0.6).abs() < 1e-12 && (d[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn identity_matmul() {
        let mut t = Tape::<f64>::new();
        let eye = t.constant(Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
        let v = t.param(Tensor::matrix(3, 1, vec![0.3, -2.0, 7.5]).unwrap());
        let y = t.matmul(eye, v, false).unwrap();
        assert_eq!(t.value(y).data(), &[0.3, -2.0, 7.5]);
    }

    #[test]
    fn quadratic_gradient() {
        let mut t = Tape::<f64>::new();
        let w = vec_t(&mut t, &[1.0, 2.0]);
        let sq = t.mul(w, w).unwrap();
        let loss = t.sum(sq);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::scalar(0.0));
        let y = t.sigmoid(x);
        let g = t.backward(y).unwrap();
        assert!((g.get(x).unwrap()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::scalar(1.0));
        let y = t.sigmoid(x);
        t.backward(y).unwrap();
        assert!(matches!(t.backward(y), Err(Error::BackwardTwice)));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::<f64>::new();
        let c = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let w = t.param(Tensor::vector(vec![3.0, 4.0]));
        let d = t.dot(c, w).unwrap();
        let g = t.backward(d).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(w).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut t = Tape::<f64>::new();
        let a = t.param(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = t.param(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let err = t.matmul(a, b, false).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let v = t.param(Tensor::vector(vec![0.0; 4]));
        assert!(t.add(a, v).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn supcon_single_positive_identical_is_zero() {
        let mut t = Tape::<f64>::new();
        let z = t.param(Tensor::matrix(2, 2, vec![0.6, 0.8, 0.6, 0.8]).unwrap());
        let l = t.supcon(z, &[3, 3], 0.07).unwrap();
        assert!(t.scalar_value(l).abs() < 1e-12);
    }

    #[test]
    fn supcon_rejects_lonely_label() {
        let mut t = Tape::<f64>::new();
        let z = t.param(Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap());
        assert!(t.supcon(z, &[0, 0, 1], 0.1).is_err());
    }
}
