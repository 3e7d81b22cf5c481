//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Ops are appended to the tape in execution order, so node indices are
//! already a topological order. [`Tape::backward`] walks them once in
//! reverse, accumulating gradients additively into every input that was
//! used more than once. A tape can be swept backward any number of times
//! from different roots; it is never mutated by `backward`, which is how
//! the trainer obtains two gradients from one forward pass.

use std::cell::{Ref, RefCell};

use crate::error::{bail, Result};
use crate::tensor::{log_softmax_in_place, matmul_into, matmul_nt_into, softmax_in_place, transpose_raw, Scalar, Tensor};

/// Lower clamp applied to probabilities inside logarithms of the
/// distillation divergence.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf { param: Option<usize> },
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        lengths: Vec<usize>,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Kld {
        student: Var,
        teacher_probs: Vec<T>,
        student_probs: Vec<T>,
        clamped: Vec<bool>,
        temperature: T,
    },
}

#[derive(Debug, Clone, Copy)]
struct AttnDims {
    batch: usize,
    seq: usize,
    heads: usize,
    head_dim: usize,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    param_slots: RefCell<usize>,
}

/// Gradients of one backward sweep, indexed by the parameter ids passed to
/// [`Tape::param`]. Parameters the loss does not depend on have no entry.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    by_param: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, param: usize) -> Option<&Tensor<T>> {
        self.by_param.get(param).and_then(Option::as_ref)
    }

    pub fn take(&mut self, param: usize) -> Option<Tensor<T>> {
        self.by_param.get_mut(param).and_then(Option::take)
    }

    pub fn touched(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.by_param
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (i, g)))
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], idx: usize, g: Tensor<T>) {
    match &mut grads[idx] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            param_slots: RefCell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// Records a trainable parameter. Gradients for it are reported under `id`.
    pub fn param(&self, id: usize, value: &Tensor<T>) -> Var {
        let mut slots = self.param_slots.borrow_mut();
        *slots = (*slots).max(id + 1);
        drop(slots);
        self.push(value.clone(), Op::Leaf { param: Some(id) }, true)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf { param: None }, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(&self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (x, y) = (self.value(a), self.value(b));
            if x.shape() != y.shape() {
                bail!(Dimension, "add of shapes {:?} and {:?}", x.shape(), y.shape());
            }
            let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
            Tensor::new(x.shape().to_vec(), data)?
        };
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (x, y) = (self.value(a), self.value(b));
            if x.shape() != y.shape() {
                bail!(Dimension, "mul of shapes {:?} and {:?}", x.shape(), y.shape());
            }
            let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
            Tensor::new(x.shape().to_vec(), data)?
        };
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// `x[m×n] + bias[n]` broadcast over rows.
    pub fn add_row(&self, x: Var, bias: Var) -> Result<Var> {
        let out = {
            let (xv, bv) = (self.value(x), self.value(bias));
            let (m, n) = xv.dims2()?;
            if bv.len() != n {
                bail!(Dimension, "bias of length {} for rows of width {}", bv.len(), n);
            }
            let mut data = xv.data().to_vec();
            for i in 0..m {
                for (o, &b) in data[i * n..(i + 1) * n].iter_mut().zip(bv.data()) {
                    *o = *o + b;
                }
            }
            Tensor::new(vec![m, n], data)?
        };
        let ng = self.needs(&[x, bias]);
        Ok(self.push(out, Op::AddRow(x, bias), ng))
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v * c);
        let ng = self.needs(&[a]);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let ng = self.needs(&[a]);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn log(&self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.ln());
        let ng = self.needs(&[a]);
        self.push(out, Op::Log(a), ng)
    }

    pub fn sum(&self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data().iter().copied().sum());
        let ng = self.needs(&[a]);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&self, a: Var) -> Var {
        let out = {
            let v = self.value(a);
            let n = T::from_usize(v.len()).unwrap();
            Tensor::scalar(v.data().iter().copied().sum::<T>() / n)
        };
        let ng = self.needs(&[a]);
        self.push(out, Op::Mean(a), ng)
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let out = crate::tensor::softmax_rows(&self.value(a))?;
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::SoftmaxRows(a), ng))
    }

    /// Per-row normalization to zero mean and unit variance (`eps` inside
    /// the square root) followed by the affine `gain * x̂ + bias`.
    pub fn layernorm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (out, xhat, rstd) = {
            let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
            let (m, n) = xv.dims2()?;
            if g.len() != n || b.len() != n {
                bail!(Dimension, "layernorm affine params must have length {}", n);
            }
            let nf = T::from_usize(n).unwrap();
            let eps = T::from_f64_lossy(eps);
            let mut xhat = vec![T::zero(); m * n];
            let mut rstd = vec![T::zero(); m];
            let mut out = vec![T::zero(); m * n];
            for i in 0..m {
                let row = &xv.data()[i * n..(i + 1) * n];
                let mu = row.iter().copied().sum::<T>() / nf;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nf;
                let r = T::one() / (var + eps).sqrt();
                rstd[i] = r;
                for j in 0..n {
                    let h = (row[j] - mu) * r;
                    xhat[i * n + j] = h;
                    out[i * n + j] = g.data()[j] * h + b.data()[j];
                }
            }
            (Tensor::new(vec![m, n], out)?, xhat, rstd)
        };
        let ng = self.needs(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = {
            let t = self.value(table);
            let (vocab, h) = t.dims2()?;
            let mut data = Vec::with_capacity(ids.len() * h);
            for &id in ids {
                if id >= vocab {
                    bail!(Dimension, "embedding id {} out of range for {} rows", id, vocab);
                }
                data.extend_from_slice(t.row(id));
            }
            Tensor::new(vec![ids.len(), h], data)?
        };
        let ng = self.needs(&[table]);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn select_rows(&self, x: Var, rows: &[usize]) -> Result<Var> {
        let out = {
            let t = self.value(x);
            let (m, n) = t.dims2()?;
            let mut data = Vec::with_capacity(rows.len() * n);
            for &r in rows {
                if r >= m {
                    bail!(Dimension, "row {} out of range for {} rows", r, m);
                }
                data.extend_from_slice(t.row(r));
            }
            Tensor::new(vec![rows.len(), n], data)?
        };
        let ng = self.needs(&[x]);
        Ok(self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention over `[batch*seq × hidden]`
    /// projections. Keys at positions `>= lengths[b]` are excluded from the
    /// softmax entirely, so padded positions cannot influence any output.
    pub fn attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        lengths: &[usize],
    ) -> Result<Var> {
        let (out, probs, dims) = {
            let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
            let (rows, hidden) = qv.dims2()?;
            if rows != batch * seq || kv.shape() != qv.shape() || vv.shape() != qv.shape() {
                bail!(Dimension, "attention inputs must all be [{}x{}]", batch * seq, hidden);
            }
            if heads == 0 || hidden % heads != 0 {
                bail!(Dimension, "hidden {} not divisible by {} heads", hidden, heads);
            }
            if lengths.len() != batch || lengths.iter().any(|&l| l == 0 || l > seq) {
                bail!(Dimension, "attention lengths must lie in 1..={}", seq);
            }
            let dims = AttnDims {
                batch,
                seq,
                heads,
                head_dim: hidden / heads,
            };
            let (out, probs) = attention_forward(qv.data(), kv.data(), vv.data(), dims, lengths);
            (Tensor::new(vec![rows, hidden], out)?, probs, dims)
        };
        let ng = self.needs(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                dims,
                lengths: lengths.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Batch-mean cross-entropy of `logits[batch×classes]` against labels.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = {
            let lv = self.value(logits);
            let (m, c) = lv.dims2()?;
            if labels.len() != m {
                bail!(Dimension, "{} labels for {} rows", labels.len(), m);
            }
            let mut logp = lv.data().to_vec();
            let mut total = T::zero();
            for (i, &y) in labels.iter().enumerate() {
                if y >= c {
                    bail!(Data, "label {} out of range for {} classes", y, c);
                }
                let row = &mut logp[i * c..(i + 1) * c];
                log_softmax_in_place(row);
                total = total - row[y];
            }
            let probs = logp.iter().map(|v| v.exp()).collect::<Vec<_>>();
            (total / T::from_usize(m).unwrap(), probs)
        };
        let ng = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Batch-mean `Σ_c p_t(c) ln(p_t(c)/p_s(c))` with both distributions
    /// softened by `temperature`. The teacher enters as a constant: no
    /// gradient ever flows back into `teacher`.
    pub fn kld(&self, teacher: Var, student: Var, temperature: T) -> Result<Var> {
        if !(temperature > T::zero()) {
            bail!(Config, "temperature must be positive");
        }
        let (loss, teacher_probs, student_probs, clamped) = {
            let (tv, sv) = (self.value(teacher), self.value(student));
            if tv.shape() != sv.shape() {
                bail!(Dimension, "kld of shapes {:?} and {:?}", tv.shape(), sv.shape());
            }
            let (m, c) = sv.dims2()?;
            let floor = T::from_f64_lossy(LOG_CLAMP.ln());
            let mut tlog: Vec<T> = tv.data().iter().map(|&v| v / temperature).collect();
            let mut slog: Vec<T> = sv.data().iter().map(|&v| v / temperature).collect();
            let mut total = T::zero();
            let mut clamped = vec![false; m * c];
            for i in 0..m {
                let tr = &mut tlog[i * c..(i + 1) * c];
                let sr = &mut slog[i * c..(i + 1) * c];
                log_softmax_in_place(tr);
                log_softmax_in_place(sr);
                for j in 0..c {
                    let pt = tr[j].exp();
                    let lt = tr[j].max(floor);
                    let ls = if sr[j] < floor {
                        clamped[i * c + j] = true;
                        floor
                    } else {
                        sr[j]
                    };
                    total = total + pt * (lt - ls);
                }
            }
            let tp = tlog.iter().map(|v| v.exp()).collect();
            let sp = slog.iter().map(|v| v.exp()).collect();
            (total / T::from_usize(m).unwrap(), tp, sp, clamped)
        };
        let ng = self.needs(&[student]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Kld {
                student,
                teacher_probs,
                student_probs,
                clamped,
                temperature,
            },
            ng,
        ))
    }

    /// Sweeps backward from the scalar `loss`, returning gradients for every
    /// recorded parameter that the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if !root.value.is_scalar() {
            bail!(
                Contract,
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            );
        }
        let mut by_param: Vec<Option<Tensor<T>>> = vec![None; *self.param_slots.borrow()];
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let wants = |v: &Var| nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(p) = param {
                        accumulate(&mut by_param, *p, g);
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, n) = av.dims2()?;
                    let p = bv.dims2()?.1;
                    if wants(a) {
                        // dA = dC · Bᵀ
                        let mut da = vec![T::zero(); m * n];
                        matmul_nt_into(g.data(), bv.data(), m, p, n, &mut da);
                        accumulate(&mut grads, a.0, Tensor::new(vec![m, n], da)?);
                    }
                    if wants(b) {
                        // dB = Aᵀ · dC
                        let at = transpose_raw(av.data(), m, n);
                        let mut db = vec![T::zero(); n * p];
                        matmul_into(&at, g.data(), n, m, p, &mut db);
                        accumulate(&mut grads, b.0, Tensor::new(vec![n, p], db)?);
                    }
                }
                Op::Add(a, b) => {
                    if wants(a) {
                        accumulate(&mut grads, a.0, g.clone());
                    }
                    if wants(b) {
                        accumulate(&mut grads, b.0, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    if wants(a) {
                        let d = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                        accumulate(&mut grads, a.0, Tensor::new(av.shape().to_vec(), d)?);
                    }
                    if wants(b) {
                        let d = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                        accumulate(&mut grads, b.0, Tensor::new(bv.shape().to_vec(), d)?);
                    }
                }
                Op::AddRow(x, bias) => {
                    if wants(bias) {
                        let (m, n) = g.dims2()?;
                        let mut db = vec![T::zero(); n];
                        for i in 0..m {
                            for (d, &v) in db.iter_mut().zip(g.row(i)) {
                                *d = *d + v;
                            }
                        }
                        let shape = nodes[bias.0].value.shape().to_vec();
                        accumulate(&mut grads, bias.0, Tensor::new(shape, db)?);
                    }
                    if wants(x) {
                        accumulate(&mut grads, x.0, g);
                    }
                }
                Op::Scale(a, c) => {
                    if wants(a) {
                        let c = *c;
                        accumulate(&mut grads, a.0, g.map(|v| v * c));
                    }
                }
                Op::Gelu(a) => {
                    if wants(a) {
                        let av = &nodes[a.0].value;
                        let d = g
                            .data()
                            .iter()
                            .zip(av.data())
                            .map(|(&gv, &x)| gv * gelu_grad(x))
                            .collect();
                        accumulate(&mut grads, a.0, Tensor::new(av.shape().to_vec(), d)?);
                    }
                }
                Op::Log(a) => {
                    if wants(a) {
                        let av = &nodes[a.0].value;
                        let d = g.data().iter().zip(av.data()).map(|(&gv, &x)| gv / x).collect();
                        accumulate(&mut grads, a.0, Tensor::new(av.shape().to_vec(), d)?);
                    }
                }
                Op::Sum(a) | Op::Mean(a) => {
                    if wants(a) {
                        let av = &nodes[a.0].value;
                        let mut s = g.item();
                        if matches!(node.op, Op::Mean(_)) {
                            s = s / T::from_usize(av.len()).unwrap();
                        }
                        accumulate(&mut grads, a.0, Tensor::full(av.shape(), s));
                    }
                }
                Op::Transpose(a) => {
                    if wants(a) {
                        accumulate(&mut grads, a.0, g.transpose()?);
                    }
                }
                Op::Reshape(a) => {
                    if wants(a) {
                        let shape = nodes[a.0].value.shape().to_vec();
                        accumulate(&mut grads, a.0, g.reshape(shape)?);
                    }
                }
                Op::SoftmaxRows(a) => {
                    if wants(a) {
                        let y = &node.value;
                        let (m, n) = y.dims2()?;
                        let mut d = vec![T::zero(); m * n];
                        for i in 0..m {
                            let (yr, gr) = (y.row(i), g.row(i));
                            let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                            for j in 0..n {
                                d[i * n + j] = yr[j] * (gr[j] - dot);
                            }
                        }
                        accumulate(&mut grads, a.0, Tensor::new(vec![m, n], d)?);
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let (m, n) = g.dims2()?;
                    if wants(gain) || wants(bias) {
                        let mut dg = vec![T::zero(); n];
                        let mut db = vec![T::zero(); n];
                        for i in 0..m {
                            for j in 0..n {
                                let gv = g.data()[i * n + j];
                                dg[j] = dg[j] + gv * xhat[i * n + j];
                                db[j] = db[j] + gv;
                            }
                        }
                        if wants(gain) {
                            accumulate(&mut grads, gain.0, Tensor::new(vec![n], dg)?);
                        }
                        if wants(bias) {
                            accumulate(&mut grads, bias.0, Tensor::new(vec![n], db)?);
                        }
                    }
                    if wants(x) {
                        let gain_v = &nodes[gain.0].value;
                        let nf = T::from_usize(n).unwrap();
                        let mut dx = vec![T::zero(); m * n];
                        for i in 0..m {
                            let mut mean_d = T::zero();
                            let mut mean_dx = T::zero();
                            for j in 0..n {
                                let dh = g.data()[i * n + j] * gain_v.data()[j];
                                mean_d = mean_d + dh;
                                mean_dx = mean_dx + dh * xhat[i * n + j];
                            }
                            mean_d = mean_d / nf;
                            mean_dx = mean_dx / nf;
                            for j in 0..n {
                                let dh = g.data()[i * n + j] * gain_v.data()[j];
                                dx[i * n + j] = rstd[i] * (dh - mean_d - xhat[i * n + j] * mean_dx);
                            }
                        }
                        accumulate(&mut grads, x.0, Tensor::new(vec![m, n], dx)?);
                    }
                }
                Op::Embedding { table, ids } => {
                    if wants(table) {
                        let tv = &nodes[table.0].value;
                        let (vocab, h) = tv.dims2()?;
                        let mut d = vec![T::zero(); vocab * h];
                        for (r, &id) in ids.iter().enumerate() {
                            for (o, &v) in d[id * h..(id + 1) * h].iter_mut().zip(g.row(r)) {
                                *o = *o + v;
                            }
                        }
                        accumulate(&mut grads, table.0, Tensor::new(vec![vocab, h], d)?);
                    }
                }
                Op::SelectRows { x, rows } => {
                    if wants(x) {
                        let xv = &nodes[x.0].value;
                        let (m, n) = xv.dims2()?;
                        let mut d = vec![T::zero(); m * n];
                        for (r, &src) in rows.iter().enumerate() {
                            for (o, &v) in d[src * n..(src + 1) * n].iter_mut().zip(g.row(r)) {
                                *o = *o + v;
                            }
                        }
                        accumulate(&mut grads, x.0, Tensor::new(vec![m, n], d)?);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    dims,
                    lengths,
                    probs,
                } => {
                    let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                    let shape = qv.shape().to_vec();
                    let (dq, dk, dv) =
                        attention_backward(g.data(), qv.data(), kv.data(), vv.data(), probs, *dims, lengths);
                    if wants(q) {
                        accumulate(&mut grads, q.0, Tensor::new(shape.clone(), dq)?);
                    }
                    if wants(k) {
                        accumulate(&mut grads, k.0, Tensor::new(shape.clone(), dk)?);
                    }
                    if wants(v) {
                        accumulate(&mut grads, v.0, Tensor::new(shape, dv)?);
                    }
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    if wants(logits) {
                        let lv = &nodes[logits.0].value;
                        let (m, c) = lv.dims2()?;
                        let s = g.item() / T::from_usize(m).unwrap();
                        let mut d: Vec<T> = probs.iter().map(|&p| p * s).collect();
                        for (i, &y) in labels.iter().enumerate() {
                            d[i * c + y] = d[i * c + y] - s;
                        }
                        accumulate(&mut grads, logits.0, Tensor::new(vec![m, c], d)?);
                    }
                }
                Op::Kld {
                    student,
                    teacher_probs,
                    student_probs,
                    clamped,
                    temperature,
                } => {
                    if wants(student) {
                        let sv = &nodes[student.0].value;
                        let (m, c) = sv.dims2()?;
                        let s = g.item() / (T::from_usize(m).unwrap() * *temperature);
                        let mut d = vec![T::zero(); m * c];
                        for i in 0..m {
                            // Mass of the teacher on classes whose student log-prob was not clamped.
                            let live: T = (0..c)
                                .filter(|&j| !clamped[i * c + j])
                                .map(|j| teacher_probs[i * c + j])
                                .sum();
                            for j in 0..c {
                                let pt = if clamped[i * c + j] {
                                    T::zero()
                                } else {
                                    teacher_probs[i * c + j]
                                };
                                d[i * c + j] = s * (student_probs[i * c + j] * live - pt);
                            }
                        }
                        accumulate(&mut grads, student.0, Tensor::new(vec![m, c], d)?);
                    }
                }
            }
        }
        Ok(Gradients { by_param })
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * x * (T::one() + t)
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

fn attention_forward<T: Scalar>(q: &[T], k: &[T], v: &[T], d: AttnDims, lengths: &[usize]) -> (Vec<T>, Vec<T>) {
    let AttnDims {
        batch,
        seq,
        heads,
        head_dim,
    } = d;
    let hidden = heads * head_dim;
    let scale = T::one() / T::from_usize(head_dim).unwrap().sqrt();
    let mut out = vec![T::zero(); batch * seq * hidden];
    let mut probs = vec![T::zero(); batch * heads * seq * seq];
    let mut scores = vec![T::zero(); seq];
    for b in 0..batch {
        let len = lengths[b];
        for h in 0..heads {
            let off = h * head_dim;
            for i in 0..seq {
                let qi = &q[(b * seq + i) * hidden + off..][..head_dim];
                for (j, s) in scores[..len].iter_mut().enumerate() {
                    let kj = &k[(b * seq + j) * hidden + off..][..head_dim];
                    let dot: T = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum();
                    *s = dot * scale;
                }
                softmax_in_place(&mut scores[..len]);
                let prow = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                prow[..len].copy_from_slice(&scores[..len]);
                let orow = &mut out[(b * seq + i) * hidden + off..][..head_dim];
                for (j, &p) in scores[..len].iter().enumerate() {
                    let vj = &v[(b * seq + j) * hidden + off..][..head_dim];
                    for (o, &x) in orow.iter_mut().zip(vj) {
                        *o = *o + p * x;
                    }
                }
            }
        }
    }
    (out, probs)
}

fn attention_backward<T: Scalar>(
    dout: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    d: AttnDims,
    lengths: &[usize],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttnDims {
        batch,
        seq,
        heads,
        head_dim,
    } = d;
    let hidden = heads * head_dim;
    let scale = T::one() / T::from_usize(head_dim).unwrap().sqrt();
    let n = batch * seq * hidden;
    let (mut dq, mut dk, mut dv) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
    let mut dp = vec![T::zero(); seq];
    for b in 0..batch {
        let len = lengths[b];
        for h in 0..heads {
            let off = h * head_dim;
            for i in 0..seq {
                let prow = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                let doi = &dout[(b * seq + i) * hidden + off..][..head_dim];
                let mut weighted = T::zero();
                for j in 0..len {
                    let vj = &v[(b * seq + j) * hidden + off..][..head_dim];
                    dp[j] = doi.iter().zip(vj).map(|(&x, &y)| x * y).sum();
                    weighted = weighted + prow[j] * dp[j];
                    let dvj = &mut dv[(b * seq + j) * hidden + off..][..head_dim];
                    for (o, &x) in dvj.iter_mut().zip(doi) {
                        *o = *o + prow[j] * x;
                    }
                }
                let qi_start = (b * seq + i) * hidden + off;
                for j in 0..len {
                    let ds = prow[j] * (dp[j] - weighted) * scale;
                    let kj_start = (b * seq + j) * hidden + off;
                    for t in 0..head_dim {
                        dq[qi_start + t] = dq[qi_start + t] + ds * k[kj_start + t];
                        dk[kj_start + t] = dk[kj_start + t] + ds * q[qi_start + t];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
