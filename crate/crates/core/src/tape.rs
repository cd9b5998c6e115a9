//! Reverse-mode automatic differentiation by operation recording.
//!
//! Every differentiable operation appends a node holding its output value and
//! enough saved state for its vector-Jacobian product. [`Tape::backward`]
//! walks the nodes in reverse recorded order and accumulates gradients for
//! every node that (transitively) depends on a tensor marked as requiring
//! gradients.

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, AttnShape};
use crate::tensor::{Scalar, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: Vec<T>,
    },
    SeqProject {
        proj: Var,
        x: Var,
        batch: usize,
    },
    Tokens {
        patches: Var,
        cls: Var,
        pos: Var,
        batch: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Option<Vec<T>>,
        probs: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    names: IndexMap<String, Var>,
    recording: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape that saves everything needed for [`backward`](Self::backward).
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            names: IndexMap::new(),
            recording: true,
        }
    }

    /// A forward-only tape. Operations skip saving backward state (notably
    /// attention matrices) and `backward` is rejected.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.recording,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn checked(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, rg: bool) -> Result<Var> {
        value.ensure_finite(|| name.to_string())?;
        Ok(self.push(value, op, rg))
    }

    /// Constant input; gradients are never computed for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Unnamed input that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Named parameter; its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<Var> {
        let name = name.into();
        if self.names.contains_key(&name) {
            return Err(Error::contract(format!("parameter {name} registered twice")));
        }
        let v = self.push(value, Op::Leaf, true);
        self.names.insert(name, v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.checked("matmul", out, Op::Matmul(a, b), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| *p + *q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.checked("add", out, Op::Add(a, b), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| *p * *q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.checked("mul", out, Op::Mul(a, b), rg)
    }

    /// Adds `bias` along the trailing axis of `x`; the only broadcast supported.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let width = *xv.shape().last().unwrap_or(&1);
        if bv.numel() != width || xv.ndim() == 0 {
            return Err(Error::dim("add_bias", xv.shape(), bv.shape()));
        }
        let b = bv.data();
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(width) {
            kernels::add_into(row, b);
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(bias);
        self.checked("add_bias", out, Op::AddBias(x, bias), rg)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.checked("scale", out, Op::Scale(x, c), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Sum over all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum_all());
        let rg = self.rg(x);
        self.checked("sum", out, Op::Sum(x), rg)
    }

    /// Mean over all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).mean_all());
        let rg = self.rg(x);
        self.checked("mean", out, Op::Mean(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(kernels::gelu);
        let rg = self.rg(x);
        self.checked("gelu", out, Op::Gelu(x), rg)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = xv.data().to_vec();
        if inner == 1 {
            kernels::softmax_rows(&mut data, len);
        } else {
            let mut lane = vec![T::zero(); len];
            for o in 0..outer {
                for i in 0..inner {
                    for (j, l) in lane.iter_mut().enumerate() {
                        *l = data[(o * len + j) * inner + i];
                    }
                    kernels::softmax_rows(&mut lane, len);
                    for (j, l) in lane.iter().enumerate() {
                        data[(o * len + j) * inner + i] = *l;
                    }
                }
            }
        }
        let out = Tensor::from_parts(shape, data);
        let rg = self.rg(x);
        self.checked(
            "softmax",
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        )
    }

    /// Normalizes each trailing-axis row to zero mean and unit population
    /// variance, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let width = *xv.shape().last().unwrap_or(&1);
        for p in [gamma, beta] {
            if self.value(p).numel() != width || xv.ndim() == 0 {
                return Err(Error::dim("layer_norm", xv.shape(), self.shape(p)));
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.numel() / width;
        let mut out = vec![T::zero(); xv.numel()];
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        let n = T::of(width as f64);
        for (r, row) in xv.data().chunks_exact(width).enumerate() {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..width {
                let h = (row[j] - mean) * rs;
                xhat[r * width + j] = h;
                out[r * width + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let (xhat, rstd) = if self.recording { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        self.checked(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// `x·w + b` for `x [rows × in]`, `w [in × out]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Batched multi-head scaled dot-product attention.
    ///
    /// `q` is `[batch·q_len × width]`, `k` and `v` are `[batch·kv_len × width]`.
    /// Head `h` uses columns `h·width/heads .. (h+1)·width/heads`; outputs of
    /// all heads are concatenated back into a `[batch·q_len × width]` result.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        let (qr, width) = self.value(q).dims2("attention")?;
        let (kr, kw) = self.value(k).dims2("attention")?;
        if kw != width || self.shape(v) != self.shape(k) {
            return Err(Error::dim("attention", self.shape(q), self.shape(k)));
        }
        if batch == 0 || qr % batch != 0 || kr % batch != 0 {
            return Err(Error::contract(format!(
                "attention: batch {batch} does not divide rows {qr} and {kr}"
            )));
        }
        if heads == 0 || width % heads != 0 {
            return Err(Error::contract(format!(
                "attention: {heads} heads do not divide width {width}"
            )));
        }
        let shape = AttnShape {
            batch,
            heads,
            q_len: qr / batch,
            kv_len: kr / batch,
            width,
        };
        let mut out = vec![T::zero(); qr * width];
        let mut probs = if self.recording {
            vec![T::zero(); shape.probs_len()]
        } else {
            Vec::new()
        };
        kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            shape,
            &mut out,
            self.recording.then_some(&mut probs[..]),
        );
        let out = Tensor::from_parts(vec![qr, width], out);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.checked(
            "attention",
            out,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            rg,
        )
    }

    /// Applies `proj [r × n]` along the sequence axis of each of the `batch`
    /// stacked `[n × d]` blocks of `x`, giving `[batch·r × d]`.
    pub fn seq_project(&mut self, proj: Var, x: Var, batch: usize) -> Result<Var> {
        let (r, n) = self.value(proj).dims2("seq_project")?;
        let (rows, d) = self.value(x).dims2("seq_project")?;
        if batch == 0 || rows != batch * n {
            return Err(Error::dim("seq_project", self.shape(proj), self.shape(x)));
        }
        let p = self.value(proj).data();
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); batch * r * d];
        for b in 0..batch {
            kernels::gemm(
                p,
                &xd[b * n * d..(b + 1) * n * d],
                &mut out[b * r * d..(b + 1) * r * d],
                r,
                n,
                d,
            );
        }
        let out = Tensor::from_parts(vec![batch * r, d], out);
        let rg = self.rg(proj) || self.rg(x);
        self.checked("seq_project", out, Op::SeqProject { proj, x, batch }, rg)
    }

    /// Builds the encoder input: for each sample, the class token followed by
    /// its patch embeddings, plus the positional embedding.
    ///
    /// `patches` is `[batch·P × d]`, `cls` has `d` elements and `pos` is
    /// `[(P+1) × d]`; the result is `[batch·(P+1) × d]`.
    pub fn tokens(&mut self, patches: Var, cls: Var, pos: Var, batch: usize) -> Result<Var> {
        let (rows, d) = self.value(patches).dims2("tokens")?;
        let (seq, pd) = self.value(pos).dims2("tokens")?;
        if pd != d || self.value(cls).numel() != d || batch == 0 || rows != batch * (seq - 1) {
            return Err(Error::dim("tokens", self.shape(patches), self.shape(pos)));
        }
        let pv = self.value(patches).data();
        let cv = self.value(cls).data();
        let posv = self.value(pos).data();
        let mut out = vec![T::zero(); batch * seq * d];
        for b in 0..batch {
            for s in 0..seq {
                let dst = &mut out[(b * seq + s) * d..(b * seq + s + 1) * d];
                let src = if s == 0 {
                    cv
                } else {
                    &pv[(b * (seq - 1) + s - 1) * d..(b * (seq - 1) + s) * d]
                };
                for j in 0..d {
                    dst[j] = src[j] + posv[s * d + j];
                }
            }
        }
        let out = Tensor::from_parts(vec![batch * seq, d], out);
        let rg = self.rg(patches) || self.rg(cls) || self.rg(pos);
        self.checked(
            "tokens",
            out,
            Op::Tokens {
                patches,
                cls,
                pos,
                batch,
            },
            rg,
        )
    }

    /// Gathers rows of a 2-D tensor.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.value(x).dims2("select_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::contract(format!("select_rows: row {bad} out of {n}")));
        }
        if rows.is_empty() {
            return Err(Error::contract("select_rows: no rows selected"));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(xv.row(r));
        }
        let out = Tensor::from_parts(vec![rows.len(), d], out);
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over the batch of `weight[target] · −log softmax(logits)[target]`.
    /// With `weights = None` every sample has weight one.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[T]>) -> Result<Var> {
        let (b, c) = self.value(logits).dims2("cross_entropy")?;
        if targets.len() != b {
            return Err(Error::dim("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::contract(format!(
                "target class {t} out of range for {c} classes"
            )));
        }
        if let Some(w) = weights {
            if w.len() != c {
                return Err(Error::dim("cross_entropy", &[c], &[w.len()]));
            }
            if w.iter().any(|&x| !(x > T::zero())) {
                return Err(Error::contract("class weights must be positive"));
            }
        }
        let lv = self.value(logits).data();
        let mut probs = lv.to_vec();
        let mut total = T::zero();
        for (i, row) in lv.chunks_exact(c).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            let nll = lse - row[targets[i]];
            total = total
                + match weights {
                    Some(w) => w[targets[i]] * nll,
                    None => nll,
                };
        }
        kernels::softmax_rows(&mut probs, c);
        let loss = total / T::of(b as f64);
        let rg = self.rg(logits);
        self.checked(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.map(<[T]>::to_vec),
                probs,
            },
            rg,
        )
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::contract(format!("dropout probability {p} must be < 1")));
        }
        let keep = T::of(1.0 / (1.0 - p));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(a, m)| *a * *m).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(Error::contract("backward called on an inference tape"));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.node_backward(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients {
            grads,
            names: self.names.clone(),
        })
    }

    /// Gradient slot for `v`, allocated on first touch; `None` when `v` does
    /// not require gradients.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn node_backward(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = self.value(*a).dims2("matmul").expect("2-D");
                let n = self.value(*b).dims2("matmul").expect("2-D").1;
                if let Some(ga) = self.slot(grads, *a) {
                    kernels::gemm_nt_acc(g, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    kernels::gemm_tn_acc(self.value(*a).data(), g, gb, k, m, n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        kernels::add_into(gv, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] = gb[i] + g[i] * av[i];
                    }
                }
            }
            Op::AddBias(x, b) => {
                if let Some(gx) = self.slot(grads, *x) {
                    kernels::add_into(gx, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let w = gb.len();
                    for row in g.chunks_exact(w) {
                        kernels::add_into(gb, row);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (d, s) in gx.iter_mut().zip(g) {
                        *d = *d + *s * *c;
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).dims2("transpose").expect("2-D");
                if let Some(gx) = self.slot(grads, *x) {
                    kernels::add_into(gx, &kernels::transpose(g, c, r));
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    kernels::add_into(gx, g);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let s = g[0] / T::of(gx.len() as f64);
                    gx.iter_mut().for_each(|d| *d = *d + s);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] = gx[i] + g[i] * kernels::gelu_grad(xv[i]);
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                if let Some(gx) = self.slot(grads, *x) {
                    if *inner == 1 {
                        kernels::softmax_rows_backward_acc(y, g, gx, *len);
                    } else {
                        for o in 0..*outer {
                            for i in 0..*inner {
                                let idx = |j: usize| (o * len + j) * inner + i;
                                let dot: T = (0..*len).map(|j| y[idx(j)] * g[idx(j)]).sum();
                                for j in 0..*len {
                                    gx[idx(j)] = gx[idx(j)] + y[idx(j)] * (g[idx(j)] - dot);
                                }
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = self.value(*gamma).data();
                let w = gam.len();
                let n = T::of(w as f64);
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (gr, hr) in g.chunks_exact(w).zip(xhat.chunks_exact(w)) {
                        for j in 0..w {
                            gg[j] = gg[j] + gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for gr in g.chunks_exact(w) {
                        kernels::add_into(gb, gr);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dh = vec![T::zero(); w];
                    for (r, (gr, hr)) in g.chunks_exact(w).zip(xhat.chunks_exact(w)).enumerate() {
                        for j in 0..w {
                            dh[j] = gr[j] * gam[j];
                        }
                        let mean_dh = dh.iter().copied().sum::<T>() / n;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| *a * *b).sum::<T>() / n;
                        let dst = &mut gx[r * w..(r + 1) * w];
                        for j in 0..w {
                            dst[j] = dst[j] + rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                // Disjoint slots are needed simultaneously; take them out and put back.
                let mut take = |var: Var| {
                    let n = self.value(var).numel();
                    self.slot(grads, var).map(|s| {
                        if s.len() == n {
                            std::mem::take(s)
                        } else {
                            vec![T::zero(); n]
                        }
                    })
                };
                let mut dq = take(*q);
                let mut dk = take(*k);
                let mut dv = take(*v);
                kernels::attention_backward(
                    qv.data(),
                    kv.data(),
                    vv.data(),
                    probs,
                    g,
                    *shape,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(buf) = buf {
                        merge_slot(grads, var, buf);
                    }
                }
            }
            Op::SeqProject { proj, x, batch } => {
                let (r, n) = self.value(*proj).dims2("seq_project").expect("2-D");
                let d = self.value(*x).dims2("seq_project").expect("2-D").1;
                let pv = self.value(*proj).data();
                let xv = self.value(*x).data();
                if let Some(gp) = self.slot(grads, *proj) {
                    for b in 0..*batch {
                        kernels::gemm_nt_acc(
                            &g[b * r * d..(b + 1) * r * d],
                            &xv[b * n * d..(b + 1) * n * d],
                            gp,
                            r,
                            d,
                            n,
                        );
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    for b in 0..*batch {
                        kernels::gemm_tn_acc(
                            pv,
                            &g[b * r * d..(b + 1) * r * d],
                            &mut gx[b * n * d..(b + 1) * n * d],
                            n,
                            r,
                            d,
                        );
                    }
                }
            }
            Op::Tokens {
                patches,
                cls,
                pos,
                batch,
            } => {
                let (seq, d) = self.value(*pos).dims2("tokens").expect("2-D");
                if let Some(gp) = self.slot(grads, *patches) {
                    for b in 0..*batch {
                        for s in 1..seq {
                            let src = &g[(b * seq + s) * d..(b * seq + s + 1) * d];
                            let row = b * (seq - 1) + s - 1;
                            kernels::add_into(&mut gp[row * d..(row + 1) * d], src);
                        }
                    }
                }
                if let Some(gc) = self.slot(grads, *cls) {
                    for b in 0..*batch {
                        kernels::add_into(gc, &g[b * seq * d..(b * seq + 1) * d]);
                    }
                }
                if let Some(gpos) = self.slot(grads, *pos) {
                    for b in 0..*batch {
                        kernels::add_into(gpos, &g[b * seq * d..(b + 1) * seq * d]);
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                let d = self.value(*x).dims2("select_rows").expect("2-D").1;
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, &r) in rows.iter().enumerate() {
                        kernels::add_into(&mut gx[r * d..(r + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let c = self.value(*logits).dims2("cross_entropy").expect("2-D").1;
                let inv_b = g[0] / T::of(targets.len() as f64);
                if let Some(gl) = self.slot(grads, *logits) {
                    for (i, &t) in targets.iter().enumerate() {
                        let w = weights.as_ref().map_or(T::one(), |w| w[t]);
                        let s = w * inv_b;
                        for j in 0..c {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            gl[i * c + j] = gl[i * c + j] + s * (probs[i * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] = gx[i] + g[i] * mask[i];
                    }
                }
            }
        }
    }
}

fn merge_slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, buf: Vec<T>) {
    let slot = &mut grads[v.0];
    match slot {
        // Two of q/k/v may alias the same variable.
        Some(existing) if !existing.is_empty() => kernels::add_into(existing, &buf),
        _ => *slot = Some(buf),
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
    names: IndexMap<String, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for any recorded variable; `None` when the loss does not
    /// depend on it or it does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.get(name).and_then(|&v| self.get(v))
    }

    /// Parameter name → gradient, in registration order. Parameters the loss
    /// does not depend on are omitted.
    pub fn named(&self) -> IndexMap<String, Tensor<T>> {
        self.names
            .iter()
            .filter_map(|(n, &v)| self.get(v).map(|g| (n.clone(), g.clone())))
            .collect()
    }
}
