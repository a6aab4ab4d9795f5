//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so [`Graph::backward`] is a single reverse sweep.
//! Parameters are read in place from a borrowed [`ParamStore`]; their
//! gradients come back as a [`Gradients`] value so that several graphs can be
//! reduced before an optimizer step.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{domain_err, shape_err, Result, TensorError};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn_acc, transpose, Tensor};

pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    /// Operands normalised to `[m,k] x [k,n]`.
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean { a: Var, axis: usize },
    Softmax(Var),
    Tanh(Var),
    Selu(Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    Rows { a: Var, index: Vec<usize> },
    SliceCols { a: Var, start: usize, end: usize },
    Reshape(Var),
    Dropout { a: Var, mask: Vec<f64> },
}

struct Node {
    /// `None` for parameters, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph<'static> {
    /// A graph without parameters; only constants and inputs.
    pub fn new() -> Self {
        Graph {
            params: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }
}

impl<'p> Graph<'p> {
    pub fn with_params(params: &'p ParamStore) -> Self {
        Graph {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self
                .params
                .expect("parameter node without a store")
                .get(*id),
            (None, _) => unreachable!("only parameter nodes borrow their value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    /// Gradient of the last [`backward`](Self::backward) target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A leaf whose gradient is retained and readable through [`grad`](Self::grad).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, true)
    }

    /// Reference a parameter of the bound store; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        assert!(id.index() < store.len(), "unknown parameter {id:?}");
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Matrix product. Rank-1 operands act as a row vector on the left and a
    /// column vector on the right; the corresponding output axis is dropped.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, a_vec) = match sa.as_slice() {
            [k] => (1, *k, true),
            [m, k] => (*m, *k, false),
            _ => return Err(shape_err("matmul", &sa, &sb)),
        };
        let (k2, n, b_vec) = match sb.as_slice() {
            [k] => (*k, 1, true),
            [k, n] => (*k, *n, false),
            _ => return Err(shape_err("matmul", &sa, &sb)),
        };
        if k != k2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let data = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let shape = match (a_vec, b_vec) {
            (true, true) => vec![],
            (true, false) => vec![n],
            (false, true) => vec![m],
            (false, false) => vec![m, n],
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::MatMul { a, b, m, k, n }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let [r, c] = s[..] else {
            return Err(domain_err("transpose", format!("expected rank 2, got {s:?}")));
        };
        let data = transpose(self.value(a).data(), r, c);
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![c, r], data), Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add(a, b), rg))
    }

    /// Add a rank-1 bias along the last axis of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb.len() != 1 || sa.last() != sb.first() {
            return Err(shape_err("add_bias", sa, sb));
        }
        let n = sb[0];
        let b = self.value(bias).data();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + b[i % n])
            .collect();
        let shape = sa.to_vec();
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddBias(a, bias), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * factor).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, data), Op::Scale(a, factor), rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Mean over one axis of a rank-1 or rank-2 tensor.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (shape, data) = match (t.shape(), axis) {
            ([n], 0) => (vec![], vec![t.data().iter().sum::<f64>() / *n as f64]),
            ([m, n], 0) => {
                let mut out = vec![0.0; *n];
                for i in 0..*m {
                    out.iter_mut().zip(t.row(i)).for_each(|(o, x)| *o += x);
                }
                out.iter_mut().for_each(|o| *o /= *m as f64);
                (vec![*n], out)
            }
            ([m, n], 1) => (
                vec![*m],
                (0..*m).map(|i| t.row(i).iter().sum::<f64>() / *n as f64).collect(),
            ),
            (s, _) => return Err(domain_err("mean", format!("axis {axis} invalid for shape {s:?}"))),
        };
        if t.numel() == 0 {
            return Err(domain_err("mean", "empty tensor"));
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mean { a, axis }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = last_dim("softmax", t)?;
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Softmax(a), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn selu(&mut self, a: Var) -> Var {
        self.unary(a, selu, Op::Selu(a))
    }

    /// Exact (erf-based) GeLU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    fn unary(&mut self, a: Var, f: fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, data), op, rg)
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let t = self.value(x);
        let n = last_dim("layer_norm", t)?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = t.numel() / n;
        let mut xhat = Vec::with_capacity(t.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mu) * is;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, gain, bias, xhat, inv_std },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under softmax(`logits`).
    /// `logits` is `[C]` with one target or `[m, C]` with `m` targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let c = last_dim("cross_entropy", t)?;
        let rows = t.numel() / c;
        if rows != targets.len() || rows == 0 {
            return Err(shape_err("cross_entropy", t.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
            return Err(domain_err("cross_entropy", format!("target {bad} out of range for {c} classes")));
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(c).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            softmax_in_place(row);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / rows as f64),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
        ))
    }

    /// Concatenate along the last axis. Scalars count as length-1 vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| domain_err("concat", "no inputs"))?;
        let lead: Vec<usize> = {
            let s = self.shape(first);
            if s.is_empty() { vec![] } else { s[..s.len() - 1].to_vec() }
        };
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let (l, w) = if s.is_empty() { (&[][..], 1) } else { (&s[..s.len() - 1], s[s.len() - 1]) };
            if l != lead.as_slice() {
                return Err(shape_err("concat", self.shape(first), s));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec()), rg))
    }

    /// Stack equal-length vectors as the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let first = *rows.first().ok_or_else(|| domain_err("stack", "no inputs"))?;
        let s0 = self.shape(first).to_vec();
        if s0.len() != 1 {
            return Err(domain_err("stack", format!("expected vectors, got {s0:?}")));
        }
        let mut data = Vec::with_capacity(rows.len() * s0[0]);
        for &r in rows {
            if self.shape(r) != s0.as_slice() {
                return Err(shape_err("stack", &s0, self.shape(r)));
            }
            data.extend_from_slice(self.value(r).data());
        }
        let rg = rows.iter().any(|&r| self.rg(r));
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), s0[0]], data),
            Op::Stack(rows.to_vec()),
            rg,
        ))
    }

    /// Gather rows of a matrix (embedding lookup, span selection).
    pub fn rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let [r, c] = t.shape()[..] else {
            return Err(domain_err("rows", format!("expected rank 2, got {:?}", t.shape())));
        };
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(domain_err("rows", format!("row {bad} out of range for {r} rows")));
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(t.row(i));
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(vec![index.len(), c], data),
            Op::Rows { a, index: index.to_vec() },
            rg,
        ))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let r = self.rows(a, &[i])?;
        let c = self.shape(r)[1];
        self.reshape(r, vec![c])
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let [r, c] = t.shape()[..] else {
            return Err(domain_err("slice_cols", format!("expected rank 2, got {:?}", t.shape())));
        };
        if start >= end || end > c {
            return Err(domain_err("slice_cols", format!("range {start}..{end} invalid for {c} columns")));
        }
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..end]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(vec![r, end - start], data),
            Op::SliceCols { a, start, end },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Inverted dropout: zero each element with probability `p`, scale the
    /// survivors by `1/(1-p)`. `p == 0` returns `a` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(domain_err("dropout", format!("rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let t = self.value(a);
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = zip_map(t.data(), &mask, |x, m| x * m);
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Dropout { a, mask }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// Clear gradients so that [`backward`](Self::backward) may run again.
    pub fn reset(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Propagate d(loss)/d(node) through the tape. Inputs keep their
    /// gradients on the graph; parameter gradients are returned.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(TensorError::State(
                "backward already ran on this graph; call reset() first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = match self.params {
            Some(p) => Gradients::for_store(p),
            None => Gradients::default(),
        };

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Param(id) => {
                    out.accumulate_slice(*id, &g);
                    grads[i] = Some(g);
                    continue;
                }
                Op::Input => {
                    grads[i] = Some(g);
                    continue;
                }
                _ => {}
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.nodes[i].value.as_ref().expect("non-parameter node value");
        match &self.nodes[i].op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.rg(*a) {
                    let ga = matmul_nt(g, self.value(*b).data(), m, n, k);
                    acc(grads, *a, &ga);
                }
                if self.rg(*b) {
                    let gb = slot(grads, *b, k * n);
                    matmul_tn_acc(gb, self.value(*a).data(), g, m, k, n);
                }
            }
            Op::Transpose(a) => {
                let s = out.shape();
                acc(grads, *a, &transpose(g, s[0], s[1]));
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    acc(grads, *a, g);
                }
                if self.rg(*b) {
                    acc(grads, *b, g);
                }
            }
            Op::AddBias(a, bias) => {
                if self.rg(*a) {
                    acc(grads, *a, g);
                }
                if self.rg(*bias) {
                    let n = self.shape(*bias)[0];
                    let gb = slot(grads, *bias, n);
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(grads, *a, &zip_map(g, self.value(*b).data(), |x, y| x * y));
                }
                if self.rg(*b) {
                    acc(grads, *b, &zip_map(g, self.value(*a).data(), |x, y| x * y));
                }
            }
            Op::Scale(a, f) => {
                let ga: Vec<f64> = g.iter().map(|x| x * f).collect();
                acc(grads, *a, &ga);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                acc(grads, *a, &vec![g[0]; n]);
            }
            Op::Mean { a, axis } => {
                let s = self.shape(*a).to_vec();
                let mut ga = vec![0.0; s.iter().product()];
                match (s.as_slice(), axis) {
                    ([n], 0) => ga.iter_mut().for_each(|x| *x = g[0] / *n as f64),
                    ([m, n], 0) => {
                        for (idx, x) in ga.iter_mut().enumerate() {
                            *x = g[idx % n] / *m as f64;
                        }
                    }
                    ([_, n], 1) => {
                        for (idx, x) in ga.iter_mut().enumerate() {
                            *x = g[idx / n] / *n as f64;
                        }
                    }
                    _ => unreachable!(),
                }
                acc(grads, *a, &ga);
            }
            Op::Softmax(a) => {
                let n = *out.shape().last().unwrap();
                let mut ga = Vec::with_capacity(g.len());
                for (y, gy) in out.data().chunks(n).zip(g.chunks(n)) {
                    let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                    ga.extend(y.iter().zip(gy).map(|(p, q)| p * (q - dot)));
                }
                acc(grads, *a, &ga);
            }
            Op::Tanh(a) => {
                let ga = zip_map(g, out.data(), |gy, y| gy * (1.0 - y * y));
                acc(grads, *a, &ga);
            }
            Op::Selu(a) => {
                let ga = zip_map(g, self.value(*a).data(), |gy, x| gy * selu_grad(x));
                acc(grads, *a, &ga);
            }
            Op::Gelu(a) => {
                let ga = zip_map(g, self.value(*a).data(), |gy, x| gy * gelu_grad(x));
                acc(grads, *a, &ga);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let n = self.shape(*gain)[0];
                let gv = self.value(*gain).data();
                if self.rg(*x) {
                    let mut gx = Vec::with_capacity(g.len());
                    for ((gy, xh), is) in g.chunks(n).zip(xhat.chunks(n)).zip(inv_std) {
                        let dxhat: Vec<f64> = gy.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let nf = n as f64;
                        gx.extend(
                            dxhat
                                .iter()
                                .zip(xh)
                                .map(|(d, h)| is / nf * (nf * d - s1 - h * s2)),
                        );
                    }
                    acc(grads, *x, &gx);
                }
                if self.rg(*gain) {
                    let gg = slot(grads, *gain, n);
                    for (gy, xh) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gy[j] * xh[j];
                        }
                    }
                }
                if self.rg(*bias) {
                    let gb = slot(grads, *bias, n);
                    for gy in g.chunks(n) {
                        gb.iter_mut().zip(gy).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = probs.len() / targets.len();
                let scale = g[0] / targets.len() as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &y) in targets.iter().enumerate() {
                    gl[r * c + y] -= scale;
                }
                acc(grads, *logits, &gl);
            }
            Op::Concat(parts) => {
                let total = *out.shape().last().unwrap_or(&1);
                let rows = g.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape().last().copied().unwrap_or(1);
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        acc(grads, p, &gp);
                    }
                    offset += w;
                }
            }
            Op::Stack(rows) => {
                let w = out.shape()[1];
                for (r, &p) in rows.iter().enumerate() {
                    if self.rg(p) {
                        acc(grads, p, &g[r * w..(r + 1) * w]);
                    }
                }
            }
            Op::Rows { a, index } => {
                let c = out.shape()[1];
                let total = self.value(*a).numel();
                let ga = slot(grads, *a, total);
                for (r, &i) in index.iter().enumerate() {
                    ga[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(&g[r * c..(r + 1) * c])
                        .for_each(|(x, y)| *x += y);
                }
            }
            Op::SliceCols { a, start, end } => {
                let s = self.shape(*a).to_vec();
                let w = end - start;
                let ga = slot(grads, *a, s[0] * s[1]);
                for r in 0..s[0] {
                    ga[r * s[1] + start..r * s[1] + end]
                        .iter_mut()
                        .zip(&g[r * w..(r + 1) * w])
                        .for_each(|(x, y)| *x += y);
                }
            }
            Op::Reshape(a) => acc(grads, *a, g),
            Op::Dropout { a, mask } => {
                acc(grads, *a, &zip_map(g, mask, |x, m| x * m));
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
        s @ None => *s = Some(g.to_vec()),
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn last_dim(op: &'static str, t: &Tensor) -> Result<usize> {
    match t.shape().last() {
        Some(&n) if n > 0 => Ok(n),
        _ => Err(domain_err(op, format!("needs a non-empty last axis, got {:?}", t.shape()))),
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

pub fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
    }
}

fn selu_grad(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp()
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}
