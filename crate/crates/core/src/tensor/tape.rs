use std::collections::HashMap;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Normalization epsilon shared by layer and RMS norm.
pub const NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Scale,
}

/// Right-hand side of an elementwise op: a same-shape (or single-element) node, or a constant.
#[derive(Debug, Clone, Copy)]
pub enum Operand {
    Var(Var),
    Scalar(f64),
}

impl From<Var> for Operand {
    fn from(v: Var) -> Self {
        Operand::Var(v)
    }
}

impl From<f64> for Operand {
    fn from(s: f64) -> Self {
        Operand::Scalar(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddConst(Var),
    ScaleConst(Var, f64),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Option<Var>,
    },
    RmsNorm {
        x: Var,
        gain: Var,
    },
    Gelu(Var),
    Silu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
    Sum(Var),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    MeanRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<String>,
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so inputs always precede outputs and a
/// single reverse sweep visits each node once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Per-node gradients from one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input; it is differentiated iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        let value = Tensor { grad: None, ..tensor };
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Loads a named parameter once per tape; later calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        let v = self.leaf(t.clone());
        self.nodes[v.0].param = Some(name.to_string());
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let out = kernels::transpose(self.value(a).data(), r, c);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), &[a]))
    }

    /// `x · wᵀ + b` for `x: [T×d_in]`, `w: [d_out×d_in]`, `b: [d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::shape("linear", sx, sw));
        }
        let (t, d_in, d_out) = (sx[0], sx[1], sw[0]);
        let mut out = vec![0.0; t * d_out];
        if let Some(b) = b {
            let sb = self.shape(b);
            if sb != [d_out] {
                return Err(Error::shape("linear bias", sb, &[d_out]));
            }
            let bias = self.value(b).data();
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(bias);
            }
        }
        kernels::matmul_nt_acc(self.value(x).data(), self.value(w).data(), &mut out, t, d_in, d_out);
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Tensor::new(vec![t, d_out], out)?, Op::Linear { x, w, b }, &inputs))
    }

    // ---- elementwise ----

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: impl Into<Operand>) -> Result<Var> {
        match (op, b.into()) {
            (ElementwiseOp::Add, Operand::Scalar(c)) => self.add_const(a, c),
            (ElementwiseOp::Sub, Operand::Scalar(c)) => self.add_const(a, -c),
            (ElementwiseOp::Mul | ElementwiseOp::Scale, Operand::Scalar(c)) => self.scale(a, c),
            (ElementwiseOp::Add, Operand::Var(b)) => self.add(a, b),
            (ElementwiseOp::Sub, Operand::Var(b)) => self.sub(a, b),
            (ElementwiseOp::Mul | ElementwiseOp::Scale, Operand::Var(b)) => self.mul(a, b),
        }
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || self.value(b).numel() == 1 {
            Ok(())
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    fn binary_value(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = if vb.numel() == 1 && va.numel() != 1 {
            let s = vb.data()[0];
            va.data().iter().map(|&x| f(x, s)).collect()
        } else {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        };
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("add", a, b)?;
        let v = self.binary_value(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("sub", a, b)?;
        let v = self.binary_value(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shapes("mul", a, b)?;
        let v = self.binary_value(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.map_value(a, |x| x + c);
        Ok(self.push(v, Op::AddConst(a), &[a]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.map_value(a, |x| x * c);
        Ok(self.push(v, Op::ScaleConst(a, c), &[a]))
    }

    fn map_value(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let va = self.value(a);
        Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    // ---- nonlinearities ----

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, false)
    }

    /// Softmax over the last axis of a square score matrix where entry `(i, j)`
    /// with `j > i` is treated as `-inf`.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::shape("causal_softmax", s, &[]));
        }
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Result<Var> {
        let vx = self.value(x);
        if vx.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain("softmax"));
        }
        let mut data = vx.data().to_vec();
        kernels::softmax_rows(&mut data, vx.cols(), causal);
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Softmax { x }, &[x]))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.map_value(x, kernels::gelu);
        Ok(self.push(v, Op::Gelu(x), &[x]))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let v = self.map_value(x, kernels::silu);
        Ok(self.push(v, Op::Silu(x), &[x]))
    }

    // ---- normalization ----

    pub fn norm(&mut self, kind: NormKind, x: Var, gain: Var, bias: Option<Var>) -> Result<Var> {
        match kind {
            NormKind::LayerNorm => self.layer_norm(x, gain, bias),
            NormKind::RmsNorm => {
                if bias.is_some() {
                    return Err(Error::Contract("rms_norm takes no bias".into()));
                }
                self.rms_norm(x, gain)
            }
        }
    }

    fn check_gain(&self, op: &'static str, x: Var, p: Var) -> Result<usize> {
        let d = self.value(x).cols();
        if self.shape(p) != [d] {
            return Err(Error::shape(op, self.shape(x), self.shape(p)));
        }
        Ok(d)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Option<Var>) -> Result<Var> {
        let d = self.check_gain("layer_norm", x, gain)?;
        if let Some(b) = bias {
            self.check_gain("layer_norm", x, b)?;
        }
        let g = self.value(gain).data();
        let bias_data = bias.map(|b| self.value(b).data());
        let vx = self.value(x);
        let mut out = vec![0.0; vx.numel()];
        for (row, o) in vx.data().chunks(d).zip(out.chunks_mut(d)) {
            let (mean, rstd) = layer_norm_stats(row);
            for j in 0..d {
                o[j] = (row[j] - mean) * rstd * g[j] + bias_data.map_or(0.0, |b| b[j]);
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        let inputs: Vec<Var> = [Some(x), Some(gain), bias].into_iter().flatten().collect();
        Ok(self.push(t, Op::LayerNorm { x, gain, bias }, &inputs))
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let d = self.check_gain("rms_norm", x, gain)?;
        let g = self.value(gain).data();
        let vx = self.value(x);
        let mut out = vec![0.0; vx.numel()];
        for (row, o) in vx.data().chunks(d).zip(out.chunks_mut(d)) {
            let inv = 1.0 / rms(row);
            for j in 0..d {
                o[j] = row[j] * inv * g[j];
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(t, Op::RmsNorm { x, gain }, &[x, gain]))
    }

    // ---- indexing and layout ----

    /// Gathers rows of `table: [V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.shape().len() != 2 {
            return Err(Error::shape("embedding", vt.shape(), &[]));
        }
        let (v, d) = (vt.shape()[0], vt.shape()[1]);
        if ids.is_empty() {
            return Err(Error::Contract("embedding lookup of zero ids".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index { id, size: v });
            }
            out.extend_from_slice(vt.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.cols();
        if vx.shape().len() != 2 || len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", vx.shape(), &[start, len]));
        }
        let data: Vec<f64> = vx
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let t = Tensor::new(vec![vx.rows(), len], data)?;
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.check_parts("concat_cols", parts, 0)?;
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[1]).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape().len() != 2 || len == 0 || start + len > vx.shape()[0] {
            return Err(Error::shape("slice_rows", vx.shape(), &[start, len]));
        }
        let c = vx.cols();
        let data = vx.data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::new(vec![len, c], data)?;
        Ok(self.push(t, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.check_parts("concat_rows", parts, 1)?;
        let data: Vec<f64> = parts
            .iter()
            .flat_map(|&p| self.value(p).data().iter().copied())
            .collect();
        let rows = data.len() / cols;
        let t = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Checks parts are 2-D and agree on axis `axis`; returns that size.
    fn check_parts(&self, op: &'static str, parts: &[Var], axis: usize) -> Result<usize> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract(format!("{op} of zero parts")))?;
        let s0 = self.shape(*first);
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s0.len() != 2 || s[axis] != s0[axis] {
                return Err(Error::shape(op, s0, s));
            }
        }
        Ok(s0[axis])
    }

    /// Mean over rows: `[T×d] → [1×d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = (vx.rows(), vx.cols());
        let mut out = vec![0.0; c];
        for row in vx.data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let t = Tensor::new(vec![1, c], out)?;
        Ok(self.push(t, Op::MeanRows(x), &[x]))
    }

    // ---- reductions and objectives ----

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), &[x]))
    }

    /// Mean negative log-likelihood of `targets` over positions where `mask` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let vl = self.value(logits);
        let (t, v) = (vl.rows(), vl.cols());
        if vl.shape().len() != 2 || targets.len() != t || mask.len() != t {
            return Err(Error::shape("cross_entropy", vl.shape(), &[targets.len(), mask.len()]));
        }
        if vl.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericDomain("cross_entropy"));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyObjective);
        }
        let mut total = 0.0;
        for (i, (&y, &m)) in targets.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            if y >= v {
                return Err(Error::Index { id: y, size: v });
            }
            let row = vl.row(i);
            total += log_sum_exp(row) - row[y];
        }
        let loss = Tensor::scalar(total / count as f64);
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            &[logits],
        ))
    }

    // ---- reverse sweep ----

    /// Differentiates a single-element node with respect to every node that needs a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].needs_grad {
                self.backward_node(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`backward`](Self::backward) and adds `scale ×` each parameter gradient into `store`.
    /// Frozen parameters are skipped.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore, scale: f64) -> Result<()> {
        let grads = self.backward(loss)?;
        self.accumulate_param_grads(&grads, store, scale);
        Ok(())
    }

    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore, scale: f64) {
        for (name, &v) in &self.params {
            if let (Some(g), Some(t)) = (grads.get(v), store.get_mut(name)) {
                if t.requires_grad() {
                    t.accumulate_grad(g, scale);
                }
            }
        }
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = out.cols();
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt_acc(g, self.value(*b).data(), &mut da, m, n, k);
                    self.acc(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn_acc(self.value(*a).data(), g, &mut db, m, k, n);
                    self.acc(grads, *b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_acc(g, self.value(*b).data(), &mut da, m, n, k);
                    self.acc(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; n * k];
                    kernels::matmul_tn_acc(g, self.value(*a).data(), &mut db, m, n, k);
                    self.acc(grads, *b, db);
                }
            }
            Op::Transpose(a) => {
                let s = out.shape();
                let ga = kernels::transpose(g, s[0], s[1]);
                self.acc(grads, *a, ga);
            }
            Op::Linear { x, w, b } => {
                let (t, d_in) = (self.shape(*x)[0], self.shape(*x)[1]);
                let d_out = out.cols();
                if self.needs(*x) {
                    let mut dx = vec![0.0; t * d_in];
                    kernels::matmul_acc(g, self.value(*w).data(), &mut dx, t, d_out, d_in);
                    self.acc(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; d_out * d_in];
                    kernels::matmul_tn_acc(g, self.value(*x).data(), &mut dw, t, d_out, d_in);
                    self.acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        self.acc(grads, *b, column_sums(g, d_out));
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc_broadcast(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc_broadcast(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let bcast = vb.len() == 1 && va.len() != 1;
                if self.needs(*a) {
                    let da = if bcast {
                        g.iter().map(|gi| gi * vb[0]).collect()
                    } else {
                        g.iter().zip(vb).map(|(gi, bi)| gi * bi).collect()
                    };
                    self.acc(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = g.iter().zip(va).map(|(gi, ai)| gi * ai).collect();
                    self.acc_broadcast(grads, *b, db);
                }
            }
            Op::AddConst(a) => self.acc(grads, *a, g.to_vec()),
            Op::ScaleConst(a, c) => self.acc(grads, *a, g.iter().map(|v| v * c).collect()),
            Op::Softmax { x } => {
                let c = out.cols();
                let mut dx = vec![0.0; g.len()];
                for ((y, gy), d) in out.data().chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                    let s = kernels::dot(y, gy);
                    for j in 0..c {
                        d[j] = y[j] * (gy[j] - s);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let dx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gi, &xi)| gi * kernels::gelu_grad(xi))
                    .collect();
                self.acc(grads, *x, dx);
            }
            Op::Silu(x) => {
                let dx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gi, &xi)| gi * kernels::silu_grad(xi))
                    .collect();
                self.acc(grads, *x, dx);
            }
            Op::LayerNorm { x, gain, bias } => {
                let vx = self.value(*x);
                let d = vx.cols();
                let gn = self.value(*gain).data();
                let mut dx = vec![0.0; vx.numel()];
                let mut dgain = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for ((row, gy), dxr) in vx.data().chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                    let (mean, rstd) = layer_norm_stats(row);
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * rstd;
                        dxhat[j] = gy[j] * gn[j];
                        dgain[j] += gy[j] * xhat[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = kernels::dot(&dxhat, &xhat) / d as f64;
                    for j in 0..d {
                        dxr[j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *gain, dgain);
                if let Some(b) = bias {
                    if self.needs(*b) {
                        self.acc(grads, *b, column_sums(g, d));
                    }
                }
            }
            Op::RmsNorm { x, gain } => {
                let vx = self.value(*x);
                let d = vx.cols();
                let gn = self.value(*gain).data();
                let mut dx = vec![0.0; vx.numel()];
                let mut dgain = vec![0.0; d];
                for ((row, gy), dxr) in vx.data().chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                    let r = rms(row);
                    let mut s = 0.0;
                    for j in 0..d {
                        dgain[j] += gy[j] * row[j] / r;
                        s += gy[j] * gn[j] * row[j];
                    }
                    let k = s / (d as f64 * r * r * r);
                    for j in 0..d {
                        dxr[j] = gy[j] * gn[j] / r - row[j] * k;
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *gain, dgain);
            }
            Op::Embedding { table, ids } => {
                let vt = self.value(*table);
                let d = vt.cols();
                let mut dt = vec![0.0; vt.numel()];
                for (&id, gy) in ids.iter().zip(g.chunks(d)) {
                    for (t, v) in dt[id * d..(id + 1) * d].iter_mut().zip(gy) {
                        *t += v;
                    }
                }
                self.acc(grads, *table, dt);
            }
            Op::CrossEntropy { logits, targets, mask } => {
                let vl = self.value(*logits);
                let v = vl.cols();
                let count = mask.iter().filter(|&&m| m).count() as f64;
                let scale = g[0] / count;
                let mut dl = vec![0.0; vl.numel()];
                for (i, (&y, &m)) in targets.iter().zip(mask).enumerate() {
                    if !m {
                        continue;
                    }
                    let row = &mut dl[i * v..(i + 1) * v];
                    row.copy_from_slice(vl.row(i));
                    kernels::softmax_rows(row, v, false);
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|x| *x *= scale);
                }
                self.acc(grads, *logits, dl);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.acc(grads, *x, vec![g[0]; n]);
            }
            Op::Reshape(x) => self.acc(grads, *x, g.to_vec()),
            Op::SliceCols { x, start } => {
                let vx = self.value(*x);
                let (c, len) = (vx.cols(), out.cols());
                let mut dx = vec![0.0; vx.numel()];
                for (drow, grow) in dx.chunks_mut(c).zip(g.chunks(len)) {
                    drow[*start..start + len].copy_from_slice(grow);
                }
                self.acc(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.needs(p) {
                        let dp: Vec<f64> = g
                            .chunks(total)
                            .flat_map(|row| row[offset..offset + w].iter().copied())
                            .collect();
                        self.acc(grads, p, dp);
                    }
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let vx = self.value(*x);
                let c = vx.cols();
                let mut dx = vec![0.0; vx.numel()];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                self.acc(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.needs(p) {
                        self.acc(grads, p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::MeanRows(x) => {
                let vx = self.value(*x);
                let r = vx.rows() as f64;
                let dx: Vec<f64> = (0..vx.rows()).flat_map(|_| g.iter().map(|v| v / r)).collect();
                self.acc(grads, *x, dx);
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Like `acc`, but sums the delta down to one element when `v` was broadcast.
    fn acc_broadcast(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if self.value(v).numel() == 1 && delta.len() != 1 {
            self.acc(grads, v, vec![delta.iter().sum()]);
        } else {
            self.acc(grads, v, delta);
        }
    }
}

fn column_sums(g: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in g.chunks(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

fn layer_norm_stats(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + NORM_EPS).sqrt())
}

fn rms(row: &[f64]) -> f64 {
    (row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64 + NORM_EPS).sqrt()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
