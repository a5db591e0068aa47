//! Tape-based reverse-mode differentiation.
//!
//! Every differentiable operation is a method on [`Tape`]. Results are [`Var`]
//! handles that share their value through `Rc`; when any input participates in
//! differentiation, the tape appends a node describing how to route the output
//! gradient back to the inputs. Nodes are appended in evaluation order, so a
//! reverse sweep over the node list is a valid topological replay.
//!
//! Parameters enter the graph through [`Tape::param`], which deduplicates by
//! tensor identity so a parameter used several times (e.g. once per batch
//! item) owns a single leaf. [`Gradients::for_tensor`] maps the accumulated
//! leaf gradients back onto the same tensors.
//!
//! A tape built with [`Tape::inference`] records nothing; operations still
//! compute values but keep no saved state, which lets long-sequence
//! attention run in `O(T)` memory.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::tensor::{
    dot, expect_rank, gemm_acc, gemm_nt_acc, gemm_tn_acc, Result, Tensor, TensorError,
};

#[derive(Clone)]
pub struct Var {
    value: Rc<Tensor>,
    id: Option<usize>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(self.shape().to_vec(), self.data().to_vec())
    }

    /// Whether gradients flow through this value.
    pub fn tracked(&self) -> bool {
        self.id.is_some()
    }

    pub fn item(&self) -> f64 {
        self.data()[0]
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("id", &self.id)
            .finish()
    }
}

/// Binary pointwise operators with identical-shape operands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pointwise {
    Add,
    Sub,
    Mul,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Pointwise(Pointwise, Var, Var),
    Scale(Var, f64),
    ScalarMul { s: Var, x: Var },
    RepeatRows(Var),
    SumAll(Var),
    MeanRows(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    MulConst { x: Var, c: Rc<Vec<f64>> },
    DwConv1d { x: Var, kernel: Var, bias: Var },
    Conv2d { x: Var, w: Var, b: Var, stride: usize },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        scale: f64,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Pointwise(Pointwise::Add, ..) => "add",
            Op::Pointwise(Pointwise::Sub, ..) => "sub",
            Op::Pointwise(Pointwise::Mul, ..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScalarMul { .. } => "scalar_mul",
            Op::RepeatRows(_) => "repeat_rows",
            Op::SumAll(_) => "sum",
            Op::MeanRows(_) => "mean_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::Reshape(_) => "reshape",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::MulConst { .. } => "mul_const",
            Op::DwConv1d { .. } => "depthwise_conv1d",
            Op::Conv2d { .. } => "conv2d",
            Op::Attention { .. } => "scaled_dot_attention",
        }
    }
}

struct Node {
    op: Op,
    out: Rc<Tensor>,
}

/// Hook for corrupting one backward rule; exists so the gradient checker's
/// negative control can prove it detects a broken rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corruption {
    pub op: &'static str,
    pub factor: f64,
}

pub struct Tape {
    recording: bool,
    nodes: RefCell<Vec<Node>>,
    leaves: RefCell<HashMap<usize, Var>>,
    corruption: Option<Corruption>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            recording: true,
            nodes: RefCell::new(Vec::new()),
            leaves: RefCell::new(HashMap::new()),
            corruption: None,
        }
    }

    /// A tape that evaluates without recording anything.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    /// Scales the input gradients produced by the named op's backward rule.
    pub fn with_corruption(mut self, corruption: Corruption) -> Self {
        self.corruption = Some(corruption);
        self
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Non-differentiable input.
    pub fn constant(&self, t: Tensor) -> Var {
        Var {
            value: Rc::new(strip(t)),
            id: None,
        }
    }

    /// Differentiable input that is not a registered parameter.
    pub fn leaf(&self, t: Tensor) -> Var {
        let value = Rc::new(strip(t));
        if !self.recording {
            return Var { value, id: None };
        }
        let id = self.push_node(Op::Leaf, value.clone());
        Var {
            value,
            id: Some(id),
        }
    }

    /// Registers a parameter tensor. Repeated calls with the same tensor return
    /// the same leaf. The tensor must stay in place until gradients are read back.
    pub fn param(&self, t: &Tensor) -> Var {
        let key = t as *const Tensor as usize;
        if let Some(v) = self.leaves.borrow().get(&key) {
            return v.clone();
        }
        let value = Rc::new(Tensor::from_parts(t.shape().to_vec(), t.data().to_vec()));
        let var = if self.recording && t.requires_grad {
            let id = self.push_node(Op::Leaf, value.clone());
            Var {
                value,
                id: Some(id),
            }
        } else {
            Var { value, id: None }
        };
        self.leaves.borrow_mut().insert(key, var.clone());
        var
    }

    fn push_node(&self, op: Op, out: Rc<Tensor>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, out });
        nodes.len() - 1
    }

    fn result(&self, value: Tensor, inputs: &[&Var], op: impl FnOnce() -> Op) -> Var {
        let value = Rc::new(value);
        if self.recording && inputs.iter().any(|v| v.id.is_some()) {
            let id = self.push_node(op(), value.clone());
            Var {
                value,
                id: Some(id),
            }
        } else {
            Var { value, id: None }
        }
    }

    fn needs_grad(&self, inputs: &[&Var]) -> bool {
        self.recording && inputs.iter().any(|v| v.id.is_some())
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        expect_rank("matmul", a.value(), 2)?;
        expect_rank("matmul", b.value(), 2)?;
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (k2, n) = (b.shape()[0], b.shape()[1]);
        if k != k2 {
            return Err(shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(a.data(), b.data(), &mut out, m, k, n);
        Ok(self.result(Tensor::from_parts(vec![m, n], out), &[a, b], || {
            Op::MatMul(a.clone(), b.clone())
        }))
    }

    pub fn transpose(&self, a: &Var) -> Result<Var> {
        let t = a.value().transpose2()?;
        Ok(self.result(t, &[a], || Op::Transpose(a.clone())))
    }

    pub fn pointwise(&self, op: Pointwise, a: &Var, b: &Var) -> Result<Var> {
        if a.shape() != b.shape() {
            let name = match op {
                Pointwise::Add => "add",
                Pointwise::Sub => "sub",
                Pointwise::Mul => "mul",
            };
            return Err(shape_err(name, a, b));
        }
        let f: fn(f64, f64) -> f64 = match op {
            Pointwise::Add => |x, y| x + y,
            Pointwise::Sub => |x, y| x - y,
            Pointwise::Mul => |x, y| x * y,
        };
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(a.shape().to_vec(), data);
        Ok(self.result(t, &[a, b], || Op::Pointwise(op, a.clone(), b.clone())))
    }

    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        self.pointwise(Pointwise::Add, a, b)
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        self.pointwise(Pointwise::Sub, a, b)
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        self.pointwise(Pointwise::Mul, a, b)
    }

    /// Multiplication by a constant.
    pub fn scale(&self, a: &Var, c: f64) -> Var {
        let data = a.data().iter().map(|x| x * c).collect();
        let t = Tensor::from_parts(a.shape().to_vec(), data);
        self.result(t, &[a], || Op::Scale(a.clone(), c))
    }

    /// Scalar-tensor product `s · x` where `s` holds exactly one element.
    pub fn scalar_mul(&self, s: &Var, x: &Var) -> Result<Var> {
        if s.value().numel() != 1 {
            return Err(shape_err("scalar_mul", s, x));
        }
        let c = s.item();
        let data = x.data().iter().map(|v| c * v).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.result(t, &[s, x], || Op::ScalarMul {
            s: s.clone(),
            x: x.clone(),
        }))
    }

    /// Elementwise product with a constant buffer of identical length.
    pub fn mul_const(&self, x: &Var, c: Rc<Vec<f64>>) -> Result<Var> {
        if c.len() != x.value().numel() {
            return Err(TensorError::Shape {
                op: "mul_const",
                lhs: x.shape().to_vec(),
                rhs: vec![c.len()],
            });
        }
        let data = x.data().iter().zip(c.iter()).map(|(a, b)| a * b).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.result(t, &[x], || Op::MulConst { x: x.clone(), c }))
    }

    /// Tiles a single row (`[d]` or `[1×d]`) into `[rows×d]`.
    pub fn repeat_rows(&self, v: &Var, rows: usize) -> Result<Var> {
        let d = match v.shape() {
            [d] => *d,
            [1, d] => *d,
            _ => {
                return Err(TensorError::Rank {
                    op: "repeat_rows",
                    expected: 1,
                    shape: v.shape().to_vec(),
                })
            }
        };
        let mut data = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            data.extend_from_slice(v.data());
        }
        let t = Tensor::from_parts(vec![rows, d], data);
        Ok(self.result(t, &[v], || Op::RepeatRows(v.clone())))
    }

    /// `x + bias` applied to every row, with `bias` of shape `[cols]`.
    pub fn add_row(&self, x: &Var, bias: &Var) -> Result<Var> {
        expect_rank("add_row", x.value(), 2)?;
        if bias.value().numel() != x.shape()[1] {
            return Err(shape_err("add_row", x, bias));
        }
        let tiled = self.repeat_rows(bias, x.shape()[0])?;
        self.add(x, &tiled)
    }

    pub fn sum(&self, a: &Var) -> Var {
        let s: f64 = a.data().iter().sum();
        self.result(Tensor::scalar(s), &[a], || Op::SumAll(a.clone()))
    }

    /// Column means of a 2-D tensor, shape `[1×d]`.
    pub fn mean_rows(&self, a: &Var) -> Result<Var> {
        expect_rank("mean_rows", a.value(), 2)?;
        let (t, d) = (a.shape()[0], a.shape()[1]);
        let mut out = vec![0.0; d];
        for row in a.data().chunks(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / t as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.result(Tensor::from_parts(vec![1, d], out), &[a], || {
            Op::MeanRows(a.clone())
        }))
    }

    pub fn reshape(&self, a: &Var, shape: &[usize]) -> Result<Var> {
        let t = a.value().reshape(shape)?;
        Ok(self.result(t, &[a], || Op::Reshape(a.clone())))
    }

    // ---- split / concat -------------------------------------------------

    pub fn slice_cols(&self, x: &Var, start: usize, len: usize) -> Result<Var> {
        expect_rank("slice_cols", x.value(), 2)?;
        let (t, n) = (x.shape()[0], x.shape()[1]);
        if start + len > n {
            return Err(TensorError::Shape {
                op: "slice_cols",
                lhs: x.shape().to_vec(),
                rhs: vec![start, start + len],
            });
        }
        let mut data = Vec::with_capacity(t * len);
        for row in x.data().chunks(n) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::from_parts(vec![t, len], data);
        Ok(self.result(out, &[x], || Op::SliceCols {
            x: x.clone(),
            start,
        }))
    }

    /// Splits the feature dimension into two equal halves.
    pub fn split_half(&self, x: &Var) -> Result<(Var, Var)> {
        expect_rank("split_half", x.value(), 2)?;
        let n = x.shape()[1];
        if n % 2 != 0 {
            return Err(TensorError::OddSplit {
                op: "split_half",
                size: n,
            });
        }
        Ok((self.slice_cols(x, 0, n / 2)?, self.slice_cols(x, n / 2, n / 2)?))
    }

    /// Concatenates 2-D tensors along the feature dimension.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_cols of zero tensors".into()))?;
        let t = first.shape()[0];
        for p in parts {
            expect_rank("concat_cols", p.value(), 2)?;
            if p.shape()[0] != t {
                return Err(shape_err("concat_cols", first, p));
            }
        }
        let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
        let mut data = Vec::with_capacity(t * total);
        for i in 0..t {
            for p in parts {
                data.extend_from_slice(p.value().row(i));
            }
        }
        let refs: Vec<&Var> = parts.iter().collect();
        let out = Tensor::from_parts(vec![t, total], data);
        Ok(self.result(out, &refs, || Op::ConcatCols(parts.to_vec())))
    }

    // ---- nonlinearities -------------------------------------------------

    /// Row-wise softmax over the last axis, computed with max subtraction.
    pub fn softmax(&self, x: &Var) -> Var {
        let n = x.value().cols();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::from_parts(x.shape().to_vec(), out);
        self.result(t, &[x], || Op::Softmax(x.clone()))
    }

    pub fn log_softmax(&self, x: &Var) -> Var {
        let n = x.value().cols();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::from_parts(x.shape().to_vec(), out);
        self.result(t, &[x], || Op::LogSoftmax(x.clone()))
    }

    /// Exact GeLU, `x · Φ(x)`.
    pub fn gelu(&self, x: &Var) -> Var {
        let data = x.data().iter().map(|&v| v * std_normal_cdf(v)).collect();
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        self.result(t, &[x], || Op::Gelu(x.clone()))
    }

    /// Per-row normalization over the last axis followed by `gamma`/`beta`.
    pub fn layer_norm(&self, x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        expect_rank("layer_norm", x.value(), 2)?;
        let d = x.shape()[1];
        if gamma.value().numel() != d {
            return Err(shape_err("layer_norm", x, gamma));
        }
        if beta.value().numel() != d {
            return Err(shape_err("layer_norm", x, beta));
        }
        let rows = x.shape()[0];
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        let (g, b) = (gamma.data(), beta.data());
        for i in 0..rows {
            let row = x.value().row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[i * d + j] = h;
                out[i * d + j] = g[j] * h + b[j];
            }
        }
        let t = Tensor::from_parts(vec![rows, d], out);
        Ok(self.result(t, &[x, gamma, beta], || Op::LayerNorm {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            xhat,
            inv_std,
        }))
    }

    // ---- convolutions ---------------------------------------------------

    /// Per-channel 1-D convolution along time with "same" zero padding.
    /// `x: [T×C]`, `kernel: [C×K]` with odd `K`, `bias: [C]`.
    pub fn depthwise_conv1d(&self, x: &Var, kernel: &Var, bias: &Var) -> Result<Var> {
        expect_rank("depthwise_conv1d", x.value(), 2)?;
        expect_rank("depthwise_conv1d", kernel.value(), 2)?;
        let (t, c) = (x.shape()[0], x.shape()[1]);
        let (kc, k) = (kernel.shape()[0], kernel.shape()[1]);
        if kc != c || bias.value().numel() != c {
            return Err(shape_err("depthwise_conv1d", x, kernel));
        }
        if k % 2 == 0 {
            return Err(TensorError::Contract(format!(
                "depthwise_conv1d: kernel width must be odd, got {k}"
            )));
        }
        let pad = (k - 1) / 2;
        let (xd, w, b) = (x.data(), kernel.data(), bias.data());
        let mut out = vec![0.0; t * c];
        for ti in 0..t {
            let orow = &mut out[ti * c..(ti + 1) * c];
            orow.copy_from_slice(b);
            for kk in 0..k {
                let src = ti + kk;
                if src < pad || src - pad >= t {
                    continue;
                }
                let xrow = &xd[(src - pad) * c..(src - pad + 1) * c];
                for ch in 0..c {
                    orow[ch] += w[ch * k + kk] * xrow[ch];
                }
            }
        }
        let out = Tensor::from_parts(vec![t, c], out);
        Ok(self.result(out, &[x, kernel, bias], || Op::DwConv1d {
            x: x.clone(),
            kernel: kernel.clone(),
            bias: bias.clone(),
        }))
    }

    /// Valid (unpadded) strided 2-D convolution in channel-last layout.
    /// `x: [H×W×Cin]`, `w: [Cout×kh×kw×Cin]`, `b: [Cout]` → `[H'×W'×Cout]`.
    pub fn conv2d(&self, x: &Var, w: &Var, b: &Var, stride: usize) -> Result<Var> {
        expect_rank("conv2d", x.value(), 3)?;
        expect_rank("conv2d", w.value(), 4)?;
        let [h, wd, cin] = [x.shape()[0], x.shape()[1], x.shape()[2]];
        let [cout, kh, kw, wcin] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
        if wcin != cin || b.value().numel() != cout {
            return Err(shape_err("conv2d", x, w));
        }
        if h < kh || wd < kw || stride == 0 {
            return Err(shape_err("conv2d", x, w));
        }
        let ho = (h - kh) / stride + 1;
        let wo = (wd - kw) / stride + 1;
        let (xd, wdata, bd) = (x.data(), w.data(), b.data());
        let mut out = vec![0.0; ho * wo * cout];
        let patch = kh * kw * cin;
        let mut buf = vec![0.0; patch];
        for i in 0..ho {
            for j in 0..wo {
                gather_patch(xd, &mut buf, i * stride, j * stride, wd, cin, kh, kw);
                let orow = &mut out[(i * wo + j) * cout..(i * wo + j + 1) * cout];
                for o in 0..cout {
                    orow[o] = bd[o] + dot(&wdata[o * patch..(o + 1) * patch], &buf);
                }
            }
        }
        let t = Tensor::from_parts(vec![ho, wo, cout], out);
        Ok(self.result(t, &[x, w, b], || Op::Conv2d {
            x: x.clone(),
            w: w.clone(),
            b: b.clone(),
            stride,
        }))
    }

    // ---- attention ------------------------------------------------------

    /// `softmax(scale · q kᵀ) v` as one fused node.
    ///
    /// When `keep_probs` is set the row-stochastic weight matrix is returned
    /// alongside the output. Without recording or a probe request, rows are
    /// computed one at a time and the `T×T` matrix is never materialized.
    pub fn scaled_dot_attention(
        &self,
        q: &Var,
        k: &Var,
        v: &Var,
        scale: f64,
        keep_probs: bool,
    ) -> Result<(Var, Option<Tensor>)> {
        for t in [q, k, v] {
            expect_rank("scaled_dot_attention", t.value(), 2)?;
        }
        let (tq, dk) = (q.shape()[0], q.shape()[1]);
        let (tk, dk2) = (k.shape()[0], k.shape()[1]);
        let (tv, dv) = (v.shape()[0], v.shape()[1]);
        if dk != dk2 {
            return Err(shape_err("scaled_dot_attention", q, k));
        }
        if tk != tv {
            return Err(shape_err("scaled_dot_attention", k, v));
        }
        let store = self.needs_grad(&[q, k, v]) || keep_probs;
        let mut probs = if store { vec![0.0; tq * tk] } else { Vec::new() };
        let mut row = vec![0.0; tk];
        let mut out = vec![0.0; tq * dv];
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        for i in 0..tq {
            let qrow = &qd[i * dk..(i + 1) * dk];
            for (j, r) in row.iter_mut().enumerate() {
                *r = scale * dot(qrow, &kd[j * dk..(j + 1) * dk]);
            }
            softmax_in_place(&mut row);
            gemm_acc(&row, vd, &mut out[i * dv..(i + 1) * dv], 1, tk, dv);
            if store {
                probs[i * tk..(i + 1) * tk].copy_from_slice(&row);
            }
        }
        let trace = keep_probs.then(|| Tensor::from_parts(vec![tq, tk], probs.clone()));
        let t = Tensor::from_parts(vec![tq, dv], out);
        let var = self.result(t, &[q, k, v], || Op::Attention {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            scale,
            probs,
        });
        Ok((var, trace))
    }

    // ---- backward -------------------------------------------------------

    /// Propagates `d loss / d ·` to every tracked leaf.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if loss.value().numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if let Some(id) = loss.id {
            grads[id] = Some(vec![1.0]);
            for idx in (0..=id).rev() {
                let Some(g) = grads[idx].take() else { continue };
                let node = &nodes[idx];
                if let Op::Leaf = node.op {
                    grads[idx] = Some(g);
                    continue;
                }
                let factor = match self.corruption {
                    Some(c) if c.op == node.op.name() => c.factor,
                    _ => 1.0,
                };
                let g = if factor != 1.0 {
                    g.iter().map(|v| v * factor).collect()
                } else {
                    g
                };
                backprop(node, &g, &mut grads);
            }
        }
        let leaves = self
            .leaves
            .borrow()
            .iter()
            .filter_map(|(k, v)| v.id.map(|id| (*k, id)))
            .collect();
        Ok(Gradients { grads, leaves })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    leaves: HashMap<usize, usize>,
}

impl Gradients {
    /// Gradient of a leaf created on the same tape. `None` if unreachable.
    pub fn wrt(&self, v: &Var) -> Option<&[f64]> {
        v.id.and_then(|id| self.grads.get(id)?.as_deref())
    }

    /// Gradient for a parameter registered via [`Tape::param`].
    pub fn for_tensor(&self, t: &Tensor) -> Option<&[f64]> {
        let id = self.leaves.get(&(t as *const Tensor as usize))?;
        self.grads.get(*id)?.as_deref()
    }

    /// Stores the gradient on the tensor; detached parameters receive zeros.
    pub fn assign(&self, t: &mut Tensor) {
        let g = self
            .for_tensor(t)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        t.grad = Some(g);
    }
}

fn strip(mut t: Tensor) -> Tensor {
    t.requires_grad = false;
    t.grad = None;
    t
}

fn shape_err(op: &'static str, a: &Var, b: &Var) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    let inv = 1.0 / s;
    row.iter_mut().for_each(|v| *v *= inv);
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[allow(clippy::too_many_arguments)]
fn gather_patch(
    x: &[f64],
    buf: &mut [f64],
    i0: usize,
    j0: usize,
    width: usize,
    cin: usize,
    kh: usize,
    kw: usize,
) {
    for p in 0..kh {
        let src = ((i0 + p) * width + j0) * cin;
        buf[p * kw * cin..(p + 1) * kw * cin].copy_from_slice(&x[src..src + kw * cin]);
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], v: &Var) -> Option<&'a mut Vec<f64>> {
    let id = v.id?;
    let n = v.value().numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop(node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if let Some(ga) = slot(grads, a) {
                gemm_nt_acc(g, b.data(), ga, m, n, k);
            }
            if let Some(gb) = slot(grads, b) {
                gemm_tn_acc(a.data(), g, gb, m, k, n);
            }
        }
        Op::Transpose(a) => {
            if let Some(ga) = slot(grads, a) {
                let (m, n) = (a.shape()[0], a.shape()[1]);
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            }
        }
        Op::Pointwise(op, a, b) => match op {
            Pointwise::Add | Pointwise::Sub => {
                if let Some(ga) = slot(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                let sign = if *op == Pointwise::Add { 1.0 } else { -1.0 };
                if let Some(gb) = slot(grads, b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                }
            }
            Pointwise::Mul => {
                if let Some(ga) = slot(grads, a) {
                    for ((x, y), bv) in ga.iter_mut().zip(g).zip(b.data()) {
                        *x += y * bv;
                    }
                }
                if let Some(gb) = slot(grads, b) {
                    for ((x, y), av) in gb.iter_mut().zip(g).zip(a.data()) {
                        *x += y * av;
                    }
                }
            }
        },
        Op::Scale(a, c) => {
            if let Some(ga) = slot(grads, a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
        }
        Op::ScalarMul { s, x } => {
            if let Some(gs) = slot(grads, s) {
                gs[0] += dot(g, x.data());
            }
            let c = s.item();
            if let Some(gx) = slot(grads, x) {
                gx.iter_mut().zip(g).for_each(|(a, y)| *a += c * y);
            }
        }
        Op::RepeatRows(v) => {
            if let Some(gv) = slot(grads, v) {
                let d = gv.len();
                for row in g.chunks(d) {
                    gv.iter_mut().zip(row).for_each(|(a, y)| *a += y);
                }
            }
        }
        Op::SumAll(a) => {
            if let Some(ga) = slot(grads, a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::MeanRows(a) => {
            if let Some(ga) = slot(grads, a) {
                let (t, d) = (a.shape()[0], a.shape()[1]);
                let inv = 1.0 / t as f64;
                for row in ga.chunks_mut(d) {
                    row.iter_mut().zip(g).for_each(|(x, y)| *x += y * inv);
                }
            }
        }
        Op::SliceCols { x, start } => {
            if let Some(gx) = slot(grads, x) {
                let n = x.shape()[1];
                let len = node.out.shape()[1];
                for (i, grow) in g.chunks(len).enumerate() {
                    let dst = &mut gx[i * n + start..i * n + start + len];
                    dst.iter_mut().zip(grow).for_each(|(a, y)| *a += y);
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.out.shape()[1];
            let mut offset = 0;
            for p in parts {
                let w = p.shape()[1];
                if let Some(gp) = slot(grads, p) {
                    for (i, row) in gp.chunks_mut(w).enumerate() {
                        let src = &g[i * total + offset..i * total + offset + w];
                        row.iter_mut().zip(src).for_each(|(a, y)| *a += y);
                    }
                }
                offset += w;
            }
        }
        Op::Reshape(a) => {
            if let Some(ga) = slot(grads, a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Op::Softmax(a) => {
            if let Some(ga) = slot(grads, a) {
                let n = node.out.cols();
                for ((grow, yrow), arow) in g.chunks(n).zip(node.out.data().chunks(n)).zip(ga.chunks_mut(n)) {
                    let s = dot(grow, yrow);
                    for j in 0..n {
                        arow[j] += yrow[j] * (grow[j] - s);
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            if let Some(ga) = slot(grads, a) {
                let n = node.out.cols();
                for ((grow, yrow), arow) in g.chunks(n).zip(node.out.data().chunks(n)).zip(ga.chunks_mut(n)) {
                    let s: f64 = grow.iter().sum();
                    for j in 0..n {
                        arow[j] += grow[j] - yrow[j].exp() * s;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let d = x.shape()[1];
            if let Some(gg) = slot(grads, gamma) {
                for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += grow[j] * hrow[j];
                    }
                }
            }
            if let Some(gb) = slot(grads, beta) {
                for grow in g.chunks(d) {
                    gb.iter_mut().zip(grow).for_each(|(a, y)| *a += y);
                }
            }
            let gam = gamma.data();
            if let Some(gx) = slot(grads, x) {
                let inv_d = 1.0 / d as f64;
                let mut gh = vec![0.0; d];
                for (i, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    for j in 0..d {
                        gh[j] = grow[j] * gam[j];
                    }
                    let sum_gh: f64 = gh.iter().sum();
                    let sum_ghh = dot(&gh, hrow);
                    let row = &mut gx[i * d..(i + 1) * d];
                    for j in 0..d {
                        row[j] += inv_std[i] * (gh[j] - inv_d * sum_gh - hrow[j] * inv_d * sum_ghh);
                    }
                }
            }
        }
        Op::Gelu(a) => {
            if let Some(ga) = slot(grads, a) {
                for ((x, y), v) in ga.iter_mut().zip(g).zip(a.data()) {
                    *x += y * (std_normal_cdf(*v) + v * std_normal_pdf(*v));
                }
            }
        }
        Op::MulConst { x, c } => {
            if let Some(gx) = slot(grads, x) {
                for ((a, y), cv) in gx.iter_mut().zip(g).zip(c.iter()) {
                    *a += y * cv;
                }
            }
        }
        Op::DwConv1d { x, kernel, bias } => {
            let (t, c) = (x.shape()[0], x.shape()[1]);
            let k = kernel.shape()[1];
            let pad = (k - 1) / 2;
            if let Some(gb) = slot(grads, bias) {
                for grow in g.chunks(c) {
                    gb.iter_mut().zip(grow).for_each(|(a, y)| *a += y);
                }
            }
            if let Some(gw) = slot(grads, kernel) {
                let xd = x.data();
                for ti in 0..t {
                    for kk in 0..k {
                        let src = ti + kk;
                        if src < pad || src - pad >= t {
                            continue;
                        }
                        let s = src - pad;
                        for ch in 0..c {
                            gw[ch * k + kk] += g[ti * c + ch] * xd[s * c + ch];
                        }
                    }
                }
            }
            let w = kernel.data();
            if let Some(gx) = slot(grads, x) {
                for ti in 0..t {
                    for kk in 0..k {
                        let src = ti + kk;
                        if src < pad || src - pad >= t {
                            continue;
                        }
                        let s = src - pad;
                        for ch in 0..c {
                            gx[s * c + ch] += g[ti * c + ch] * w[ch * k + kk];
                        }
                    }
                }
            }
        }
        Op::Conv2d { x, w, b, stride } => {
            let [_, wd, cin] = [x.shape()[0], x.shape()[1], x.shape()[2]];
            let [cout, kh, kw, _] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
            let [ho, wo] = [node.out.shape()[0], node.out.shape()[1]];
            let patch = kh * kw * cin;
            if let Some(gb) = slot(grads, b) {
                for grow in g.chunks(cout) {
                    gb.iter_mut().zip(grow).for_each(|(a, y)| *a += y);
                }
            }
            if let Some(gw) = slot(grads, w) {
                let mut buf = vec![0.0; patch];
                for i in 0..ho {
                    for j in 0..wo {
                        gather_patch(x.data(), &mut buf, i * stride, j * stride, wd, cin, kh, kw);
                        let grow = &g[(i * wo + j) * cout..(i * wo + j + 1) * cout];
                        for (o, &go) in grow.iter().enumerate() {
                            if go == 0.0 {
                                continue;
                            }
                            let dst = &mut gw[o * patch..(o + 1) * patch];
                            dst.iter_mut().zip(&buf).for_each(|(a, v)| *a += go * v);
                        }
                    }
                }
            }
            let wdata = w.data();
            if let Some(gx) = slot(grads, x) {
                let mut gpatch = vec![0.0; patch];
                for i in 0..ho {
                    for j in 0..wo {
                        gpatch.iter_mut().for_each(|v| *v = 0.0);
                        let grow = &g[(i * wo + j) * cout..(i * wo + j + 1) * cout];
                        for (o, &go) in grow.iter().enumerate() {
                            let src = &wdata[o * patch..(o + 1) * patch];
                            gpatch.iter_mut().zip(src).for_each(|(a, v)| *a += go * v);
                        }
                        for p in 0..kh {
                            let dst = ((i * stride + p) * wd + j * stride) * cin;
                            let seg = &mut gx[dst..dst + kw * cin];
                            let srcp = &gpatch[p * kw * cin..(p + 1) * kw * cin];
                            seg.iter_mut().zip(srcp).for_each(|(a, v)| *a += v);
                        }
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            scale,
            probs,
        } => {
            let (tq, dk) = (q.shape()[0], q.shape()[1]);
            let (tk, dv) = (k.shape()[0], v.shape()[1]);
            // dP = G Vᵀ, dS = P ⊙ (dP − rowsum(dP ⊙ P))
            let mut ds = vec![0.0; tq * tk];
            gemm_nt_acc(g, v.data(), &mut ds, tq, dv, tk);
            for (drow, prow) in ds.chunks_mut(tk).zip(probs.chunks(tk)) {
                let s = dot(drow, prow);
                for j in 0..tk {
                    drow[j] = prow[j] * (drow[j] - s);
                }
            }
            if let Some(gv) = slot(grads, v) {
                gemm_tn_acc(probs, g, gv, tq, tk, dv);
            }
            ds.iter_mut().for_each(|x| *x *= scale);
            if let Some(gq) = slot(grads, q) {
                gemm_acc(&ds, k.data(), gq, tq, tk, dk);
            }
            if let Some(gk) = slot(grads, k) {
                gemm_tn_acc(&ds, q.data(), gk, tq, tk, dk);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2));
        let m = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        assert_eq!(tape.matmul(&i2, &m).unwrap().data(), m.data());

        let a = tape.constant(t(&[&[1.0, 2.0]]));
        let b = tape.constant(t(&[&[3.0], &[4.0]]));
        assert_eq!(tape.matmul(&a, &b).unwrap().data(), &[11.0]);

        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let any = tape.constant(Tensor::full(&[3, 4], 7.5));
        let p = tape.matmul(&z, &any).unwrap();
        assert_eq!(p.shape(), &[2, 4]);
        assert!(p.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn pointwise_examples() {
        let tape = Tape::new();
        let v = |d: &[f64]| tape.constant(Tensor::new(&[d.len()], d.to_vec()).unwrap());
        assert_eq!(tape.mul(&v(&[1., 2., 3.]), &v(&[0., 0., 0.])).unwrap().data(), &[0., 0., 0.]);
        assert_eq!(tape.add(&v(&[1., 2.]), &v(&[3., 4.])).unwrap().data(), &[4., 6.]);
        assert_eq!(tape.mul(&v(&[2., 3.]), &v(&[4., 5.])).unwrap().data(), &[8., 15.]);
        assert!(tape.add(&v(&[1., 2.]), &v(&[1., 2., 3.])).is_err());
    }

    #[test]
    fn split_concat_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[&[1.0, 2.0, 3.0, 4.0]]));
        let (a, b) = tape.split_half(&x).unwrap();
        assert_eq!(a.data(), &[1.0, 2.0]);
        assert_eq!(b.data(), &[3.0, 4.0]);
        let back = tape.concat_cols(&[a, b]).unwrap();
        assert!(back.value().bit_eq(x.value()));

        let c = tape
            .concat_cols(&[tape.constant(t(&[&[1.0]])), tape.constant(t(&[&[2.0]]))])
            .unwrap();
        assert_eq!(c.data(), &[1.0, 2.0]);

        let odd = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            tape.split_half(&odd),
            Err(TensorError::OddSplit { size: 3, .. })
        ));
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]));
        let loss = tape.sum(&x);
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.wrt(&x).unwrap(), &[1.0; 6]);

        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum(&sq);
        assert_eq!(tape.backward(&loss).unwrap().wrt(&x).unwrap(), &[2.0, 4.0]);

        let tape = Tape::new();
        let x = tape.leaf(t(&[&[0.3, -1.2, 2.0]]));
        let loss = tape.sum(&tape.softmax(&x));
        let g = tape.backward(&loss).unwrap();
        assert!(g.wrt(&x).unwrap().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(&x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn detached_param_gets_zero_gradient() {
        let tape = Tape::new();
        let used = Tensor::ones(&[2]).with_grad();
        let mut unused = Tensor::ones(&[3]).with_grad();
        let u = tape.param(&used);
        let _ = tape.param(&unused);
        let loss = tape.sum(&u);
        let g = tape.backward(&loss).unwrap();
        g.assign(&mut unused);
        assert_eq!(unused.grad.as_deref(), Some(&[0.0, 0.0, 0.0][..]));
    }

    #[test]
    fn param_is_deduplicated() {
        let tape = Tape::new();
        let p = Tensor::new(&[1], vec![3.0]).unwrap().with_grad();
        let a = tape.param(&p);
        let b = tape.param(&p);
        let prod = tape.mul(&a, &b).unwrap();
        let loss = tape.sum(&prod);
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.for_tensor(&p).unwrap(), &[6.0]);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::inference();
        let p = Tensor::ones(&[2, 2]).with_grad();
        let w = tape.param(&p);
        let x = tape.leaf(Tensor::ones(&[1, 2]));
        let y = tape.matmul(&x, &w).unwrap();
        assert!(!y.tracked());
        assert!(tape.is_empty());
    }

    #[test]
    fn streaming_attention_matches_recorded() {
        let q = t(&[&[0.1, 0.2], &[0.5, -0.3], &[1.0, 0.0]]);
        let k = t(&[&[0.2, 0.1], &[-0.4, 0.3], &[0.0, 0.9]]);
        let v = t(&[&[1.0], &[2.0], &[3.0]]);
        let rec = Tape::new();
        let (a, _) = rec
            .scaled_dot_attention(&rec.leaf(q.clone()), &rec.leaf(k.clone()), &rec.leaf(v.clone()), 0.7, false)
            .unwrap();
        let inf = Tape::inference();
        let (b, _) = inf
            .scaled_dot_attention(&inf.constant(q), &inf.constant(k), &inf.constant(v), 0.7, false)
            .unwrap();
        assert!(a.value().bit_eq(b.value()));
    }
}
