//! Reverse-mode automatic differentiation over a per-pass tape.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! return lightweight [`Var`] handles; [`Tape::backward`] walks the records in
//! reverse and leaves gradients on the leaves that asked for them. Tapes are
//! meant to be dropped after their backward pass.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::{gemm, Result, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// The operation kinds the tape knows how to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    MatMul,
    Transpose,
    Conv2d,
    Relu,
    GlobalAvgPool,
    Affine,
    L2Normalize,
    Concat,
    Slice,
    ReduceSum,
    ReduceMean,
    Log,
    Exp,
    Sqrt,
    Square,
    Softplus,
    Max,
    Scale,
    AddScalar,
    Gather,
    PairwiseSqDist,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dAttrs {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// Computed from inputs none of which require a gradient.
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        attrs: Conv2dAttrs,
    },
    Relu(usize),
    GlobalAvgPool(usize),
    Affine {
        x: usize,
        w: usize,
        b: usize,
    },
    L2Normalize {
        x: usize,
        norms: Vec<f64>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    ReduceSum(usize),
    ReduceMean(usize),
    Log(usize),
    Exp(usize),
    Sqrt(usize),
    Square(usize),
    Softplus(usize),
    Max(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Gather {
        x: usize,
        indices: Vec<usize>,
    },
    PairwiseSqDist(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Ordered record of one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn invalid(op: &'static str, t: &Tensor, reason: impl Into<String>) -> TensorError {
    TensorError::InvalidShape {
        op,
        shape: t.shape().to_vec(),
        reason: reason.into(),
    }
}

fn conv_out(size: usize, kernel: usize, attrs: Conv2dAttrs) -> Option<usize> {
    let padded = size + 2 * attrs.padding;
    if padded < kernel || attrs.stride == 0 {
        return None;
    }
    Some((padded - kernel) / attrs.stride + 1)
}

/// Geometry of a single-image convolution, shared by im2col and col2im.
#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Fills `cols` (rows × cols) with the receptive fields of `img` (C×H×W).
    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let ncols = self.cols();
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            dst[oy * self.ow + ox] = if iy < 0
                                || ix < 0
                                || iy >= self.h as isize
                                || ix >= self.w as isize
                            {
                                0.0
                            } else {
                                img[(ci * self.h + iy as usize) * self.w + ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatters column gradients back onto the image gradient.
    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let ncols = self.cols();
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            img[(ci * self.h + iy as usize) * self.w + ix as usize] +=
                                src[oy * self.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let g = slot.get_or_insert_with(|| vec![0.0; len]);
    f(g);
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Constant };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    /// Records an input tensor. Gradients are reported for leaves created
    /// with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let op = if requires_grad {
            Op::Leaf
        } else {
            Op::Constant
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let idx = self.index(v).expect("variable from another tape");
        &self.nodes[idx].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.index(v)
            .map(|i| self.nodes[i].requires_grad)
            .unwrap_or(false)
    }

    /// Gradient accumulated on a leaf by the last [`Tape::backward`].
    ///
    /// Leaves that require a gradient but were not reached get an all-zero
    /// gradient; other variables return `None`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        let idx = self.index(v).ok()?;
        self.nodes[idx].grad.as_deref()
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        make: impl FnOnce(usize) -> Op,
    ) -> Result<Var> {
        let xi = self.index(x)?;
        let src = &self.nodes[xi].value;
        let data: Vec<f64> = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.rg(&[xi]);
        Ok(self.push(value, make(xi), rg))
    }

    fn binary_same_shape(
        &mut self,
        a: Var,
        b: Var,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let (ta, tb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if ta.shape() != tb.shape() {
            return Err(mismatch(op_name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(value, make(ai, bi), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    /// Elementwise maximum. On ties the gradient flows to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "max", |x, y| if x >= y { x } else { y }, Op::Max)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v * c, |i| Op::Scale(i, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v + c, Op::AddScalar)
    }

    /// Rectifier; the subgradient at zero is zero.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::exp, Op::Exp)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v * v, Op::Square)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0) + (-v.abs()).exp().ln_1p(), Op::Softplus)
    }

    /// Natural logarithm; non-positive inputs are a domain error.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        if let Some(v) = self.nodes[xi].value.data().iter().find(|&&v| v <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("input {v}"),
            });
        }
        self.unary(x, f64::ln, Op::Log)
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        if let Some(v) = self.nodes[xi].value.data().iter().find(|&&v| v < 0.0) {
            return Err(TensorError::Domain {
                op: "sqrt",
                detail: format!("input {v}"),
            });
        }
        self.unary(x, f64::sqrt, Op::Sqrt)
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let (ta, tb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(value, Op::MatMul(ai, bi), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let t = &self.nodes[xi].value;
        if t.ndim() != 2 {
            return Err(invalid("transpose", t, "expected a 2-D tensor"));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        let rg = self.rg(&[xi]);
        Ok(self.push(value, Op::Transpose(xi), rg))
    }

    /// `x · wᵀ + b` for `x` (N×in), `w` (out×in), `b` (out).
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.index(x)?, self.index(w)?, self.index(b)?);
        let (tx, tw, tb) = (
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            &self.nodes[bi].value,
        );
        if tx.ndim() != 2 || tw.ndim() != 2 || tx.shape()[1] != tw.shape()[1] {
            return Err(mismatch("affine", tx, tw));
        }
        let (n, inp, out_dim) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
        if tb.shape() != [out_dim] {
            return Err(mismatch("affine", tw, tb));
        }
        let mut out = vec![0.0; n * out_dim];
        for row in out.chunks_mut(out_dim) {
            row.copy_from_slice(tb.data());
        }
        gemm(
            n,
            inp,
            out_dim,
            tx.data(),
            false,
            tw.data(),
            true,
            &mut out,
            true,
        );
        let value = Tensor::new(vec![n, out_dim], out)?;
        let rg = self.rg(&[xi, wi, bi]);
        Ok(self.push(
            value,
            Op::Affine {
                x: xi,
                w: wi,
                b: bi,
            },
            rg,
        ))
    }

    /// 2-D convolution (cross-correlation) of `x` (N×C×H×W) with `w`
    /// (O×C×kh×kw) plus bias `b` (O), with zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, attrs: Conv2dAttrs) -> Result<Var> {
        let (xi, wi, bi) = (self.index(x)?, self.index(w)?, self.index(b)?);
        let (tx, tw, tb) = (
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            &self.nodes[bi].value,
        );
        if tx.ndim() != 4 || tw.ndim() != 4 || tx.shape()[1] != tw.shape()[1] {
            return Err(mismatch("conv2d", tx, tw));
        }
        let (n, c, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (o, kh, kw) = (tw.shape()[0], tw.shape()[2], tw.shape()[3]);
        if tb.shape() != [o] {
            return Err(mismatch("conv2d", tw, tb));
        }
        let (oh, ow) = match (conv_out(h, kh, attrs), conv_out(wd, kw, attrs)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => return Err(mismatch("conv2d", tx, tw)),
        };
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            oh,
            ow,
            stride: attrs.stride,
            pad: attrs.padding,
        };
        let (rows, ncols) = (geom.rows(), geom.cols());
        let mut cols = vec![0.0; rows * ncols];
        let mut out = vec![0.0; n * o * ncols];
        for (img, dst) in tx.data().chunks(c * h * wd).zip(out.chunks_mut(o * ncols)) {
            geom.im2col(img, &mut cols);
            for (oc, plane) in dst.chunks_mut(ncols).enumerate() {
                plane.fill(tb.data()[oc]);
            }
            gemm(o, rows, ncols, tw.data(), false, &cols, false, dst, true);
        }
        let value = Tensor::new(vec![n, o, oh, ow], out)?;
        let rg = self.rg(&[xi, wi, bi]);
        Ok(self.push(
            value,
            Op::Conv2d {
                x: xi,
                w: wi,
                b: bi,
                attrs,
            },
            rg,
        ))
    }

    /// Mean over the spatial axes: N×C×H×W → N×C.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let t = &self.nodes[xi].value;
        if t.ndim() != 4 {
            return Err(invalid("global_avg_pool", t, "expected N×C×H×W"));
        }
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let hw = t.shape()[2] * t.shape()[3];
        let out: Vec<f64> = t
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.rg(&[xi]);
        Ok(self.push(value, Op::GlobalAvgPool(xi), rg))
    }

    /// Divides each row of a 2-D tensor by its Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let t = &self.nodes[xi].value;
        if t.ndim() != 2 {
            return Err(invalid("l2_normalize", t, "expected a 2-D tensor"));
        }
        let cols = t.shape()[1];
        let mut norms = Vec::with_capacity(t.shape()[0]);
        let mut out = Vec::with_capacity(t.len());
        for (r, row) in t.data().chunks(cols).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm >= 1e-12) {
                return Err(TensorError::DegenerateRow { row: r, norm });
            }
            out.extend(row.iter().map(|v| v / norm));
            norms.push(norm);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[xi]);
        Ok(self.push(value, Op::L2Normalize { x: xi, norms }, rg))
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let ids = xs
            .iter()
            .map(|&v| self.index(v))
            .collect::<Result<Vec<_>>>()?;
        let first = &self
            .nodes
            .get(*ids.first().ok_or(TensorError::InvalidShape {
                op: "concat",
                shape: vec![],
                reason: "nothing to concatenate".into(),
            })?)
            .expect("indexed")
            .value;
        if axis >= first.ndim() {
            return Err(invalid(
                "concat",
                first,
                format!("axis {axis} out of range"),
            ));
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for &i in &ids {
            let t = &self.nodes[i].value;
            let compatible = t.ndim() == first.ndim()
                && t.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", first, t));
            }
            shape[axis] += t.shape()[axis];
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &i in &ids {
                let t = &self.nodes[i].value;
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&ids);
        Ok(self.push(value, Op::Concat { inputs: ids, axis }, rg))
    }

    /// The sub-tensor `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xi = self.index(x)?;
        let t = &self.nodes[xi].value;
        if axis >= t.ndim() || len == 0 || start + len > t.shape()[axis] {
            return Err(invalid(
                "slice",
                t,
                format!("range {start}..{} on axis {axis}", start + len),
            ));
        }
        let mut shape = t.shape().to_vec();
        let full = shape[axis];
        shape[axis] = len;
        let (outer, inner) = outer_inner(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[xi]);
        Ok(self.push(value, Op::Slice { x: xi, axis, start }, rg))
    }

    pub fn reduce_sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let s = self.nodes[xi].value.data().iter().sum();
        let rg = self.rg(&[xi]);
        Ok(self.push(Tensor::scalar(s), Op::ReduceSum(xi), rg))
    }

    pub fn reduce_mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let t = &self.nodes[xi].value;
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[xi]);
        Ok(self.push(Tensor::scalar(s), Op::ReduceMean(xi), rg))
    }

    /// Picks elements by flat index into a 1-D tensor of `indices.len()`.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xi = self.index(x)?;
        let t = &self.nodes[xi].value;
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.len()) {
            return Err(invalid("gather", t, format!("index {bad} out of range")));
        }
        if indices.is_empty() {
            return Err(invalid("gather", t, "no indices"));
        }
        let out = indices.iter().map(|&i| t.data()[i]).collect();
        let value = Tensor::new(vec![indices.len()], out)?;
        let rg = self.rg(&[xi]);
        Ok(self.push(
            value,
            Op::Gather {
                x: xi,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Squared Euclidean distances between all row pairs of an N×d tensor.
    ///
    /// Computed from explicit differences, so coincident rows give exactly 0.
    pub fn pairwise_sq_dist(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let t = &self.nodes[xi].value;
        if t.ndim() != 2 {
            return Err(invalid("pairwise_sq_dist", t, "expected a 2-D tensor"));
        }
        let n = t.shape()[0];
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d: f64 = t
                    .row(i)
                    .iter()
                    .zip(t.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                out[i * n + j] = d;
                out[j * n + i] = d;
            }
        }
        let value = Tensor::new(vec![n, n], out)?;
        let rg = self.rg(&[xi]);
        Ok(self.push(value, Op::PairwiseSqDist(xi), rg))
    }

    /// Reverse pass from a scalar output.
    ///
    /// Afterwards every leaf created with `requires_grad` carries its
    /// gradient (zeros when the output does not depend on it). Intermediate
    /// gradients are released.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let out = self.index(output)?;
        if self.nodes[out].value.len() != 1 {
            return Err(TensorError::NonScalarOutput(
                self.nodes[out].value.shape().to_vec(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[out].requires_grad {
            grads[out] = Some(vec![1.0]);
        }

        for idx in (0..=out).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop(idx, &g, &mut grads);
        }

        for (idx, node) in self.nodes.iter_mut().enumerate() {
            node.grad = match node.op {
                Op::Leaf => Some(
                    grads[idx]
                        .take()
                        .unwrap_or_else(|| vec![0.0; node.value.len()]),
                ),
                _ => None,
            };
        }
        Ok(())
    }

    fn backprop(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |i: usize| &self.nodes[i].value;
        let wants = |i: usize| self.nodes[i].requires_grad;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            &Op::Add(a, b) => {
                for (i, sign) in [(a, 1.0), (b, 1.0)] {
                    if wants(i) {
                        accumulate(&mut grads[i], g.len(), |acc| {
                            acc.iter_mut().zip(g).for_each(|(x, gv)| *x += sign * gv)
                        });
                    }
                }
            }
            &Op::Sub(a, b) => {
                for (i, sign) in [(a, 1.0), (b, -1.0)] {
                    if wants(i) {
                        accumulate(&mut grads[i], g.len(), |acc| {
                            acc.iter_mut().zip(g).for_each(|(x, gv)| *x += sign * gv)
                        });
                    }
                }
            }
            &Op::Mul(a, b) => {
                for (i, other) in [(a, b), (b, a)] {
                    if wants(i) {
                        let o = val(other).data();
                        accumulate(&mut grads[i], g.len(), |acc| {
                            for ((x, gv), ov) in acc.iter_mut().zip(g).zip(o) {
                                *x += gv * ov;
                            }
                        });
                    }
                }
            }
            &Op::Max(a, b) => {
                let (ta, tb) = (val(a).data(), val(b).data());
                if wants(a) {
                    accumulate(&mut grads[a], g.len(), |acc| {
                        for k in 0..g.len() {
                            if ta[k] >= tb[k] {
                                acc[k] += g[k];
                            }
                        }
                    });
                }
                if wants(b) {
                    accumulate(&mut grads[b], g.len(), |acc| {
                        for k in 0..g.len() {
                            if ta[k] < tb[k] {
                                acc[k] += g[k];
                            }
                        }
                    });
                }
            }
            &Op::Scale(x, c) => {
                accumulate(&mut grads[x], g.len(), |acc| {
                    acc.iter_mut().zip(g).for_each(|(a, gv)| *a += c * gv)
                });
            }
            &Op::AddScalar(x) => {
                accumulate(&mut grads[x], g.len(), |acc| {
                    acc.iter_mut().zip(g).for_each(|(a, gv)| *a += gv)
                });
            }
            &Op::Relu(x) => {
                let xin = val(x).data();
                accumulate(&mut grads[x], g.len(), |acc| {
                    for k in 0..g.len() {
                        if xin[k] > 0.0 {
                            acc[k] += g[k];
                        }
                    }
                });
            }
            &Op::Exp(x) => {
                let y = node.value.data();
                accumulate(&mut grads[x], g.len(), |acc| {
                    for k in 0..g.len() {
                        acc[k] += g[k] * y[k];
                    }
                });
            }
            &Op::Log(x) => {
                let xin = val(x).data();
                accumulate(&mut grads[x], g.len(), |acc| {
                    for k in 0..g.len() {
                        acc[k] += g[k] / xin[k];
                    }
                });
            }
            &Op::Sqrt(x) => {
                let y = node.value.data();
                accumulate(&mut grads[x], g.len(), |acc| {
                    for k in 0..g.len() {
                        if y[k] > 0.0 {
                            acc[k] += g[k] * 0.5 / y[k];
                        }
                    }
                });
            }
            &Op::Square(x) => {
                let xin = val(x).data();
                accumulate(&mut grads[x], g.len(), |acc| {
                    for k in 0..g.len() {
                        acc[k] += 2.0 * xin[k] * g[k];
                    }
                });
            }
            &Op::Softplus(x) => {
                let xin = val(x).data();
                accumulate(&mut grads[x], g.len(), |acc| {
                    for k in 0..g.len() {
                        let v = xin[k];
                        let sig = if v >= 0.0 {
                            1.0 / (1.0 + (-v).exp())
                        } else {
                            let e = v.exp();
                            e / (1.0 + e)
                        };
                        acc[k] += g[k] * sig;
                    }
                });
            }
            &Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(a) {
                    // dA = G · Bᵀ
                    accumulate(&mut grads[a], m * k, |acc| {
                        gemm(m, n, k, g, false, tb.data(), true, acc, true)
                    });
                }
                if wants(b) {
                    // dB = Aᵀ · G
                    accumulate(&mut grads[b], k * n, |acc| {
                        gemm(k, m, n, ta.data(), true, g, false, acc, true)
                    });
                }
            }
            &Op::Transpose(x) => {
                let t = val(x);
                let (r, c) = (t.shape()[0], t.shape()[1]);
                accumulate(&mut grads[x], r * c, |acc| {
                    for i in 0..r {
                        for j in 0..c {
                            acc[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            &Op::Affine { x, w, b } => {
                let (tx, tw) = (val(x), val(w));
                let (n, inp, out_dim) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
                if wants(x) {
                    // dX = G · W
                    accumulate(&mut grads[x], n * inp, |acc| {
                        gemm(n, out_dim, inp, g, false, tw.data(), false, acc, true)
                    });
                }
                if wants(w) {
                    // dW = Gᵀ · X
                    accumulate(&mut grads[w], out_dim * inp, |acc| {
                        gemm(out_dim, n, inp, g, true, tx.data(), false, acc, true)
                    });
                }
                if wants(b) {
                    accumulate(&mut grads[b], out_dim, |acc| {
                        for row in g.chunks(out_dim) {
                            acc.iter_mut().zip(row).for_each(|(a, gv)| *a += gv);
                        }
                    });
                }
            }
            &Op::Conv2d { x, w, b, attrs } => {
                let (tx, tw) = (val(x), val(w));
                let (n, c, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
                let (o, kh, kw) = (tw.shape()[0], tw.shape()[2], tw.shape()[3]);
                let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
                let geom = ConvGeom {
                    c,
                    h,
                    w: wd,
                    kh,
                    kw,
                    oh,
                    ow,
                    stride: attrs.stride,
                    pad: attrs.padding,
                };
                let (rows, ncols) = (geom.rows(), geom.cols());
                let img_len = c * h * wd;
                let out_len = o * ncols;
                if wants(b) {
                    accumulate(&mut grads[b], o, |acc| {
                        for gi in g.chunks(out_len) {
                            for (oc, plane) in gi.chunks(ncols).enumerate() {
                                acc[oc] += plane.iter().sum::<f64>();
                            }
                        }
                    });
                }
                let mut cols = vec![0.0; rows * ncols];
                if wants(w) {
                    let mut dw = grads[w].take().unwrap_or_else(|| vec![0.0; o * rows]);
                    for (img, gi) in tx.data().chunks(img_len).zip(g.chunks(out_len)) {
                        geom.im2col(img, &mut cols);
                        // dW += G_n · colsᵀ
                        gemm(o, ncols, rows, gi, false, &cols, true, &mut dw, true);
                    }
                    grads[w] = Some(dw);
                }
                if wants(x) {
                    let mut dx = grads[x].take().unwrap_or_else(|| vec![0.0; n * img_len]);
                    for (dimg, gi) in dx.chunks_mut(img_len).zip(g.chunks(out_len)) {
                        // dcols = Wᵀ · G_n
                        gemm(rows, o, ncols, tw.data(), true, gi, false, &mut cols, false);
                        geom.col2im(&cols, dimg);
                    }
                    grads[x] = Some(dx);
                }
            }
            &Op::GlobalAvgPool(x) => {
                let t = val(x);
                let hw = t.shape()[2] * t.shape()[3];
                accumulate(&mut grads[x], t.len(), |acc| {
                    for (plane, gv) in acc.chunks_mut(hw).zip(g) {
                        let share = gv / hw as f64;
                        plane.iter_mut().for_each(|a| *a += share);
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let x = *x;
                let y = &node.value;
                let cols = y.shape()[1];
                accumulate(&mut grads[x], y.len(), |acc| {
                    for (r, norm) in norms.iter().enumerate() {
                        let yr = y.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            acc[r * cols + j] += (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, inner) = outer_inner(node.value.shape(), *axis);
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &i in inputs {
                    let t = val(i);
                    let block = t.shape()[*axis] * inner;
                    if wants(i) {
                        accumulate(&mut grads[i], t.len(), |acc| {
                            for o in 0..outer {
                                let src = &g[o * total + offset..o * total + offset + block];
                                acc[o * block..(o + 1) * block]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(a, gv)| *a += gv);
                            }
                        });
                    }
                    offset += block;
                }
            }
            &Op::Slice { x, axis, start } => {
                let t = val(x);
                let full = t.shape()[axis];
                let len = node.value.shape()[axis];
                let (outer, inner) = outer_inner(t.shape(), axis);
                accumulate(&mut grads[x], t.len(), |acc| {
                    for o in 0..outer {
                        let base = o * full * inner + start * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        acc[base..base + len * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, gv)| *a += gv);
                    }
                });
            }
            &Op::ReduceSum(x) => {
                let len = val(x).len();
                accumulate(&mut grads[x], len, |acc| {
                    acc.iter_mut().for_each(|a| *a += g[0])
                });
            }
            &Op::ReduceMean(x) => {
                let len = val(x).len();
                let share = g[0] / len as f64;
                accumulate(&mut grads[x], len, |acc| {
                    acc.iter_mut().for_each(|a| *a += share)
                });
            }
            Op::Gather { x, indices } => {
                let x = *x;
                let len = val(x).len();
                accumulate(&mut grads[x], len, |acc| {
                    for (&i, gv) in indices.iter().zip(g) {
                        acc[i] += gv;
                    }
                });
            }
            &Op::PairwiseSqDist(x) => {
                let t = val(x);
                let (n, d) = (t.shape()[0], t.shape()[1]);
                accumulate(&mut grads[x], n * d, |acc| {
                    for i in 0..n {
                        for j in 0..n {
                            if i == j {
                                continue;
                            }
                            let coeff = 2.0 * (g[i * n + j] + g[j * n + i]);
                            if coeff == 0.0 {
                                continue;
                            }
                            let (ri, rj) = (t.row(i), t.row(j));
                            for k in 0..d {
                                acc[i * d + k] += coeff * (ri[k] - rj[k]);
                            }
                        }
                    }
                });
            }
        }
    }
}
