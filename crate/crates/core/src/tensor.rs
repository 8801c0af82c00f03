//! Dense row-major `f64` tensors and a reverse-mode gradient tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles.
//! Calling [`Var::backward`] on a scalar walks the record once in reverse
//! and returns a [`Gradients`] map keyed by node id. Operations are pure:
//! inputs are never mutated and every result is a fresh node.
//!
//! Broadcasting is deliberately absent. The only non-elementwise shape
//! rules are scalar scaling, the per-row bias add and the per-row affine
//! inside [`Var::layer_norm`].

use std::cell::RefCell;
use std::f64::consts::FRAC_1_SQRT_2;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Plain value container: a shape and its row-major data.
///
/// Scalars use the empty shape `[]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Self::new([rows.len(), cols], rows.concat())
    }

    pub fn vector(values: &[f64]) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// `(rows, cols)` of a 2-D tensor; a 1-D tensor is read as a single row.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            [c] => Some((1, *c)),
            _ => None,
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        let (_, cols) = self.dims2().expect("at() needs a 2-D tensor");
        self.data[r * cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, cols) = self.dims2().expect("row() needs a 2-D tensor");
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Identity of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
        alpha: f64,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Square(NodeId),
    Sqrt(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Gelu {
        a: NodeId,
        cdf: Vec<f64>,
    },
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    AddRow(NodeId, NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Slice {
        a: NodeId,
        r0: usize,
        c0: usize,
    },
    GatherRows {
        a: NodeId,
        idx: Vec<usize>,
    },
    Reshape(NodeId),
    SoftCrossEntropy {
        logits: NodeId,
        probs: Vec<f64>,
        target: Tensor,
    },
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Gelu { a, .. }
            | Op::SoftmaxRows(a)
            | Op::Reshape(a)
            | Op::Slice { a, .. }
            | Op::GatherRows { a, .. } => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatCols(p) | Op::ConcatRows(p) => p.clone(),
            Op::SoftCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Single-owner record of executed operations.
///
/// Nodes are appended in execution order, so parents always precede
/// children.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    check_finite: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that rejects NaN/Inf at every op boundary.
    pub fn with_checks() -> Self {
        Tape {
            nodes: RefCell::default(),
            check_finite: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf: gradients flow into it.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf: no gradient is ever computed for it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id.0].value)
    }

    fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id.0].requires_grad
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId(nodes.len());
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    fn push_op(&self, value: Tensor, op: Op, name: &'static str) -> Result<Var<'_>> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let rg = {
            let nodes = self.nodes.borrow();
            op.parents().iter().any(|p| nodes[p.0].requires_grad)
        };
        Ok(self.push(value, op, rg))
    }

    fn backward_from(&self, root: NodeId) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        let mut out: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Op::Leaf = node.op {
                out[i] = Some(Tensor {
                    shape: node.value.shape.clone(),
                    data: g,
                });
                continue;
            }
            propagate(&nodes, node, &g, &mut grads);
        }
        Ok(Gradients { grads: out })
    }
}

/// Gradient buffer of `parent`, allocated on first use, or `None` when the
/// parent does not need a gradient.
fn slot<'g>(
    nodes: &[Node],
    grads: &'g mut [Option<Vec<f64>>],
    parent: NodeId,
) -> Option<&'g mut Vec<f64>> {
    let n = &nodes[parent.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[parent.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul {
            a,
            b,
            ta,
            tb,
            alpha,
        } => {
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            let (ar, ac) = av.dims2().unwrap();
            let (br, bc) = bv.dims2().unwrap();
            let (m, k) = if *ta { (ac, ar) } else { (ar, ac) };
            let n = if *tb { br } else { bc };
            let gm = Mat::new(g, m, n, false);
            if let Some(ga) = slot(nodes, grads, *a) {
                if !*ta {
                    // dA = g · op(B)^T
                    gemm_acc(*alpha, gm, Mat::new(&bv.data, br, bc, !*tb), ga);
                } else {
                    // dA = op(B) · g^T
                    gemm_acc(
                        *alpha,
                        Mat::new(&bv.data, br, bc, *tb),
                        Mat::new(g, m, n, true),
                        ga,
                    );
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                if !*tb {
                    // dB = op(A)^T · g
                    gemm_acc(*alpha, Mat::new(&av.data, ar, ac, !*ta), gm, gb);
                } else {
                    // dB = g^T · op(A)
                    gemm_acc(
                        *alpha,
                        Mat::new(g, m, n, true),
                        Mat::new(&av.data, ar, ac, *ta),
                        gb,
                    );
                }
            }
            let _ = k;
        }
        Op::Add(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                axpy(1.0, g, ga);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                axpy(1.0, g, gb);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                axpy(1.0, g, ga);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                axpy(-1.0, g, gb);
            }
        }
        Op::Mul(a, b) => {
            let av = Rc::clone(&nodes[a.0].value);
            let bv = Rc::clone(&nodes[b.0].value);
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, gi), bi) in ga.iter_mut().zip(g).zip(&bv.data) {
                    *d += gi * bi;
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for ((d, gi), ai) in gb.iter_mut().zip(g).zip(&av.data) {
                    *d += gi * ai;
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                axpy(*s, g, ga);
            }
        }
        Op::Square(a) => {
            let av = Rc::clone(&nodes[a.0].value);
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, gi), x) in ga.iter_mut().zip(g).zip(&av.data) {
                    *d += 2.0 * x * gi;
                }
            }
        }
        Op::Sqrt(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, gi), yi) in ga.iter_mut().zip(g).zip(&y.data) {
                    *d += gi / (2.0 * yi);
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let s = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::Gelu { a, cdf } => {
            let av = Rc::clone(&nodes[a.0].value);
            if let Some(ga) = slot(nodes, grads, *a) {
                for (((d, gi), &x), &c) in ga.iter_mut().zip(g).zip(&av.data).zip(cdf) {
                    *d += gi * (c + x * (-0.5 * x * x).exp() * INV_SQRT_2PI);
                }
            }
        }
        Op::SoftmaxRows(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let (_, cols) = y.dims2().unwrap();
                for ((dr, gr), yr) in ga
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(y.data.chunks(cols))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += yi * (gi - dot);
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
            let gv = Rc::clone(&nodes[gamma.0].value);
            let cols = gv.len();
            if let Some(gg) = slot(nodes, grads, *gamma) {
                for (gr, xr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                    for ((d, gi), xi) in gg.iter_mut().zip(gr).zip(xr) {
                        *d += gi * xi;
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *beta) {
                for gr in g.chunks(cols) {
                    axpy(1.0, gr, gb);
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let inv_n = 1.0 / cols as f64;
                let mut dxhat = vec![0.0; cols];
                for (((dr, gr), xr), &rs) in gx
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(xhat.chunks(cols))
                    .zip(rstd)
                {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..cols {
                        dxhat[j] = gr[j] * gv.data[j];
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * xr[j];
                    }
                    mean_d *= inv_n;
                    mean_dx *= inv_n;
                    for j in 0..cols {
                        dr[j] += rs * (dxhat[j] - mean_d - xr[j] * mean_dx);
                    }
                }
            }
        }
        Op::AddRow(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                axpy(1.0, g, ga);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                let cols = gb.len();
                for gr in g.chunks(cols) {
                    axpy(1.0, gr, gb);
                }
            }
        }
        Op::ConcatCols(parts) => {
            let (rows, cols) = y.dims2().unwrap();
            let mut off = 0;
            for p in parts {
                let (_, pc) = nodes[p.0].value.dims2().unwrap();
                if let Some(gp) = slot(nodes, grads, *p) {
                    for r in 0..rows {
                        axpy(
                            1.0,
                            &g[r * cols + off..r * cols + off + pc],
                            &mut gp[r * pc..(r + 1) * pc],
                        );
                    }
                }
                off += pc;
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for p in parts {
                let len = nodes[p.0].value.len();
                if let Some(gp) = slot(nodes, grads, *p) {
                    axpy(1.0, &g[off..off + len], gp);
                }
                off += len;
            }
        }
        Op::Slice { a, r0, c0 } => {
            let (_, ac) = nodes[a.0].value.dims2().unwrap();
            let (rows, cols) = y.dims2().unwrap();
            if let Some(ga) = slot(nodes, grads, *a) {
                for r in 0..rows {
                    let dst = (r0 + r) * ac + c0;
                    axpy(1.0, &g[r * cols..(r + 1) * cols], &mut ga[dst..dst + cols]);
                }
            }
        }
        Op::GatherRows { a, idx } => {
            let (_, cols) = y.dims2().unwrap();
            if let Some(ga) = slot(nodes, grads, *a) {
                for (r, &src) in idx.iter().enumerate() {
                    axpy(
                        1.0,
                        &g[r * cols..(r + 1) * cols],
                        &mut ga[src * cols..(src + 1) * cols],
                    );
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                axpy(1.0, g, ga);
            }
        }
        Op::SoftCrossEntropy {
            logits,
            probs,
            target,
        } => {
            if let Some(gl) = slot(nodes, grads, *logits) {
                let (rows, cols) = target.dims2().unwrap();
                let s = g[0] / rows as f64;
                for r in 0..rows {
                    let t = &target.data[r * cols..(r + 1) * cols];
                    let mass: f64 = t.iter().sum();
                    for c in 0..cols {
                        gl[r * cols + c] += s * (probs[r * cols + c] * mass - t[c]);
                    }
                }
            }
        }
    }
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Borrowed row-major matrix, optionally viewed transposed.
#[derive(Clone, Copy)]
struct Mat<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    trans: bool,
}

impl<'a> Mat<'a> {
    fn new(data: &'a [f64], rows: usize, cols: usize, trans: bool) -> Self {
        Mat {
            data,
            rows,
            cols,
            trans,
        }
    }

    /// `(rows, cols)` of the logical (possibly transposed) view.
    fn dims(&self) -> (usize, usize) {
        if self.trans {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    /// `(row stride, col stride)` of the logical view.
    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c += alpha · a · b` on logical views.
fn gemm_acc(alpha: f64, a: Mat<'_>, b: Mat<'_>, c: &mut [f64]) {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    debug_assert_eq!(k, k2);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the views are in bounds by construction of `Mat` and `c` has m·n elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// Exact (erf-based) Gaussian error linear unit.
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// Row-wise softmax of a plain row, stabilized by the row max.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id.0, self.value().shape())
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape.clone()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands live on different tapes".into()))
        }
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        let v = self.value();
        v.dims2().ok_or_else(|| Error::shape(op, &v.shape, &[]))
    }

    /// Scalar result of `backward`: gradients of this scalar w.r.t. every
    /// node that requires one.
    pub fn backward(&self) -> Result<Gradients> {
        self.tape.backward_from(self.id)
    }

    pub fn matmul(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.matmul_ex(rhs, false, false, 1.0)
    }

    /// `alpha · self · rhsᵀ`.
    pub fn matmul_nt(&self, rhs: Var<'t>, alpha: f64) -> Result<Var<'t>> {
        self.matmul_ex(rhs, false, true, alpha)
    }

    fn matmul_ex(&self, rhs: Var<'t>, ta: bool, tb: bool, alpha: f64) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let av = self.value();
        let bv = rhs.value();
        let (Some((ar, ac)), Some((br, bc))) = (
            (av.shape.len() == 2).then(|| av.dims2()).flatten(),
            (bv.shape.len() == 2).then(|| bv.dims2()).flatten(),
        ) else {
            return Err(Error::shape("matmul", &av.shape, &bv.shape));
        };
        let a = Mat::new(&av.data, ar, ac, ta);
        let b = Mat::new(&bv.data, br, bc, tb);
        let (m, k) = a.dims();
        let (k2, n) = b.dims();
        if k != k2 {
            return Err(Error::shape("matmul", &av.shape, &bv.shape));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(alpha, a, b, &mut out);
        self.tape.push_op(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                ta,
                tb,
                alpha,
            },
            "matmul",
        )
    }

    fn zip_with(
        &self,
        rhs: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let av = self.value();
        let bv = rhs.value();
        if av.shape != bv.shape {
            return Err(Error::shape(name, &av.shape, &bv.shape));
        }
        let data = av.data.iter().zip(&bv.data).map(|(&a, &b)| f(a, b)).collect();
        self.tape.push_op(
            Tensor {
                shape: av.shape.clone(),
                data,
            },
            op,
            name,
        )
    }

    fn map(&self, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var<'t>> {
        let av = self.value();
        let data = av.data.iter().map(|&a| f(a)).collect();
        self.tape.push_op(
            Tensor {
                shape: av.shape.clone(),
                data,
            },
            op,
            name,
        )
    }

    pub fn add(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(rhs, "add", |a, b| a + b, Op::Add(self.id, rhs.id))
    }

    pub fn sub(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(rhs, "sub", |a, b| a - b, Op::Sub(self.id, rhs.id))
    }

    pub fn mul(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(rhs, "mul", |a, b| a * b, Op::Mul(self.id, rhs.id))
    }

    /// Elementwise difference against a plain tensor, treated as a constant.
    pub fn sub_const(&self, rhs: &Tensor) -> Result<Var<'t>> {
        let c = self.tape.constant(rhs.clone());
        self.sub(c)
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>> {
        self.map("scale", |a| a * s, Op::Scale(self.id, s))
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.map("square", |a| a * a, Op::Square(self.id))
    }

    pub fn sqrt(&self) -> Result<Var<'t>> {
        self.map("sqrt", f64::sqrt, Op::Sqrt(self.id))
    }

    pub fn gelu(&self) -> Result<Var<'t>> {
        let av = self.value();
        let cdf: Vec<f64> = av.data.iter().map(|&x| normal_cdf(x)).collect();
        let data = av.data.iter().zip(&cdf).map(|(x, c)| x * c).collect();
        self.tape.push_op(
            Tensor {
                shape: av.shape.clone(),
                data,
            },
            Op::Gelu { a: self.id, cdf },
            "gelu",
        )
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let s = self.value().sum();
        self.tape.push_op(Tensor::scalar(s), Op::Sum(self.id), "sum")
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let v = self.value();
        let s = v.sum() / v.len() as f64;
        self.tape.push_op(Tensor::scalar(s), Op::Mean(self.id), "mean")
    }

    /// Sum of squared entries, `‖x‖²`.
    pub fn sum_squares(&self) -> Result<Var<'t>> {
        self.square()?.sum()
    }

    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let (_, cols) = self.dims2("softmax_rows")?;
        let v = self.value();
        let mut data = v.data.clone();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        self.tape.push_op(
            Tensor {
                shape: v.shape.clone(),
                data,
            },
            Op::SoftmaxRows(self.id),
            "softmax_rows",
        )
    }

    /// Per-row standardization followed by the affine `γ·x̂ + β`.
    pub fn layer_norm(&self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        self.same_tape(&gamma)?;
        self.same_tape(&beta)?;
        let (_, cols) = self.dims2("layer_norm")?;
        let gv = gamma.value();
        let bv = beta.value();
        if gv.len() != cols || bv.len() != cols {
            return Err(Error::shape("layer_norm", &self.shape(), &gv.shape));
        }
        let xv = self.value();
        let rows = xv.len() / cols;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data[r * cols..(r + 1) * cols];
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..cols {
                let h = (row[j] - mu) * rs;
                xhat[r * cols + j] = h;
                out[r * cols + j] = h * gv.data[j] + bv.data[j];
            }
        }
        self.tape.push_op(
            Tensor {
                shape: xv.shape.clone(),
                data: out,
            },
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    /// Adds the vector `bias` to every row.
    pub fn add_bias(&self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias)?;
        let (_, cols) = self.dims2("add_bias")?;
        let bv = bias.value();
        if bv.len() != cols {
            return Err(Error::shape("add_bias", &self.shape(), &bv.shape));
        }
        let av = self.value();
        let data = av
            .data
            .chunks(cols)
            .flat_map(|r| r.iter().zip(&bv.data).map(|(a, b)| a + b))
            .collect();
        self.tape.push_op(
            Tensor {
                shape: av.shape.clone(),
                data,
            },
            Op::AddRow(self.id, bias.id),
            "add_bias",
        )
    }

    /// Rectangular block `[rows.start..rows.end, cols.start..cols.end]`.
    pub fn slice(
        &self,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
    ) -> Result<Var<'t>> {
        let (ar, ac) = self.dims2("slice")?;
        if rows.start >= rows.end || cols.start >= cols.end || rows.end > ar || cols.end > ac {
            return Err(Error::shape(
                "slice",
                &[ar, ac],
                &[rows.start, rows.end, cols.start, cols.end],
            ));
        }
        let av = self.value();
        let nc = cols.end - cols.start;
        let mut data = Vec::with_capacity(rows.len() * nc);
        for r in rows.clone() {
            data.extend_from_slice(&av.data[r * ac + cols.start..r * ac + cols.end]);
        }
        self.tape.push_op(
            Tensor {
                shape: vec![rows.len(), nc],
                data,
            },
            Op::Slice {
                a: self.id,
                r0: rows.start,
                c0: cols.start,
            },
            "slice",
        )
    }

    pub fn slice_rows(&self, rows: std::ops::Range<usize>) -> Result<Var<'t>> {
        let (_, ac) = self.dims2("slice_rows")?;
        self.slice(rows, 0..ac)
    }

    /// Rows picked by index, in the given order.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let (ar, ac) = self.dims2("gather_rows")?;
        if idx.is_empty() || idx.iter().any(|&i| i >= ar) {
            return Err(Error::shape("gather_rows", &[ar, ac], idx));
        }
        let av = self.value();
        let mut data = Vec::with_capacity(idx.len() * ac);
        for &i in idx {
            data.extend_from_slice(&av.data[i * ac..(i + 1) * ac]);
        }
        self.tape.push_op(
            Tensor {
                shape: vec![idx.len(), ac],
                data,
            },
            Op::GatherRows {
                a: self.id,
                idx: idx.to_vec(),
            },
            "gather_rows",
        )
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let v = (*self.value()).clone().reshaped(shape)?;
        self.tape.push_op(v, Op::Reshape(self.id), "reshape")
    }

    /// Mean soft-target cross-entropy over the rows of `self` (logits).
    ///
    /// `target` has the same shape; each row is a weight vector over classes.
    pub fn soft_cross_entropy(&self, target: &Tensor) -> Result<Var<'t>> {
        let (rows, cols) = self.dims2("soft_cross_entropy")?;
        let lv = self.value();
        if target.shape != lv.shape {
            return Err(Error::shape("soft_cross_entropy", &lv.shape, &target.shape));
        }
        let mut probs = lv.data.clone();
        let mut loss = 0.0;
        for r in 0..rows {
            let logits = &lv.data[r * cols..(r + 1) * cols];
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for c in 0..cols {
                loss -= target.data[r * cols + c] * (logits[c] - lse);
            }
            softmax_in_place(&mut probs[r * cols..(r + 1) * cols]);
        }
        loss /= rows as f64;
        self.tape.push_op(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy {
                logits: self.id,
                probs,
                target: target.clone(),
            },
            "soft_cross_entropy",
        )
    }
}

/// Concatenates 2-D operands along the last (column) axis.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
    let (rows, _) = first.dims2("concat_cols")?;
    let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let mut total = 0;
    for (p, v) in parts.iter().zip(&vals) {
        first.same_tape(p)?;
        match v.dims2() {
            Some((r, c)) if r == rows && v.shape.len() == 2 => total += c,
            _ => return Err(Error::shape("concat_cols", &first.shape(), &v.shape)),
        }
    }
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for v in &vals {
            data.extend_from_slice(v.row(r));
        }
    }
    first.tape.push_op(
        Tensor {
            shape: vec![rows, total],
            data,
        },
        Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
        "concat_cols",
    )
}

/// Stacks 2-D operands with equal column counts on top of each other.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
    let (_, cols) = first.dims2("concat_rows")?;
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        first.same_tape(p)?;
        let v = p.value();
        match v.dims2() {
            Some((r, c)) if c == cols => {
                rows += r;
                data.extend_from_slice(&v.data);
            }
            _ => return Err(Error::shape("concat_rows", &first.shape(), &v.shape)),
        }
    }
    first.tape.push_op(
        Tensor {
            shape: vec![rows, cols],
            data,
        },
        Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
        "concat_rows",
    )
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf, if the loss reached it.
    pub fn get(&self, v: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: &Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}

/// Compares `backward` against central differences of `f` around `x`.
///
/// Returns the maximum over coordinates of
/// `|analytic − numeric| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::Contract(format!("eps must lie in (0, 1e-3], got {eps}")));
    }
    let analytic = {
        let tape = Tape::new();
        let v = tape.param(x.clone());
        let out = f(v)?;
        out.backward()?.wrt(&v)
    };
    let eval = |t: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(t);
        Ok(f(v)?.item())
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data[i] += eps;
        let mut minus = x.clone();
        minus.data[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
