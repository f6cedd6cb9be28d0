//! Reverse-mode differentiation over [`Tensor2`] values.
//!
//! Every forward op appends a node holding its output value and enough
//! information to run its backward rule. Nodes are appended after their
//! inputs, so the node order is already a topological order and the
//! backward sweep simply walks it in reverse.
//!
//! Gradient contributions are accumulated in a fixed order (ascending node
//! id, and ascending row id within gather/segment ops), so repeated runs are
//! bit-identical.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::{gemm, Tensor2};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row groups for [`Tape::segment_mean`]: output row `i` is the mean of the
/// source rows listed in group `i`. Stored as CSR.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
    members: Vec<usize>,
    src_rows: usize,
}

impl Segments {
    /// `groups[i]` lists the source rows averaged into output row `i`. Rows are
    /// summed in the order given; callers pass them ascending.
    pub fn new(groups: &[Vec<usize>], src_rows: usize) -> Result<Self> {
        let mut offsets = Vec::with_capacity(groups.len() + 1);
        let mut members = Vec::new();
        offsets.push(0);
        for g in groups {
            for &m in g {
                if m >= src_rows {
                    return Err(Error::Contract(format!(
                        "segment member {m} out of range for {src_rows} source rows"
                    )));
                }
                members.push(m);
            }
            offsets.push(members.len());
        }
        Ok(Self {
            offsets,
            members,
            src_rows,
        })
    }

    pub fn num_groups(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn src_rows(&self) -> usize {
        self.src_rows
    }

    pub fn group(&self, i: usize) -> &[usize] {
        &self.members[self.offsets[i]..self.offsets[i + 1]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Hadamard,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    AddBias(Var, Var),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    OneMinus(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Rc<[usize]>),
    SegmentMean(Var, Rc<Segments>),
    MeanOf(Vec<Var>),
    SoftmaxRows(Var),
    Sum(Var),
    GruCell(Box<GruCache>),
}

/// Weights of one GRU cell, each indexed by gate `[z, r, h̃]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruWeights {
    pub w: [Var; 3],
    pub u: [Var; 3],
    pub b: [Var; 3],
}

#[derive(Debug)]
struct GruCache {
    x: Var,
    h: Var,
    weights: GruWeights,
    z: Tensor2,
    r: Tensor2,
    rh: Tensor2,
    cand: Tensor2,
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
    needs_grad: bool,
}

/// A single-threaded recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every recorded node that needs one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor2> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn shape_err(op: &'static str, a: &Tensor2, b: &Tensor2) -> Error {
    Error::Shape {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor2, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input.
    pub fn var(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input (data, masks).
    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Loads a trainable tensor; its gradient is routed back to `store`.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.matmul(bv)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(shape_err("matmul_nt", av, bv));
        }
        let mut out = Tensor2::zeros(av.rows(), bv.rows());
        gemm(av.view(), bv.view_t(), &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMulNT(a, b), ng))
    }

    /// Adds a `1 x cols` bias row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(shape_err("add_bias", xv, bv));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(out, Op::AddBias(x, bias), ng))
    }

    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(
                match op {
                    Binary::Add => "add",
                    Binary::Sub => "sub",
                    Binary::Hadamard => "hadamard",
                },
                av,
                bv,
            ));
        }
        let out = match op {
            Binary::Add => av.zip_map(bv, |x, y| x + y),
            Binary::Sub => av.zip_map(bv, |x, y| x - y),
            Binary::Hadamard => av.zip_map(bv, |x, y| x * y),
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Binary(op, a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Hadamard, a, b)
    }

    pub fn unary(&mut self, op: Unary, x: Var) -> Var {
        let xv = self.value(x);
        let out = match op {
            Unary::Relu => xv.map(|v| if v > 0.0 { v } else { 0.0 }),
            Unary::Sigmoid => xv.map(sigmoid),
            Unary::Tanh => xv.map(f64::tanh),
        };
        let ng = self.ng(x);
        self.push(out, Op::Unary(op, x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).map(|v| v * k);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, k), ng)
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 1.0 - v);
        let ng = self.ng(x);
        self.push(out, Op::OneMinus(x), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first), pv));
            }
            cols += pv.cols();
        }
        let mut out = Tensor2::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            let dst = out.row_mut(r);
            for p in parts {
                let src = self.nodes[p.0].value.row(r);
                dst[c0..c0 + src.len()].copy_from_slice(src);
                c0 += src.len();
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.cols() != cols {
                return Err(shape_err("concat_rows", self.value(*first), pv));
            }
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let out = Tensor2::from_vec(rows, cols, data)?;
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(Error::Contract(format!(
                "slice_cols {start}..{} of a {}-column tensor",
                start + len,
                xv.cols()
            )));
        }
        let mut out = Tensor2::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            out.row_mut(r)
                .copy_from_slice(&xv.row(r)[start..start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::SliceCols(x, start), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.rows() {
            return Err(Error::Contract(format!(
                "slice_rows {start}..{} of a {}-row tensor",
                start + len,
                xv.rows()
            )));
        }
        let c = xv.cols();
        let out = Tensor2::from_vec(len, c, xv.data()[start * c..(start + len) * c].to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::SliceRows(x, start), ng))
    }

    /// Output row `j` is row `index[j]` of `x`.
    pub fn gather_rows(&mut self, x: Var, index: Rc<[usize]>) -> Result<Var> {
        let xv = self.value(x);
        let mut out = Tensor2::zeros(index.len(), xv.cols());
        for (j, &i) in index.iter().enumerate() {
            if i >= xv.rows() {
                return Err(Error::Contract(format!(
                    "gather index {i} out of range for {} rows",
                    xv.rows()
                )));
            }
            out.row_mut(j).copy_from_slice(xv.row(i));
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::GatherRows(x, index), ng))
    }

    /// Elementwise mean over row groups; an empty group yields a zero row.
    pub fn segment_mean(&mut self, x: Var, segments: Rc<Segments>) -> Result<Var> {
        let xv = self.value(x);
        if segments.src_rows() != xv.rows() {
            return Err(Error::Contract(format!(
                "segments built for {} rows applied to {}",
                segments.src_rows(),
                xv.rows()
            )));
        }
        let cols = xv.cols();
        let mut out = Tensor2::zeros(segments.num_groups(), cols);
        for g in 0..segments.num_groups() {
            let members = segments.group(g);
            if members.is_empty() {
                continue;
            }
            let dst = out.row_mut(g);
            for &m in members {
                for (d, s) in dst.iter_mut().zip(xv.row(m)) {
                    *d += s;
                }
            }
            let inv = members.len() as f64;
            for d in dst.iter_mut() {
                *d /= inv;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::SegmentMean(x, segments), ng))
    }

    /// Elementwise arithmetic mean of equally shaped tensors, summed in the
    /// order given.
    pub fn mean_of(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("mean of an empty set".into()))?;
        let mut acc = self.value(*first).clone();
        for p in &parts[1..] {
            let pv = self.value(*p);
            if pv.shape() != acc.shape() {
                return Err(shape_err("mean_rows", &acc, pv));
            }
            acc.add_assign(pv);
        }
        let n = parts.len() as f64;
        for a in acc.data_mut() {
            *a /= n;
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(acc, Op::MeanOf(parts.to_vec()), ng))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::SoftmaxRows(x), ng)
    }

    /// One GRU step `h' = h + z ⊙ (h̃ - h)` with
    /// `z = σ(x W_z + h U_z + b_z)`, `r = σ(x W_r + h U_r + b_r)` and
    /// `h̃ = tanh(x W_h + (r ⊙ h) U_h + b_h)`.
    pub fn gru_cell(&mut self, x: Var, h: Var, weights: GruWeights) -> Result<Var> {
        let (xv, hv) = (self.value(x), self.value(h));
        let (rows, hidden) = hv.shape();
        if xv.rows() != rows {
            return Err(shape_err("gru_cell", xv, hv));
        }
        for g in 0..3 {
            let (w, u, b) = (
                self.value(weights.w[g]),
                self.value(weights.u[g]),
                self.value(weights.b[g]),
            );
            if w.shape() != (xv.cols(), hidden) {
                return Err(shape_err("gru_cell", xv, w));
            }
            if u.shape() != (hidden, hidden) || b.shape() != (1, hidden) {
                return Err(shape_err("gru_cell", hv, u));
            }
        }
        let pre = |g: usize, hin: &Tensor2| {
            let mut a = Tensor2::zeros(rows, hidden);
            gemm(xv.view(), self.value(weights.w[g]).view(), &mut a, 0.0);
            gemm(hin.view(), self.value(weights.u[g]).view(), &mut a, 1.0);
            let b = self.value(weights.b[g]).data();
            for r in 0..rows {
                for (o, bj) in a.row_mut(r).iter_mut().zip(b) {
                    *o += bj;
                }
            }
            a
        };
        let mut z = pre(0, hv);
        z.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        let mut r = pre(1, hv);
        r.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        let rh = r.zip_map(hv, |a, b| a * b);
        let mut cand = pre(2, &rh);
        cand.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        let mut out = hv.clone();
        for ((o, zi), ci) in out.data_mut().iter_mut().zip(z.data()).zip(cand.data()) {
            *o += zi * (ci - *o);
        }
        let ng = self.ng(x)
            || self.ng(h)
            || weights
                .w
                .iter()
                .chain(&weights.u)
                .chain(&weights.b)
                .any(|v| self.ng(*v));
        let cache = GruCache {
            x,
            h,
            weights,
            z,
            r,
            rh,
            cand,
        };
        Ok(self.push(out, Op::GruCell(Box::new(cache)), ng))
    }

    /// Sum of all entries, as a 1x1 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor2::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(out, Op::Sum(x), ng)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward from a non-scalar {}x{} node",
                lv.rows(),
                lv.cols()
            )));
        }
        let mut grads: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor2::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds every parameter gradient into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParameterStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.grad_mut(*id).add_assign(g);
            }
        }
        Ok(grads)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor2>], v: Var) -> Option<&'g mut Tensor2> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let (r, c) = self.nodes[v.0].value.shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor2::zeros(r, c)))
    }

    fn accumulate(&self, grads: &mut [Option<Tensor2>], v: Var, g: &Tensor2) {
        if let Some(s) = self.slot(grads, v) {
            s.add_assign(g);
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor2, grads: &mut [Option<Tensor2>]) {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(s) = self.slot(grads, *a) {
                    gemm(g.view(), bv.view_t(), s, 1.0);
                }
                if let Some(s) = self.slot(grads, *b) {
                    gemm(av.view_t(), g.view(), s, 1.0);
                }
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(s) = self.slot(grads, *a) {
                    gemm(g.view(), bv.view(), s, 1.0);
                }
                if let Some(s) = self.slot(grads, *b) {
                    gemm(g.view_t(), av.view(), s, 1.0);
                }
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g);
                if let Some(s) = self.slot(grads, *bias) {
                    let dst = s.data_mut();
                    for r in 0..g.rows() {
                        for (d, v) in dst.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Binary(op, a, b) => match op {
                Binary::Add => {
                    self.accumulate(grads, *a, g);
                    self.accumulate(grads, *b, g);
                }
                Binary::Sub => {
                    self.accumulate(grads, *a, g);
                    if let Some(s) = self.slot(grads, *b) {
                        for (d, v) in s.data_mut().iter_mut().zip(g.data()) {
                            *d -= v;
                        }
                    }
                }
                Binary::Hadamard => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if let Some(s) = self.slot(grads, *a) {
                        for ((d, gv), y) in s.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                            *d += gv * y;
                        }
                    }
                    if let Some(s) = self.slot(grads, *b) {
                        for ((d, gv), x) in s.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                            *d += gv * x;
                        }
                    }
                }
            },
            Op::Unary(op, x) => {
                let out = &node.value;
                let xv = self.value(*x);
                if let Some(s) = self.slot(grads, *x) {
                    let it = s.data_mut().iter_mut().zip(g.data());
                    match op {
                        // relu'(0) = 0
                        Unary::Relu => {
                            for ((d, gv), xi) in it.zip(xv.data()) {
                                if *xi > 0.0 {
                                    *d += gv;
                                }
                            }
                        }
                        Unary::Sigmoid => {
                            for ((d, gv), y) in it.zip(out.data()) {
                                *d += gv * y * (1.0 - y);
                            }
                        }
                        Unary::Tanh => {
                            for ((d, gv), y) in it.zip(out.data()) {
                                *d += gv * (1.0 - y * y);
                            }
                        }
                    }
                }
            }
            Op::Scale(x, k) => {
                if let Some(s) = self.slot(grads, *x) {
                    for (d, gv) in s.data_mut().iter_mut().zip(g.data()) {
                        *d += k * gv;
                    }
                }
            }
            Op::OneMinus(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    for (d, gv) in s.data_mut().iter_mut().zip(g.data()) {
                        *d -= gv;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if let Some(s) = self.slot(grads, *p) {
                        for r in 0..g.rows() {
                            for (d, gv) in s.row_mut(r).iter_mut().zip(&g.row(r)[c0..c0 + w]) {
                                *d += gv;
                            }
                        }
                    }
                    c0 += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if let Some(s) = self.slot(grads, *p) {
                        for (d, gv) in s.data_mut().iter_mut().zip(&g.data()[off..off + n]) {
                            *d += gv;
                        }
                    }
                    off += n;
                }
            }
            Op::SliceCols(x, start) => {
                if let Some(s) = self.slot(grads, *x) {
                    for r in 0..g.rows() {
                        for (d, gv) in s.row_mut(r)[*start..].iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::SliceRows(x, start) => {
                if let Some(s) = self.slot(grads, *x) {
                    let c = g.cols();
                    for (d, gv) in s.data_mut()[start * c..].iter_mut().zip(g.data()) {
                        *d += gv;
                    }
                }
            }
            Op::GatherRows(x, index) => {
                if let Some(s) = self.slot(grads, *x) {
                    for (j, &i) in index.iter().enumerate() {
                        for (d, gv) in s.row_mut(i).iter_mut().zip(g.row(j)) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::SegmentMean(x, segments) => {
                if let Some(s) = self.slot(grads, *x) {
                    for grp in 0..segments.num_groups() {
                        let members = segments.group(grp);
                        if members.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / members.len() as f64;
                        for &m in members {
                            for (d, gv) in s.row_mut(m).iter_mut().zip(g.row(grp)) {
                                *d += gv * inv;
                            }
                        }
                    }
                }
            }
            Op::MeanOf(parts) => {
                let inv = 1.0 / parts.len() as f64;
                for p in parts {
                    if let Some(s) = self.slot(grads, *p) {
                        for (d, gv) in s.data_mut().iter_mut().zip(g.data()) {
                            *d += gv * inv;
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                if let Some(s) = self.slot(grads, *x) {
                    for r in 0..g.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, yi), gi) in s.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *d += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::GruCell(c) => self.backprop_gru(c, g, grads),
            Op::Sum(x) => {
                let gv = g.data()[0];
                if let Some(s) = self.slot(grads, *x) {
                    for d in s.data_mut() {
                        *d += gv;
                    }
                }
            }
        }
    }

    fn backprop_gru(&self, c: &GruCache, g: &Tensor2, grads: &mut [Option<Tensor2>]) {
        let hv = self.value(c.h);
        let xv = self.value(c.x);
        let (rows, hidden) = hv.shape();
        let mut da_z = Tensor2::zeros(rows, hidden);
        let mut da_h = Tensor2::zeros(rows, hidden);
        for k in 0..g.len() {
            let (gv, z, cand, h) = (g.data()[k], c.z.data()[k], c.cand.data()[k], hv.data()[k]);
            da_z.data_mut()[k] = gv * (cand - h) * z * (1.0 - z);
            da_h.data_mut()[k] = gv * z * (1.0 - cand * cand);
        }
        let mut d_rh = Tensor2::zeros(rows, hidden);
        gemm(da_h.view(), self.value(c.weights.u[2]).view_t(), &mut d_rh, 0.0);
        let mut da_r = Tensor2::zeros(rows, hidden);
        for k in 0..g.len() {
            let r = c.r.data()[k];
            da_r.data_mut()[k] = d_rh.data()[k] * hv.data()[k] * r * (1.0 - r);
        }
        let da = [&da_z, &da_r, &da_h];
        if let Some(s) = self.slot(grads, c.h) {
            for k in 0..g.len() {
                s.data_mut()[k] += g.data()[k] * (1.0 - c.z.data()[k]) + d_rh.data()[k] * c.r.data()[k];
            }
            gemm(da_z.view(), self.value(c.weights.u[0]).view_t(), s, 1.0);
            gemm(da_r.view(), self.value(c.weights.u[1]).view_t(), s, 1.0);
        }
        if let Some(s) = self.slot(grads, c.x) {
            for (gate, d) in da.iter().enumerate() {
                gemm(d.view(), self.value(c.weights.w[gate]).view_t(), s, 1.0);
            }
        }
        for (gate, d) in da.iter().enumerate() {
            if let Some(s) = self.slot(grads, c.weights.w[gate]) {
                gemm(xv.view_t(), d.view(), s, 1.0);
            }
            let hin = if gate == 2 { &c.rh } else { hv };
            if let Some(s) = self.slot(grads, c.weights.u[gate]) {
                gemm(hin.view_t(), d.view(), s, 1.0);
            }
            if let Some(s) = self.slot(grads, c.weights.b[gate]) {
                let dst = s.data_mut();
                for r in 0..rows {
                    for (o, v) in dst.iter_mut().zip(d.row(r)) {
                        *o += v;
                    }
                }
            }
        }
    }
}
