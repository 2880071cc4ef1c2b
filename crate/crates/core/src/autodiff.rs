//! A small tape-based reverse-mode automatic differentiation engine over
//! [`Mat`] values.
//!
//! Parameters live in a [`ParamSet`] that the tape borrows; the tape records
//! every operation applied to [`Var`] handles and [`Tape::backward`] walks the
//! record in reverse to produce gradients for every parameter tensor.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Mat>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on duplicate names.
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    /// Registers a tensor with entries drawn from N(0, std²).
    pub fn add_normal(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> ParamId {
        let m = Mat::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal));
        self.add(name, m)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::zeros(rows, cols))
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Mat::is_finite)
    }

    /// Rebuilds the name index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
    }

    /// Builds a set from already ordered `(name, value)` pairs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Mat)>) -> Self {
        let mut set = Self::new();
        for (n, v) in pairs {
            set.add(n, v);
        }
        set
    }

    /// Zero-valued tensors with the same shapes.
    pub fn zeros_like(&self) -> Vec<Mat> {
        self.values.iter().map(|m| Mat::zeros(m.rows(), m.cols())).collect()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    SoftmaxRows(Var),
    SoftmaxGroups(Var, Vec<usize>),
    LogSoftmaxRows(Var),
    LayerNormRows(Var),
    L2NormalizeRows(Var),
    Gelu(Var),
    Elu(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Clamp(Var, f64, f64),
    SmoothL1(Var, f64),
    SumAll(Var),
    SumSquares(Var),
    MeanRows(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulT(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulRow(a, b) => vec![*a, *b],
            ConcatRows(v) | ConcatCols(v) => v.clone(),
            Scale(a, _) | Transpose(a) | Reshape(a) | SliceRows(a, _) | SliceCols(a, _) | GatherRows(a, _) | SoftmaxRows(a) | SoftmaxGroups(a, _)
            | LogSoftmaxRows(a) | LayerNormRows(a) | L2NormalizeRows(a) | Gelu(a) | Elu(a) | LeakyRelu(a, _) | Exp(a)
            | Clamp(a, _, _) | SmoothL1(a, _) | SumAll(a) | SumSquares(a) | MeanRows(a) => vec![*a],
        }
    }
}

struct Node {
    value: Option<Mat>,
    param: Option<ParamId>,
    op: Op,
    needs_grad: bool,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Records operations for one forward pass.
pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: RefCell<Vec<Node>>,
    param_vars: RefCell<Vec<Option<Var>>>,
}

fn resolve<'a>(nodes: &'a [Node], params: &'a ParamSet, v: Var) -> &'a Mat {
    let n = &nodes[v.0];
    match n.param {
        Some(p) => params.get(p),
        None => n.value.as_ref().expect("non-parameter node without value"),
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self { params, nodes: RefCell::new(Vec::with_capacity(256)), param_vars: RefCell::new(vec![None; params.len()]) }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    fn push(&self, value: Mat, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = op.inputs().iter().any(|v| nodes[v.0].needs_grad);
        nodes.push(Node { value: Some(value), param: None, op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn unary(&self, a: Var, f: impl FnOnce(&Mat) -> Mat, op: Op) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            f(resolve(&nodes, self.params, a))
        };
        self.push(out, op)
    }

    fn binary(&self, a: Var, b: Var, f: impl FnOnce(&Mat, &Mat) -> Mat, op: Op) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            f(resolve(&nodes, self.params, a), resolve(&nodes, self.params, b))
        };
        self.push(out, op)
    }

    /// Leaf for a parameter tensor; repeated calls return the same handle.
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.borrow()[id.0] {
            return v;
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: None, param: Some(id), op: Op::Leaf, needs_grad: true });
        let v = Var(nodes.len() - 1);
        self.param_vars.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&self, value: Mat) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Some(value), param: None, op: Op::Leaf, needs_grad: false });
        Var(nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked and retrievable via [`Gradients::wrt`].
    pub fn input(&self, value: Mat) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Some(value), param: None, op: Op::Leaf, needs_grad: true });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Mat {
        let nodes = self.nodes.borrow();
        resolve(&nodes, self.params, v).clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        resolve(&nodes, self.params, v).shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let m = resolve(&nodes, self.params, v);
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar");
        m.get(0, 0)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.matmul(y), Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.matmul_t(y), Op::MatMulT(a, b))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.add(y), Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.sub(y), Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.zip_map(y, |p, q| p * q), Op::Mul(a, b))
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        self.binary(
            a,
            row,
            |x, r| {
                assert_eq!(r.shape(), (1, x.cols()), "add_row expects a 1 x cols row");
                let mut out = x.clone();
                for i in 0..out.rows() {
                    for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                        *o += b;
                    }
                }
                out
            },
            Op::AddRow(a, row),
        )
    }

    /// Multiplies every row of `a` elementwise by a `1 × cols` row.
    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        self.binary(
            a,
            row,
            |x, r| {
                assert_eq!(r.shape(), (1, x.cols()), "mul_row expects a 1 x cols row");
                let mut out = x.clone();
                for i in 0..out.rows() {
                    for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                        *o *= b;
                    }
                }
                out
            },
            Op::MulRow(a, row),
        )
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x.scale(s), Op::Scale(a, s))
    }

    pub fn transpose(&self, a: Var) -> Var {
        self.unary(a, Mat::transpose, Op::Transpose(a))
    }

    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Var {
        self.unary(a, |x| x.reshape(rows, cols), Op::Reshape(a))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let mats: Vec<&Mat> = parts.iter().map(|&v| resolve(&nodes, self.params, v)).collect();
            Mat::concat_rows(&mats)
        };
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let mats: Vec<&Mat> = parts.iter().map(|&v| resolve(&nodes, self.params, v)).collect();
            Mat::concat_cols(&mats)
        };
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        self.unary(a, |x| x.slice_rows(start, len), Op::SliceRows(a, start))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        self.unary(a, |x| x.slice_cols(start, len), Op::SliceCols(a, start))
    }

    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Var {
        self.unary(
            a,
            |x| {
                let mut data = Vec::with_capacity(idx.len() * x.cols());
                for &i in idx {
                    data.extend_from_slice(x.row(i));
                }
                Mat::from_vec(idx.len(), x.cols(), data)
            },
            Op::GatherRows(a, idx.to_vec()),
        )
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        self.unary(a, softmax_rows, Op::SoftmaxRows(a))
    }

    /// Softmax over the entries of a column vector that share a group id.
    pub fn softmax_groups(&self, a: Var, groups: &[usize]) -> Var {
        self.unary(a, |x| softmax_groups(x, groups), Op::SoftmaxGroups(a, groups.to_vec()))
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| {
                let mut out = x.clone();
                for r in 0..out.rows() {
                    let row = out.row_mut(r);
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    row.iter_mut().for_each(|v| *v -= lse);
                }
                out
            },
            Op::LogSoftmaxRows(a),
        )
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&self, a: Var) -> Var {
        self.unary(a, |x| layer_norm_rows(x).0, Op::LayerNormRows(a))
    }

    pub fn l2_normalize_rows(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| {
                let mut out = x.clone();
                for r in 0..out.rows() {
                    let row = out.row_mut(r);
                    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                    row.iter_mut().for_each(|v| *v /= n);
                }
                out
            },
            Op::L2NormalizeRows(a),
        )
    }

    pub fn gelu(&self, a: Var) -> Var {
        self.unary(a, |x| x.map(gelu), Op::Gelu(a))
    }

    pub fn elu(&self, a: Var) -> Var {
        self.unary(a, |x| x.map(elu), Op::Elu(a))
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        self.unary(a, |x| x.map(|v| leaky_relu(v, slope)), Op::LeakyRelu(a, slope))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, |x| x.map(f64::exp), Op::Exp(a))
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.map(|v| v.clamp(lo, hi)), Op::Clamp(a, lo, hi))
    }

    /// Elementwise smooth-L1 (Huber with transition at `beta`).
    pub fn smooth_l1(&self, a: Var, beta: f64) -> Var {
        self.unary(a, |x| x.map(|v| smooth_l1(v, beta)), Op::SmoothL1(a, beta))
    }

    pub fn sum(&self, a: Var) -> Var {
        self.unary(a, |x| Mat::filled(1, 1, x.sum()), Op::SumAll(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.shape(a);
        let s = self.sum(a);
        self.scale(s, 1.0 / (n.0 * n.1) as f64)
    }

    pub fn sum_squares(&self, a: Var) -> Var {
        self.unary(a, |x| Mat::filled(1, 1, x.sum_squares()), Op::SumSquares(a))
    }

    /// Column means, shape `1 × cols`.
    pub fn mean_rows(&self, a: Var) -> Var {
        self.unary(a, |x| Mat::row_vector(&x.mean_rows()), Op::MeanRows(a))
    }

    /// Runs the reverse sweep from a scalar root.
    pub fn backward(self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be a scalar");
        self.backward_with(root, Mat::filled(1, 1, 1.0))
    }

    /// Reverse sweep seeded with an explicit cotangent for `root`.
    pub fn backward_with(self, root: Var, seed: Mat) -> Gradients {
        let nodes = self.nodes.into_inner();
        let params = self.params;
        let mut grads: Vec<Option<Mat>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);

        fn acc(grads: &mut [Option<Mat>], nodes: &[Node], v: Var, g: Mat) {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            if !nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let val = |v: Var| resolve(&nodes, params, v);
            let out = || nodes[i].value.as_ref().expect("op node without value");
            match &nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if nodes[a.0].needs_grad {
                        acc(&mut grads, &nodes, *a, g.matmul_t(val(*b)));
                    }
                    if nodes[b.0].needs_grad {
                        acc(&mut grads, &nodes, *b, val(*a).t_matmul(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if nodes[a.0].needs_grad {
                        acc(&mut grads, &nodes, *a, g.matmul(val(*b)));
                    }
                    if nodes[b.0].needs_grad {
                        acc(&mut grads, &nodes, *b, g.t_matmul(val(*a)));
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, &nodes, *a, g.clone());
                    acc(&mut grads, &nodes, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, &nodes, *b, g.scale(-1.0));
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::Mul(a, b) => {
                    if nodes[a.0].needs_grad {
                        acc(&mut grads, &nodes, *a, g.zip_map(val(*b), |p, q| p * q));
                    }
                    if nodes[b.0].needs_grad {
                        acc(&mut grads, &nodes, *b, g.zip_map(val(*a), |p, q| p * q));
                    }
                }
                Op::AddRow(a, row) => {
                    if nodes[row.0].needs_grad {
                        acc(&mut grads, &nodes, *row, Mat::row_vector(&col_sums(&g)));
                    }
                    acc(&mut grads, &nodes, *a, g);
                }
                Op::MulRow(a, row) => {
                    let r = val(*row);
                    if nodes[row.0].needs_grad {
                        let ga = g.zip_map(val(*a), |p, q| p * q);
                        acc(&mut grads, &nodes, *row, Mat::row_vector(&col_sums(&ga)));
                    }
                    if nodes[a.0].needs_grad {
                        let mut ga = g.clone();
                        for k in 0..ga.rows() {
                            for (o, s) in ga.row_mut(k).iter_mut().zip(r.data()) {
                                *o *= s;
                            }
                        }
                        acc(&mut grads, &nodes, *a, ga);
                    }
                }
                Op::Scale(a, s) => acc(&mut grads, &nodes, *a, g.scale(*s)),
                Op::Transpose(a) => acc(&mut grads, &nodes, *a, g.transpose()),
                Op::Reshape(a) => {
                    let (r, c) = val(*a).shape();
                    acc(&mut grads, &nodes, *a, g.reshape(r, c));
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = val(*p).rows();
                        if nodes[p.0].needs_grad {
                            acc(&mut grads, &nodes, *p, g.slice_rows(start, n));
                        }
                        start += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = val(*p).cols();
                        if nodes[p.0].needs_grad {
                            acc(&mut grads, &nodes, *p, g.slice_cols(start, n));
                        }
                        start += n;
                    }
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = val(*a).shape();
                    let mut full = Mat::zeros(r, c);
                    full.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    acc(&mut grads, &nodes, *a, full);
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = val(*a).shape();
                    let mut full = Mat::zeros(r, c);
                    for k in 0..r {
                        full.row_mut(k)[*start..*start + g.cols()].copy_from_slice(g.row(k));
                    }
                    acc(&mut grads, &nodes, *a, full);
                }
                Op::GatherRows(a, idx) => {
                    let (r, c) = val(*a).shape();
                    let mut full = Mat::zeros(r, c);
                    for (k, &src) in idx.iter().enumerate() {
                        for (o, v) in full.row_mut(src).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, &nodes, *a, full);
                }
                Op::SoftmaxRows(a) => {
                    let y = out();
                    let mut ga = Mat::zeros(y.rows(), y.cols());
                    for k in 0..y.rows() {
                        let dotp: f64 = g.row(k).iter().zip(y.row(k)).map(|(p, q)| p * q).sum();
                        for ((o, gy), yy) in ga.row_mut(k).iter_mut().zip(g.row(k)).zip(y.row(k)) {
                            *o = yy * (gy - dotp);
                        }
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::SoftmaxGroups(a, groups) => {
                    let y = out();
                    let mut dots = std::collections::BTreeMap::<usize, f64>::new();
                    for (k, &grp) in groups.iter().enumerate() {
                        *dots.entry(grp).or_default() += g.data()[k] * y.data()[k];
                    }
                    let ga = Mat::from_fn(y.rows(), 1, |k, _| y.data()[k] * (g.data()[k] - dots[&groups[k]]));
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = out();
                    let mut ga = Mat::zeros(y.rows(), y.cols());
                    for k in 0..y.rows() {
                        let gs: f64 = g.row(k).iter().sum();
                        for ((o, gy), yy) in ga.row_mut(k).iter_mut().zip(g.row(k)).zip(y.row(k)) {
                            *o = gy - yy.exp() * gs;
                        }
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::LayerNormRows(a) => {
                    let (xhat, inv_std) = layer_norm_rows(val(*a));
                    let c = xhat.cols() as f64;
                    let mut ga = Mat::zeros(xhat.rows(), xhat.cols());
                    for k in 0..xhat.rows() {
                        let gr = g.row(k);
                        let xr = xhat.row(k);
                        let mg = gr.iter().sum::<f64>() / c;
                        let mgx = gr.iter().zip(xr).map(|(p, q)| p * q).sum::<f64>() / c;
                        for ((o, gi), xi) in ga.row_mut(k).iter_mut().zip(gr).zip(xr) {
                            *o = inv_std[k] * (gi - mg - xi * mgx);
                        }
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::L2NormalizeRows(a) => {
                    let x = val(*a);
                    let y = out();
                    let mut ga = Mat::zeros(x.rows(), x.cols());
                    for k in 0..x.rows() {
                        let n = x.row(k).iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                        let yg: f64 = y.row(k).iter().zip(g.row(k)).map(|(p, q)| p * q).sum();
                        for ((o, gi), yi) in ga.row_mut(k).iter_mut().zip(g.row(k)).zip(y.row(k)) {
                            *o = (gi - yi * yg) / n;
                        }
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
                Op::Gelu(a) => acc(&mut grads, &nodes, *a, g.zip_map(val(*a), |gi, x| gi * gelu_grad(x))),
                Op::Elu(a) => acc(&mut grads, &nodes, *a, g.zip_map(val(*a), |gi, x| if x > 0.0 { gi } else { gi * x.exp() })),
                Op::LeakyRelu(a, s) => {
                    let s = *s;
                    acc(&mut grads, &nodes, *a, g.zip_map(val(*a), |gi, x| if x > 0.0 { gi } else { gi * s }))
                }
                Op::Exp(a) => acc(&mut grads, &nodes, *a, g.zip_map(out(), |gi, y| gi * y)),
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    acc(&mut grads, &nodes, *a, g.zip_map(val(*a), |gi, x| if x > lo && x < hi { gi } else { 0.0 }))
                }
                Op::SmoothL1(a, beta) => {
                    let beta = *beta;
                    acc(&mut grads, &nodes, *a, g.zip_map(val(*a), |gi, x| gi * smooth_l1_grad(x, beta)))
                }
                Op::SumAll(a) => {
                    let (r, c) = val(*a).shape();
                    acc(&mut grads, &nodes, *a, Mat::filled(r, c, g.get(0, 0)));
                }
                Op::SumSquares(a) => {
                    let s = 2.0 * g.get(0, 0);
                    acc(&mut grads, &nodes, *a, val(*a).scale(s));
                }
                Op::MeanRows(a) => {
                    let (r, c) = val(*a).shape();
                    let mut ga = Mat::zeros(r, c);
                    for k in 0..r {
                        for (o, gi) in ga.row_mut(k).iter_mut().zip(g.data()) {
                            *o = gi / r as f64;
                        }
                    }
                    acc(&mut grads, &nodes, *a, ga);
                }
            }
        }

        let mut param_grads: Vec<Option<Mat>> = vec![None; params.len()];
        for (i, node) in nodes.iter().enumerate() {
            if let (Some(p), Some(g)) = (node.param, grads[i].take()) {
                param_grads[p.0] = Some(g);
            }
        }
        Gradients { nodes: grads, params: param_grads, shapes: params.values().iter().map(Mat::shape).collect() }
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    params: Vec<Option<Mat>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to a tracked input leaf, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params[id.0].as_ref()
    }

    /// Dense gradients aligned with the parameter set (zeros where unused).
    pub fn into_param_grads(self) -> Vec<Mat> {
        self.params
            .into_iter()
            .zip(self.shapes)
            .map(|(g, (r, c))| g.unwrap_or_else(|| Mat::zeros(r, c)))
            .collect()
    }
}

fn col_sums(m: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// Softmax of a column vector within groups of equal id.
pub fn softmax_groups(x: &Mat, groups: &[usize]) -> Mat {
    assert_eq!(x.cols(), 1, "grouped softmax takes a column vector");
    assert_eq!(x.rows(), groups.len(), "one group id per entry");
    let mut max = std::collections::BTreeMap::<usize, f64>::new();
    for (&v, &grp) in x.data().iter().zip(groups) {
        let m = max.entry(grp).or_insert(f64::NEG_INFINITY);
        *m = m.max(v);
    }
    let ex: Vec<f64> = x.data().iter().zip(groups).map(|(&v, grp)| (v - max[grp]).exp()).collect();
    let mut sums = std::collections::BTreeMap::<usize, f64>::new();
    for (&e, &grp) in ex.iter().zip(groups) {
        *sums.entry(grp).or_default() += e;
    }
    Mat::from_vec(x.rows(), 1, ex.iter().zip(groups).map(|(e, grp)| e / sums[grp]).collect())
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

fn layer_norm_rows(x: &Mat) -> (Mat, Vec<f64>) {
    let c = x.cols() as f64;
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / c;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
        let is = 1.0 / (var + LN_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * is);
        inv.push(is);
    }
    (out, inv)
}

#[inline]
pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

#[inline]
pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[inline]
fn smooth_l1(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        0.5 * x * x / beta
    } else {
        x.abs() - 0.5 * beta
    }
}

#[inline]
fn smooth_l1_grad(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

/// Evaluates a scalar loss built on a fresh tape and returns its value and
/// dense parameter gradients.
pub fn value_and_grad(params: &ParamSet, f: impl Fn(&Tape<'_>) -> Var) -> (f64, Vec<Mat>) {
    let t = Tape::new(params);
    let root = f(&t);
    let value = t.scalar(root);
    (value, t.backward(root).into_param_grads())
}

const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Central finite-difference check of every parameter tensor.
///
/// `loss` must be a pure function of the parameter values. Returns, per
/// tensor, `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-4)` over at most
/// `max_entries` probed entries (chosen with a fixed stride).
pub fn gradient_check(
    params: &ParamSet,
    analytic: &[Mat],
    max_entries: usize,
    step: f64,
    mut loss: impl FnMut(&ParamSet) -> f64,
) -> Vec<(String, f64)> {
    let mut probe = params.clone();
    let mut report = Vec::new();
    for id in params.ids() {
        let n = params.get(id).len();
        let stride = (n / max_entries.max(1)).max(1);
        let mut diff_sq = 0.0;
        let mut a_sq = 0.0;
        let mut n_sq = 0.0;
        let mut k = id.0 % stride.max(1);
        while k < n {
            let orig = params.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + step;
            let up = loss(&probe);
            probe.get_mut(id).data_mut()[k] = orig - step;
            let down = loss(&probe);
            probe.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[id.0].data()[k];
            diff_sq += (a - numeric) * (a - numeric);
            a_sq += a * a;
            n_sq += numeric * numeric;
            k += stride;
        }
        // Tensors whose true gradient vanishes (e.g. attention key biases)
        // only carry finite-difference noise; compare them on an absolute floor.
        let denom = a_sq.sqrt().max(n_sq.sqrt()).max(GRAD_CHECK_FLOOR);
        let rel = diff_sq.sqrt() / denom;
        report.push((params.name(id).to_string(), rel));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    /// Every op through one scalar loss, checked against central differences.
    #[test]
    fn all_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::new();
        let a = ps.add("a", rand_mat(&mut rng, 3, 4));
        let b = ps.add("b", rand_mat(&mut rng, 4, 4));
        let row = ps.add("row", rand_mat(&mut rng, 1, 4));
        let gain = ps.add("gain", rand_mat(&mut rng, 1, 4));
        let c = ps.add("c", rand_mat(&mut rng, 2, 4));

        let build = |t: &Tape<'_>| {
            let (a, b, row, gain, c) = (t.param(a), t.param(b), t.param(row), t.param(gain), t.param(c));
            let x = t.matmul(a, b);
            let x = t.add_row(x, row);
            let x = t.layer_norm_rows(x);
            let x = t.mul_row(x, gain);
            let x = t.gelu(x);
            let s = t.softmax_rows(t.matmul_t(x, c));
            let ls = t.log_softmax_rows(t.transpose(t.matmul_t(c, x)));
            let e = t.elu(t.slice_cols(x, 1, 2));
            let l = t.leaky_relu(t.slice_rows(x, 0, 2), 0.2);
            let cat = t.concat_cols(&[e, t.slice_cols(x, 0, 2)]);
            let cat = t.concat_rows(&[cat, l]);
            let g = t.gather_rows(cat, &[0, 2, 2, 4]);
            let n = t.l2_normalize_rows(g);
            let h = t.smooth_l1(t.scale(t.reshape(n, 2, 8), 3.0), 1.0);
            let ex = t.exp(t.clamp(t.mean_rows(x), -0.5, 0.5));
            let m = t.mul(s, ls);
            let grouped = t.softmax_groups(t.reshape(t.slice_rows(x, 0, 1), 4, 1), &[0, 1, 0, 0]);
            let grouped = t.sum(t.mul(grouped, t.constant(Mat::from_vec(4, 1, vec![0.3, -1.0, 2.0, 0.7]))));
            let terms = [t.sum(m), t.sum(h), t.sum_squares(ex), t.mean(t.sub(x, t.scale(x, 0.5))), grouped];
            let total = terms[1..].iter().fold(terms[0], |acc, &v| t.add(acc, v));
            total
        };
        let (_, grads) = value_and_grad(&ps, build);
        let report = gradient_check(&ps, &grads, 64, 1e-5, |p| value_and_grad(p, build).0);
        for (name, rel) in report {
            assert!(rel < 1e-6, "{name}: relative error {rel}");
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", Mat::filled(2, 2, 1.0));
        let t = Tape::new(&ps);
        let x = t.constant(Mat::identity(2));
        let y = t.sum(t.matmul(x, t.param(w)));
        let g = t.backward(y);
        assert!(g.wrt(x).is_none());
        assert_eq!(g.param(w).unwrap(), &Mat::filled(2, 2, 1.0));
    }
}
