//! Matrix-level reverse-mode automatic differentiation.
//!
//! A [`Tape`] records dense-matrix operations as they are evaluated; each
//! [`Var`] is a handle to one recorded value. [`Tape::gradients`] runs the
//! reverse sweep from a scalar output and returns adjoints for any set of
//! inputs.
//!
//! Besides the usual elementwise and matrix-product rules, the tape carries
//! exact adjoints for Cholesky factorisation (the `Φ`-operator form) and for
//! lower-triangular solves, which is what makes the closed-form layerwise
//! posteriors trainable end to end.
//!
//! ```
//! use bnnp::autodiff::Tape;
//! use nalgebra::DMatrix;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(DMatrix::from_element(1, 1, 3.0));
//! let y = x.square().sum();
//! let g = tape.gradients(y, &[x]);
//! assert_eq!(g[0][(0, 0)], 6.0);
//! ```

use std::cell::{Ref, RefCell};
use std::ops::{Add, Mul, Neg, Sub};

use crate::error::Result;
use crate::linalg::{cholesky_jittered, solve_lower, solve_lower_transpose, Mat};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    AddCol(usize, usize),
    ScaleRows(usize, usize),
    ScaleCols(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    MatMul(usize, usize),
    TrMatMul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Ln(usize),
    Tanh(usize),
    Relu(usize),
    Silu(usize),
    Square(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    SumSquares(usize),
    Cholesky(usize),
    SolveLower(usize, usize),
    SolveLowerT(usize, usize),
    LogDiagSum(usize),
    CholDecode(usize, f64),
    DiagEmbed(usize),
    Slice(usize, usize, usize),
    VCat(Vec<usize>),
    HCat(Vec<usize>),
    BlockDiag(Vec<usize>),
    Reshape(usize),
    LogSumExp(usize),
}

struct Node {
    value: Mat,
    op: Op,
    tracked: bool,
}

/// Recording of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}[{}x{}]", self.id, r, c)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Mat, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn tracked(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].tracked)
    }

    fn record(&self, value: Mat, op: Op, inputs: &[usize]) -> Var<'_> {
        let tracked = self.tracked(inputs);
        self.push(value, op, tracked)
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Mat) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Mat) -> Var<'_> {
        self.push(value, Op::Const, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Mat::from_element(1, 1, value))
    }

    pub fn identity(&self, n: usize) -> Var<'_> {
        self.constant(Mat::identity(n, n))
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Mat> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn unary(&self, a: usize, f: impl FnOnce(&Mat) -> Mat, op: Op) -> Var<'_> {
        let v = f(&self.value_ref(a));
        self.record(v, op, &[a])
    }

    fn binary(&self, a: usize, b: usize, f: impl FnOnce(&Mat, &Mat) -> Mat, op: Op) -> Var<'_> {
        let v = {
            let nodes = self.nodes.borrow();
            f(&nodes[a].value, &nodes[b].value)
        };
        self.record(v, op, &[a, b])
    }

    /// Vertical concatenation.
    pub fn vcat<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let v = {
            let nodes = self.nodes.borrow();
            let cols = parts.first().map(|p| nodes[p.id].value.ncols()).unwrap_or(0);
            let rows: usize = ids.iter().map(|&i| nodes[i].value.nrows()).sum();
            let mut out = Mat::zeros(rows, cols);
            let mut r = 0;
            for &i in &ids {
                let m = &nodes[i].value;
                assert_eq!(m.ncols(), cols, "vcat column mismatch");
                out.view_mut((r, 0), m.shape()).copy_from(m);
                r += m.nrows();
            }
            out
        };
        self.record(v, Op::VCat(ids.clone()), &ids)
    }

    /// Horizontal concatenation.
    pub fn hcat<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let v = {
            let nodes = self.nodes.borrow();
            let rows = parts.first().map(|p| nodes[p.id].value.nrows()).unwrap_or(0);
            let cols: usize = ids.iter().map(|&i| nodes[i].value.ncols()).sum();
            let mut out = Mat::zeros(rows, cols);
            let mut c = 0;
            for &i in &ids {
                let m = &nodes[i].value;
                assert_eq!(m.nrows(), rows, "hcat row mismatch");
                out.view_mut((0, c), m.shape()).copy_from(m);
                c += m.ncols();
            }
            out
        };
        self.record(v, Op::HCat(ids.clone()), &ids)
    }

    /// Block-diagonal matrix from the given blocks.
    pub fn block_diag<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let v = {
            let nodes = self.nodes.borrow();
            let blocks: Vec<Mat> = ids.iter().map(|&i| nodes[i].value.clone()).collect();
            crate::linalg::block_diag(&blocks)
        };
        self.record(v, Op::BlockDiag(ids.clone()), &ids)
    }

    /// Sum of scalar (1x1) vars; `0` for an empty list.
    pub fn sum_all<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        match parts.split_first() {
            None => self.scalar(0.0),
            Some((first, rest)) => rest.iter().fold(*first, |acc, p| acc + *p),
        }
    }

    /// Adjoints of scalar `output` with respect to each of `wrt`.
    ///
    /// Inputs the output does not depend on get zero matrices.
    pub fn gradients(&self, output: Var<'_>, wrt: &[Var<'_>]) -> Vec<Mat> {
        let nodes = self.nodes.borrow();
        let out = output.id;
        assert_eq!(nodes[out].value.shape(), (1, 1), "gradient of non-scalar output");
        let mut grads: Vec<Option<Mat>> = vec![None; out + 1];
        grads[out] = Some(Mat::from_element(1, 1, 1.0));

        for id in (0..=out).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].tracked {
                continue;
            }
            let node = &nodes[id];
            let val = |i: usize| -> &Mat { &nodes[i].value };
            let needs = |i: usize| nodes[i].tracked;
            let mut acc = |i: usize, m: Mat| {
                if !nodes[i].tracked {
                    return;
                }
                match &mut grads[i] {
                    Some(existing) => *existing += m,
                    slot @ None => *slot = Some(m),
                }
            };
            match &node.op {
                Op::Leaf | Op::Const => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, -g);
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        acc(*a, g.component_mul(val(*b)));
                    }
                    if needs(*b) {
                        acc(*b, g.component_mul(val(*a)));
                    }
                }
                Op::AddRow(a, row) => {
                    if needs(*row) {
                        acc(*row, Mat::from_row_slice(1, g.ncols(), g.row_sum().as_slice()));
                    }
                    acc(*a, g);
                }
                Op::AddCol(a, col) => {
                    if needs(*col) {
                        acc(*col, Mat::from_column_slice(g.nrows(), 1, g.column_sum().as_slice()));
                    }
                    acc(*a, g);
                }
                Op::ScaleRows(a, v) => {
                    let av = val(*a);
                    let vv = val(*v);
                    if needs(*v) {
                        let gv = Mat::from_fn(vv.nrows(), 1, |i, _| g.row(i).dot(&av.row(i)));
                        acc(*v, gv);
                    }
                    if needs(*a) {
                        let mut ga = g;
                        for i in 0..ga.nrows() {
                            let s = vv[(i, 0)];
                            ga.row_mut(i).scale_mut(s);
                        }
                        acc(*a, ga);
                    }
                }
                Op::ScaleCols(a, v) => {
                    let av = val(*a);
                    let vv = val(*v);
                    if needs(*v) {
                        let gv = Mat::from_fn(1, vv.ncols(), |_, j| g.column(j).dot(&av.column(j)));
                        acc(*v, gv);
                    }
                    if needs(*a) {
                        let mut ga = g;
                        for j in 0..ga.ncols() {
                            let s = vv[(0, j)];
                            ga.column_mut(j).scale_mut(s);
                        }
                        acc(*a, ga);
                    }
                }
                Op::Scale(a, c) => acc(*a, g * *c),
                Op::Offset(a) => acc(*a, g),
                Op::MatMul(a, b) => {
                    if needs(*a) {
                        acc(*a, &g * val(*b).transpose());
                    }
                    if needs(*b) {
                        acc(*b, val(*a).tr_mul(&g));
                    }
                }
                Op::TrMatMul(a, b) => {
                    if needs(*a) {
                        acc(*a, val(*b) * g.transpose());
                    }
                    if needs(*b) {
                        acc(*b, val(*a) * &g);
                    }
                }
                Op::Transpose(a) => acc(*a, g.transpose()),
                Op::Exp(a) => acc(*a, g.component_mul(&node.value)),
                Op::Ln(a) => acc(*a, g.component_div(val(*a))),
                Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |gi, t| gi * (1.0 - t * t))),
                Op::Relu(a) => acc(*a, g.zip_map(val(*a), |gi, x| if x > 0.0 { gi } else { 0.0 })),
                Op::Silu(a) => acc(
                    *a,
                    g.zip_map(val(*a), |gi, x| {
                        let s = sigmoid(x);
                        gi * s * (1.0 + x * (1.0 - s))
                    }),
                ),
                Op::Square(a) => acc(*a, g.zip_map(val(*a), |gi, x| 2.0 * gi * x)),
                Op::Clamp(a, lo, hi) => acc(
                    *a,
                    g.zip_map(val(*a), |gi, x| if x >= *lo && x <= *hi { gi } else { 0.0 }),
                ),
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Mat::from_element(r, c, g[(0, 0)]));
                }
                Op::SumSquares(a) => acc(*a, val(*a) * (2.0 * g[(0, 0)])),
                Op::Cholesky(a) => acc(*a, cholesky_adjoint(&node.value, &g)),
                Op::SolveLower(l, b) => {
                    let bbar = solve_lower_transpose(val(*l), &g);
                    if needs(*l) {
                        acc(*l, -tril_of(&(&bbar * node.value.transpose())));
                    }
                    acc(*b, bbar);
                }
                Op::SolveLowerT(l, b) => {
                    let bbar = solve_lower(val(*l), &g);
                    if needs(*l) {
                        acc(*l, -tril_of(&(&node.value * bbar.transpose())));
                    }
                    acc(*b, bbar);
                }
                Op::LogDiagSum(a) => {
                    let av = val(*a);
                    let n = av.nrows();
                    let mut ga = Mat::zeros(n, n);
                    for i in 0..n {
                        ga[(i, i)] = g[(0, 0)] / av[(i, i)];
                    }
                    acc(*a, ga);
                }
                Op::CholDecode(raw, min_log) => {
                    let rv = val(*raw);
                    let n = rv.nrows();
                    let mut ga = Mat::zeros(n, n);
                    for j in 0..n {
                        for i in j..n {
                            ga[(i, j)] = if i == j {
                                if rv[(i, i)] >= *min_log {
                                    g[(i, i)] * node.value[(i, i)]
                                } else {
                                    0.0
                                }
                            } else {
                                g[(i, j)]
                            };
                        }
                    }
                    acc(*raw, ga);
                }
                Op::DiagEmbed(v) => acc(*v, Mat::from_column_slice(g.nrows(), 1, g.diagonal().as_slice())),
                Op::Slice(a, r, c) => {
                    let (ar, ac) = val(*a).shape();
                    let mut ga = Mat::zeros(ar, ac);
                    ga.view_mut((*r, *c), g.shape()).copy_from(&g);
                    acc(*a, ga);
                }
                Op::VCat(ids) => {
                    let mut r = 0;
                    for &i in ids {
                        let n = val(i).nrows();
                        if needs(i) {
                            acc(i, g.rows(r, n).into_owned());
                        }
                        r += n;
                    }
                }
                Op::HCat(ids) => {
                    let mut c = 0;
                    for &i in ids {
                        let n = val(i).ncols();
                        if needs(i) {
                            acc(i, g.columns(c, n).into_owned());
                        }
                        c += n;
                    }
                }
                Op::BlockDiag(ids) => {
                    let (mut r, mut c) = (0, 0);
                    for &i in ids {
                        let shape = val(i).shape();
                        if needs(i) {
                            acc(i, g.view((r, c), shape).into_owned());
                        }
                        r += shape.0;
                        c += shape.1;
                    }
                }
                Op::Reshape(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Mat::from_column_slice(r, c, g.as_slice()));
                }
                Op::LogSumExp(a) => {
                    let lse = node.value[(0, 0)];
                    acc(*a, val(*a).map(|x| g[(0, 0)] * (x - lse).exp()));
                }
            }
        }
        wrt.iter()
            .map(|v| {
                grads
                    .get(v.id)
                    .cloned()
                    .flatten()
                    .unwrap_or_else(|| Mat::zeros(nodes[v.id].value.nrows(), nodes[v.id].value.ncols()))
            })
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn tril_of(a: &Mat) -> Mat {
    crate::linalg::tril(a)
}

/// Adjoint of `A ↦ chol(A)` for symmetric `A`:
/// `Ā = L⁻ᵀ · sym(Φ(Lᵀ L̄)) · L⁻¹`, where `Φ` keeps the lower triangle and
/// halves the diagonal.
fn cholesky_adjoint(l: &Mat, lbar: &Mat) -> Mat {
    let n = l.nrows();
    let mut p = l.tr_mul(&tril_of(lbar));
    for j in 0..n {
        for i in 0..j {
            p[(i, j)] = 0.0;
        }
        p[(j, j)] *= 0.5;
    }
    let s = (&p + p.transpose()) * 0.5;
    let x = solve_lower_transpose(l, &s);
    let abar = solve_lower_transpose(l, &x.transpose()).transpose();
    (&abar + abar.transpose()) * 0.5
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Mat {
        self.tape.value_ref(self.id).clone()
    }

    /// Value of a 1x1 var.
    pub fn scalar(&self) -> f64 {
        let v = self.tape.value_ref(self.id);
        debug_assert_eq!(v.shape(), (1, 1));
        v[(0, 0)]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.value_ref(self.id).shape()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    /// Same value, cut off from the gradient.
    pub fn detach(self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, other.id, |a, b| a * b, Op::MatMul(self.id, other.id))
    }

    /// `selfᵀ · other`.
    pub fn tr_matmul(self, other: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.id, other.id, |a, b| a.tr_mul(b), Op::TrMatMul(self.id, other.id))
    }

    pub fn t(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.transpose(), Op::Transpose(self.id))
    }

    /// Elementwise product.
    pub fn hadamard(self, other: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.id, other.id, |a, b| a.component_mul(b), Op::Mul(self.id, other.id))
    }

    /// Adds a `1 x m` row to every row.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        self.tape.binary(
            self.id,
            row.id,
            |a, r| {
                let mut out = a.clone();
                for mut rw in out.row_iter_mut() {
                    rw += r;
                }
                out
            },
            Op::AddRow(self.id, row.id),
        )
    }

    /// Adds an `n x 1` column to every column.
    pub fn add_col(self, col: Var<'t>) -> Var<'t> {
        self.tape.binary(
            self.id,
            col.id,
            |a, c| {
                let mut out = a.clone();
                for mut cl in out.column_iter_mut() {
                    cl += c;
                }
                out
            },
            Op::AddCol(self.id, col.id),
        )
    }

    /// `diag(v) · self` for an `n x 1` column `v`.
    pub fn scale_rows(self, v: Var<'t>) -> Var<'t> {
        self.tape.binary(
            self.id,
            v.id,
            |a, v| {
                let mut out = a.clone();
                for i in 0..out.nrows() {
                    out.row_mut(i).scale_mut(v[(i, 0)]);
                }
                out
            },
            Op::ScaleRows(self.id, v.id),
        )
    }

    /// `self · diag(v)` for a `1 x m` row `v`.
    pub fn scale_cols(self, v: Var<'t>) -> Var<'t> {
        self.tape.binary(
            self.id,
            v.id,
            |a, v| {
                let mut out = a.clone();
                for j in 0..out.ncols() {
                    out.column_mut(j).scale_mut(v[(0, j)]);
                }
                out
            },
            Op::ScaleCols(self.id, v.id),
        )
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, |a| a * c, Op::Scale(self.id, c))
    }

    pub fn offset(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, |a| a.add_scalar(c), Op::Offset(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.map(f64::exp), Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.map(f64::ln), Op::Ln(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.map(f64::tanh), Op::Tanh(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.map(|x| x.max(0.0)), Op::Relu(self.id))
    }

    pub fn silu(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.map(|x| x * sigmoid(x)), Op::Silu(self.id))
    }

    pub fn square(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.map(|x| x * x), Op::Square(self.id))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.tape
            .unary(self.id, |a| a.map(|x| x.clamp(lo, hi)), Op::Clamp(self.id, lo, hi))
    }

    pub fn sum(self) -> Var<'t> {
        self.tape
            .unary(self.id, |a| Mat::from_element(1, 1, a.sum()), Op::Sum(self.id))
    }

    pub fn sum_squares(self) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| Mat::from_element(1, 1, a.norm_squared()),
            Op::SumSquares(self.id),
        )
    }

    /// Lower Cholesky factor, with the jitter ladder of [`cholesky_jittered`].
    pub fn cholesky(self, context: &str) -> Result<Var<'t>> {
        let l = cholesky_jittered(&self.tape.value_ref(self.id), context)?.0;
        Ok(self.tape.record(l, Op::Cholesky(self.id), &[self.id]))
    }

    /// `self⁻¹ · b` for lower-triangular `self`.
    pub fn solve_lower(self, b: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.id, b.id, solve_lower, Op::SolveLower(self.id, b.id))
    }

    /// `self⁻ᵀ · b` for lower-triangular `self`.
    pub fn solve_lower_t(self, b: Var<'t>) -> Var<'t> {
        self.tape.binary(
            self.id,
            b.id,
            solve_lower_transpose,
            Op::SolveLowerT(self.id, b.id),
        )
    }

    /// `Σᵢ ln self[i,i]`.
    pub fn log_diag_sum(self) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| Mat::from_element(1, 1, a.diagonal().iter().map(|d| d.ln()).sum()),
            Op::LogDiagSum(self.id),
        )
    }

    /// Lower-triangular factor from unconstrained entries: strict lower part
    /// as is, diagonal `exp(max(raw, min_log))`, upper part ignored.
    pub fn chol_decode(self, min_log: f64) -> Var<'t> {
        self.tape.unary(
            self.id,
            |raw| decode_cholesky(raw, min_log),
            Op::CholDecode(self.id, min_log),
        )
    }

    /// Diagonal matrix from an `n x 1` column.
    pub fn diag_embed(self) -> Var<'t> {
        self.tape.unary(
            self.id,
            |v| Mat::from_diagonal(&v.column(0).into_owned()),
            Op::DiagEmbed(self.id),
        )
    }

    pub fn slice(self, r: usize, c: usize, nr: usize, nc: usize) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| a.view((r, c), (nr, nc)).into_owned(),
            Op::Slice(self.id, r, c),
        )
    }

    pub fn column(self, j: usize) -> Var<'t> {
        let n = self.rows();
        self.slice(0, j, n, 1)
    }

    pub fn rows_range(self, start: usize, n: usize) -> Var<'t> {
        let c = self.cols();
        self.slice(start, 0, n, c)
    }

    /// Column-major reshape (so `reshape(d*u, 1)` of a `d x u` matrix is `vec`).
    pub fn reshape(self, nr: usize, nc: usize) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| {
                assert_eq!(a.len(), nr * nc, "reshape size mismatch");
                Mat::from_column_slice(nr, nc, a.as_slice())
            },
            Op::Reshape(self.id),
        )
    }

    /// `log Σ exp` over all entries.
    pub fn log_sum_exp(self) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| Mat::from_element(1, 1, crate::linalg::log_sum_exp(a.as_slice())),
            Op::LogSumExp(self.id),
        )
    }
}

/// Shared decoder for Cholesky parameterisations (see [`Var::chol_decode`]).
pub fn decode_cholesky(raw: &Mat, min_log: f64) -> Mat {
    let n = raw.nrows();
    Mat::from_fn(n, n, |i, j| {
        if i == j {
            raw[(i, i)].max(min_log).exp()
        } else if i > j {
            raw[(i, j)]
        } else {
            0.0
        }
    })
}

/// Inverse of [`decode_cholesky`] for a factor with positive diagonal.
pub fn encode_cholesky(factor: &Mat) -> Mat {
    let n = factor.nrows();
    Mat::from_fn(n, n, |i, j| {
        if i == j {
            factor[(i, i)].ln()
        } else if i > j {
            factor[(i, j)]
        } else {
            0.0
        }
    })
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, rhs.id, |a, b| a + b, Op::Add(self.id, rhs.id))
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, rhs.id, |a, b| a - b, Op::Sub(self.id, rhs.id))
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.scale(rhs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    }

    /// Central-difference check of `f` at each entry of every input.
    fn check<F>(inputs: &[Mat], f: F, tol: f64)
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
    {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = f(&tape, &vars);
        let grads = tape.gradients(out, &vars);
        let eval = |xs: &[Mat]| {
            let t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|m| t.leaf(m.clone())).collect();
            f(&t, &vs).scalar()
        };
        let h = 1e-6;
        for (k, m) in inputs.iter().enumerate() {
            for idx in 0..m.len() {
                let mut plus = inputs.to_vec();
                plus[k][idx] += h;
                let mut minus = inputs.to_vec();
                minus[k][idx] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let ad = grads[k][idx];
                let err = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-3);
                assert!(err < tol, "input {k} entry {idx}: ad {ad} fd {fd}");
            }
        }
    }

    fn spd(rng: &mut ChaCha8Rng, n: usize) -> Mat {
        let a = randn(rng, n, n);
        &a * a.transpose() + Mat::identity(n, n) * n as f64
    }

    #[test]
    fn elementwise_and_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, 3, 4);
        let b = randn(&mut rng, 4, 2);
        let row = randn(&mut rng, 1, 2);
        check(
            &[a, b, row],
            |_, v| {
                let h = v[0].matmul(v[1]).add_row(v[2]);
                (h.tanh() + h.silu() + h.relu().scale(0.3) + h.square()).sum()
            },
            1e-6,
        );
    }

    #[test]
    fn scaling_broadcasts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randn(&mut rng, 3, 2);
        let col = randn(&mut rng, 3, 1);
        let row = randn(&mut rng, 1, 2);
        check(
            &[a, col, row],
            |_, v| {
                let x = v[0].scale_rows(v[1]).scale_cols(v[2]).add_col(v[1]);
                x.tr_matmul(v[0]).exp().sum() + x.log_sum_exp()
            },
            1e-6,
        );
    }

    #[test]
    fn cholesky_adjoint_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = spd(&mut rng, 4);
        let w = randn(&mut rng, 4, 4);
        // symmetric perturbations only: feed (X + Xᵀ)/2 into the factorisation
        check(
            &[a, w],
            |_, v| {
                let sym = (v[0] + v[0].t()).scale(0.5);
                let l = sym.cholesky("test").unwrap();
                l.hadamard(v[1]).sum() + l.log_diag_sum()
            },
            1e-5,
        );
    }

    #[test]
    fn triangular_solve_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let raw = randn(&mut rng, 3, 3);
        let b = randn(&mut rng, 3, 2);
        let w = randn(&mut rng, 3, 2);
        check(
            &[raw, b, w],
            |_, v| {
                let l = v[0].chol_decode(-5.0);
                let x = l.solve_lower(v[1]);
                let y = l.solve_lower_t(v[1]);
                x.hadamard(v[2]).sum() + y.sum_squares()
            },
            1e-5,
        );
    }

    #[test]
    fn structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = randn(&mut rng, 2, 3);
        let b = randn(&mut rng, 2, 3);
        let v = randn(&mut rng, 3, 1);
        check(
            &[a, b, v],
            |t, x| {
                let s = t.vcat(&[x[0], x[1]]);
                let h = t.hcat(&[x[0], x[1]]);
                let bd = t.block_diag(&[x[0], x[1]]);
                let d = x[2].diag_embed();
                let r = x[0].reshape(6, 1);
                s.slice(1, 1, 2, 2).square().sum()
                    + h.column(4).sum()
                    + bd.rows_range(1, 2).sum_squares()
                    + d.matmul(x[2]).sum()
                    + r.hadamard(r).sum()
                    + x[0].clamp(-0.5, 0.5).sum()
            },
            1e-6,
        );
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Mat::from_element(1, 1, 2.0));
        let y = (x.square() + x.detach().square()).sum();
        let g = tape.gradients(y, &[x]);
        assert_eq!(g[0][(0, 0)], 4.0);
    }

    #[test]
    fn encode_decode_roundtrip() {
        let l = Mat::from_row_slice(2, 2, &[1.5, 0.0, -0.4, 0.2]);
        let back = decode_cholesky(&encode_cholesky(&l), -30.0);
        assert!((back - l).amax() < 1e-15);
    }
}
