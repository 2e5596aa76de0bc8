//! Define-by-run reverse-mode differentiation over [`Mat`] values.
//!
//! Build a fresh [`Tape`] per evaluation, create inputs with [`Tape::param`]
//! (differentiable) or [`Tape::constant`], combine them with the methods on
//! [`Var`], then call [`Tape::backward`] once on a 1×1 result.
//!
//! ```
//! use seedpc::autodiff::Tape;
//! use seedpc::tensor::Mat;
//!
//! let tape = Tape::new();
//! let x = tape.param(Mat::scalar(2.0));
//! let y = tape.param(Mat::scalar(3.0));
//! let f = x * y;
//! let grads = tape.backward(f).unwrap();
//! assert_eq!(grads.wrt(x).item(), 3.0);
//! assert_eq!(grads.wrt(y).item(), 2.0);
//! ```
//!
//! Elementwise binary operations require equal shapes; broadcasting is explicit
//! ([`Var::broadcast_rows`], [`Var::broadcast_cols`]). Shape mismatches panic.
//! Row gathers take their indices as constants, so an index chosen by a
//! nearest-neighbor search during the forward pass is not differentiated.
//! `abs` and `sqrt` use a zero (sub)gradient at 0.

use std::cell::{Cell, Ref, RefCell};
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use thiserror::Error;

use crate::tensor::Mat;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("backward already ran on this tape")]
    UseAfterBackward,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sqrt(usize),
    Abs(usize),
    Tanh(usize),
    Relu(usize),
    Recip(usize),
    Square(usize),
    Sum(usize),
    SumCols(usize),
    GroupSumRows(usize, usize),
    MatMul(usize, usize),
    BroadcastRows(usize),
    BroadcastCols(usize),
    GatherRows(usize, Rc<[usize]>),
    Reshape(usize),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Records operations for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    spent: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Mat, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable input.
    pub fn param(&self, value: Mat) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&self, value: Mat) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Sinusoidal embedding of a timestep as a constant 1×`dim` row:
    /// `sin(t·f_i)` in the first half, `cos(t·f_i)` in the second, with
    /// `f_i = 10000^(-i / (dim/2))`.
    pub fn sinusoidal(&self, t: f64, dim: usize) -> Var<'_> {
        self.constant(sinusoidal_embedding(t, dim))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Gradients of the scalar `output` with respect to every recorded value.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients, AutodiffError> {
        if !std::ptr::eq(output.tape, self) {
            return Err(AutodiffError::InvalidArgument(
                "output belongs to another tape".into(),
            ));
        }
        if output.shape() != (1, 1) {
            return Err(AutodiffError::InvalidArgument(format!(
                "backward needs a 1x1 output, got {:?}",
                output.shape()
            )));
        }
        if self.spent.replace(true) {
            return Err(AutodiffError::UseAfterBackward);
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Mat>> = vec![None; nodes.len()];
        grads[output.id] = Some(Mat::scalar(1.0));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Mat>], id: usize, delta: Mat) {
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.as_mut_slice().iter_mut().zip(delta.as_slice()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn propagate(nodes: &[Node], id: usize, g: &Mat, grads: &mut [Option<Mat>]) {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    let live = |i: usize| nodes[i].needs_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if live(*a) {
                accumulate(grads, *a, g.clone());
            }
            if live(*b) {
                accumulate(grads, *b, g.clone());
            }
        }
        Op::Sub(a, b) => {
            if live(*a) {
                accumulate(grads, *a, g.clone());
            }
            if live(*b) {
                accumulate(grads, *b, g.scale(-1.0));
            }
        }
        Op::Mul(a, b) => {
            if live(*a) {
                accumulate(grads, *a, g.zip_map(val(*b), |g, y| g * y));
            }
            if live(*b) {
                accumulate(grads, *b, g.zip_map(val(*a), |g, x| g * x));
            }
        }
        Op::Div(a, b) => {
            let (x, y) = (val(*a), val(*b));
            if live(*a) {
                accumulate(grads, *a, g.zip_map(y, |g, y| g / y));
            }
            if live(*b) {
                let q = x.zip_map(y, |x, y| x / (y * y));
                accumulate(grads, *b, g.zip_map(&q, |g, q| -g * q));
            }
        }
        Op::Neg(a) => accumulate(grads, *a, g.scale(-1.0)),
        Op::Scale(a, k) => accumulate(grads, *a, g.scale(*k)),
        Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
        Op::Sqrt(a) => {
            let d = g.zip_map(&node.value, |g, y| if y > 0.0 { g * 0.5 / y } else { 0.0 });
            accumulate(grads, *a, d);
        }
        Op::Abs(a) => {
            let d = g.zip_map(val(*a), |g, x| {
                if x > 0.0 {
                    g
                } else if x < 0.0 {
                    -g
                } else {
                    0.0
                }
            });
            accumulate(grads, *a, d);
        }
        Op::Tanh(a) => accumulate(grads, *a, g.zip_map(&node.value, |g, y| g * (1.0 - y * y))),
        Op::Relu(a) => {
            accumulate(grads, *a, g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 }))
        }
        Op::Recip(a) => accumulate(grads, *a, g.zip_map(&node.value, |g, y| -g * y * y)),
        Op::Square(a) => accumulate(grads, *a, g.zip_map(val(*a), |g, x| 2.0 * x * g)),
        Op::Sum(a) => {
            let (r, c) = val(*a).shape();
            accumulate(grads, *a, Mat::filled(r, c, g.item()));
        }
        Op::SumCols(a) => {
            let (r, c) = val(*a).shape();
            let mut d = Mat::zeros(r, c);
            for i in 0..r {
                d.row_mut(i).fill(g[(i, 0)]);
            }
            accumulate(grads, *a, d);
        }
        Op::GroupSumRows(a, group) => {
            let (r, c) = val(*a).shape();
            let mut d = Mat::zeros(r, c);
            for i in 0..r {
                d.row_mut(i).copy_from_slice(g.row(i / group));
            }
            accumulate(grads, *a, d);
        }
        Op::MatMul(a, b) => {
            if live(*a) {
                accumulate(grads, *a, g.matmul(&val(*b).transpose()));
            }
            if live(*b) {
                accumulate(grads, *b, val(*a).transpose().matmul(g));
            }
        }
        Op::BroadcastRows(a) => {
            let mut d = Mat::zeros(1, g.cols());
            for row in g.iter_rows() {
                for (s, v) in d.as_mut_slice().iter_mut().zip(row) {
                    *s += v;
                }
            }
            accumulate(grads, *a, d);
        }
        Op::BroadcastCols(a) => {
            let d = Mat::from_vec(g.rows(), 1, g.iter_rows().map(|r| r.iter().sum()).collect());
            accumulate(grads, *a, d);
        }
        Op::GatherRows(a, idx) => {
            let (r, c) = val(*a).shape();
            let mut d = Mat::zeros(r, c);
            for (i, &src) in idx.iter().enumerate() {
                for (s, v) in d.row_mut(src).iter_mut().zip(g.row(i)) {
                    *s += v;
                }
            }
            accumulate(grads, *a, d);
        }
        Op::Reshape(a) => {
            let (r, c) = val(*a).shape();
            accumulate(grads, *a, Mat::from_vec(r, c, g.as_slice().to_vec()));
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not reach the output.
    pub fn wrt(&self, v: Var<'_>) -> Mat {
        match self.grads.get(v.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = v.shape();
                Mat::zeros(r, c)
            }
        }
    }
}

pub fn sinusoidal_embedding(t: f64, dim: usize) -> Mat {
    let half = dim / 2;
    let mut out = Mat::zeros(1, dim);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out[(0, i)] = (t * freq).sin();
        out[(0, i + half)] = (t * freq).cos();
    }
    out
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Mat> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    fn unary(self, op: Op, f: impl FnOnce(&Mat) -> Mat) -> Var<'t> {
        let out = f(&self.value());
        let needs = self.tape.needs(self.id);
        self.tape.push(out, op, needs)
    }

    fn binary(self, other: Var<'t>, op: Op, f: impl FnOnce(&Mat, &Mat) -> Mat) -> Var<'t> {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
        let out = f(&self.value(), &other.value());
        let needs = self.tape.needs(self.id) || self.tape.needs(other.id);
        self.tape.push(out, op, needs)
    }

    fn same_shape(self, other: Var<'t>, what: &str) {
        assert_eq!(
            self.shape(),
            other.shape(),
            "{what}: shape {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, k), |a| a.scale(k))
    }

    pub fn add_scalar(self, k: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |a| a.map(|v| v + k))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id), |a| a.map(f64::sqrt))
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Op::Abs(self.id), |a| a.map(f64::abs))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), |a| a.map(f64::tanh))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |a| a.map(|v| v.max(0.0)))
    }

    pub fn recip(self) -> Var<'t> {
        self.unary(Op::Recip(self.id), |a| a.map(|v| 1.0 / v))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.id), |a| a.map(|v| v * v))
    }

    /// Sum of all entries, as 1×1.
    pub fn sum(self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |a| Mat::scalar(a.sum()))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Row sums: r×c → r×1.
    pub fn sum_cols(self) -> Var<'t> {
        self.unary(Op::SumCols(self.id), |a| {
            Mat::from_vec(a.rows(), 1, a.iter_rows().map(|r| r.iter().sum()).collect())
        })
    }

    /// Sums consecutive runs of `group` rows: (r·group)×c → r×c.
    pub fn group_sum_rows(self, group: usize) -> Var<'t> {
        assert!(group > 0 && self.rows().is_multiple_of(group), "rows not divisible by group");
        self.unary(Op::GroupSumRows(self.id, group), |a| {
            let mut out = Mat::zeros(a.rows() / group, a.cols());
            for (i, row) in a.iter_rows().enumerate() {
                for (o, v) in out.row_mut(i / group).iter_mut().zip(row) {
                    *o += v;
                }
            }
            out
        })
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::MatMul(self.id, other.id), |a, b| a.matmul(b))
    }

    /// Repeats a 1×c row `rows` times.
    pub fn broadcast_rows(self, rows: usize) -> Var<'t> {
        assert_eq!(self.rows(), 1, "broadcast_rows needs a single row");
        self.unary(Op::BroadcastRows(self.id), |a| {
            let mut data = Vec::with_capacity(rows * a.cols());
            for _ in 0..rows {
                data.extend_from_slice(a.as_slice());
            }
            Mat::from_vec(rows, a.cols(), data)
        })
    }

    /// Repeats an r×1 column `cols` times.
    pub fn broadcast_cols(self, cols: usize) -> Var<'t> {
        assert_eq!(self.cols(), 1, "broadcast_cols needs a single column");
        self.unary(Op::BroadcastCols(self.id), |a| {
            let mut data = Vec::with_capacity(a.rows() * cols);
            for &v in a.as_slice() {
                data.extend(std::iter::repeat_n(v, cols));
            }
            Mat::from_vec(a.rows(), cols, data)
        })
    }

    /// Rows picked by constant indices (repeats allowed).
    pub fn gather_rows(self, indices: &[usize]) -> Var<'t> {
        let idx: Rc<[usize]> = indices.into();
        self.unary(Op::GatherRows(self.id, idx), |a| a.select_rows(indices))
    }

    /// Reinterprets the row-major buffer with a new shape.
    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t> {
        assert_eq!(rows * cols, self.value().len(), "reshape changes size");
        self.unary(Op::Reshape(self.id), |a| {
            Mat::from_vec(rows, cols, a.as_slice().to_vec())
        })
    }

    /// Multiplies every row by the matching entry of an r×1 column.
    pub fn mul_col(self, col: Var<'t>) -> Var<'t> {
        let c = self.cols();
        self * col.broadcast_cols(c)
    }

    /// Adds a 1×c row to every row.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let r = self.rows();
        self + row.broadcast_rows(r)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.same_shape(rhs, "add");
        self.binary(rhs, Op::Add(self.id, rhs.id), |a, b| a.add(b))
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.same_shape(rhs, "sub");
        self.binary(rhs, Op::Sub(self.id, rhs.id), |a, b| a.sub(b))
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.same_shape(rhs, "mul");
        self.binary(rhs, Op::Mul(self.id, rhs.id), |a, b| a.zip_map(b, |x, y| x * y))
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        self.same_shape(rhs, "div");
        self.binary(rhs, Op::Div(self.id, rhs.id), |a, b| a.zip_map(b, |x, y| x / y))
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |a| a.scale(-1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect(),
        )
    }

    /// Central differences of a scalar function of one matrix input.
    fn finite_diff(f: &dyn Fn(&Mat) -> f64, x: &Mat, h: f64) -> Mat {
        let mut g = Mat::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut p = x.clone();
            p.as_mut_slice()[i] += h;
            let mut m = x.clone();
            m.as_mut_slice()[i] -= h;
            g.as_mut_slice()[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    fn check(name: &str, build: &dyn for<'t> Fn(Var<'t>) -> Var<'t>, x: Mat) {
        let tape = Tape::new();
        let v = tape.param(x.clone());
        let out = build(v);
        let ad = tape.backward(out).unwrap().wrt(v);
        let f = |m: &Mat| {
            let t = Tape::new();
            let r = build(t.constant(m.clone()));
            let val = r.value().item();
            val
        };
        let fd = finite_diff(&f, &x, 1e-5);
        for (a, n) in ad.as_slice().iter().zip(fd.as_slice()) {
            assert!(
                (a - n).abs() <= f64::max(1e-6, 1e-4 * n.abs()),
                "{name}: autodiff {a} vs finite difference {n}"
            );
        }
    }

    #[test]
    fn product_rule() {
        let tape = Tape::new();
        let x = tape.param(Mat::scalar(2.0));
        let y = tape.param(Mat::scalar(3.0));
        let g = tape.backward(x * y).unwrap();
        assert_eq!(g.wrt(x).item(), 3.0);
        assert_eq!(g.wrt(y).item(), 2.0);
    }

    #[test]
    fn abs_sum_gradient() {
        let tape = Tape::new();
        let x = tape.param(Mat::from_rows(&[[-1.0, 2.0, 0.0]]));
        let g = tape.backward(x.abs().sum()).unwrap();
        assert_eq!(g.wrt(x).into_vec(), vec![-1.0, 1.0, 0.0]);
    }

    #[test]
    fn errors() {
        let tape = Tape::new();
        let x = tape.param(Mat::from_rows(&[[1.0, 2.0]]));
        assert!(matches!(
            tape.backward(x),
            Err(AutodiffError::InvalidArgument(_))
        ));
        let s = x.sum();
        tape.backward(s).unwrap();
        assert_eq!(tape.backward(s).unwrap_err(), AutodiffError::UseAfterBackward);
    }

    #[test]
    fn unreached_inputs_have_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(Mat::from_rows(&[[1.0, 2.0]]));
        let y = tape.param(Mat::from_rows(&[[3.0, 4.0]]));
        let _unused = y.square();
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.wrt(y), Mat::zeros(1, 2));
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::new();
        let x = tape.param(Mat::scalar(3.0));
        let f = x * x + x;
        let g = tape.backward(f).unwrap();
        assert_eq!(g.wrt(x).item(), 7.0);
    }

    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..3 {
            let x = random(4, 3, &mut rng);
            let w = random(3, 2, &mut rng);
            let pos = x.map(|v| v.abs() + 0.5);
            check("add", &|v| (v + v.scale(2.0)).sum(), x.clone());
            check("sub", &|v| (v.square() - v).sum(), x.clone());
            check("mul", &|v| (v * v.tanh()).sum(), x.clone());
            check("div", &|v| (v / v.square().add_scalar(1.0)).sum(), x.clone());
            check("neg", &|v| (-v).square().sum(), x.clone());
            check("sqrt", &|v| v.sqrt().sum(), pos.clone());
            check("recip", &|v| v.recip().sum(), pos.clone());
            check("abs", &|v| v.abs().square().sum(), x.clone());
            check("relu", &|v| (v.relu() * v).sum(), x.clone());
            check("mean", &|v| v.tanh().mean(), x.clone());
            check("sum_cols", &|v| v.sum_cols().square().sum(), x.clone());
            check("group", &|v| v.group_sum_rows(2).square().sum(), x.clone());
            let wc = w.clone();
            check(
                "matmul_left",
                &move |v| {
                    let t = v.tape();
                    v.matmul(t.constant(wc.clone())).square().sum()
                },
                x.clone(),
            );
            let xc = x.clone();
            check(
                "matmul_right",
                &move |v| {
                    let t = v.tape();
                    t.constant(xc.clone()).matmul(v).tanh().sum()
                },
                w.clone(),
            );
            check(
                "broadcast_rows",
                &|v| v.broadcast_rows(3).square().sum(),
                random(1, 4, &mut rng),
            );
            check(
                "broadcast_cols",
                &|v| v.broadcast_cols(3).tanh().sum(),
                random(4, 1, &mut rng),
            );
            check(
                "gather",
                &|v| v.gather_rows(&[3, 0, 3, 1]).square().sum(),
                x.clone(),
            );
            check("reshape", &|v| v.reshape(2, 6).sum_cols().square().sum(), x.clone());
            check(
                "mul_col",
                &|v| {
                    let c = v.sum_cols();
                    v.mul_col(c).sum()
                },
                x.clone(),
            );
        }
    }

    #[test]
    fn sinusoidal_shape_and_values() {
        let e = sinusoidal_embedding(0.0, 8);
        assert_eq!(e.shape(), (1, 8));
        assert_eq!(&e.as_slice()[..4], &[0.0; 4]);
        assert_eq!(&e.as_slice()[4..], &[1.0; 4]);
        let e = sinusoidal_embedding(3.0, 4);
        assert!((e[(0, 0)] - 3f64.sin()).abs() < 1e-15);
        assert!((e[(0, 1)] - (3.0 * 0.01f64).sin()).abs() < 1e-15);
    }
}
