//! Reverse-mode differentiation over a linear tape.
//!
//! Operations append nodes to a [`Tape`]; [`Tape::backward`] walks the tape
//! in reverse from a scalar root and accumulates gradients into every node
//! that requires one. Nodes created with [`Tape::constant`] never receive
//! gradients and prune the backward walk.

use super::tensor::{broadcast_index, broadcast_shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Gelu,
    Sigmoid,
    Log,
    Abs,
    Square,
    Exp,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// Elementwise operation selector, covering both arities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Unary(UnaryOp),
    Binary(BinaryOp),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(UnaryOp, Var),
    Binary(BinaryOp, Var, Var),
    MatMul(Var, Var),
    Scale(Var, f64),
    Clamp(Var, f64, f64),
    Sum(Var),
    SoftmaxRows(Var),
    SelectRows(Var, Vec<usize>),
    Chamfer {
        a: Var,
        b: Var,
        a_to_b: Vec<usize>,
        b_to_a: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> String {
        match self {
            Op::Leaf => "leaf".into(),
            Op::Unary(u, _) => format!("{u:?}").to_lowercase(),
            Op::Binary(b, _, _) => format!("{b:?}").to_lowercase(),
            Op::MatMul(..) => "matmul".into(),
            Op::Scale(..) => "scale".into(),
            Op::Clamp(..) => "clamp".into(),
            Op::Sum(_) => "sum".into(),
            Op::SoftmaxRows(_) => "softmax".into(),
            Op::SelectRows(..) => "select_rows".into(),
            Op::Chamfer { .. } => "chamfer".into(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zeros when `v` does not
    /// influence the root.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the first row of `set` nearest to `x` in squared distance.
fn nearest(x: &[f64], set: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, r) in set.iter_rows().enumerate() {
        let d = sq_dist(x, r);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, inputs: &[Var]) -> Result<Var> {
        match (op, inputs) {
            (ElementwiseOp::Unary(u), [x]) => self.unary(u, *x),
            (ElementwiseOp::Binary(b), [x, y]) => self.binary(b, *x, *y),
            _ => Err(Error::contract(format!(
                "{op:?} applied to {} inputs",
                inputs.len()
            ))),
        }
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if op == UnaryOp::Log {
            if let Some(bad) = xv.data().iter().find(|&&v| v <= 0.0) {
                return Err(Error::Domain(format!("log of non-positive value {bad}")));
            }
        }
        let f: fn(f64) -> f64 = match op {
            UnaryOp::Relu => |v| v.max(0.0),
            UnaryOp::Gelu => gelu,
            UnaryOp::Sigmoid => sigmoid,
            UnaryOp::Log => f64::ln,
            UnaryOp::Abs => f64::abs,
            UnaryOp::Square => |v| v * v,
            UnaryOp::Exp => f64::exp,
            UnaryOp::Neg => |v| -v,
        };
        let out = xv.map(f);
        let rg = self.rg(x);
        self.push(out, Op::Unary(op, x), rg)
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let shape = broadcast_shape(av.shape(), bv.shape())?;
        let ia = broadcast_index(av.shape(), &shape);
        let ib = broadcast_index(bv.shape(), &shape);
        let (ad, bd) = (av.data(), bv.data());
        let data: Vec<f64> = ia
            .iter()
            .zip(&ib)
            .map(|(&i, &j)| match op {
                BinaryOp::Add => ad[i] + bd[j],
                BinaryOp::Sub => ad[i] - bd[j],
                BinaryOp::Mul => ad[i] * bd[j],
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(shape, data), Op::Binary(op, a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Gelu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Abs, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Square, x)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * k);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, k), rg)
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(out, Op::Clamp(x, lo, hi), rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Row-wise softmax of a `[rows, cols]` matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(Error::dim(format!(
                "softmax_rows needs a matrix, got {:?}",
                xv.shape()
            )));
        }
        let mut data = Vec::with_capacity(xv.len());
        for r in xv.iter_rows() {
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            data.extend(e.into_iter().map(|v| v / z));
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// Gather rows of a matrix; repeated indices are allowed.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(Error::dim(format!(
                "select_rows needs a matrix, got {:?}",
                xv.shape()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return Err(Error::contract(format!(
                "row {bad} out of range for {} rows",
                xv.rows()
            )));
        }
        let out = xv.select_rows(idx);
        let rg = self.rg(x);
        self.push(out, Op::SelectRows(x, idx.to_vec()), rg)
    }

    /// Symmetric Chamfer distance between the row sets of two matrices:
    /// the sum of squared nearest-neighbour distances in both directions.
    /// Gradients route through the first minimizing index.
    pub fn chamfer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.cols() {
            return Err(Error::dim(format!(
                "chamfer needs matrices of equal width, got {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        if av.rows() == 0 || bv.rows() == 0 {
            return Err(Error::contract("chamfer distance of an empty set"));
        }
        let mut total = 0.0;
        let mut a_to_b = Vec::with_capacity(av.rows());
        for r in av.iter_rows() {
            let (j, d) = nearest(r, bv);
            a_to_b.push(j);
            total += d;
        }
        let mut b_to_a = Vec::with_capacity(bv.rows());
        for r in bv.iter_rows() {
            let (i, d) = nearest(r, av);
            b_to_a.push(i);
            total += d;
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::scalar(total),
            Op::Chamfer {
                a,
                b,
                a_to_b,
                b_to_a,
            },
            rg,
        )
    }

    /// Reverse-mode accumulation from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::contract(format!(
                "backward from non-scalar root of shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if self.rg(root) {
            grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Unary(op, x) => {
                    let xv = self.value(*x).data();
                    let yv = node.value.data();
                    let gd: Vec<f64> = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| {
                            let d = match op {
                                UnaryOp::Relu => {
                                    if xv[i] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                UnaryOp::Gelu => gelu_grad(xv[i]),
                                UnaryOp::Sigmoid => yv[i] * (1.0 - yv[i]),
                                UnaryOp::Log => 1.0 / xv[i],
                                UnaryOp::Abs => {
                                    if xv[i] > 0.0 {
                                        1.0
                                    } else if xv[i] < 0.0 {
                                        -1.0
                                    } else {
                                        0.0
                                    }
                                }
                                UnaryOp::Square => 2.0 * xv[i],
                                UnaryOp::Exp => yv[i],
                                UnaryOp::Neg => -1.0,
                            };
                            gi * d
                        })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_parts(g.shape().to_vec(), gd));
                }
                Op::Binary(op, a, b) => {
                    let out_shape = node.value.shape();
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        let ga = match op {
                            BinaryOp::Add | BinaryOp::Sub => g.clone(),
                            BinaryOp::Mul => {
                                let ib = broadcast_index(bv.shape(), out_shape);
                                let d = g
                                    .data()
                                    .iter()
                                    .zip(&ib)
                                    .map(|(gi, &j)| gi * bv.data()[j])
                                    .collect();
                                Tensor::from_parts(out_shape.to_vec(), d)
                            }
                        };
                        accumulate(&mut grads, *a, reduce_to(&ga, av.shape()));
                    }
                    if self.rg(*b) {
                        let gb = match op {
                            BinaryOp::Add => g.clone(),
                            BinaryOp::Sub => g.map(|v| -v),
                            BinaryOp::Mul => {
                                let ia = broadcast_index(av.shape(), out_shape);
                                let d = g
                                    .data()
                                    .iter()
                                    .zip(&ia)
                                    .map(|(gi, &i)| gi * av.data()[i])
                                    .collect();
                                Tensor::from_parts(out_shape.to_vec(), d)
                            }
                        };
                        accumulate(&mut grads, *b, reduce_to(&gb, bv.shape()));
                    }
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let ga = g.matmul(&self.value(*b).t())?;
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = self.value(*a).t().matmul(&g)?;
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Scale(x, k) => accumulate(&mut grads, *x, g.map(|v| v * k)),
                Op::Clamp(x, lo, hi) => {
                    let xv = self.value(*x).data();
                    let d = g
                        .data()
                        .iter()
                        .zip(xv)
                        .map(|(&gi, &v)| if v >= *lo && v <= *hi { gi } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::from_parts(g.shape().to_vec(), d));
                }
                Op::Sum(x) => {
                    let gs = g.data()[0];
                    accumulate(&mut grads, *x, Tensor::full(self.value(*x).shape(), gs));
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut d = Vec::with_capacity(y.len());
                    for (yr, gr) in y.iter_rows().zip(g.data().chunks(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        d.extend(yr.iter().zip(gr).map(|(yi, gi)| yi * (gi - dot)));
                    }
                    accumulate(&mut grads, *x, Tensor::from_parts(y.shape().to_vec(), d));
                }
                Op::SelectRows(x, idx) => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut d = Tensor::zeros(xv.shape());
                    let dd = d.data_mut();
                    for (r, &i) in idx.iter().enumerate() {
                        for k in 0..c {
                            dd[i * c + k] += g.data()[r * c + k];
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Chamfer {
                    a,
                    b,
                    a_to_b,
                    b_to_a,
                } => {
                    let gs = g.data()[0];
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let c = av.cols();
                    let mut ga = vec![0.0; av.len()];
                    let mut gb = vec![0.0; bv.len()];
                    for (i, &j) in a_to_b.iter().enumerate() {
                        for k in 0..c {
                            let diff = 2.0 * (av.row(i)[k] - bv.row(j)[k]) * gs;
                            ga[i * c + k] += diff;
                            gb[j * c + k] -= diff;
                        }
                    }
                    for (j, &i) in b_to_a.iter().enumerate() {
                        for k in 0..c {
                            let diff = 2.0 * (bv.row(j)[k] - av.row(i)[k]) * gs;
                            gb[j * c + k] += diff;
                            ga[i * c + k] -= diff;
                        }
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, Tensor::from_parts(av.shape().to_vec(), ga));
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, Tensor::from_parts(bv.shape().to_vec(), gb));
                    }
                }
            }
            grads[idx] = Some(g);
        }

        // Nodes that require grad but received none still get zeros.
        for (i, slot) in grads.iter_mut().enumerate() {
            if slot.is_none() && self.nodes[i].requires_grad {
                *slot = Some(Tensor::zeros(self.nodes[i].value.shape()));
            }
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Sum a broadcast gradient back down to the source shape.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let map = broadcast_index(shape, g.shape());
    let mut out = Tensor::zeros(shape);
    let d = out.data_mut();
    for (gi, &j) in g.data().iter().zip(&map) {
        d[j] += gi;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_sign_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_and_gelu_fixed_points() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(x).unwrap();
        let g = tape.gelu(x).unwrap();
        assert_eq!(tape.value(s).item().unwrap(), 0.5);
        assert_eq!(tape.value(g).item().unwrap(), 0.0);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(Error::Domain(_))));
    }

    #[test]
    fn elementwise_arity_checked() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1.0));
        let r = tape.elementwise(ElementwiseOp::Binary(BinaryOp::Add), &[x]);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let sq = tape.square(x).unwrap();
        let root = tape.sum(sq).unwrap();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_root_gives_zero_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(Tensor::scalar(3.0));
        let g = tape.backward(c).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn abs_subgradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-2.0, 0.0, 3.0]));
        let a = tape.abs(x).unwrap();
        let root = tape.sum(a).unwrap();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.wrt(x).data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn broadcast_bias_gradient_sums_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 2]));
        let b = tape.leaf(t(&[1, 2], &[0.5, -0.5]));
        let y = tape.add(x, b).unwrap();
        let root = tape.sum(y).unwrap();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.wrt(b).data(), &[3.0, 3.0]);
    }

    #[test]
    fn chamfer_hand_value() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 1], &[0.0]));
        let b = tape.constant(t(&[1, 1], &[1.0]));
        let d = tape.chamfer(a, b).unwrap();
        assert_eq!(tape.value(d).item().unwrap(), 2.0);
    }

    #[test]
    fn select_rows_scatters_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let s = tape.select_rows(x, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(s).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let root = tape.sum(s).unwrap();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(tape.select_rows(x, &[3]).is_err());
    }

    #[test]
    fn softmax_rows_normalize() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -5.0, 0.0, 5.0]));
        let y = tape.softmax_rows(x).unwrap();
        for r in tape.value(y).iter_rows() {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
