//! Scalar reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward evaluation as a node
//! holding its value, an operation tag, and the local partial derivative
//! with respect to each parent. Nodes are only ever appended and may only
//! reference earlier nodes, so the recording order is a topological order
//! and [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use consistent_evidence::autodiff::Tape;
//!
//! let tape = Tape::new();
//! let x = tape.var(2.0);
//! let y = tape.var(3.0);
//! let f = tape.mul(x, y);
//! let grads = tape.backward(f).unwrap();
//! assert_eq!(grads.get(x), 3.0);
//! assert_eq!(grads.get(y), 2.0);
//! ```
//!
//! Besides the scalar primitives there are a few fused n-ary nodes
//! ([`Tape::sum`], [`Tape::dot`], [`Tape::linear`]) so that dense layers do
//! not cost one node per multiply.

use std::cell::RefCell;

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Neg,
    Scale,
    Offset,
    Exp,
    Log,
    Relu,
    Sigmoid,
    LogSumExp,
    Sum,
    Dot,
    Linear,
}

/// Read-only view of a recorded node.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub value: f64,
    pub op: Op,
    pub parents: Vec<Var>,
    pub partials: Vec<f64>,
}

#[derive(Default)]
struct Inner {
    ops: Vec<Op>,
    values: Vec<f64>,
    // edges of node i live in edge_start[i]..edge_start[i + 1]
    edge_start: Vec<usize>,
    parents: Vec<usize>,
    partials: Vec<f64>,
}

impl Inner {
    fn push(&mut self, op: Op, value: f64, edges: impl IntoIterator<Item = (usize, f64)>) -> Var {
        let id = self.values.len();
        if self.edge_start.is_empty() {
            self.edge_start.push(0);
        }
        for (p, d) in edges {
            self.parents.push(p);
            self.partials.push(d);
        }
        self.ops.push(op);
        self.values.push(value);
        self.edge_start.push(self.parents.len());
        Var(id)
    }
}

#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Gradients of one scalar root with respect to every node at or before it.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<f64>,
}

impl Gradients {
    /// Gradient for `v`; zero for nodes recorded after the root.
    pub fn get(&self, v: Var) -> f64 {
        self.grads.get(v.0).copied().unwrap_or(0.0)
    }

    pub fn wrt(&self, vars: &[Var]) -> Vec<f64> {
        vars.iter().map(|&v| self.get(v)).collect()
    }
}

fn stable_sigmoid(x: f64) -> f64 {
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

    pub fn with_capacity(nodes: usize, edges: usize) -> Self {
        Tape {
            inner: RefCell::new(Inner {
                ops: Vec::with_capacity(nodes),
                values: Vec::with_capacity(nodes),
                edge_start: Vec::with_capacity(nodes + 1),
                parents: Vec::with_capacity(edges),
                partials: Vec::with_capacity(edges),
            }),
        }
    }

    /// Drops every node while keeping the allocated storage. Variables
    /// created before the call must not be used afterwards.
    pub fn clear(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.ops.clear();
        inner.values.clear();
        inner.edge_start.clear();
        inner.parents.clear();
        inner.partials.clear();
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> f64 {
        self.inner.borrow().values[v.0]
    }

    pub fn values(&self, vars: &[Var]) -> Vec<f64> {
        let inner = self.inner.borrow();
        vars.iter().map(|v| inner.values[v.0]).collect()
    }

    pub fn node(&self, v: Var) -> Node {
        let inner = self.inner.borrow();
        let edges = inner.edge_start[v.0]..inner.edge_start[v.0 + 1];
        Node {
            value: inner.values[v.0],
            op: inner.ops[v.0],
            parents: inner.parents[edges.clone()].iter().map(|&p| Var(p)).collect(),
            partials: inner.partials[edges].to_vec(),
        }
    }

    /// A leaf. Parameters, inputs and constants are all leaves; only the
    /// caller knows which ones it will read gradients for.
    pub fn var(&self, value: f64) -> Var {
        self.inner.borrow_mut().push(Op::Leaf, value, [])
    }

    pub fn constant(&self, value: f64) -> Var {
        self.var(value)
    }

    fn unary(&self, op: Op, a: Var, f: impl FnOnce(f64) -> (f64, f64)) -> Var {
        let mut inner = self.inner.borrow_mut();
        let (value, d) = f(inner.values[a.0]);
        inner.push(op, value, [(a.0, d)])
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let mut inner = self.inner.borrow_mut();
        let value = inner.values[a.0] + inner.values[b.0];
        inner.push(Op::Add, value, [(a.0, 1.0), (b.0, 1.0)])
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let mut inner = self.inner.borrow_mut();
        let value = inner.values[a.0] - inner.values[b.0];
        inner.push(Op::Sub, value, [(a.0, 1.0), (b.0, -1.0)])
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let mut inner = self.inner.borrow_mut();
        let (va, vb) = (inner.values[a.0], inner.values[b.0]);
        inner.push(Op::Mul, va * vb, [(a.0, vb), (b.0, va)])
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(Op::Neg, a, |x| (-x, -1.0))
    }

    /// `c * a` for a constant `c`.
    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(Op::Scale, a, |x| (c * x, c))
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&self, a: Var, c: f64) -> Var {
        self.unary(Op::Offset, a, |x| (x + c, 1.0))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(Op::Exp, a, |x| {
            let e = x.exp();
            (e, e)
        })
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if !(x > 0.0) {
            return Err(Error::LogDomain(x));
        }
        Ok(self.unary(Op::Log, a, |x| (x.ln(), 1.0 / x)))
    }

    /// Rectifier; the subgradient at 0 is taken to be 0.
    pub fn relu(&self, a: Var) -> Var {
        self.unary(Op::Relu, a, |x| if x > 0.0 { (x, 1.0) } else { (0.0, 0.0) })
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(Op::Sigmoid, a, |x| {
            let s = stable_sigmoid(x);
            (s, s * (1.0 - s))
        })
    }

    /// `log Σ exp(x_i)`, shifted by the maximum so large inputs do not
    /// overflow.
    pub fn logsumexp(&self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::EmptyLogSumExp);
        }
        let mut inner = self.inner.borrow_mut();
        let vals: Vec<f64> = xs.iter().map(|v| inner.values[v.0]).collect();
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shifted: Vec<f64> = vals.iter().map(|&x| (x - max).exp()).collect();
        let total: f64 = shifted.iter().sum();
        let value = max + total.ln();
        let edges: Vec<(usize, f64)> = xs.iter().zip(&shifted).map(|(v, &e)| (v.0, e / total)).collect();
        Ok(inner.push(Op::LogSumExp, value, edges))
    }

    /// Sum of any number of nodes; the empty sum is 0.
    pub fn sum(&self, xs: &[Var]) -> Var {
        let mut inner = self.inner.borrow_mut();
        let value = xs.iter().map(|v| inner.values[v.0]).sum();
        inner.push(Op::Sum, value, xs.iter().map(|v| (v.0, 1.0)).collect::<Vec<_>>())
    }

    /// `Σ a_i b_i` over two node lists of equal length.
    pub fn dot(&self, a: &[Var], b: &[Var]) -> Result<Var> {
        if a.len() != b.len() {
            return Err(Error::LengthMismatch {
                what: "dot operands",
                expected: a.len(),
                got: b.len(),
            });
        }
        let mut inner = self.inner.borrow_mut();
        let mut value = 0.0;
        let mut edges = Vec::with_capacity(2 * a.len());
        for (x, y) in a.iter().zip(b) {
            let (vx, vy) = (inner.values[x.0], inner.values[y.0]);
            value += vx * vy;
            edges.push((x.0, vy));
            edges.push((y.0, vx));
        }
        Ok(inner.push(Op::Dot, value, edges))
    }

    /// `Σ c_i x_i` with constant coefficients.
    pub fn linear(&self, xs: &[Var], coeffs: &[f64]) -> Result<Var> {
        if xs.len() != coeffs.len() {
            return Err(Error::LengthMismatch {
                what: "linear coefficients",
                expected: xs.len(),
                got: coeffs.len(),
            });
        }
        let mut inner = self.inner.borrow_mut();
        let value = xs.iter().zip(coeffs).map(|(v, c)| c * inner.values[v.0]).sum();
        let edges: Vec<(usize, f64)> = xs.iter().zip(coeffs).map(|(v, &c)| (v.0, c)).collect();
        Ok(inner.push(Op::Linear, value, edges))
    }

    /// Propagates `d root / d node` to every node recorded up to `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let inner = self.inner.borrow();
        if root.0 >= inner.values.len() {
            return Err(Error::ForeignVar(root.0));
        }
        let mut grads = vec![0.0; root.0 + 1];
        grads[root.0] = 1.0;
        for i in (0..=root.0).rev() {
            let g = grads[i];
            if g == 0.0 {
                continue;
            }
            for e in inner.edge_start[i]..inner.edge_start[i + 1] {
                let p = inner.parents[e];
                if p >= i {
                    return Err(Error::Cycle { node: i, parent: p });
                }
                grads[p] += g * inner.partials[e];
            }
        }
        Ok(Gradients { grads })
    }

    #[cfg(test)]
    fn push_raw(&self, op: Op, value: f64, edges: Vec<(usize, f64)>) -> Var {
        self.inner.borrow_mut().push(op, value, edges)
    }
}

/// Evaluates `f` at `point` on a fresh tape, returning the value and the
/// backward-pass gradient.
pub fn value_and_grad<F>(f: &F, point: &[f64]) -> Result<(f64, Vec<f64>)>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|&x| tape.var(x)).collect();
    let out = f(&tape, &vars)?;
    let value = tape.value(out);
    let grads = tape.backward(out)?;
    Ok((value, grads.wrt(&vars)))
}

fn evaluate<F>(f: &F, point: &[f64]) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|&x| tape.var(x)).collect();
    let out = f(&tape, &vars)?;
    let v = tape.value(out);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("function value {v}")));
    }
    Ok(v)
}

/// Denominator floor for [`grad_check`]. Central differences at
/// `h = 1e-5` on an objective of order one carry roundoff near `1e-10`,
/// so smaller gradients are compared on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares backward-pass gradients with central differences and returns
/// the largest per-coordinate relative error
/// `|a - b| / max(GRAD_CHECK_FLOOR, |a| + |b|)`.
pub fn grad_check<F>(f: F, point: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("finite-difference step {h}")));
    }
    let (value, analytic) = value_and_grad(&f, point)?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("function value {value}")));
    }
    let mut worst: f64 = 0.0;
    let mut x = point.to_vec();
    for i in 0..point.len() {
        x[i] = point[i] + h;
        let plus = evaluate(&f, &x)?;
        x[i] = point[i] - h;
        let minus = evaluate(&f, &x)?;
        x[i] = point[i];
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i];
        if !a.is_finite() {
            return Err(Error::NonFinite(format!("gradient coordinate {i}")));
        }
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}
