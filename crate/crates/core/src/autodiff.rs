//! Scalar reverse-mode differentiation.
//!
//! Episode code is written once against the [`Backend`] trait and runs on
//! either [`Eval`] (plain `f64`, used for evaluation and replay) or [`Tape`]
//! (records a graph, used for training). Both backends perform the same
//! floating-point operations in the same order, so values agree bitwise.
//!
//! The tape is an append-only list of nodes. Every node stores its argument
//! indices together with the local partial derivative with respect to each
//! argument, so the backward sweep is a single reverse pass with no dispatch
//! on the operation kind.
//!
//! Piecewise operations follow fixed subgradient conventions:
//!
//! * `min(a, b)` / `max(a, b)`: the first argument is active on ties.
//! * `abs(x)`: derivative `sign(x)`, and `0` at `x == 0`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TapeError {
    #[error("node {0} is not on the tape (tape has {1} nodes)")]
    UnknownNode(usize, usize),
    #[error("node {node} references node {arg} which is not recorded before it")]
    OrderViolation { node: usize, arg: usize },
}

/// Arithmetic surface shared by the plain evaluator and the tape.
pub trait Backend {
    type Value: Copy;

    fn constant(&mut self, x: f64) -> Self::Value;
    fn value(&self, v: Self::Value) -> f64;

    fn add(&mut self, a: Self::Value, b: Self::Value) -> Self::Value;
    fn sub(&mut self, a: Self::Value, b: Self::Value) -> Self::Value;
    fn mul(&mut self, a: Self::Value, b: Self::Value) -> Self::Value;
    /// `a * c` for a constant `c`.
    fn scale(&mut self, a: Self::Value, c: f64) -> Self::Value;
    /// `a + c` for a constant `c`.
    fn offset(&mut self, a: Self::Value, c: f64) -> Self::Value;
    /// `bias + sum_i weights[i] * inputs[i]`, summed left to right.
    fn affine(
        &mut self,
        bias: Self::Value,
        weights: &[Self::Value],
        inputs: &[Self::Value],
    ) -> Self::Value;
    fn sigmoid(&mut self, a: Self::Value) -> Self::Value;
    fn exp(&mut self, a: Self::Value) -> Self::Value;
    fn abs(&mut self, a: Self::Value) -> Self::Value;
    fn min(&mut self, a: Self::Value, b: Self::Value) -> Self::Value;
    fn max(&mut self, a: Self::Value, b: Self::Value) -> Self::Value;
    fn min_const(&mut self, a: Self::Value, c: f64) -> Self::Value;
    fn max_const(&mut self, a: Self::Value, c: f64) -> Self::Value;
    fn sum(&mut self, terms: &[Self::Value]) -> Self::Value;
    /// Same value, no gradient flows back through it.
    fn detach(&mut self, a: Self::Value) -> Self::Value;
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
fn affine_value(bias: f64, weights: &[f64], inputs: &[f64]) -> f64 {
    let mut acc = bias;
    for (w, x) in weights.iter().zip(inputs) {
        acc += w * x;
    }
    acc
}

/// Plain evaluation backend; values are `f64`.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

impl Backend for Eval {
    type Value = f64;

    fn constant(&mut self, x: f64) -> f64 {
        x
    }
    fn value(&self, v: f64) -> f64 {
        v
    }
    fn add(&mut self, a: f64, b: f64) -> f64 {
        a + b
    }
    fn sub(&mut self, a: f64, b: f64) -> f64 {
        a - b
    }
    fn mul(&mut self, a: f64, b: f64) -> f64 {
        a * b
    }
    fn scale(&mut self, a: f64, c: f64) -> f64 {
        a * c
    }
    fn offset(&mut self, a: f64, c: f64) -> f64 {
        a + c
    }
    fn affine(&mut self, bias: f64, weights: &[f64], inputs: &[f64]) -> f64 {
        affine_value(bias, weights, inputs)
    }
    fn sigmoid(&mut self, a: f64) -> f64 {
        sigmoid(a)
    }
    fn exp(&mut self, a: f64) -> f64 {
        a.exp()
    }
    fn abs(&mut self, a: f64) -> f64 {
        a.abs()
    }
    fn min(&mut self, a: f64, b: f64) -> f64 {
        if a <= b {
            a
        } else {
            b
        }
    }
    fn max(&mut self, a: f64, b: f64) -> f64 {
        if a >= b {
            a
        } else {
            b
        }
    }
    fn min_const(&mut self, a: f64, c: f64) -> f64 {
        if a <= c {
            a
        } else {
            c
        }
    }
    fn max_const(&mut self, a: f64, c: f64) -> f64 {
        if a >= c {
            a
        } else {
            c
        }
    }
    fn sum(&mut self, terms: &[f64]) -> f64 {
        let mut acc = 0.0;
        for t in terms {
            acc += t;
        }
        acc
    }
    fn detach(&mut self, a: f64) -> f64 {
        a
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Operation kind of a recorded node. Kept for inspection only; the backward
/// sweep works from the stored partials.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    Offset,
    Affine,
    Sigmoid,
    Exp,
    Abs,
    Min,
    Max,
    Sum,
}

/// Recording backend.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    values: Vec<f64>,
    kinds: Vec<OpKind>,
    // Arguments of node i live in args[starts[i]..starts[i + 1]].
    starts: Vec<u32>,
    args: Vec<u32>,
    partials: Vec<f64>,
    adjoints: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Self {
            starts: vec![0],
            ..Default::default()
        }
    }

    /// Drops all nodes but keeps the allocations.
    pub fn clear(&mut self) {
        self.values.clear();
        self.kinds.clear();
        self.starts.clear();
        self.starts.push(0);
        self.args.clear();
        self.partials.clear();
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Independent variable (or a constant; the two are the same on a tape).
    pub fn leaf(&mut self, x: f64) -> Var {
        self.push(OpKind::Leaf, x)
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.kinds[v.index()]
    }

    #[inline]
    fn push(&mut self, kind: OpKind, value: f64) -> Var {
        let id = self.values.len();
        self.values.push(value);
        self.kinds.push(kind);
        self.starts.push(self.args.len() as u32);
        Var(id as u32)
    }

    #[inline]
    fn arg(&mut self, a: Var, partial: f64) {
        self.args.push(a.0);
        self.partials.push(partial);
    }

    #[inline]
    fn unary(&mut self, kind: OpKind, a: Var, value: f64, partial: f64) -> Var {
        self.arg(a, partial);
        self.push(kind, value)
    }

    #[inline]
    fn binary(&mut self, kind: OpKind, a: Var, pa: f64, b: Var, pb: f64, value: f64) -> Var {
        self.arg(a, pa);
        self.arg(b, pb);
        self.push(kind, value)
    }

    /// Reverse sweep from `output`. Returns the adjoint of every node with
    /// respect to `output`.
    pub fn backward(&mut self, output: Var) -> Result<Gradients<'_>, TapeError> {
        let n = self.values.len();
        let out = output.index();
        if out >= n {
            return Err(TapeError::UnknownNode(out, n));
        }
        self.adjoints.clear();
        self.adjoints.resize(n, 0.0);
        self.adjoints[out] = 1.0;
        for i in (0..=out).rev() {
            let a = self.adjoints[i];
            let lo = self.starts[i] as usize;
            let hi = self.starts[i + 1] as usize;
            if a == 0.0 {
                continue;
            }
            for e in lo..hi {
                let arg = self.args[e] as usize;
                if arg >= i {
                    return Err(TapeError::OrderViolation { node: i, arg });
                }
                self.adjoints[arg] += a * self.partials[e];
            }
        }
        Ok(Gradients {
            adjoints: &self.adjoints,
        })
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<'a> {
    adjoints: &'a [f64],
}

impl Gradients<'_> {
    pub fn wrt(&self, v: Var) -> f64 {
        self.adjoints[v.index()]
    }

    /// Adjoints of a contiguous run of nodes, typically the parameter leaves
    /// recorded first.
    pub fn range(&self, first: Var, count: usize) -> &[f64] {
        &self.adjoints[first.index()..first.index() + count]
    }
}

impl Backend for Tape {
    type Value = Var;

    fn constant(&mut self, x: f64) -> Var {
        self.leaf(x)
    }

    fn value(&self, v: Var) -> f64 {
        self.values[v.index()]
    }

    fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.binary(OpKind::Add, a, 1.0, b, 1.0, v)
    }

    fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.binary(OpKind::Sub, a, 1.0, b, -1.0, v)
    }

    fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        self.binary(OpKind::Mul, a, y, b, x, x * y)
    }

    fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.unary(OpKind::Scale, a, v, c)
    }

    fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.unary(OpKind::Offset, a, v, 1.0)
    }

    fn affine(&mut self, bias: Var, weights: &[Var], inputs: &[Var]) -> Var {
        debug_assert_eq!(weights.len(), inputs.len());
        let mut acc = self.value(bias);
        self.arg(bias, 1.0);
        for (&w, &x) in weights.iter().zip(inputs) {
            let (wv, xv) = (self.value(w), self.value(x));
            acc += wv * xv;
            self.arg(w, xv);
            self.arg(x, wv);
        }
        self.push(OpKind::Affine, acc)
    }

    fn sigmoid(&mut self, a: Var) -> Var {
        let s = sigmoid(self.value(a));
        self.unary(OpKind::Sigmoid, a, s, s * (1.0 - s))
    }

    fn exp(&mut self, a: Var) -> Var {
        let e = self.value(a).exp();
        self.unary(OpKind::Exp, a, e, e)
    }

    fn abs(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.unary(OpKind::Abs, a, x.abs(), sign(x))
    }

    fn min(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        if x <= y {
            self.binary(OpKind::Min, a, 1.0, b, 0.0, x)
        } else {
            self.binary(OpKind::Min, a, 0.0, b, 1.0, y)
        }
    }

    fn max(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        if x >= y {
            self.binary(OpKind::Max, a, 1.0, b, 0.0, x)
        } else {
            self.binary(OpKind::Max, a, 0.0, b, 1.0, y)
        }
    }

    fn min_const(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        if x <= c {
            self.unary(OpKind::Min, a, x, 1.0)
        } else {
            self.unary(OpKind::Min, a, c, 0.0)
        }
    }

    fn max_const(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        if x >= c {
            self.unary(OpKind::Max, a, x, 1.0)
        } else {
            self.unary(OpKind::Max, a, c, 0.0)
        }
    }

    fn sum(&mut self, terms: &[Var]) -> Var {
        let mut acc = 0.0;
        for &t in terms {
            acc += self.value(t);
            self.arg(t, 1.0);
        }
        self.push(OpKind::Sum, acc)
    }

    fn detach(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.leaf(x)
    }
}
