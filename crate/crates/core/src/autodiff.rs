//! Scalar reverse-mode differentiation.
//!
//! The latent-space computations (exponential maps, wrapped-normal sampling,
//! log-densities, geodesic distances) are written once, generically over
//! [`Real`], and evaluated either on plain `f64` or on [`Var`] to obtain
//! gradients. Latent dimensions are small, so a per-scalar tape is cheap.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Minimal scalar interface shared by `f64` and [`Var`].
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn value(self) -> f64;
    /// A constant living in the same context as `self`.
    fn lift(self, c: f64) -> Self;

    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tan(self) -> Self;
    fn asin(self) -> Self;
    fn acos(self) -> Self;
    fn atan(self) -> Self;
    fn sinh(self) -> Self;
    fn cosh(self) -> Self;
    fn tanh(self) -> Self;
    fn asinh(self) -> Self;
    fn acosh(self) -> Self;
    fn atanh(self) -> Self;

    fn square(self) -> Self {
        self * self
    }

    /// `ln(1 + e^x)` without overflow.
    fn softplus(self) -> Self {
        if self.value() > 0.0 {
            self + (-self).exp().ln_1p()
        } else {
            self.exp().ln_1p()
        }
    }
}

impl Real for f64 {
    fn value(self) -> f64 {
        self
    }
    fn lift(self, c: f64) -> Self {
        c
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn ln_1p(self) -> Self {
        f64::ln_1p(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn tan(self) -> Self {
        f64::tan(self)
    }
    fn asin(self) -> Self {
        f64::asin(self)
    }
    fn acos(self) -> Self {
        f64::acos(self)
    }
    fn atan(self) -> Self {
        f64::atan(self)
    }
    fn sinh(self) -> Self {
        f64::sinh(self)
    }
    fn cosh(self) -> Self {
        f64::cosh(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn asinh(self) -> Self {
        f64::asinh(self)
    }
    fn acosh(self) -> Self {
        f64::acosh(self)
    }
    fn atanh(self) -> Self {
        f64::atanh(self)
    }
}

#[derive(Clone, Copy, Debug)]
struct Node {
    parents: [usize; 2],
    partials: [f64; 2],
    arity: u8,
}

/// Wengert list of scalar operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
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

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Creates an independent input variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.push(Node {
            parents: [0, 0],
            partials: [0.0, 0.0],
            arity: 0,
        });
        Var {
            tape: self,
            idx,
            val: value,
        }
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    fn unary(&self, a: &Var<'_>, val: f64, da: f64) -> Var<'_> {
        let idx = self.push(Node {
            parents: [a.idx, 0],
            partials: [da, 0.0],
            arity: 1,
        });
        Var {
            tape: self,
            idx,
            val,
        }
    }

    fn binary(&self, a: &Var<'_>, b: &Var<'_>, val: f64, da: f64, db: f64) -> Var<'_> {
        let idx = self.push(Node {
            parents: [a.idx, b.idx],
            partials: [da, db],
            arity: 2,
        });
        Var {
            tape: self,
            idx,
            val,
        }
    }

    /// Adjoints of every node given seed adjoints on a set of outputs.
    pub fn backward(&self, seeds: &[(usize, f64)]) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        for &(idx, s) in seeds {
            adj[idx] += s;
        }
        for i in (0..nodes.len()).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let n = nodes[i];
            for j in 0..n.arity as usize {
                adj[n.parents[j]] += a * n.partials[j];
            }
        }
        adj
    }

    /// Gradient of a single scalar output.
    pub fn gradient(&self, output: Var<'_>) -> Vec<f64> {
        self.backward(&[(output.idx, 1.0)])
    }
}

/// A scalar recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
    val: f64,
}

impl<'t> Var<'t> {
    pub fn index(&self) -> usize {
        self.idx
    }

    fn map(self, val: f64, d: f64) -> Self {
        self.tape.unary(&self, val, d)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.tape.binary(&self, &rhs, self.val + rhs.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self.tape.binary(&self, &rhs, self.val - rhs.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.tape
            .binary(&self, &rhs, self.val * rhs.val, rhs.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let val = self.val / rhs.val;
        self.tape
            .binary(&self, &rhs, val, 1.0 / rhs.val, -val / rhs.val)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Self;
    fn neg(self) -> Self {
        self.map(-self.val, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Self;
    fn add(self, rhs: f64) -> Self {
        self.map(self.val + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: f64) -> Self {
        self.map(self.val - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        self.map(self.val * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Self;
    fn div(self, rhs: f64) -> Self {
        self.map(self.val / rhs, 1.0 / rhs)
    }
}

impl<'t> Real for Var<'t> {
    fn value(self) -> f64 {
        self.val
    }
    fn lift(self, c: f64) -> Self {
        self.tape.var(c)
    }
    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.map(s, 0.5 / s)
    }
    fn exp(self) -> Self {
        let e = self.val.exp();
        self.map(e, e)
    }
    fn ln(self) -> Self {
        self.map(self.val.ln(), 1.0 / self.val)
    }
    fn ln_1p(self) -> Self {
        self.map(self.val.ln_1p(), 1.0 / (1.0 + self.val))
    }
    fn sin(self) -> Self {
        self.map(self.val.sin(), self.val.cos())
    }
    fn cos(self) -> Self {
        self.map(self.val.cos(), -self.val.sin())
    }
    fn tan(self) -> Self {
        let t = self.val.tan();
        self.map(t, 1.0 + t * t)
    }
    fn asin(self) -> Self {
        self.map(self.val.asin(), 1.0 / (1.0 - self.val * self.val).sqrt())
    }
    fn acos(self) -> Self {
        self.map(self.val.acos(), -1.0 / (1.0 - self.val * self.val).sqrt())
    }
    fn atan(self) -> Self {
        self.map(self.val.atan(), 1.0 / (1.0 + self.val * self.val))
    }
    fn sinh(self) -> Self {
        self.map(self.val.sinh(), self.val.cosh())
    }
    fn cosh(self) -> Self {
        self.map(self.val.cosh(), self.val.sinh())
    }
    fn tanh(self) -> Self {
        let t = self.val.tanh();
        self.map(t, 1.0 - t * t)
    }
    fn asinh(self) -> Self {
        self.map(self.val.asinh(), 1.0 / (self.val * self.val + 1.0).sqrt())
    }
    fn acosh(self) -> Self {
        self.map(self.val.acosh(), 1.0 / (self.val * self.val - 1.0).sqrt())
    }
    fn atanh(self) -> Self {
        self.map(self.val.atanh(), 1.0 / (1.0 - self.val * self.val))
    }
}
