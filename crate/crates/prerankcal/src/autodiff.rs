//! Scalar reverse-mode automatic differentiation on a flat tape.
//!
//! Numeric routines in this crate are written once, generically over an
//! [`Engine`]. Instantiated with [`Eval`] they run as plain `f64`
//! arithmetic; instantiated with [`Tape`] they record a computation
//! graph whose exact gradient is obtained by a single reverse sweep.
//!
//! The tape stores, for every node, the indices of its parents together
//! with the local partial derivatives computed during the forward pass.
//! Backpropagation is then a reverse loop of fused multiply-adds:
//!
//! ```
//! use prerankcal::autodiff::{Engine, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.input(3.0);
//! let y = tape.mul(x, x); // y = x^2
//! let grads = tape.backward(y);
//! assert_eq!(grads[x], 6.0);
//! ```
//!
//! Conventions at non-differentiable points: `abs` and `relu` use
//! subgradient 0 at the origin, and `sqrt` returns partial 0 at exactly
//! 0.0 so that coincident points in distance computations do not poison
//! the sweep with infinities.

use std::ops::Index;

/// A handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// The operation set shared by the plain evaluator and the tape.
///
/// `lit` introduces constants (no gradient); `value` reads the current
/// numeric value of a node, which is how sampling code makes
/// gradient-free decisions (e.g. categorical component draws) from
/// quantities that live on the tape.
pub trait Engine {
    type Value: Copy + std::fmt::Debug;

    fn lit(&mut self, c: f64) -> Self::Value;
    fn value(&self, v: Self::Value) -> f64;

    fn add(&mut self, a: Self::Value, b: Self::Value) -> Self::Value;
    fn sub(&mut self, a: Self::Value, b: Self::Value) -> Self::Value;
    fn mul(&mut self, a: Self::Value, b: Self::Value) -> Self::Value;
    fn div(&mut self, a: Self::Value, b: Self::Value) -> Self::Value;
    fn neg(&mut self, a: Self::Value) -> Self::Value;
    /// `a * k` for a constant `k`.
    fn scale(&mut self, a: Self::Value, k: f64) -> Self::Value;
    /// `a + k` for a constant `k`.
    fn shift(&mut self, a: Self::Value, k: f64) -> Self::Value;

    fn exp(&mut self, a: Self::Value) -> Self::Value;
    fn ln(&mut self, a: Self::Value) -> Self::Value;
    fn sqrt(&mut self, a: Self::Value) -> Self::Value;
    fn abs(&mut self, a: Self::Value) -> Self::Value;
    fn relu(&mut self, a: Self::Value) -> Self::Value;
    fn sigmoid(&mut self, a: Self::Value) -> Self::Value;
    fn softplus(&mut self, a: Self::Value) -> Self::Value;
    /// `|a|^p` with subgradient 0 at the origin (for `p = 1` this is `abs`).
    fn abs_pow(&mut self, a: Self::Value, p: f64) -> Self::Value;

    /// Sum of a slice of values.
    fn sum(&mut self, xs: &[Self::Value]) -> Self::Value;
    /// Dot product of two equally long slices.
    fn dot(&mut self, a: &[Self::Value], b: &[Self::Value]) -> Self::Value;
    /// `sum_i c_i * x_i` with constant coefficients.
    fn weighted_sum(&mut self, coeffs: &[f64], xs: &[Self::Value]) -> Self::Value;
    /// Numerically stable `log(sum_i exp(x_i))`.
    fn logsumexp(&mut self, xs: &[Self::Value]) -> Self::Value;
}

/// Numerically stable sigmoid.
#[inline]
pub fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softplus `ln(1 + e^x)`.
#[inline]
pub fn softplus_f64(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of `softplus_f64` on (0, inf).
#[inline]
pub fn softplus_inv_f64(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Plain `f64` evaluation: the zero-overhead instantiation of [`Engine`].
#[derive(Clone, Copy, Debug, Default)]
pub struct Eval;

impl Engine for Eval {
    type Value = f64;

    #[inline]
    fn lit(&mut self, c: f64) -> f64 {
        c
    }
    #[inline]
    fn value(&self, v: f64) -> f64 {
        v
    }
    #[inline]
    fn add(&mut self, a: f64, b: f64) -> f64 {
        a + b
    }
    #[inline]
    fn sub(&mut self, a: f64, b: f64) -> f64 {
        a - b
    }
    #[inline]
    fn mul(&mut self, a: f64, b: f64) -> f64 {
        a * b
    }
    #[inline]
    fn div(&mut self, a: f64, b: f64) -> f64 {
        a / b
    }
    #[inline]
    fn neg(&mut self, a: f64) -> f64 {
        -a
    }
    #[inline]
    fn scale(&mut self, a: f64, k: f64) -> f64 {
        a * k
    }
    #[inline]
    fn shift(&mut self, a: f64, k: f64) -> f64 {
        a + k
    }
    #[inline]
    fn exp(&mut self, a: f64) -> f64 {
        a.exp()
    }
    #[inline]
    fn ln(&mut self, a: f64) -> f64 {
        a.ln()
    }
    #[inline]
    fn sqrt(&mut self, a: f64) -> f64 {
        a.sqrt()
    }
    #[inline]
    fn abs(&mut self, a: f64) -> f64 {
        a.abs()
    }
    #[inline]
    fn relu(&mut self, a: f64) -> f64 {
        a.max(0.0)
    }
    #[inline]
    fn sigmoid(&mut self, a: f64) -> f64 {
        sigmoid_f64(a)
    }
    #[inline]
    fn softplus(&mut self, a: f64) -> f64 {
        softplus_f64(a)
    }
    #[inline]
    fn abs_pow(&mut self, a: f64, p: f64) -> f64 {
        if p == 1.0 {
            a.abs()
        } else {
            a.abs().powf(p)
        }
    }
    #[inline]
    fn sum(&mut self, xs: &[f64]) -> f64 {
        xs.iter().sum()
    }
    #[inline]
    fn dot(&mut self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
    #[inline]
    fn weighted_sum(&mut self, coeffs: &[f64], xs: &[f64]) -> f64 {
        debug_assert_eq!(coeffs.len(), xs.len());
        coeffs.iter().zip(xs).map(|(c, x)| c * x).sum()
    }
    fn logsumexp(&mut self, xs: &[f64]) -> f64 {
        logsumexp_f64(xs)
    }
}

pub(crate) fn logsumexp_f64(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m; // all -inf (or an explicit inf/nan propagates)
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

#[derive(Clone, Copy, Debug)]
struct NodeSpan {
    start: u32,
    len: u32,
}

/// A recorded computation graph.
///
/// Nodes are appended in topological order; each edge carries the local
/// partial derivative of the node with respect to that parent, fixed at
/// forward time. [`Tape::backward`] propagates cotangents in one reverse
/// pass. Allocations are reused across [`Tape::reset`] calls.
#[derive(Default)]
pub struct Tape {
    vals: Vec<f64>,
    spans: Vec<NodeSpan>,
    args: Vec<u32>,
    partials: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Clears the tape, keeping allocated capacity.
    pub fn reset(&mut self) {
        self.vals.clear();
        self.spans.clear();
        self.args.clear();
        self.partials.clear();
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    /// Records a differentiable input (a leaf the gradient is taken with
    /// respect to).
    pub fn input(&mut self, value: f64) -> Var {
        self.push(value, &[], &[])
    }

    /// Records a block of inputs from a slice, returning the handle of
    /// the first; the block occupies consecutive indices.
    pub fn input_block(&mut self, values: &[f64]) -> Vec<Var> {
        values.iter().map(|&v| self.input(v)).collect()
    }

    #[inline]
    fn push(&mut self, value: f64, args: &[Var], partials: &[f64]) -> Var {
        debug_assert_eq!(args.len(), partials.len());
        let start = self.args.len() as u32;
        self.args.extend(args.iter().map(|v| v.0));
        self.partials.extend_from_slice(partials);
        let id = self.vals.len() as u32;
        self.vals.push(value);
        self.spans.push(NodeSpan {
            start,
            len: args.len() as u32,
        });
        Var(id)
    }

    /// Starts an n-ary node; edges are then appended with
    /// [`Tape::push_edge`] and the node is sealed by [`Tape::seal`].
    #[inline]
    fn open(&mut self) -> u32 {
        self.args.len() as u32
    }

    #[inline]
    fn push_edge(&mut self, arg: Var, partial: f64) {
        self.args.push(arg.0);
        self.partials.push(partial);
    }

    #[inline]
    fn seal(&mut self, start: u32, value: f64) -> Var {
        let id = self.vals.len() as u32;
        self.vals.push(value);
        self.spans.push(NodeSpan {
            start,
            len: self.args.len() as u32 - start,
        });
        Var(id)
    }

    #[inline]
    fn unary(&mut self, a: Var, value: f64, partial: f64) -> Var {
        self.push(value, &[a], &[partial])
    }

    /// Gradient of `output` with respect to every node on the tape.
    pub fn backward(&self, output: Var) -> Gradients {
        self.backward_seeded(&[(output, 1.0)])
    }

    /// Reverse sweep with explicit initial cotangents, for chaining
    /// through values that left the tape (e.g. batch aggregation done on
    /// a separate tape).
    pub fn backward_seeded(&self, seeds: &[(Var, f64)]) -> Gradients {
        let mut grad = vec![0.0; self.vals.len()];
        let mut hi = 0usize;
        for &(v, g) in seeds {
            grad[v.index()] += g;
            hi = hi.max(v.index());
        }
        for i in (0..=hi).rev() {
            let g = grad[i];
            if g == 0.0 {
                continue;
            }
            let span = self.spans[i];
            let s = span.start as usize;
            let e = s + span.len as usize;
            for k in s..e {
                grad[self.args[k] as usize] += g * self.partials[k];
            }
        }
        Gradients(grad)
    }
}

/// Gradient vector produced by [`Tape::backward`], indexable by [`Var`].
pub struct Gradients(Vec<f64>);

impl Index<Var> for Gradients {
    type Output = f64;
    fn index(&self, v: Var) -> &f64 {
        &self.0[v.index()]
    }
}

impl Gradients {
    /// Collects gradients for a contiguous run of variables (such as an
    /// input block) into a dense vector.
    pub fn collect(&self, vars: &[Var]) -> Vec<f64> {
        vars.iter().map(|&v| self.0[v.index()]).collect()
    }
}

impl Engine for Tape {
    type Value = Var;

    fn lit(&mut self, c: f64) -> Var {
        self.push(c, &[], &[])
    }

    #[inline]
    fn value(&self, v: Var) -> f64 {
        self.vals[v.index()]
    }

    fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, &[a, b], &[1.0, 1.0])
    }

    fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, &[a, b], &[1.0, -1.0])
    }

    fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        self.push(x * y, &[a, b], &[y, x])
    }

    fn div(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        let v = x / y;
        self.push(v, &[a, b], &[1.0 / y, -v / y])
    }

    fn neg(&mut self, a: Var) -> Var {
        let v = -self.value(a);
        self.unary(a, v, -1.0)
    }

    fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.unary(a, v, k)
    }

    fn shift(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        self.unary(a, v, 1.0)
    }

    fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).exp();
        self.unary(a, v, v)
    }

    fn ln(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.unary(a, x.ln(), 1.0 / x)
    }

    fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).sqrt();
        let partial = if v > 0.0 { 0.5 / v } else { 0.0 };
        self.unary(a, v, partial)
    }

    fn abs(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let partial = if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.unary(a, x.abs(), partial)
    }

    fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        if x > 0.0 {
            self.unary(a, x, 1.0)
        } else {
            self.unary(a, 0.0, 0.0)
        }
    }

    fn sigmoid(&mut self, a: Var) -> Var {
        let v = sigmoid_f64(self.value(a));
        self.unary(a, v, v * (1.0 - v))
    }

    fn softplus(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.unary(a, softplus_f64(x), sigmoid_f64(x))
    }

    fn abs_pow(&mut self, a: Var, p: f64) -> Var {
        let x = self.value(a);
        if p == 1.0 {
            return self.abs(a);
        }
        let v = x.abs().powf(p);
        let partial = if x == 0.0 {
            0.0
        } else {
            p * x.abs().powf(p - 1.0) * x.signum()
        };
        self.unary(a, v, partial)
    }

    fn sum(&mut self, xs: &[Var]) -> Var {
        let start = self.open();
        let mut acc = 0.0;
        for &x in xs {
            acc += self.vals[x.index()];
            self.push_edge(x, 1.0);
        }
        self.seal(start, acc)
    }

    fn dot(&mut self, a: &[Var], b: &[Var]) -> Var {
        debug_assert_eq!(a.len(), b.len());
        let start = self.open();
        let mut acc = 0.0;
        for (&x, &y) in a.iter().zip(b) {
            let (xv, yv) = (self.vals[x.index()], self.vals[y.index()]);
            acc += xv * yv;
            self.push_edge(x, yv);
            self.push_edge(y, xv);
        }
        self.seal(start, acc)
    }

    fn weighted_sum(&mut self, coeffs: &[f64], xs: &[Var]) -> Var {
        debug_assert_eq!(coeffs.len(), xs.len());
        let start = self.open();
        let mut acc = 0.0;
        for (&c, &x) in coeffs.iter().zip(xs) {
            acc += c * self.vals[x.index()];
            self.push_edge(x, c);
        }
        self.seal(start, acc)
    }

    fn logsumexp(&mut self, xs: &[Var]) -> Var {
        let m = xs
            .iter()
            .map(|&x| self.vals[x.index()])
            .fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            // Degenerate: all terms -inf. Constant, no useful gradient.
            return self.lit(m);
        }
        let mut total = 0.0;
        let exps: Vec<f64> = xs
            .iter()
            .map(|&x| {
                let e = (self.vals[x.index()] - m).exp();
                total += e;
                e
            })
            .collect();
        let start = self.open();
        for (&x, &e) in xs.iter().zip(&exps) {
            self.push_edge(x, e / total); // softmax weights
        }
        self.seal(start, m + total.ln())
    }
}
