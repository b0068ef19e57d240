//! Minimal reverse-mode differentiation engine.
//!
//! A [`Tape`] records scalar primitives during a forward evaluation; the
//! adjoint pass then yields gradients of a scalar output with respect to
//! every leaf variable. The [`Real`] trait lets numeric code be written once
//! and run either on plain `f64` (fast path) or on tape variables
//! (gradient path). Input-Jacobians of MLPs are computed by propagating
//! tangent vectors through the same forward pass, so expressions containing
//! Jacobian entries remain differentiable with respect to the weights.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("dimension mismatch: expected input of length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("inconsistent layer shapes in MLP spec")]
    BadLayerShapes,
}

/// One recorded primitive: up to two parents with local partial derivatives.
#[derive(Clone, Copy)]
struct Node {
    parents: [(usize, f64); 2],
    arity: u8,
}

/// Arena of recorded operations for one forward evaluation.
///
/// Re-executing the same sequence of primitives reproduces outputs
/// bit-identically; the tape itself never re-orders or fuses anything.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node, val: f64) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        nodes.push(node);
        Var {
            tape: self,
            idx,
            val,
        }
    }

    /// Register a leaf (independent) variable.
    pub fn var(&self, val: f64) -> Var<'_> {
        self.push(
            Node {
                parents: [(0, 0.0); 2],
                arity: 0,
            },
            val,
        )
    }

    /// Adjoint pass: derivative of `output` with respect to every node.
    pub fn gradient(&self, output: Var<'_>) -> Gradient {
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        adj[output.idx] = 1.0;
        for i in (0..=output.idx).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let node = &nodes[i];
            for k in 0..node.arity as usize {
                let (p, d) = node.parents[k];
                adj[p] += a * d;
            }
        }
        Gradient { adjoints: adj }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints of one output with respect to every tape node.
pub struct Gradient {
    adjoints: Vec<f64>,
}

impl Gradient {
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        self.adjoints[v.idx]
    }
}

/// A scalar value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
    val: f64,
}

impl<'t> Var<'t> {
    fn unary(self, val: f64, d: f64) -> Var<'t> {
        self.tape.push(
            Node {
                parents: [(self.idx, d), (0, 0.0)],
                arity: 1,
            },
            val,
        )
    }

    fn binary(self, other: Var<'t>, val: f64, da: f64, db: f64) -> Var<'t> {
        self.tape.push(
            Node {
                parents: [(self.idx, da), (other.idx, db)],
                arity: 2,
            },
            val,
        )
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.val + rhs.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.val - rhs.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.val * rhs.val, rhs.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(
            rhs,
            self.val / rhs.val,
            1.0 / rhs.val,
            -self.val / (rhs.val * rhs.val),
        )
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(-self.val, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.unary(self.val + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.unary(self.val - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.unary(self.val * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Var<'t> {
        self.unary(self.val / rhs, 1.0 / rhs)
    }
}

/// Scalar usable by generic numeric code: plain `f64` or a tape [`Var`].
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
    /// Constant `c` in the same evaluation context as `self`.
    fn lit(self, c: f64) -> Self;
    fn tanh_r(self) -> Self;
    fn relu_r(self) -> Self;
    fn sqrt_r(self) -> Self;
    fn exp_r(self) -> Self;
    fn ln_r(self) -> Self;
    /// `min(0, x)`, with derivative 1 for x < 0 and 0 for x >= 0.
    fn min_zero(self) -> Self;
}

impl Real for f64 {
    fn value(self) -> f64 {
        self
    }
    fn lit(self, c: f64) -> f64 {
        c
    }
    fn tanh_r(self) -> f64 {
        self.tanh()
    }
    fn relu_r(self) -> f64 {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }
    fn sqrt_r(self) -> f64 {
        self.sqrt()
    }
    fn exp_r(self) -> f64 {
        self.exp()
    }
    fn ln_r(self) -> f64 {
        self.ln()
    }
    fn min_zero(self) -> f64 {
        if self < 0.0 {
            self
        } else {
            0.0
        }
    }
}

impl<'t> Real for Var<'t> {
    fn value(self) -> f64 {
        self.val
    }
    fn lit(self, c: f64) -> Var<'t> {
        self.tape.var(c)
    }
    fn tanh_r(self) -> Var<'t> {
        let y = self.val.tanh();
        self.unary(y, 1.0 - y * y)
    }
    fn relu_r(self) -> Var<'t> {
        // derivative at 0 defined as 0
        if self.val > 0.0 {
            self.unary(self.val, 1.0)
        } else {
            self.unary(0.0, 0.0)
        }
    }
    fn sqrt_r(self) -> Var<'t> {
        let y = self.val.sqrt();
        self.unary(y, 0.5 / y)
    }
    fn exp_r(self) -> Var<'t> {
        let y = self.val.exp();
        self.unary(y, y)
    }
    fn ln_r(self) -> Var<'t> {
        self.unary(self.val.ln(), 1.0 / self.val)
    }
    fn min_zero(self) -> Var<'t> {
        if self.val < 0.0 {
            self.unary(self.val, 1.0)
        } else {
            self.unary(0.0, 0.0)
        }
    }
}

/// Numerically safe softplus; maps an unconstrained scalar to a positive one.
pub fn softplus<T: Real>(x: T) -> T {
    if x.value() > 30.0 {
        // ln(1 + e^x) = x to machine precision here
        x
    } else {
        (x.exp_r() + 1.0).ln_r()
    }
}

pub fn softplus_inverse(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

/// Fully-connected network: affine layers with an activation on hidden
/// layers only. Weights are stored row-major, `widths[l+1] x widths[l]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpSpec {
    pub fn zeros(widths: Vec<usize>, activation: Activation) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..widths.len() - 1 {
            weights.push(vec![0.0; widths[l + 1] * widths[l]]);
            biases.push(vec![0.0; widths[l + 1]]);
        }
        MlpSpec {
            widths,
            activation,
            weights,
            biases,
        }
    }

    pub fn random<R: rand::Rng>(widths: Vec<usize>, activation: Activation, rng: &mut R) -> Self {
        use rand_distr::{Distribution, Normal};
        let mut spec = Self::zeros(widths, activation);
        for l in 0..spec.weights.len() {
            let fan_in = spec.widths[l] as f64;
            let std = (1.0 / fan_in).sqrt();
            let dist = Normal::new(0.0, std).unwrap();
            for w in spec.weights[l].iter_mut() {
                *w = dist.sample(rng);
            }
        }
        spec
    }

    pub fn validate(&self) -> Result<(), DiffError> {
        if self.widths.len() < 2
            || self.weights.len() != self.widths.len() - 1
            || self.biases.len() != self.widths.len() - 1
        {
            return Err(DiffError::BadLayerShapes);
        }
        for l in 0..self.weights.len() {
            if self.weights[l].len() != self.widths[l + 1] * self.widths[l]
                || self.biases[l].len() != self.widths[l + 1]
            {
                return Err(DiffError::BadLayerShapes);
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, DiffError> {
        if x.len() != self.input_dim() {
            return Err(DiffError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let mut a = x.to_vec();
        let last = self.weights.len() - 1;
        for l in 0..self.weights.len() {
            let (n_out, n_in) = (self.widths[l + 1], self.widths[l]);
            let mut out = self.biases[l].clone();
            for i in 0..n_out {
                let row = &self.weights[l][i * n_in..(i + 1) * n_in];
                let mut acc = 0.0;
                for j in 0..n_in {
                    acc += row[j] * a[j];
                }
                out[i] += acc;
            }
            if l != last {
                for v in out.iter_mut() {
                    *v = match self.activation {
                        Activation::Tanh => v.tanh(),
                        Activation::Relu => v.max(0.0),
                    };
                }
            }
            a = out;
        }
        Ok(a)
    }

    /// Exact Jacobian of `forward` at `x` (out_dim x in_dim), computed by
    /// backpropagating a Jacobian matrix through the recorded layer values.
    pub fn input_jacobian(&self, x: &[f64]) -> Result<Vec<Vec<f64>>, DiffError> {
        if x.len() != self.input_dim() {
            return Err(DiffError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        // forward pass, noting post-activation values per layer
        let mut acts: Vec<Vec<f64>> = vec![x.to_vec()];
        let last = self.weights.len() - 1;
        for l in 0..self.weights.len() {
            let (n_out, n_in) = (self.widths[l + 1], self.widths[l]);
            let a = &acts[l];
            let mut out = self.biases[l].clone();
            for i in 0..n_out {
                let row = &self.weights[l][i * n_in..(i + 1) * n_in];
                for j in 0..n_in {
                    out[i] += row[j] * a[j];
                }
            }
            if l != last {
                for v in out.iter_mut() {
                    *v = match self.activation {
                        Activation::Tanh => v.tanh(),
                        Activation::Relu => v.max(0.0),
                    };
                }
            }
            acts.push(out);
        }
        // backward pass over the chain rule: J <- J_layer * J
        let n_in0 = self.input_dim();
        let mut jac: Vec<Vec<f64>> = (0..n_in0)
            .map(|j| {
                let mut row = vec![0.0; n_in0];
                row[j] = 1.0;
                row
            })
            .collect();
        for l in 0..self.weights.len() {
            let (n_out, n_in) = (self.widths[l + 1], self.widths[l]);
            let mut next = vec![vec![0.0; n_in0]; n_out];
            for i in 0..n_out {
                let row = &self.weights[l][i * n_in..(i + 1) * n_in];
                for j in 0..n_in {
                    let w = row[j];
                    if w == 0.0 {
                        continue;
                    }
                    for k in 0..n_in0 {
                        next[i][k] += w * jac[j][k];
                    }
                }
                if l != last {
                    let y = acts[l + 1][i];
                    let d = match self.activation {
                        Activation::Tanh => 1.0 - y * y,
                        // subgradient 0 at the kink
                        Activation::Relu => {
                            if y > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    for k in 0..n_in0 {
                        next[i][k] *= d;
                    }
                }
            }
            jac = next;
        }
        Ok(jac)
    }

    /// Gradient of `0.5 * ||forward(x) - target||^2`-style objectives: given
    /// dL/dy at the output, backpropagate to weight and bias gradients.
    /// Returns the loss-side input gradient too.
    pub fn backprop(&self, x: &[f64], out_grad: &[f64]) -> Result<MlpGrads, DiffError> {
        if x.len() != self.input_dim() {
            return Err(DiffError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let last = self.weights.len() - 1;
        let mut acts: Vec<Vec<f64>> = vec![x.to_vec()];
        for l in 0..self.weights.len() {
            let (n_out, n_in) = (self.widths[l + 1], self.widths[l]);
            let a = &acts[l];
            let mut out = self.biases[l].clone();
            for i in 0..n_out {
                let row = &self.weights[l][i * n_in..(i + 1) * n_in];
                for j in 0..n_in {
                    out[i] += row[j] * a[j];
                }
            }
            if l != last {
                for v in out.iter_mut() {
                    *v = match self.activation {
                        Activation::Tanh => v.tanh(),
                        Activation::Relu => v.max(0.0),
                    };
                }
            }
            acts.push(out);
        }
        let mut d_weights: Vec<Vec<f64>> = self.weights.iter().map(|w| vec![0.0; w.len()]).collect();
        let mut d_biases: Vec<Vec<f64>> = self.biases.iter().map(|b| vec![0.0; b.len()]).collect();
        let mut delta = out_grad.to_vec();
        for l in (0..self.weights.len()).rev() {
            let (n_out, n_in) = (self.widths[l + 1], self.widths[l]);
            if l != last {
                for i in 0..n_out {
                    let y = acts[l + 1][i];
                    let d = match self.activation {
                        Activation::Tanh => 1.0 - y * y,
                        Activation::Relu => {
                            if y > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    delta[i] *= d;
                }
            }
            let a = &acts[l];
            let mut prev = vec![0.0; n_in];
            for i in 0..n_out {
                d_biases[l][i] += delta[i];
                let wrow = &self.weights[l][i * n_in..(i + 1) * n_in];
                let grow = &mut d_weights[l][i * n_in..(i + 1) * n_in];
                for j in 0..n_in {
                    grow[j] += delta[i] * a[j];
                    prev[j] += delta[i] * wrow[j];
                }
            }
            delta = prev;
        }
        Ok(MlpGrads {
            d_weights,
            d_biases,
            d_input: delta,
        })
    }
}

/// Parameter gradients from [`MlpSpec::backprop`], matching the spec shapes.
pub struct MlpGrads {
    pub d_weights: Vec<Vec<f64>>,
    pub d_biases: Vec<Vec<f64>>,
    pub d_input: Vec<f64>,
}

/// An MLP whose weights live in a generic scalar type, so that forward
/// passes and input-Jacobians can be recorded on a tape.
pub struct MlpVars<T> {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub weights: Vec<Vec<T>>,
    pub biases: Vec<Vec<T>>,
}

impl<T: Real> MlpVars<T> {
    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Forward pass together with directional derivatives along each column
    /// of `tangents` (a list of input-space directions, given as constants).
    ///
    /// The tangent propagation is expressed in the same primitives as the
    /// forward pass, so reverse-mode over the weights covers losses that
    /// contain Jacobian entries.
    pub fn forward_with_tangents(
        &self,
        x: &[f64],
        tangents: &[Vec<f64>],
        ctx: T,
    ) -> (Vec<T>, Vec<Vec<T>>) {
        let last = self.weights.len() - 1;
        let mut a: Vec<T> = x.iter().map(|&v| ctx.lit(v)).collect();
        let mut ts: Vec<Vec<T>> = tangents
            .iter()
            .map(|t| t.iter().map(|&v| ctx.lit(v)).collect())
            .collect();
        for l in 0..self.weights.len() {
            let (n_out, n_in) = (self.widths[l + 1], self.widths[l]);
            let mut out: Vec<T> = self.biases[l].clone();
            let mut t_out: Vec<Vec<T>> = ts
                .iter()
                .map(|_| (0..n_out).map(|_| ctx.lit(0.0)).collect())
                .collect();
            for i in 0..n_out {
                let row = &self.weights[l][i * n_in..(i + 1) * n_in];
                let mut acc = out[i];
                for j in 0..n_in {
                    acc = acc + row[j] * a[j];
                }
                out[i] = acc;
                for (k, t) in ts.iter().enumerate() {
                    let mut tacc = t_out[k][i];
                    for j in 0..n_in {
                        tacc = tacc + row[j] * t[j];
                    }
                    t_out[k][i] = tacc;
                }
            }
            if l != last {
                for i in 0..n_out {
                    match self.activation {
                        Activation::Tanh => {
                            let y = out[i].tanh_r();
                            let d = -(y * y) + 1.0;
                            out[i] = y;
                            for t in t_out.iter_mut() {
                                t[i] = t[i] * d;
                            }
                        }
                        Activation::Relu => {
                            let gate = if out[i].value() > 0.0 { 1.0 } else { 0.0 };
                            out[i] = out[i].relu_r();
                            for t in t_out.iter_mut() {
                                t[i] = t[i] * gate;
                            }
                        }
                    }
                }
            }
            a = out;
            ts = t_out;
        }
        (a, ts)
    }

    pub fn forward(&self, x: &[f64], ctx: T) -> Vec<T> {
        self.forward_with_tangents(x, &[], ctx).0
    }
}
