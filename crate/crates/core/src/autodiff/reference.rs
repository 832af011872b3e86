//! Forward-only reference evaluator, generic over the scalar type.
//!
//! This is a second implementation of the tree's forward math (written
//! directly from the operator formulas, not through the production kernels)
//! used as the oracle for gradient checks. Run in double-double precision it
//! makes finite differences accurate far below the tolerances they check.

use std::ops::{Add, Div, Mul, Neg, Sub};

use super::dd::Dd;
use super::ParamVector;
use crate::fuzzy::OpKind;
use crate::primitives::{Point, Primitive, QUADRIC_SLOTS_2D};
use crate::tree::{BooleanOp, CsgTree, Node, NodeId};

pub trait Real:
    Copy
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn sqrt(self) -> Self;
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

impl Real for Dd {
    fn from_f64(v: f64) -> Self {
        Dd::new(v)
    }
    fn to_f64(self) -> f64 {
        self.hi() + self.lo()
    }
    fn exp(self) -> Self {
        Dd::exp(self)
    }
    fn ln(self) -> Self {
        Dd::ln(self)
    }
    fn sin(self) -> Self {
        Dd::sin(self)
    }
    fn cos(self) -> Self {
        Dd::cos(self)
    }
    fn sqrt(self) -> Self {
        Dd::sqrt(self)
    }
}

fn c<T: Real>(v: f64) -> T {
    T::from_f64(v)
}

fn sigmoid<T: Real>(z: T) -> T {
    if z >= c(0.0) {
        c::<T>(1.0) / (c::<T>(1.0) + (-z).exp())
    } else {
        let e = z.exp();
        e / (c::<T>(1.0) + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    if x > c(0.0) {
        x + (c::<T>(1.0) + (-x).exp()).ln()
    } else {
        (c::<T>(1.0) + x.exp()).ln()
    }
}

fn min<T: Real>(a: T, b: T) -> T {
    if a <= b {
        a
    } else {
        b
    }
}

fn max<T: Real>(a: T, b: T) -> T {
    if a >= b {
        a
    } else {
        b
    }
}

fn field<T: Real>(prim: &Primitive, theta: &[T], p: &Point) -> T {
    let x: Vec<T> = p.coords().iter().map(|&v| c(v)).collect();
    let d = x.len();
    match prim {
        Primitive::Quadric(_) => {
            let mut q = [c::<T>(0.0); 10];
            if d == 2 {
                for (i, &slot) in QUADRIC_SLOTS_2D.iter().enumerate() {
                    q[slot] = theta[i];
                }
            } else {
                q.copy_from_slice(&theta[..10]);
            }
            let z = if d == 3 { x[2] } else { c(0.0) };
            let (px, py) = (x[0], x[1]);
            q[0] * px * px
                + q[1] * py * py
                + q[2] * z * z
                + q[3] * px * py
                + q[4] * py * z
                + q[5] * z * px
                + q[6] * px
                + q[7] * py
                + q[8] * z
                + q[9]
        }
        Primitive::Sphere(_) => {
            let mut d2 = c::<T>(0.0);
            for k in 0..d {
                let t = x[k] - theta[k];
                d2 = d2 + t * t;
            }
            softplus(theta[d]) - d2.sqrt()
        }
        Primitive::Plane(_) => {
            let mut dot = c::<T>(0.0);
            let mut n2 = c::<T>(0.0);
            for k in 0..d {
                dot = dot + theta[k] * x[k];
                n2 = n2 + theta[k] * theta[k];
            }
            theta[d] - dot / n2.sqrt()
        }
    }
}

fn product_op<T: Real>(op: OpKind, x: T, y: T) -> T {
    match op {
        OpKind::Intersection => x * y,
        OpKind::Union => x + y - x * y,
        OpKind::Difference => x * (c::<T>(1.0) - y),
        OpKind::ReverseDifference => y * (c::<T>(1.0) - x),
    }
}

fn godel_op<T: Real>(op: OpKind, x: T, y: T) -> T {
    let one = c::<T>(1.0);
    match op {
        OpKind::Intersection => min(x, y),
        OpKind::Union => max(x, y),
        OpKind::Difference => min(x, one - y),
        OpKind::ReverseDifference => min(y, one - x),
    }
}

/// Per-node, per-point values of the reference forward pass.
pub(crate) struct ReferenceEval<'a, T: Real> {
    tree: &'a CsgTree,
    layout: &'a ParamVector,
    parents: Vec<Option<NodeId>>,
    points: &'a [Point],
    values: Vec<Vec<T>>,
}

impl<'a, T: Real> ReferenceEval<'a, T> {
    pub(crate) fn new(
        tree: &'a CsgTree,
        layout: &'a ParamVector,
        params: &[T],
        points: &'a [Point],
    ) -> Self {
        let mut eval = ReferenceEval {
            tree,
            layout,
            parents: tree.parents(),
            points,
            values: Vec::new(),
        };
        let mut values: Vec<Vec<T>> = Vec::with_capacity(tree.len());
        for id in 0..tree.len() {
            let v = eval.node_values(id, params, &|child| values[child].clone());
            values.push(v);
        }
        eval.values = values;
        eval
    }

    fn node_values(&self, id: NodeId, params: &[T], child: &dyn Fn(NodeId) -> Vec<T>) -> Vec<T> {
        let theta = &params[self.layout.node_range(id)];
        match &self.tree.nodes()[id] {
            Node::Constant(v) => vec![c(*v); self.points.len()],
            Node::Leaf { primitive, crisp } => self
                .points
                .iter()
                .map(|p| {
                    let s = theta[theta.len() - 1];
                    let o = sigmoid(s * field(primitive, theta, p));
                    match (*crisp, o.to_f64() >= 0.5) {
                        (false, _) => o,
                        (true, true) => c(1.0),
                        (true, false) => c(0.0),
                    }
                })
                .collect(),
            Node::Boolean { op, left, right } => {
                let (xs, ys) = (child(*left), child(*right));
                let ctrl = self.tree.control();
                let omega: T = c(ctrl.omega);
                let combine: Box<dyn Fn(T, T) -> T> = match op {
                    BooleanOp::Unified { .. } => {
                        let z: Vec<T> = theta
                            .iter()
                            .map(|&r| (omega * r).sin() * c(ctrl.temperature))
                            .collect();
                        let m = z.iter().copied().fold(z[0], max);
                        let e: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
                        let sum = e[0] + e[1] + e[2] + e[3];
                        let w: Vec<T> = e.iter().map(|&v| v / sum).collect();
                        Box::new(move |x, y| {
                            OpKind::ALL
                                .iter()
                                .zip(&w)
                                .fold(c(0.0), |acc, (&k, &wk)| acc + wk * product_op(k, x, y))
                        })
                    }
                    BooleanOp::Product(k) => {
                        let k = *k;
                        Box::new(move |x, y| product_op(k, x, y))
                    }
                    BooleanOp::Godel(k) => {
                        let k = *k;
                        Box::new(move |x, y| godel_op(k, x, y))
                    }
                    BooleanOp::Bilinear { .. } => {
                        let half = c::<T>(0.5);
                        let one = c::<T>(1.0);
                        let u = half * (one + (omega * theta[0]).sin());
                        let v = half * (one + (omega * theta[1]).sin());
                        Box::new(move |x, y| {
                            (one - u) * (one - v) * product_op(OpKind::Union, x, y)
                                + u * (one - v) * product_op(OpKind::Intersection, x, y)
                                + (one - u) * v * product_op(OpKind::ReverseDifference, x, y)
                                + u * v * product_op(OpKind::Difference, x, y)
                        })
                    }
                };
                xs.into_iter().zip(ys).map(|(x, y)| combine(x, y)).collect()
            }
        }
    }

    /// Loss after replacing `params` for one node only; the cached values of
    /// every other subtree are reused.
    pub(crate) fn loss_with(&self, node: NodeId, params: &[T], targets: &[f64]) -> T {
        let mut changed = node;
        let mut current = self.node_values(node, params, &|child| self.values[child].clone());
        while let Some(parent) = self.parents[changed] {
            let updated = current;
            current = self.node_values(parent, params, &|child| {
                if child == changed {
                    updated.clone()
                } else {
                    self.values[child].clone()
                }
            });
            changed = parent;
        }
        mse(&current, targets)
    }
}

fn mse<T: Real>(pred: &[T], targets: &[f64]) -> T {
    let mut s = c::<T>(0.0);
    for (p, &t) in pred.iter().zip(targets) {
        let d = *p - c(t);
        s = s + d * d;
    }
    s / c(pred.len() as f64)
}
