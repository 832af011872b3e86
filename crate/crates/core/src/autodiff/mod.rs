//! Reverse-mode gradients of the occupancy MSE through a CSG tree.
//!
//! The computation graph is the tree itself plus elementwise maps, so each
//! node type has a hand-written backward rule: unified booleans chain through
//! the softmax/sine control map, leaves through the sigmoid and field.
//! One activation is stored per node per point.

mod dd;
pub mod reference;

use std::ops::Range;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fuzzy;
use crate::primitives::{check_dim, sigmoid_pair, Point};
use crate::tree::{BooleanOp, CsgTree, Node, NodeId, ResolvedOp};

pub use dd::Dd;
use reference::ReferenceEval;

/// Points per gradient work item. Fixed so that the reduction order, and
/// therefore the result, is independent of the thread count.
const GRAD_CHUNK: usize = 256;

/// Flat trainable parameters of a tree, concatenated node by node in
/// post-order, with the slice owned by each node.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    ranges: Vec<Range<usize>>,
}

impl ParamVector {
    pub fn from_tree(tree: &CsgTree) -> Self {
        let mut ranges = Vec::with_capacity(tree.len());
        let mut offset = 0;
        for id in 0..tree.len() {
            let n = tree.node_param_count(id);
            ranges.push(offset..offset + n);
            offset += n;
        }
        let mut values = vec![0.0; offset];
        for (id, r) in ranges.iter().enumerate() {
            tree.write_node_params(id, &mut values[r.clone()]);
        }
        ParamVector { values, ranges }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Slice of the flat vector owned by `node` (empty for parameterless nodes).
    pub fn node_range(&self, node: NodeId) -> Range<usize> {
        self.ranges[node].clone()
    }

    /// Node owning flat index `index`.
    pub fn node_of(&self, index: usize) -> Option<NodeId> {
        self.ranges.iter().position(|r| r.contains(&index))
    }

    fn same_layout(&self, tree: &CsgTree) -> bool {
        self.ranges.len() == tree.len()
            && self
                .ranges
                .iter()
                .enumerate()
                .all(|(id, r)| r.len() == tree.node_param_count(id))
    }

    /// Writes the values back into `tree`, which must have this layout.
    pub fn apply_to(&self, tree: &mut CsgTree) -> Result<()> {
        if !self.same_layout(tree) {
            return Err(Error::Shape(
                "parameter vector layout does not match the tree".into(),
            ));
        }
        for (id, r) in self.ranges.iter().enumerate() {
            tree.read_node_params(id, &self.values[r.clone()]);
        }
        Ok(())
    }
}

/// Gradient aligned with a [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    pub values: Vec<f64>,
}

impl GradientBuffer {
    pub fn zeros(len: usize) -> Self {
        GradientBuffer {
            values: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Mean of squared differences.
pub fn loss_mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Argument("loss over an empty batch".into()));
    }
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} predictions against {} targets",
            pred.len(),
            target.len()
        )));
    }
    let sq: Vec<f64> = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .collect();
    Ok(pairwise_sum(&sq) / pred.len() as f64)
}

fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        v.iter().sum()
    } else {
        let mid = v.len() / 2;
        pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
    }
}

struct ChunkGrad {
    sq_err: f64,
    grad: Vec<f64>,
}

fn reduce_pairwise(mut parts: Vec<ChunkGrad>) -> ChunkGrad {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.sq_err += b.sq_err;
                for (x, y) in a.grad.iter_mut().zip(&b.grad) {
                    *x += y;
                }
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().expect("at least one chunk")
}

/// Loss and gradient of `loss_mse(eval(tree, points), target)` with respect
/// to every trainable scalar of `tree`.
pub fn forward_backward(
    tree: &CsgTree,
    points: &[Point],
    target: &[f64],
) -> Result<(f64, GradientBuffer)> {
    if points.is_empty() {
        return Err(Error::Argument(
            "forward/backward over an empty batch".into(),
        ));
    }
    if points.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} points against {} targets",
            points.len(),
            target.len()
        )));
    }
    points.iter().try_for_each(|p| check_dim(tree.dim(), p))?;
    let layout = ParamVector::from_tree(tree);
    let ops = tree.resolved_ops()?;
    let parts: Vec<ChunkGrad> = points
        .par_chunks(GRAD_CHUNK)
        .zip(target.par_chunks(GRAD_CHUNK))
        .map(|(p, t)| chunk_pass(tree, &layout, &ops, p, t))
        .collect::<Result<_>>()?;
    let total = reduce_pairwise(parts);
    let n = points.len() as f64;
    let grads: Vec<f64> = total.grad.into_iter().map(|g| g / n).collect();
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical {
            node: layout.node_of(i).unwrap_or(0),
            what: format!("gradient entry {i} is {}", grads[i]),
        });
    }
    Ok((total.sq_err / n, GradientBuffer { values: grads }))
}

fn chunk_pass(
    tree: &CsgTree,
    layout: &ParamVector,
    ops: &[Option<ResolvedOp>],
    points: &[Point],
    target: &[f64],
) -> Result<ChunkGrad> {
    let n = points.len();
    let nodes = tree.nodes();
    let mut act = vec![0.0; nodes.len() * n];
    // per soft leaf: field value and sigmoid(-z), reused by the backward pass
    let mut leaf_aux: Vec<Vec<(f64, f64)>> = vec![Vec::new(); nodes.len()];
    for (id, node) in nodes.iter().enumerate() {
        let (done, rest) = act.split_at_mut(id * n);
        let out = &mut rest[..n];
        match node {
            Node::Leaf {
                primitive,
                crisp: true,
            } => {
                for (o, p) in out.iter_mut().zip(points) {
                    *o = CsgTree::leaf_value(primitive, true, p);
                }
            }
            Node::Leaf {
                primitive,
                crisp: false,
            } => {
                let s = primitive.sharpness();
                let aux = &mut leaf_aux[id];
                aux.reserve_exact(n);
                for (o, p) in out.iter_mut().zip(points) {
                    let f = primitive.field_unchecked(p);
                    let (pos, neg) = sigmoid_pair(s * f);
                    *o = pos;
                    aux.push((f, neg));
                }
            }
            Node::Constant(v) => out.fill(*v),
            Node::Boolean { left, right, .. } => {
                let op = ops[id].expect("boolean node has a resolved op");
                let xs = &done[left * n..(left + 1) * n];
                let ys = &done[right * n..(right + 1) * n];
                for ((o, x), y) in out.iter_mut().zip(xs).zip(ys) {
                    *o = op.apply(*x, *y);
                }
            }
        }
        if let Some(bad) = out.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                node: id,
                what: format!("occupancy evaluated to {bad}"),
            });
        }
    }

    let root = tree.root();
    let mut adj = vec![0.0; nodes.len() * n];
    let mut sq_err = 0.0;
    for i in 0..n {
        let r = act[root * n + i] - target[i];
        sq_err += r * r;
        adj[root * n + i] = 2.0 * r;
    }

    let mut grad = vec![0.0; layout.len()];
    let control = tree.control();
    for id in (0..nodes.len()).rev() {
        let slot = layout.node_range(id);
        match &nodes[id] {
            Node::Constant(_) | Node::Leaf { crisp: true, .. } => {}
            Node::Leaf { primitive, .. } => {
                let g = &mut grad[slot];
                for (i, p) in points.iter().enumerate() {
                    let a = adj[id * n + i];
                    if a != 0.0 {
                        let (f, neg) = leaf_aux[id][i];
                        primitive.accumulate_grad_at(p, f, a * act[id * n + i] * neg, g);
                    }
                }
            }
            Node::Boolean { op, left, right } => {
                let resolved = ops[id].expect("boolean node has a resolved op");
                let mut g_op = [0.0f64; 4];
                for i in 0..n {
                    let a = adj[id * n + i];
                    let x = act[left * n + i];
                    let y = act[right * n + i];
                    let (dx, dy) = match resolved {
                        ResolvedOp::Weighted(c) => {
                            if matches!(op, BooleanOp::Unified { .. }) {
                                let dc = fuzzy::unified_weight_partials(x, y);
                                for k in 0..4 {
                                    g_op[k] += a * dc[k];
                                }
                            }
                            fuzzy::unified_partials(&c, x, y)
                        }
                        ResolvedOp::Godel(k) => k.godel_partials(x, y),
                        ResolvedOp::Bilinear { u, v } => {
                            let [du, dv, dx, dy] = fuzzy::bilinear_partials(u, v, x, y);
                            g_op[0] += a * du;
                            g_op[1] += a * dv;
                            (dx, dy)
                        }
                    };
                    adj[left * n + i] += a * dx;
                    adj[right * n + i] += a * dy;
                }
                match (op, resolved) {
                    (BooleanOp::Unified { c_raw }, ResolvedOp::Weighted(c)) => {
                        // softmax Jacobian in the shifted domain, then sin(ω c̃) t
                        let dot: f64 = (0..4).map(|k| c[k] * g_op[k]).sum();
                        for k in 0..4 {
                            let gz = c[k] * (g_op[k] - dot);
                            grad[slot.start + k] += gz
                                * control.temperature
                                * control.omega
                                * (control.omega * c_raw[k]).cos();
                        }
                    }
                    (BooleanOp::Bilinear { uv_raw }, _) => {
                        for k in 0..2 {
                            grad[slot.start + k] +=
                                g_op[k] * 0.5 * control.omega * (control.omega * uv_raw[k]).cos();
                        }
                    }
                    _ => {}
                }
            }
        }
    }
    Ok(ChunkGrad { sq_err, grad })
}

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Flat index of the worst parameter, if the tree has any.
    pub arg_max: Option<usize>,
    pub node: Option<NodeId>,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares [`forward_backward`] with fourth-order central differences of the
/// loss, evaluated by the double-double reference evaluator.
///
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check(
    tree: &CsgTree,
    points: &[Point],
    target: &[f64],
    step: f64,
) -> Result<GradCheck> {
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::Argument(format!("step must be > 0, got {step}")));
    }
    let (_, grads) = forward_backward(tree, points, target)?;
    let layout = ParamVector::from_tree(tree);
    let base: Vec<Dd> = layout.values().iter().map(|&v| Dd::new(v)).collect();
    let reference = ReferenceEval::new(tree, &layout, &base, points);
    let h = Dd::new(step);

    let mut report = GradCheck {
        max_relative_error: 0.0,
        arg_max: None,
        node: None,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut params = base.clone();
    for node in 0..tree.len() {
        for i in layout.node_range(node) {
            let mut at = |k: f64| {
                params[i] = base[i] + h * Dd::new(k);
                let l = reference.loss_with(node, &params, target);
                params[i] = base[i];
                l
            };
            let numeric =
                ((at(-2.0) - at(2.0)) + Dd::new(8.0) * (at(1.0) - at(-1.0))) / (Dd::new(12.0) * h);
            let numeric = numeric.hi() + numeric.lo();
            let analytic = grads.values[i];
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            let err = (analytic - numeric).abs() / denom;
            if report.arg_max.is_none() || err > report.max_relative_error {
                report = GradCheck {
                    max_relative_error: err,
                    arg_max: Some(i),
                    node: Some(node),
                    analytic,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fuzzy::OpKind;
    use crate::primitives::{Primitive, PrimitiveKind, SpherePrimitive};
    use crate::tree::{build_full_tree, one_hot_controls, ControlConfig, CsgExpr, DEFAULT_OMEGA};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn points(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Point> {
        (0..n)
            .map(|_| {
                let c: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                Point::new(&c).unwrap()
            })
            .collect()
    }

    fn circle(x: f64, y: f64, r: f64, s: f64) -> Primitive {
        Primitive::Sphere(SpherePrimitive::new(Point::xy(x, y), r, s).unwrap())
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss_mse(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(loss_mse(&[1.0; 5], &[0.0; 5]).unwrap(), 1.0);
        assert_eq!(loss_mse(&[0.5], &[0.0]).unwrap(), 0.25);
        assert!(matches!(loss_mse(&[], &[]), Err(Error::Argument(_))));
        assert!(matches!(
            loss_mse(&[0.1], &[0.1, 0.2]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn param_vector_layout_is_a_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tree = build_full_tree(3, PrimitiveKind::Quadric, 2, &mut rng).unwrap();
        let pv = ParamVector::from_tree(&tree);
        assert_eq!(pv.len(), 7 * 4 + 8 * 7);
        let mut next = 0;
        for id in 0..tree.len() {
            let r = pv.node_range(id);
            assert_eq!(r.start, next);
            assert_eq!(r.len(), tree.node_param_count(id));
            next = r.end;
        }
        assert_eq!(next, pv.len());
        let mut copy = tree.clone();
        let mut shifted = pv.clone();
        shifted.values_mut().iter_mut().for_each(|v| *v += 0.125);
        shifted.apply_to(&mut copy).unwrap();
        assert_eq!(ParamVector::from_tree(&copy), shifted);
    }

    #[test]
    fn exact_fit_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tree = build_full_tree(3, PrimitiveKind::Quadric, 3, &mut rng).unwrap();
        let pts = points(&mut rng, 100, 3);
        let target = tree.eval(&pts).unwrap();
        let (loss, g) = forward_backward(&tree, &pts, &target).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_matches_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tree = build_full_tree(4, PrimitiveKind::Quadric, 2, &mut rng).unwrap();
        let pts = points(&mut rng, 700, 2);
        let target: Vec<f64> = (0..700).map(|_| rng.gen_range(0.0..1.0)).collect();
        let (loss, _) = forward_backward(&tree, &pts, &target).unwrap();
        let direct = loss_mse(&tree.eval(&pts).unwrap(), &target).unwrap();
        assert!((loss - direct).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_reference_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (depth, kind, dim) in [
            (1, PrimitiveKind::Quadric, 2),
            (3, PrimitiveKind::Quadric, 3),
            (3, PrimitiveKind::Sphere, 2),
            (2, PrimitiveKind::Plane, 3),
        ] {
            let tree = build_full_tree(depth, kind, dim, &mut rng).unwrap();
            let pts = points(&mut rng, 64, dim);
            let target: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
            let check = finite_diff_check(&tree, &pts, &target, 1e-5).unwrap();
            assert!(
                check.max_relative_error < 1e-5,
                "{depth} {kind:?} {check:?}"
            );
        }
    }

    #[test]
    fn fixed_and_bilinear_ops_have_correct_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tree = build_full_tree(3, PrimitiveKind::Quadric, 2, &mut rng).unwrap();
        let booleans: Vec<_> = (0..tree.len())
            .filter(|&i| matches!(tree.nodes()[i], Node::Boolean { .. }))
            .collect();
        tree.set_op(booleans[0], BooleanOp::Product(OpKind::Difference))
            .unwrap();
        tree.set_op(
            booleans[1],
            BooleanOp::Bilinear {
                uv_raw: [0.1, -0.2],
            },
        )
        .unwrap();
        tree.set_op(booleans[2], BooleanOp::Product(OpKind::ReverseDifference))
            .unwrap();
        let pts = points(&mut rng, 64, 2);
        let target: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let check = finite_diff_check(&tree, &pts, &target, 1e-5).unwrap();
        assert!(check.max_relative_error < 1e-5, "{check:?}");
    }

    #[test]
    fn zero_gradient_check_reports_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tree = build_full_tree(2, PrimitiveKind::Sphere, 2, &mut rng).unwrap();
        let pts = points(&mut rng, 16, 2);
        let target = tree.eval(&pts).unwrap();
        let check = finite_diff_check(&tree, &pts, &target, 1e-5).unwrap();
        assert!(check.max_relative_error < 1e-8, "{check:?}");
        assert!(check.arg_max.is_some());
        assert!(finite_diff_check(&tree, &pts, &target, 0.0).is_err());
    }

    #[test]
    fn product_union_passes_gradient_to_both_children() {
        let expr = CsgExpr::product(
            OpKind::Union,
            CsgExpr::Leaf(circle(-0.2, 0.0, 0.3, 5.0)),
            CsgExpr::Leaf(circle(0.2, 0.0, 0.4, 5.0)),
        );
        let tree = CsgTree::from_expr(2, ControlConfig::default(), &expr).unwrap();
        // left occupancy below right at every sample
        let pts = vec![
            Point::xy(0.3, 0.0),
            Point::xy(0.5, 0.1),
            Point::xy(0.25, -0.1),
        ];
        let vals: Vec<(f64, f64)> = pts
            .iter()
            .map(|p| match (&tree.nodes()[0], &tree.nodes()[1]) {
                (Node::Leaf { primitive: a, .. }, Node::Leaf { primitive: b, .. }) => {
                    (a.occupancy(p).unwrap(), b.occupancy(p).unwrap())
                }
                _ => unreachable!(),
            })
            .collect();
        assert!(vals.iter().all(|(x, y)| x < y));
        let (_, g) = forward_backward(&tree, &pts, &[1.0, 1.0, 1.0]).unwrap();
        let layout = ParamVector::from_tree(&tree);
        assert!(g.values[layout.node_range(0)].iter().any(|v| *v != 0.0));
        assert!(g.values[layout.node_range(1)].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn godel_union_blocks_dominated_child() {
        let big = circle(0.0, 0.0, 0.6, 5.0);
        let small = circle(0.05, 0.0, 0.3, 5.0);
        let expr = CsgExpr::op(
            BooleanOp::Godel(OpKind::Union),
            CsgExpr::Leaf(big),
            CsgExpr::Leaf(small),
        );
        let tree = CsgTree::from_expr(2, ControlConfig::default(), &expr).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts = points(&mut rng, 256, 2);
        let target: Vec<f64> = pts
            .iter()
            .map(|p| if p.coords()[0] > 0.5 { 1.0 } else { 0.0 })
            .collect();
        let (_, g) = forward_backward(&tree, &pts, &target).unwrap();
        let layout = ParamVector::from_tree(&tree);
        assert!(g.values[layout.node_range(1)].iter().all(|v| *v == 0.0));
        assert!(g.values[layout.node_range(0)].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn gradient_is_deterministic_across_thread_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let tree = build_full_tree(4, PrimitiveKind::Quadric, 3, &mut rng).unwrap();
        let pts = points(&mut rng, 3000, 3);
        let target: Vec<f64> = (0..3000).map(|_| rng.gen_range(0.0..1.0)).collect();
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| forward_backward(&tree, &pts, &target).unwrap())
        };
        let (l1, g1) = run(1);
        let (l4, g4) = run(4);
        assert_eq!(l1.to_bits(), l4.to_bits());
        assert_eq!(g1, g4);
    }

    #[test]
    fn locality_of_leaf_gradients() {
        // two far-apart sharp circles under a one-hot union; changing targets
        // far from the left circle leaves its gradient untouched
        let c_raw = one_hot_controls(OpKind::Union, DEFAULT_OMEGA);
        let expr = CsgExpr::op(
            BooleanOp::Unified { c_raw },
            CsgExpr::Leaf(circle(-0.6, 0.0, 0.2, 60.0)),
            CsgExpr::Leaf(circle(0.6, 0.0, 0.2, 60.0)),
        );
        let tree = CsgTree::from_expr(2, ControlConfig::default(), &expr).unwrap();
        let near_left = [Point::xy(-0.6, 0.18), Point::xy(-0.45, 0.0)];
        let near_right = vec![Point::xy(0.6, 0.18), Point::xy(0.45, 0.0)];
        let pts: Vec<Point> = near_left.iter().chain(&near_right).copied().collect();
        let pred = tree.eval(&pts).unwrap();
        let layout = ParamVector::from_tree(&tree);
        let t1 = vec![1.0, 1.0, 1.0, 1.0];
        // zero the mismatch on the right-hand points
        let t2 = vec![1.0, 1.0, pred[2], pred[3]];
        let (_, g1) = forward_backward(&tree, &pts, &t1).unwrap();
        let (_, g2) = forward_backward(&tree, &pts, &t2).unwrap();
        let left = layout.node_range(0);
        for i in left {
            assert!((g1.values[i] - g2.values[i]).abs() <= 1e-12 * g1.values[i].abs().max(1e-300));
        }
    }

    #[test]
    fn non_finite_parameters_report_node() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tree = build_full_tree(2, PrimitiveKind::Quadric, 2, &mut rng).unwrap();
        let mut pv = ParamVector::from_tree(&tree);
        let mut broken = tree.clone();
        let r = pv.node_range(3);
        pv.values_mut()[r.start] = f64::NAN;
        pv.apply_to(&mut broken).unwrap();
        let pts = points(&mut rng, 4, 2);
        match forward_backward(&broken, &pts, &[0.0; 4]) {
            Err(Error::Numerical { node, .. }) => assert_eq!(node, 3),
            other => panic!("expected numerical error, got {other:?}"),
        }
    }
}
