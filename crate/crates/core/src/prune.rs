//! Removal of subtrees that can be replaced by the full or empty set
//! without changing the root output beyond a tolerance.

use std::collections::{HashMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::loss_mse;
use crate::error::{Error, Result};
use crate::optimizer::{sample_points, SamplerConfig};
use crate::primitives::Point;
use crate::target::TargetOracle;
use crate::tree::{CsgTree, Node, NodeCount, NodeId};

pub const DEFAULT_PRUNE_THRESHOLD: f64 = 1e-3;
pub const DEFAULT_PRUNE_POINTS: usize = 200_000;

/// Sibling values at which a simplified parent is compared with the
/// identity and with a constant.
const PROBES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
const COLLAPSE_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct PruneConfig {
    /// Largest root-output MSE a single replacement may cause.
    pub threshold: f64,
    pub eval_points: Vec<Point>,
    /// Target occupancy at `eval_points`, used only for reporting.
    pub targets: Option<Vec<f64>>,
}

impl PruneConfig {
    pub fn new(threshold: f64, eval_points: Vec<Point>) -> Result<Self> {
        let cfg = PruneConfig {
            threshold,
            eval_points,
            targets: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Evaluation points drawn with the training batch schedule against `target`.
    pub fn from_target(
        threshold: f64,
        target: &dyn TargetOracle,
        count: usize,
        seed: u64,
    ) -> Result<Self> {
        let sampler = SamplerConfig {
            batch_size: count,
            ..SamplerConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let (points, occ) = sample_points(target, &sampler, &mut rng)?;
        let cfg = PruneConfig {
            threshold,
            eval_points: points,
            targets: Some(occ),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold.is_finite() && self.threshold > 0.0) {
            return Err(Error::Parameter(format!(
                "prune threshold must be > 0, got {}",
                self.threshold
            )));
        }
        if self.eval_points.is_empty() {
            return Err(Error::Argument(
                "pruning needs at least one evaluation point".into(),
            ));
        }
        if let Some(t) = &self.targets {
            if t.len() != self.eval_points.len() {
                return Err(Error::Shape(format!(
                    "{} targets for {} evaluation points",
                    t.len(),
                    self.eval_points.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RedundancyVerdict {
    /// Replaceable by the full set.
    WRedundant,
    /// Replaceable by the empty set.
    EmptyRedundant,
    NotRedundant,
}

impl RedundancyVerdict {
    fn constant(self) -> Option<f64> {
        match self {
            RedundancyVerdict::WRedundant => Some(1.0),
            RedundancyVerdict::EmptyRedundant => Some(0.0),
            RedundancyVerdict::NotRedundant => None,
        }
    }
}

/// Whether the subtree at `node_id` can be replaced by a constant 1 (tested
/// first) or 0 with root-output MSE at most the threshold.
pub fn subtree_redundancy(
    tree: &CsgTree,
    node_id: NodeId,
    cfg: &PruneConfig,
) -> Result<RedundancyVerdict> {
    cfg.validate()?;
    if node_id >= tree.len() {
        return Err(Error::Argument(format!("no node with id {node_id}")));
    }
    if node_id == tree.root() {
        return Err(Error::Argument("the root is not a proper subtree".into()));
    }
    let base = tree.eval(&cfg.eval_points)?;
    verdict(tree, node_id, &base, cfg)
}

fn verdict(
    tree: &CsgTree,
    id: NodeId,
    base: &[f64],
    cfg: &PruneConfig,
) -> Result<RedundancyVerdict> {
    for (value, v) in [
        (1.0, RedundancyVerdict::WRedundant),
        (0.0, RedundancyVerdict::EmptyRedundant),
    ] {
        let replaced = tree.eval_with_override(&cfg.eval_points, Some((id, value)))?;
        if loss_mse(&replaced, base)? <= cfg.threshold {
            return Ok(v);
        }
    }
    Ok(RedundancyVerdict::NotRedundant)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Deletion {
    /// Id of the replaced subtree's root in the input tree.
    pub node: NodeId,
    pub verdict: RedundancyVerdict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CountSummary {
    pub primitives: usize,
    pub booleans: usize,
    pub total: usize,
}

impl From<NodeCount> for CountSummary {
    fn from(c: NodeCount) -> Self {
        CountSummary {
            primitives: c.primitives,
            booleans: c.booleans,
            total: c.total(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneReport {
    pub threshold: f64,
    pub deletions: Vec<Deletion>,
    pub before: CountSummary,
    pub after: CountSummary,
    pub passes: usize,
    /// Whether the last pass found nothing left to delete.
    pub fixed_point: bool,
    /// Root-output MSE between the input and pruned trees at the evaluation points.
    pub output_mse: f64,
    /// `2 · threshold · deletions`, the conservative accumulated tolerance.
    pub tolerance_bound: f64,
    pub target_mse_before: Option<f64>,
    pub target_mse_after: Option<f64>,
}

/// Post-order pruning repeated until nothing changes or `height + 1`
/// passes have run.
pub fn prune(tree: &CsgTree, cfg: &PruneConfig) -> Result<(CsgTree, PruneReport)> {
    cfg.validate()?;
    let original = tree.eval(&cfg.eval_points)?;
    let mut cur = tree.clone();
    let mut orig: Vec<NodeId> = (0..tree.len()).collect();
    let mut deletions = Vec::new();
    let max_passes = tree.height() + 1;
    let mut passes = 0;
    let mut fixed_point = false;

    while passes < max_passes {
        passes += 1;
        let mut changed = false;
        let mut tested: HashSet<NodeId> = HashSet::new();
        'scan: loop {
            let base = cur.eval(&cfg.eval_points)?;
            for id in 0..cur.root() {
                if matches!(cur.nodes()[id], Node::Constant(_)) || !tested.insert(orig[id]) {
                    continue;
                }
                let v = verdict(&cur, id, &base, cfg)?;
                if let Some(value) = v.constant() {
                    deletions.push(Deletion {
                        node: orig[id],
                        verdict: v,
                    });
                    (cur, orig) = replace_with_constant(&cur, &orig, id, value)?;
                    changed = true;
                    continue 'scan;
                }
            }
            break;
        }
        if !changed {
            fixed_point = true;
            break;
        }
    }

    let pruned_out = cur.eval(&cfg.eval_points)?;
    let (before, after) = match &cfg.targets {
        Some(t) => (
            Some(loss_mse(&original, t)?),
            Some(loss_mse(&pruned_out, t)?),
        ),
        None => (None, None),
    };
    let report = PruneReport {
        threshold: cfg.threshold,
        before: tree.node_count().into(),
        after: cur.node_count().into(),
        passes,
        fixed_point,
        output_mse: loss_mse(&pruned_out, &original)?,
        tolerance_bound: 2.0 * cfg.threshold * deletions.len() as f64,
        deletions,
        target_mse_before: before,
        target_mse_after: after,
    };
    Ok((cur, report))
}

enum Edit {
    Constant(f64),
    Bypass(NodeId),
}

/// Replaces the subtree at `id` by a constant, then simplifies ancestors:
/// a parent that now passes its other child through unchanged is replaced
/// by that child, and a parent whose output no longer depends on its other
/// child becomes a constant itself.
fn replace_with_constant(
    tree: &CsgTree,
    orig: &[NodeId],
    id: NodeId,
    value: f64,
) -> Result<(CsgTree, Vec<NodeId>)> {
    let parents = tree.parents();
    let ops = tree.resolved_ops()?;
    let mut edits = HashMap::new();
    edits.insert(id, Edit::Constant(value));
    let (mut child, mut child_value) = (id, value);
    while let Some(p) = parents[child] {
        let Node::Boolean { left, right, .. } = tree.nodes()[p] else {
            unreachable!("parents are boolean nodes")
        };
        let op = ops[p].expect("boolean node has a resolved op");
        let (sibling, child_left) = if left == child {
            (right, true)
        } else {
            (left, false)
        };
        let f = |s: f64| {
            if child_left {
                op.apply(child_value, s)
            } else {
                op.apply(s, child_value)
            }
        };
        if PROBES.iter().all(|&s| (f(s) - s).abs() <= COLLAPSE_TOL) {
            edits.insert(p, Edit::Bypass(sibling));
            break;
        }
        let folded = match tree.nodes()[sibling] {
            Node::Constant(sv) => Some(f(sv)),
            _ => {
                let f0 = f(0.0);
                PROBES
                    .iter()
                    .all(|&s| (f(s) - f0).abs() <= COLLAPSE_TOL)
                    .then_some(f0)
            }
        };
        match folded {
            Some(v) => {
                let v = v.clamp(0.0, 1.0);
                edits.insert(p, Edit::Constant(v));
                child = p;
                child_value = v;
            }
            None => break,
        }
    }

    fn emit(
        tree: &CsgTree,
        orig: &[NodeId],
        edits: &HashMap<NodeId, Edit>,
        id: NodeId,
        nodes: &mut Vec<Node>,
        ids: &mut Vec<NodeId>,
    ) -> NodeId {
        let node = match edits.get(&id) {
            Some(Edit::Bypass(s)) => return emit(tree, orig, edits, *s, nodes, ids),
            Some(Edit::Constant(v)) => Node::Constant(*v),
            None => match &tree.nodes()[id] {
                Node::Boolean { op, left, right } => {
                    let l = emit(tree, orig, edits, *left, nodes, ids);
                    let r = emit(tree, orig, edits, *right, nodes, ids);
                    Node::Boolean {
                        op: *op,
                        left: l,
                        right: r,
                    }
                }
                other => other.clone(),
            },
        };
        nodes.push(node);
        ids.push(orig[id]);
        nodes.len() - 1
    }

    let mut nodes = Vec::new();
    let mut ids = Vec::new();
    emit(tree, orig, &edits, tree.root(), &mut nodes, &mut ids);
    Ok((CsgTree::from_nodes(tree.dim(), tree.control(), nodes)?, ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fuzzy::OpKind;
    use crate::primitives::{Primitive, SpherePrimitive};
    use crate::target::BoundingBox;
    use crate::tree::{one_hot_controls, BooleanOp, ControlConfig, CsgExpr, DEFAULT_OMEGA};

    fn circle(x: f64, y: f64, r: f64) -> CsgExpr {
        CsgExpr::Leaf(Primitive::Sphere(
            SpherePrimitive::new(Point::xy(x, y), r, 30.0).unwrap(),
        ))
    }

    fn crisp(x: f64, y: f64, r: f64) -> CsgExpr {
        CsgExpr::Crisp(Primitive::Sphere(
            SpherePrimitive::new(Point::xy(x, y), r, 30.0).unwrap(),
        ))
    }

    fn build(e: CsgExpr) -> CsgTree {
        CsgTree::from_expr(2, ControlConfig::default(), &e).unwrap()
    }

    fn cfg(n: usize) -> PruneConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        PruneConfig::new(1e-3, BoundingBox::unit(2).sample_n(n, &mut rng)).unwrap()
    }

    #[test]
    fn intersection_with_full_child() {
        // right child covers the whole box
        let t = build(CsgExpr::product(
            OpKind::Intersection,
            circle(0.0, 0.0, 0.4),
            crisp(0.0, 0.0, 3.0),
        ));
        assert_eq!(
            subtree_redundancy(&t, 1, &cfg(2000)).unwrap(),
            RedundancyVerdict::WRedundant
        );
        assert_eq!(
            subtree_redundancy(&t, 0, &cfg(2000)).unwrap(),
            RedundancyVerdict::NotRedundant
        );
        let (p, report) = prune(&t, &cfg(2000)).unwrap();
        assert_eq!(p.len(), 1);
        assert!(matches!(p.nodes()[0], Node::Leaf { .. }));
        assert!(report.after.total < report.before.total);
        assert_eq!(
            report.deletions,
            vec![Deletion {
                node: 1,
                verdict: RedundancyVerdict::WRedundant
            }]
        );
        assert_eq!(report.output_mse, 0.0);
    }

    #[test]
    fn union_with_empty_child() {
        let t = build(CsgExpr::product(
            OpKind::Union,
            circle(0.0, 0.0, 0.4),
            crisp(5.0, 5.0, 0.1),
        ));
        assert_eq!(
            subtree_redundancy(&t, 1, &cfg(2000)).unwrap(),
            RedundancyVerdict::EmptyRedundant
        );
    }

    #[test]
    fn half_occupancy_child_is_not_redundant() {
        let left = crisp(0.0, 0.0, 0.5);
        let expr = CsgExpr::product(OpKind::Union, left.clone(), CsgExpr::Constant(0.5));
        let t = build(expr);
        let c = cfg(5000);
        // brute force: replacing 0.5 by 1 or 0 changes x + 0.5 - 0.5x by 0.5(1-x) or 0.5(1-x)
        let x = build(left).eval(&c.eval_points).unwrap();
        let mse: f64 = x.iter().map(|x| (0.5 * (1.0 - x)).powi(2)).sum::<f64>() / x.len() as f64;
        assert!(mse > 1e-3);
        assert_eq!(
            subtree_redundancy(&t, 1, &c).unwrap(),
            RedundancyVerdict::NotRedundant
        );
    }

    #[test]
    fn invalid_requests() {
        let t = build(CsgExpr::product(
            OpKind::Union,
            circle(0.0, 0.0, 0.4),
            circle(0.1, 0.0, 0.4),
        ));
        assert!(matches!(
            subtree_redundancy(&t, 2, &cfg(10)),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            subtree_redundancy(&t, 9, &cfg(10)),
            Err(Error::Argument(_))
        ));
        assert!(PruneConfig::new(0.0, vec![Point::xy(0.0, 0.0)]).is_err());
        assert!(PruneConfig::new(1e-3, vec![]).is_err());
    }

    #[test]
    fn no_redundancy_is_a_fixed_point() {
        let t = build(CsgExpr::product(
            OpKind::Union,
            circle(-0.4, 0.0, 0.3),
            circle(0.4, 0.0, 0.3),
        ));
        let (p, report) = prune(&t, &cfg(4000)).unwrap();
        assert_eq!(p, t);
        assert!(report.deletions.is_empty());
        assert!(report.fixed_point);
    }

    #[test]
    fn nested_redundancy_reaches_fixed_point() {
        // ((A ∩ full) ∪ empty) ∖ (B ∩ empty-far) over three levels
        let inner = CsgExpr::product(
            OpKind::Intersection,
            circle(0.0, 0.0, 0.5),
            crisp(0.0, 0.0, 4.0),
        );
        let mid = CsgExpr::product(OpKind::Union, inner, crisp(9.0, 9.0, 0.2));
        let cut = CsgExpr::product(
            OpKind::Intersection,
            circle(0.3, 0.3, 0.2),
            crisp(-9.0, 9.0, 0.2),
        );
        let t = build(CsgExpr::product(OpKind::Difference, mid, cut));
        let c = cfg(4000);
        let (p, report) = prune(&t, &c).unwrap();
        assert_eq!(p.len(), 1, "{:?}", p.nodes());
        assert!(report.fixed_point);
        let (again, r2) = prune(&p, &c).unwrap();
        assert_eq!(again, p);
        assert!(r2.deletions.is_empty());
        // result matches the surviving circle
        let out = p.eval(&c.eval_points).unwrap();
        let want = build(circle(0.0, 0.0, 0.5)).eval(&c.eval_points).unwrap();
        assert_eq!(out, want);
    }

    #[test]
    fn soft_weights_keep_the_node() {
        // weights half union, half intersection: B(x, 1) = 0.5 + 0.5x is not x
        let c_raw = {
            let mut c = one_hot_controls(OpKind::Union, DEFAULT_OMEGA);
            c[OpKind::Intersection.index()] = c[OpKind::Union.index()];
            c
        };
        let t = build(CsgExpr::op(
            BooleanOp::Unified { c_raw },
            circle(0.0, 0.0, 0.5),
            crisp(0.0, 0.0, 4.0),
        ));
        let (p, report) = prune(&t, &cfg(3000)).unwrap();
        assert_eq!(report.deletions.len(), 1);
        assert_eq!(p.len(), 3);
        assert!(matches!(p.nodes()[1], Node::Constant(v) if v == 1.0));
        assert!(p.eval_stack(&Point::xy(0.1, 0.2)).is_ok());
    }

    #[test]
    fn constant_parent_cascades() {
        // (far ∩ A) ∪ B: far is empty, so the intersection is constant 0 and
        // the union collapses onto B
        let t = build(CsgExpr::product(
            OpKind::Union,
            CsgExpr::product(
                OpKind::Intersection,
                crisp(9.0, 9.0, 0.1),
                circle(0.0, 0.0, 0.5),
            ),
            circle(0.2, 0.0, 0.3),
        ));
        let (p, _) = prune(&t, &cfg(3000)).unwrap();
        assert_eq!(p.len(), 1);
        let Node::Leaf {
            primitive: Primitive::Sphere(s),
            ..
        } = &p.nodes()[0]
        else {
            panic!()
        };
        assert_eq!(s.center, Point::xy(0.2, 0.0));
    }
}
