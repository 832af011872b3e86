//! CSG trees over fuzzy boolean nodes.
//!
//! Nodes live in a flat arena stored in post-order: children always precede
//! their parent and the root is the last node. A node's id is its arena index.
//! The post-order layout is what [`CsgTree::eval_stack`] walks; the batched
//! [`CsgTree::eval`] recurses from the root instead, so the two paths check
//! each other.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fuzzy::{self, BarycentricWeights, OpKind};
use crate::primitives::{check_dim, init_primitive, Point, Primitive, PrimitiveKind};

pub type NodeId = usize;

/// Deepest full tree `build_full_tree` will allocate (2^20 leaves).
pub const MAX_FULL_DEPTH: usize = 20;

pub const DEFAULT_OMEGA: f64 = 10.0;
pub const DEFAULT_TEMPERATURE: f64 = 1e3;

/// Points per work item for parallel evaluation. Fixed so results do not
/// depend on the thread count.
pub(crate) const EVAL_CHUNK: usize = 1024;

/// Frequency and temperature shared by every unified node of a tree.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlConfig {
    pub omega: f64,
    pub temperature: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            omega: DEFAULT_OMEGA,
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

impl ControlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega.is_finite() && self.omega > 0.0) {
            return Err(Error::Parameter(format!(
                "omega must be > 0, got {}",
                self.omega
            )));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Parameter(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Raw controls of one unified boolean node together with the shared map settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BooleanControl {
    pub c_raw: [f64; 4],
    pub omega: f64,
    pub temperature: f64,
}

/// `softmax(sin(ω c̃) · t)`, computed with the max shifted out.
pub(crate) fn softmax_sin(c_raw: &[f64; 4], omega: f64, temperature: f64) -> [f64; 4] {
    let z = c_raw.map(|c| (omega * c).sin() * temperature);
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = z.map(|v| (v - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

pub fn control_to_barycentric(ctrl: &BooleanControl) -> Result<BarycentricWeights> {
    ControlConfig {
        omega: ctrl.omega,
        temperature: ctrl.temperature,
    }
    .validate()?;
    if ctrl.c_raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter(format!(
            "boolean controls must be finite, got {:?}",
            ctrl.c_raw
        )));
    }
    BarycentricWeights::new(softmax_sin(&ctrl.c_raw, ctrl.omega, ctrl.temperature))
}

/// How a boolean node combines its children.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BooleanOp {
    /// Trainable unified operator with raw controls `c̃`.
    Unified { c_raw: [f64; 4] },
    /// Fixed product-logic operation.
    Product(OpKind),
    /// Fixed Gödel (min/max) operation.
    Godel(OpKind),
    /// Bilinear blend at `u = (1 + sin(ω ũ)) / 2`, `v` likewise.
    Bilinear { uv_raw: [f64; 2] },
}

impl BooleanOp {
    pub fn param_count(&self) -> usize {
        match self {
            BooleanOp::Unified { .. } => 4,
            BooleanOp::Bilinear { .. } => 2,
            BooleanOp::Product(_) | BooleanOp::Godel(_) => 0,
        }
    }

    pub(crate) fn resolve(&self, ctrl: &ControlConfig) -> ResolvedOp {
        match *self {
            BooleanOp::Unified { c_raw } => {
                ResolvedOp::Weighted(softmax_sin(&c_raw, ctrl.omega, ctrl.temperature))
            }
            BooleanOp::Product(op) => {
                ResolvedOp::Weighted(*BarycentricWeights::one_hot(op).as_array())
            }
            BooleanOp::Godel(op) => ResolvedOp::Godel(op),
            BooleanOp::Bilinear { uv_raw } => {
                let [u, v] = uv_raw.map(|r| bilinear_coordinate(r, ctrl.omega));
                ResolvedOp::Bilinear { u, v }
            }
        }
    }
}

#[inline]
pub(crate) fn bilinear_coordinate(raw: f64, omega: f64) -> f64 {
    0.5 * (1.0 + (omega * raw).sin())
}

/// A boolean operation with its controls already mapped to weights.
#[derive(Debug, Clone, Copy)]
pub(crate) enum ResolvedOp {
    Weighted([f64; 4]),
    Godel(OpKind),
    Bilinear { u: f64, v: f64 },
}

impl ResolvedOp {
    #[inline]
    pub(crate) fn apply(&self, x: f64, y: f64) -> f64 {
        match self {
            ResolvedOp::Weighted(c) => fuzzy::unified(c, x, y),
            ResolvedOp::Godel(op) => op.godel(x, y),
            ResolvedOp::Bilinear { u, v } => fuzzy::bilinear(*u, *v, x, y),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Boolean {
        op: BooleanOp,
        left: NodeId,
        right: NodeId,
    },
    /// A primitive. `crisp` leaves report occupancy 1 where the soft
    /// occupancy is at least 0.5 and 0 elsewhere; they carry no gradient.
    Leaf { primitive: Primitive, crisp: bool },
    /// Constant occupancy (full or empty set) left behind by pruning.
    Constant(f64),
}

/// Recursive description used to assemble trees by hand.
#[derive(Debug, Clone, PartialEq)]
pub enum CsgExpr {
    Leaf(Primitive),
    Crisp(Primitive),
    Constant(f64),
    Op(BooleanOp, Box<CsgExpr>, Box<CsgExpr>),
}

impl CsgExpr {
    pub fn op(op: BooleanOp, left: CsgExpr, right: CsgExpr) -> CsgExpr {
        CsgExpr::Op(op, Box::new(left), Box::new(right))
    }

    pub fn product(op: OpKind, left: CsgExpr, right: CsgExpr) -> CsgExpr {
        CsgExpr::op(BooleanOp::Product(op), left, right)
    }
}

/// Primitive and boolean node totals. Constants count as primitives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeCount {
    pub primitives: usize,
    pub booleans: usize,
}

impl NodeCount {
    pub fn total(&self) -> usize {
        self.primitives + self.booleans
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsgTree {
    dim: usize,
    control: ControlConfig,
    nodes: Vec<Node>,
}

impl CsgTree {
    /// Builds a tree from a post-order node list, validating structure.
    pub fn from_nodes(dim: usize, control: ControlConfig, nodes: Vec<Node>) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::Parameter(format!(
                "dimension must be 2 or 3, got {dim}"
            )));
        }
        control.validate()?;
        if nodes.is_empty() {
            return Err(Error::Argument("a tree needs at least one node".into()));
        }
        let mut parent_seen = vec![false; nodes.len()];
        for (id, node) in nodes.iter().enumerate() {
            match node {
                Node::Boolean { left, right, .. } => {
                    for &child in [left, right] {
                        if child >= id {
                            return Err(Error::Argument(format!(
                                "boolean node {id}: child {child} does not precede it in post-order"
                            )));
                        }
                        if std::mem::replace(&mut parent_seen[child], true) {
                            return Err(Error::Argument(format!(
                                "node {child} has more than one parent"
                            )));
                        }
                    }
                    if left == right {
                        return Err(Error::Argument(format!(
                            "boolean node {id} uses node {left} twice"
                        )));
                    }
                }
                Node::Leaf { primitive, .. } => {
                    if primitive.dim() != dim {
                        return Err(Error::Shape(format!(
                            "leaf {id} is {}D in a {dim}D tree",
                            primitive.dim()
                        )));
                    }
                }
                Node::Constant(v) => {
                    if !(0.0..=1.0).contains(v) {
                        return Err(Error::Parameter(format!(
                            "constant node {id} has occupancy {v} outside [0, 1]"
                        )));
                    }
                }
            }
        }
        let root = nodes.len() - 1;
        if let Some(orphan) = (0..root).find(|&i| !parent_seen[i]) {
            return Err(Error::Argument(format!(
                "node {orphan} is not reachable from the root"
            )));
        }
        let tree = CsgTree {
            dim,
            control,
            nodes,
        };
        // post-order of the arena must match a traversal from the root
        if tree.post_order_from_root() != (0..tree.nodes.len()).collect::<Vec<_>>() {
            return Err(Error::Argument("nodes are not stored in post-order".into()));
        }
        Ok(tree)
    }

    pub fn from_expr(dim: usize, control: ControlConfig, expr: &CsgExpr) -> Result<Self> {
        fn push(expr: &CsgExpr, nodes: &mut Vec<Node>) -> NodeId {
            let node = match expr {
                CsgExpr::Leaf(p) => Node::Leaf {
                    primitive: p.clone(),
                    crisp: false,
                },
                CsgExpr::Crisp(p) => Node::Leaf {
                    primitive: p.clone(),
                    crisp: true,
                },
                CsgExpr::Constant(v) => Node::Constant(*v),
                CsgExpr::Op(op, l, r) => {
                    let left = push(l, nodes);
                    let right = push(r, nodes);
                    Node::Boolean {
                        op: *op,
                        left,
                        right,
                    }
                }
            };
            nodes.push(node);
            nodes.len() - 1
        }
        let mut nodes = Vec::new();
        push(expr, &mut nodes);
        CsgTree::from_nodes(dim, control, nodes)
    }

    pub fn single_leaf(primitive: Primitive) -> Self {
        CsgTree {
            dim: primitive.dim(),
            control: ControlConfig::default(),
            nodes: vec![Node::Leaf {
                primitive,
                crisp: false,
            }],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn control(&self) -> ControlConfig {
        self.control
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn root(&self) -> NodeId {
        self.nodes.len() - 1
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Control record of a unified node.
    pub fn boolean_control(&self, id: NodeId) -> Option<BooleanControl> {
        match self.nodes.get(id)? {
            Node::Boolean {
                op: BooleanOp::Unified { c_raw },
                ..
            } => Some(BooleanControl {
                c_raw: *c_raw,
                omega: self.control.omega,
                temperature: self.control.temperature,
            }),
            _ => None,
        }
    }

    /// Replaces the operator of a boolean node.
    pub fn set_op(&mut self, id: NodeId, new_op: BooleanOp) -> Result<()> {
        match self.nodes.get_mut(id) {
            Some(Node::Boolean { op, .. }) => {
                *op = new_op;
                Ok(())
            }
            _ => Err(Error::Argument(format!("node {id} is not a boolean node"))),
        }
    }

    /// Copy with every crisp leaf turned back into its soft occupancy.
    pub fn softened(&self) -> CsgTree {
        let mut out = self.clone();
        for node in &mut out.nodes {
            if let Node::Leaf { crisp, .. } = node {
                *crisp = false;
            }
        }
        out
    }

    pub fn node_count(&self) -> NodeCount {
        let booleans = self
            .nodes
            .iter()
            .filter(|n| matches!(n, Node::Boolean { .. }))
            .count();
        NodeCount {
            primitives: self.nodes.len() - booleans,
            booleans,
        }
    }

    /// Parent of every node; `None` for the root.
    pub fn parents(&self) -> Vec<Option<NodeId>> {
        let mut parents = vec![None; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            if let Node::Boolean { left, right, .. } = node {
                parents[*left] = Some(id);
                parents[*right] = Some(id);
            }
        }
        parents
    }

    /// Number of edges on the longest root-to-leaf path.
    pub fn height(&self) -> usize {
        let mut h = vec![0usize; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            if let Node::Boolean { left, right, .. } = node {
                h[id] = 1 + h[*left].max(h[*right]);
            }
        }
        h[self.root()]
    }

    /// Whether every boolean node sits at the same depth pattern as a full tree.
    pub fn is_full(&self) -> bool {
        let n = self.nodes.len();
        (n + 1).is_power_of_two() && self.height() == (n + 1).trailing_zeros() as usize - 1
    }

    fn post_order_from_root(&self) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![(self.root(), false)];
        while let Some((id, expanded)) = stack.pop() {
            match (&self.nodes[id], expanded) {
                (Node::Boolean { left, right, .. }, false) => {
                    stack.push((id, true));
                    stack.push((*right, false));
                    stack.push((*left, false));
                }
                _ => out.push(id),
            }
        }
        out
    }

    /// Ids of the subtree rooted at `id`, in post-order.
    pub fn subtree(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![(id, false)];
        while let Some((n, expanded)) = stack.pop() {
            match (&self.nodes[n], expanded) {
                (Node::Boolean { left, right, .. }, false) => {
                    stack.push((n, true));
                    stack.push((*right, false));
                    stack.push((*left, false));
                }
                _ => out.push(n),
            }
        }
        out
    }

    pub(crate) fn resolved_ops(&self) -> Result<Vec<Option<ResolvedOp>>> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(id, node)| match node {
                Node::Boolean { op, .. } => {
                    let finite = match op {
                        BooleanOp::Unified { c_raw } => c_raw.iter().all(|v| v.is_finite()),
                        BooleanOp::Bilinear { uv_raw } => uv_raw.iter().all(|v| v.is_finite()),
                        _ => true,
                    };
                    if !finite {
                        return Err(Error::Numerical {
                            node: id,
                            what: "non-finite boolean controls".into(),
                        });
                    }
                    Ok(Some(op.resolve(&self.control)))
                }
                _ => Ok(None),
            })
            .collect()
    }

    fn check_points(&self, points: &[Point]) -> Result<()> {
        points.iter().try_for_each(|p| check_dim(self.dim, p))
    }

    #[inline]
    pub(crate) fn leaf_value(primitive: &Primitive, crisp: bool, p: &Point) -> f64 {
        let o = primitive.occupancy_unchecked(p);
        if crisp {
            if o >= 0.5 {
                1.0
            } else {
                0.0
            }
        } else {
            o
        }
    }

    /// Occupancy at every point, by batched recursion from the root.
    pub fn eval(&self, points: &[Point]) -> Result<Vec<f64>> {
        self.eval_with_override(points, None)
    }

    /// Like [`CsgTree::eval`], with the output of one subtree replaced by a constant.
    pub fn eval_with_override(
        &self,
        points: &[Point],
        replace: Option<(NodeId, f64)>,
    ) -> Result<Vec<f64>> {
        self.check_points(points)?;
        if let Some((id, _)) = replace {
            if id >= self.nodes.len() {
                return Err(Error::Argument(format!("no node with id {id}")));
            }
        }
        let ops = self.resolved_ops()?;
        let chunks: Vec<Vec<f64>> = points
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| self.eval_rec(self.root(), chunk, &ops, replace))
            .collect();
        Ok(chunks.concat())
    }

    fn eval_rec(
        &self,
        id: NodeId,
        points: &[Point],
        ops: &[Option<ResolvedOp>],
        replace: Option<(NodeId, f64)>,
    ) -> Vec<f64> {
        if let Some((rid, value)) = replace {
            if rid == id {
                return vec![value; points.len()];
            }
        }
        match &self.nodes[id] {
            Node::Leaf { primitive, crisp } => points
                .iter()
                .map(|p| Self::leaf_value(primitive, *crisp, p))
                .collect(),
            Node::Constant(v) => vec![*v; points.len()],
            Node::Boolean { left, right, .. } => {
                let op = ops[id].expect("boolean node has a resolved op");
                let mut a = self.eval_rec(*left, points, ops, replace);
                let b = self.eval_rec(*right, points, ops, replace);
                for (x, y) in a.iter_mut().zip(b) {
                    *x = op.apply(*x, y);
                }
                a
            }
        }
    }

    /// Single-point evaluation by one post-order sweep with an explicit stack.
    pub fn eval_stack(&self, p: &Point) -> Result<f64> {
        self.eval_stack_counted(p).map(|(v, _)| v)
    }

    /// [`CsgTree::eval_stack`] plus the number of nodes read.
    pub fn eval_stack_counted(&self, p: &Point) -> Result<(f64, usize)> {
        check_dim(self.dim, p)?;
        let ops = self.resolved_ops()?;
        Ok(self.stack_sweep(p, &ops, None))
    }

    pub(crate) fn stack_sweep(
        &self,
        p: &Point,
        ops: &[Option<ResolvedOp>],
        replace: Option<(NodeId, f64)>,
    ) -> (f64, usize) {
        let mut stack: Vec<f64> = Vec::with_capacity(self.height() + 2);
        let mut visits = 0;
        // nodes of a replaced subtree are skipped; the replacement is pushed at its root
        let skip = replace.map(|(id, _)| {
            let sub = self.subtree(id);
            (sub[0], id)
        });
        for (id, node) in self.nodes.iter().enumerate() {
            if let Some((first, last)) = skip {
                if (first..last).contains(&id) {
                    continue;
                }
                if id == last {
                    visits += 1;
                    stack.push(replace.unwrap().1);
                    continue;
                }
            }
            visits += 1;
            let value = match node {
                Node::Leaf { primitive, crisp } => Self::leaf_value(primitive, *crisp, p),
                Node::Constant(v) => *v,
                Node::Boolean { .. } => {
                    let y = stack.pop().expect("stack holds right operand");
                    let x = stack.pop().expect("stack holds left operand");
                    ops[id].expect("boolean node has a resolved op").apply(x, y)
                }
            };
            stack.push(value);
        }
        debug_assert_eq!(stack.len(), 1);
        (stack[0], visits)
    }

    /// Number of trainable scalars stored at node `id`.
    pub fn node_param_count(&self, id: NodeId) -> usize {
        match &self.nodes[id] {
            Node::Boolean { op, .. } => op.param_count(),
            Node::Leaf { primitive, .. } => primitive.param_count(),
            Node::Constant(_) => 0,
        }
    }

    pub(crate) fn write_node_params(&self, id: NodeId, out: &mut [f64]) {
        match &self.nodes[id] {
            Node::Boolean { op, .. } => match op {
                BooleanOp::Unified { c_raw } => out.copy_from_slice(c_raw),
                BooleanOp::Bilinear { uv_raw } => out.copy_from_slice(uv_raw),
                _ => {}
            },
            Node::Leaf { primitive, .. } => primitive.write_params(out),
            Node::Constant(_) => {}
        }
    }

    pub(crate) fn read_node_params(&mut self, id: NodeId, src: &[f64]) {
        match &mut self.nodes[id] {
            Node::Boolean { op, .. } => match op {
                BooleanOp::Unified { c_raw } => c_raw.copy_from_slice(src),
                BooleanOp::Bilinear { uv_raw } => uv_raw.copy_from_slice(src),
                _ => {}
            },
            Node::Leaf { primitive, .. } => primitive.read_params(src),
            Node::Constant(_) => {}
        }
    }
}

/// Full binary tree of the given depth with `2^depth` random primitive leaves
/// and unified boolean nodes. All raw parameters are uniform on `[-0.5, 0.5]`.
pub fn build_full_tree<R: Rng + ?Sized>(
    depth: usize,
    kind: PrimitiveKind,
    dim: usize,
    rng: &mut R,
) -> Result<CsgTree> {
    if depth == 0 {
        return Err(Error::Argument("tree depth must be at least 1".into()));
    }
    if depth > MAX_FULL_DEPTH {
        return Err(Error::Resource(format!(
            "a full tree of depth {depth} has 2^{depth} leaves; the limit is depth {MAX_FULL_DEPTH}"
        )));
    }
    fn grow<R: Rng + ?Sized>(
        depth: usize,
        kind: PrimitiveKind,
        dim: usize,
        rng: &mut R,
        nodes: &mut Vec<Node>,
    ) -> Result<NodeId> {
        let node = if depth == 0 {
            Node::Leaf {
                primitive: init_primitive(rng, kind, dim)?,
                crisp: false,
            }
        } else {
            let left = grow(depth - 1, kind, dim, rng, nodes)?;
            let right = grow(depth - 1, kind, dim, rng, nodes)?;
            let c_raw = [(); 4].map(|_| rng.gen_range(-0.5..=0.5));
            Node::Boolean {
                op: BooleanOp::Unified { c_raw },
                left,
                right,
            }
        };
        nodes.push(node);
        Ok(nodes.len() - 1)
    }
    let mut nodes = Vec::with_capacity((1 << (depth + 1)) - 1);
    grow(depth, kind, dim, rng, &mut nodes)?;
    CsgTree::from_nodes(dim, ControlConfig::default(), nodes)
}

/// Raw controls whose weights are exactly one-hot on `op` under the default
/// frequency (`sin = 1` on the chosen slot, `-1` elsewhere).
pub fn one_hot_controls(op: OpKind, omega: f64) -> [f64; 4] {
    let up = std::f64::consts::FRAC_PI_2 / omega;
    let mut c = [-up; 4];
    c[op.index()] = up;
    c
}
