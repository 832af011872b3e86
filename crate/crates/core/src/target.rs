//! Ground-truth occupancy sources for fitting and evaluation.

use std::path::Path;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::document;
use crate::error::{Error, Result};
use crate::fuzzy::OpKind;
use crate::io::PointSampleDataset;
use crate::primitives::{
    check_dim, PlanePrimitive, Point, Primitive, QuadricPrimitive, SpherePrimitive,
};
use crate::tree::{ControlConfig, CsgExpr, CsgTree, Node, NodeId};

/// Axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl BoundingBox {
    pub fn new(min: Vec<f64>, max: Vec<f64>) -> Result<Self> {
        if min.len() != max.len() || !(2..=3).contains(&min.len()) {
            return Err(Error::Shape(format!(
                "bounding box corners have {} and {} coordinates",
                min.len(),
                max.len()
            )));
        }
        if min
            .iter()
            .zip(&max)
            .any(|(a, b)| !(a.is_finite() && b.is_finite() && a < b))
        {
            return Err(Error::Parameter(format!(
                "degenerate bounding box {min:?} .. {max:?}"
            )));
        }
        Ok(BoundingBox { min, max })
    }

    /// `[-1, 1]^dim`.
    pub fn unit(dim: usize) -> Self {
        BoundingBox {
            min: vec![-1.0; dim],
            max: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.dim() == self.dim()
            && p.coords()
                .iter()
                .zip(self.min.iter().zip(&self.max))
                .all(|(v, (lo, hi))| (lo..=hi).contains(&v))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        let c: Vec<f64> = self
            .min
            .iter()
            .zip(&self.max)
            .map(|(lo, hi)| rng.gen_range(*lo..*hi))
            .collect();
        Point::new(&c).expect("box dimension is 2 or 3")
    }

    pub fn sample_n<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Point> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}

/// Occupancy ground truth queried by the fitter.
pub trait TargetOracle: Sync {
    fn dim(&self) -> usize;

    fn bbox(&self) -> &BoundingBox;

    /// Target occupancy in `[0, 1]` at every point.
    fn occupancy(&self, points: &[Point]) -> Result<Vec<f64>>;

    /// Occupancy used to decide whether a point is near the surface.
    /// Differs from [`TargetOracle::occupancy`] for crisp targets, whose
    /// binary values never fall inside a band.
    fn band_occupancy(&self, points: &[Point]) -> Result<Vec<f64>> {
        self.occupancy(points)
    }

    fn has_surface_sampler(&self) -> bool {
        false
    }

    /// Points lying exactly on the target boundary.
    fn sample_surface(&self, count: usize, rng: &mut dyn RngCore) -> Result<Vec<Point>> {
        let _ = (count, rng);
        Err(Error::Sampling("this target has no surface sampler".into()))
    }
}

/// A known CSG tree used as ground truth.
#[derive(Debug, Clone)]
pub struct TreeTarget {
    tree: CsgTree,
    soft: CsgTree,
    bbox: BoundingBox,
    surface_leaves: Option<Vec<NodeId>>,
}

impl TreeTarget {
    pub fn new(tree: CsgTree) -> Self {
        let bbox = BoundingBox::unit(tree.dim());
        Self::with_bbox(tree, bbox).expect("unit box matches tree dimension")
    }

    pub fn with_bbox(tree: CsgTree, bbox: BoundingBox) -> Result<Self> {
        if bbox.dim() != tree.dim() {
            return Err(Error::Shape(format!(
                "{}D bounding box for a {}D tree",
                bbox.dim(),
                tree.dim()
            )));
        }
        let mut leaves = Vec::new();
        let mut analytic = true;
        for (id, node) in tree.nodes().iter().enumerate() {
            if let Node::Leaf { primitive, .. } = node {
                match primitive {
                    Primitive::Sphere(_) | Primitive::Plane(_) => leaves.push(id),
                    Primitive::Quadric(_) => analytic = false,
                }
            }
        }
        let surface_leaves = (analytic && !leaves.is_empty()).then_some(leaves);
        Ok(TreeTarget {
            soft: tree.softened(),
            tree,
            bbox,
            surface_leaves,
        })
    }

    pub fn tree(&self) -> &CsgTree {
        &self.tree
    }

    fn leaf_surface_point(&self, id: NodeId, rng: &mut dyn RngCore) -> Option<Point> {
        let Node::Leaf { primitive, .. } = &self.tree.nodes()[id] else {
            return None;
        };
        let dim = self.tree.dim();
        let p = match primitive {
            Primitive::Sphere(s) => {
                let r = s.radius();
                let c = s.center.coords();
                let dir: Vec<f64> = if dim == 2 {
                    let a = rng.gen_range(0.0..std::f64::consts::TAU);
                    vec![a.cos(), a.sin()]
                } else {
                    let z: f64 = rng.gen_range(-1.0..=1.0);
                    let a = rng.gen_range(0.0..std::f64::consts::TAU);
                    let rho = (1.0 - z * z).sqrt();
                    vec![rho * a.cos(), rho * a.sin(), z]
                };
                let coords: Vec<f64> = c.iter().zip(&dir).map(|(c, d)| c + r * d).collect();
                Point::new(&coords).ok()?
            }
            Primitive::Plane(pl) => {
                let n = &pl.normal[..dim];
                let norm = n.iter().map(|v| v * v).sum::<f64>().sqrt();
                let q = self.bbox.sample(rng);
                let dot: f64 = q.coords().iter().zip(n).map(|(a, b)| a * b).sum::<f64>() / norm;
                let shift = pl.offset - dot;
                let coords: Vec<f64> = q
                    .coords()
                    .iter()
                    .zip(n)
                    .map(|(a, b)| a + shift * b / norm)
                    .collect();
                Point::new(&coords).ok()?
            }
            Primitive::Quadric(_) => return None,
        };
        self.bbox.contains(&p).then_some(p)
    }
}

impl TargetOracle for TreeTarget {
    fn dim(&self) -> usize {
        self.tree.dim()
    }

    fn bbox(&self) -> &BoundingBox {
        &self.bbox
    }

    fn occupancy(&self, points: &[Point]) -> Result<Vec<f64>> {
        self.tree.eval(points)
    }

    fn band_occupancy(&self, points: &[Point]) -> Result<Vec<f64>> {
        self.soft.eval(points)
    }

    fn has_surface_sampler(&self) -> bool {
        self.surface_leaves.is_some()
    }

    /// Picks a sphere or plane leaf at random, draws a point on its zero set,
    /// and keeps it when toggling that leaf between full and empty flips the
    /// root, so the point lies on the boundary of the whole shape.
    fn sample_surface(&self, count: usize, rng: &mut dyn RngCore) -> Result<Vec<Point>> {
        let Some(leaves) = &self.surface_leaves else {
            return Err(Error::Sampling(
                "target has no analytic surface sampler".into(),
            ));
        };
        let budget = count.saturating_mul(100).max(100);
        let mut out = Vec::with_capacity(count);
        let mut tries = 0;
        while out.len() < count {
            if tries >= budget {
                return Err(Error::Sampling(format!(
                    "found {} of {count} surface points in {budget} attempts",
                    out.len()
                )));
            }
            tries += 1;
            let leaf = leaves[rng.gen_range(0..leaves.len())];
            let Some(p) = self.leaf_surface_point(leaf, rng) else {
                continue;
            };
            let one = std::slice::from_ref(&p);
            let full = self.tree.eval_with_override(one, Some((leaf, 1.0)))?[0];
            let empty = self.tree.eval_with_override(one, Some((leaf, 0.0)))?[0];
            if (full - empty).abs() > 0.5 {
                out.push(p);
            }
        }
        Ok(out)
    }
}

/// Number of neighbours averaged for the sampling band of a dataset.
pub const DATASET_BAND_NEIGHBOURS: usize = 8;

/// Occupancy samples used as ground truth: nearest-sample lookup for
/// evaluation, a neighbourhood mean for the sampling band.
pub struct DatasetTarget {
    data: PointSampleDataset,
    bbox: BoundingBox,
    index: SampleIndex,
}

enum SampleIndex {
    Planar(ImmutableKdTree<f64, 2>),
    Spatial(ImmutableKdTree<f64, 3>),
}

impl SampleIndex {
    fn build(points: &[Point]) -> Self {
        if points[0].dim() == 2 {
            let c: Vec<[f64; 2]> = points
                .iter()
                .map(|p| [p.coords()[0], p.coords()[1]])
                .collect();
            SampleIndex::Planar(ImmutableKdTree::new_from_slice(&c))
        } else {
            let c: Vec<[f64; 3]> = points.iter().map(|p| *p.padded()).collect();
            SampleIndex::Spatial(ImmutableKdTree::new_from_slice(&c))
        }
    }

    fn nearest(&self, p: &Point, k: usize) -> Vec<usize> {
        let items: Vec<u64> = match self {
            SampleIndex::Planar(t) => {
                let q = [p.coords()[0], p.coords()[1]];
                t.nearest_n::<SquaredEuclidean>(&q, k)
                    .into_iter()
                    .map(|n| n.item)
                    .collect()
            }
            SampleIndex::Spatial(t) => t
                .nearest_n::<SquaredEuclidean>(p.padded(), k)
                .into_iter()
                .map(|n| n.item)
                .collect(),
        };
        items.into_iter().map(|i| i as usize).collect()
    }
}

impl DatasetTarget {
    pub fn new(data: PointSampleDataset) -> Result<Self> {
        let bbox = BoundingBox::unit(data.dim);
        Self::with_bbox(data, bbox)
    }

    pub fn with_bbox(data: PointSampleDataset, bbox: BoundingBox) -> Result<Self> {
        if data.points.is_empty() {
            return Err(Error::Argument("dataset has no samples".into()));
        }
        if bbox.dim() != data.dim {
            return Err(Error::Shape(format!(
                "{}D bounding box for a {}D dataset",
                bbox.dim(),
                data.dim
            )));
        }
        if data.points.len() != data.occupancy.len() {
            return Err(Error::Shape(format!(
                "{} points against {} occupancies",
                data.points.len(),
                data.occupancy.len()
            )));
        }
        let index = SampleIndex::build(&data.points);
        Ok(DatasetTarget { data, bbox, index })
    }

    pub fn dataset(&self) -> &PointSampleDataset {
        &self.data
    }
}

impl TargetOracle for DatasetTarget {
    fn dim(&self) -> usize {
        self.data.dim
    }

    fn bbox(&self) -> &BoundingBox {
        &self.bbox
    }

    fn occupancy(&self, points: &[Point]) -> Result<Vec<f64>> {
        points
            .iter()
            .try_for_each(|p| check_dim(self.data.dim, p))?;
        Ok(points
            .par_iter()
            .map(|p| self.data.occupancy[self.index.nearest(p, 1)[0]])
            .collect())
    }

    fn band_occupancy(&self, points: &[Point]) -> Result<Vec<f64>> {
        points
            .iter()
            .try_for_each(|p| check_dim(self.data.dim, p))?;
        let k = DATASET_BAND_NEIGHBOURS.min(self.data.points.len());
        Ok(points
            .par_iter()
            .map(|p| {
                let near = self.index.nearest(p, k);
                near.iter().map(|&i| self.data.occupancy[i]).sum::<f64>() / near.len() as f64
            })
            .collect())
    }
}

/// Names accepted by [`bundled_target`].
pub const BUNDLED_TARGETS: [&str; 4] = [
    "two-circles",
    "four-primitives",
    "soft-blob",
    "eight-quadrics",
];

/// Sharpness of the two soft circles in `two-circles`.
pub const TWO_CIRCLES_SHARPNESS: f64 = 20.0;

fn circle(x: f64, y: f64, r: f64, s: f64) -> Primitive {
    Primitive::Sphere(SpherePrimitive::new(Point::xy(x, y), r, s).expect("valid circle"))
}

fn half_plane(nx: f64, ny: f64, offset: f64, s: f64) -> Primitive {
    Primitive::Plane(PlanePrimitive::new(&[nx, ny], offset, s).expect("valid plane"))
}

/// Ellipse `((x-cx)/rx)² + ((y-cy)/ry)² < 1` rotated by `angle`, as a
/// quadric whose field is `1 - (that sum)`.
pub fn ellipse_quadric(cx: f64, cy: f64, rx: f64, ry: f64, angle: f64, s: f64) -> Primitive {
    let (sn, cs) = angle.sin_cos();
    let (a, b) = (1.0 / (rx * rx), 1.0 / (ry * ry));
    // u = cs (x-cx) + sn (y-cy), v = -sn (x-cx) + cs (y-cy); field = 1 - a u² - b v²
    let qxx = a * cs * cs + b * sn * sn;
    let qyy = a * sn * sn + b * cs * cs;
    let qxy = 2.0 * (a - b) * cs * sn;
    let mut q = [0.0; 10];
    q[0] = -qxx;
    q[1] = -qyy;
    q[3] = -qxy;
    q[6] = 2.0 * qxx * cx + qxy * cy;
    q[7] = 2.0 * qyy * cy + qxy * cx;
    q[9] = 1.0 - qxx * cx * cx - qyy * cy * cy - qxy * cx * cy;
    Primitive::Quadric(QuadricPrimitive::new(2, q, s).expect("valid ellipse"))
}

/// Built-in 2D targets on `[-1, 1]²`.
pub fn bundled_target(name: &str) -> Result<CsgTree> {
    use CsgExpr::{Crisp, Leaf};
    let p = |op, l, r| CsgExpr::product(op, l, r);
    let expr = match name {
        "two-circles" => p(
            OpKind::Union,
            Leaf(circle(-0.4, 0.0, 0.3, TWO_CIRCLES_SHARPNESS)),
            Leaf(circle(0.4, 0.1, 0.35, TWO_CIRCLES_SHARPNESS)),
        ),
        "four-primitives" => p(
            OpKind::Difference,
            p(
                OpKind::Union,
                p(
                    OpKind::Intersection,
                    Crisp(circle(-0.2, 0.0, 0.6, 40.0)),
                    Crisp(half_plane(1.0, 1.0, 0.2, 40.0)),
                ),
                Crisp(circle(0.45, 0.3, 0.35, 40.0)),
            ),
            Crisp(circle(-0.35, -0.1, 0.2, 40.0)),
        ),
        "soft-blob" => p(
            OpKind::Union,
            p(
                OpKind::Union,
                Leaf(circle(-0.3, -0.15, 0.4, 6.0)),
                Leaf(circle(0.25, 0.2, 0.35, 6.0)),
            ),
            Leaf(circle(0.1, -0.45, 0.25, 6.0)),
        ),
        "eight-quadrics" => {
            let e = |cx, cy, rx, ry, a| Crisp(ellipse_quadric(cx, cy, rx, ry, a, 10.0));
            p(
                OpKind::Union,
                p(
                    OpKind::Difference,
                    p(
                        OpKind::Union,
                        e(-0.45, 0.35, 0.4, 0.25, 0.3),
                        e(-0.2, 0.6, 0.25, 0.2, 0.0),
                    ),
                    p(
                        OpKind::Intersection,
                        e(-0.4, 0.3, 0.2, 0.3, 0.0),
                        e(-0.5, 0.2, 0.3, 0.2, 0.8),
                    ),
                ),
                p(
                    OpKind::Union,
                    p(
                        OpKind::Difference,
                        e(0.4, -0.3, 0.45, 0.35, -0.4),
                        e(0.5, -0.35, 0.15, 0.15, 0.0),
                    ),
                    p(
                        OpKind::Intersection,
                        e(0.3, 0.5, 0.45, 0.25, 0.6),
                        e(0.45, 0.4, 0.3, 0.4, 0.0),
                    ),
                ),
            )
        }
        other => {
            return Err(Error::Argument(format!(
                "unknown bundled target '{other}' (expected one of {})",
                BUNDLED_TARGETS.join(", ")
            )))
        }
    };
    CsgTree::from_expr(2, ControlConfig::default(), &expr)
}

/// Resolves a target specification: `bundled:<name>`, a dataset file whose
/// first line is `dim=..`, or a tree document.
pub fn load_target(spec: &str) -> Result<Box<dyn TargetOracle>> {
    if let Some(name) = spec.strip_prefix("bundled:") {
        return Ok(Box::new(TreeTarget::new(bundled_target(name)?)));
    }
    let path = Path::new(spec);
    let text = std::fs::read_to_string(path)?;
    if text.trim_start().starts_with("dim=") {
        let data = PointSampleDataset::parse(&text, &path.display().to_string())?;
        Ok(Box::new(DatasetTarget::new(data)?))
    } else {
        Ok(Box::new(TreeTarget::new(document::deserialize(&text)?)))
    }
}
