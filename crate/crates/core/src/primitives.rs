//! Implicit primitives and their soft occupancy.
//!
//! Every primitive exposes a scalar field that is positive inside the shape.
//! Occupancy is `sigmoid(s * field(p))` where `s` is a trainable sharpness.
//! Trainable parameters are laid out as a flat slice per primitive; the
//! layout is documented on [`Primitive::param_count`].

use rand::Rng;

use crate::error::{Error, Result};

/// A point in 2D or 3D. Unused trailing coordinates are zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    coords: [f64; 3],
    dim: usize,
}

impl Point {
    pub fn new(coords: &[f64]) -> Result<Self> {
        if !(2..=3).contains(&coords.len()) {
            return Err(Error::Shape(format!(
                "points must have 2 or 3 coordinates, got {}",
                coords.len()
            )));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::Parameter(format!(
                "point coordinates must be finite, got {coords:?}"
            )));
        }
        let mut c = [0.0; 3];
        c[..coords.len()].copy_from_slice(coords);
        Ok(Point {
            coords: c,
            dim: coords.len(),
        })
    }

    pub fn xy(x: f64, y: f64) -> Self {
        Point {
            coords: [x, y, 0.0],
            dim: 2,
        }
    }

    pub fn xyz(x: f64, y: f64, z: f64) -> Self {
        Point {
            coords: [x, y, z],
            dim: 3,
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn coords(&self) -> &[f64] {
        &self.coords[..self.dim]
    }

    /// All three slots, zero-padded in 2D.
    #[inline]
    pub fn padded(&self) -> &[f64; 3] {
        &self.coords
    }
}

pub(crate) fn check_dim(expected: usize, p: &Point) -> Result<()> {
    if p.dim == expected {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "expected a {expected}D point, got {}D",
            p.dim
        )))
    }
}

/// Logistic function, evaluated without overflow for any finite argument.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `(sigmoid(z), sigmoid(-z))` from a single exponential.
#[inline]
pub(crate) fn sigmoid_pair(z: f64) -> (f64, f64) {
    let e = (-z.abs()).exp();
    let d = 1.0 + e;
    if z >= 0.0 {
        (1.0 / d, e / d)
    } else {
        (e / d, 1.0 / d)
    }
}

/// Derivative of [`sigmoid`], as `sigmoid(z) * sigmoid(-z)`.
#[inline]
pub fn sigmoid_prime(z: f64) -> f64 {
    sigmoid(z) * sigmoid(-z)
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    // ln(e^y - 1) = y + ln(1 - e^-y)
    y + (-(-y).exp()).ln_1p()
}

/// Primitive family tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PrimitiveKind {
    Quadric,
    Sphere,
    Plane,
}

impl PrimitiveKind {
    pub fn name(self) -> &'static str {
        match self {
            PrimitiveKind::Quadric => "quadric",
            PrimitiveKind::Sphere => "sphere",
            PrimitiveKind::Plane => "plane",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "quadric" => Some(PrimitiveKind::Quadric),
            "sphere" => Some(PrimitiveKind::Sphere),
            "plane" => Some(PrimitiveKind::Plane),
            _ => None,
        }
    }
}

/// Quadric coefficient slots used in 2D; `z` terms stay frozen at zero.
pub const QUADRIC_SLOTS_2D: [usize; 6] = [0, 1, 3, 6, 7, 9];

/// `q0 x² + q1 y² + q2 z² + q3 xy + q4 yz + q5 zx + q6 x + q7 y + q8 z + q9`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadricPrimitive {
    pub q: [f64; 10],
    pub sharpness: f64,
    dim: usize,
}

impl QuadricPrimitive {
    pub fn new(dim: usize, q: [f64; 10], sharpness: f64) -> Result<Self> {
        check_dimension(dim)?;
        if q.iter().any(|v| !v.is_finite()) || !sharpness.is_finite() {
            return Err(Error::Parameter("quadric parameters must be finite".into()));
        }
        if dim == 2 && [2, 4, 5, 8].iter().any(|&i| q[i] != 0.0) {
            return Err(Error::Parameter(
                "2D quadrics must leave the z coefficients (q2, q4, q5, q8) at zero".into(),
            ));
        }
        Ok(QuadricPrimitive { q, sharpness, dim })
    }

    #[inline]
    fn monomials(p: &[f64; 3]) -> [f64; 10] {
        let [x, y, z] = *p;
        [x * x, y * y, z * z, x * y, y * z, z * x, x, y, z, 1.0]
    }

    #[inline]
    fn field_at(&self, p: &[f64; 3]) -> f64 {
        let [x, y, z] = *p;
        let q = &self.q;
        q[0] * x * x
            + q[1] * y * y
            + q[2] * z * z
            + q[3] * x * y
            + q[4] * y * z
            + q[5] * z * x
            + q[6] * x
            + q[7] * y
            + q[8] * z
            + q[9]
    }

    /// Polynomial value at `p`.
    pub fn field(&self, p: &Point) -> Result<f64> {
        check_dim(self.dim, p)?;
        Ok(self.field_at(p.padded()))
    }
}

/// Ball of radius `softplus(radius_raw)`; field is the negated signed distance.
#[derive(Debug, Clone, PartialEq)]
pub struct SpherePrimitive {
    pub center: Point,
    pub radius_raw: f64,
    pub sharpness: f64,
}

impl SpherePrimitive {
    pub fn new(center: Point, radius: f64, sharpness: f64) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::Parameter(format!(
                "sphere radius must be > 0, got {radius}"
            )));
        }
        if !sharpness.is_finite() {
            return Err(Error::Parameter("sphere sharpness must be finite".into()));
        }
        Ok(SpherePrimitive {
            center,
            radius_raw: softplus_inverse(radius),
            sharpness,
        })
    }

    pub fn radius(&self) -> f64 {
        softplus(self.radius_raw)
    }

    #[inline]
    fn distance(&self, p: &[f64; 3]) -> f64 {
        let c = self.center.padded();
        let mut d2 = 0.0;
        for k in 0..self.center.dim {
            let t = p[k] - c[k];
            d2 += t * t;
        }
        d2.sqrt()
    }
}

/// Half-space `n·p < offset · |n|`; field is the signed distance to the plane,
/// positive on the inside.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanePrimitive {
    pub normal: [f64; 3],
    pub offset: f64,
    pub sharpness: f64,
    dim: usize,
}

impl PlanePrimitive {
    pub fn new(normal: &[f64], offset: f64, sharpness: f64) -> Result<Self> {
        let dim = normal.len();
        check_dimension(dim)?;
        let norm = normal.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::Parameter(
                "plane normal must have nonzero length".into(),
            ));
        }
        if !offset.is_finite() || !sharpness.is_finite() {
            return Err(Error::Parameter("plane parameters must be finite".into()));
        }
        let mut n = [0.0; 3];
        n[..dim].copy_from_slice(normal);
        Ok(PlanePrimitive {
            normal: n,
            offset,
            sharpness,
            dim,
        })
    }

    #[inline]
    fn norm(&self) -> f64 {
        self.normal[..self.dim]
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

fn check_dimension(dim: usize) -> Result<()> {
    if dim == 2 || dim == 3 {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "dimension must be 2 or 3, got {dim}"
        )))
    }
}

/// Any supported primitive.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Quadric(QuadricPrimitive),
    Sphere(SpherePrimitive),
    Plane(PlanePrimitive),
}

/// Gradient of occupancy at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveGrad {
    /// Derivatives for every trainable parameter except sharpness, in layout order.
    pub params: Vec<f64>,
    pub sharpness: f64,
}

impl Primitive {
    pub fn kind(&self) -> PrimitiveKind {
        match self {
            Primitive::Quadric(_) => PrimitiveKind::Quadric,
            Primitive::Sphere(_) => PrimitiveKind::Sphere,
            Primitive::Plane(_) => PrimitiveKind::Plane,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Primitive::Quadric(q) => q.dim,
            Primitive::Sphere(s) => s.center.dim,
            Primitive::Plane(p) => p.dim,
        }
    }

    pub fn sharpness(&self) -> f64 {
        match self {
            Primitive::Quadric(q) => q.sharpness,
            Primitive::Sphere(s) => s.sharpness,
            Primitive::Plane(p) => p.sharpness,
        }
    }

    /// Number of trainable scalars. Layouts (sharpness always last):
    ///
    /// - quadric 3D: `q0..q9, s`; quadric 2D: `q0, q1, q3, q6, q7, q9, s`
    /// - sphere: `center[d], radius_raw, s`
    /// - plane: `normal[d], offset, s`
    pub fn param_count(&self) -> usize {
        Self::param_count_for(self.kind(), self.dim())
    }

    pub fn param_count_for(kind: PrimitiveKind, dim: usize) -> usize {
        match (kind, dim) {
            (PrimitiveKind::Quadric, 2) => 7,
            (PrimitiveKind::Quadric, _) => 11,
            (_, d) => d + 2,
        }
    }

    pub fn write_params(&self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.param_count());
        match self {
            Primitive::Quadric(q) if q.dim == 2 => {
                for (o, &slot) in out.iter_mut().zip(QUADRIC_SLOTS_2D.iter()) {
                    *o = q.q[slot];
                }
                out[6] = q.sharpness;
            }
            Primitive::Quadric(q) => {
                out[..10].copy_from_slice(&q.q);
                out[10] = q.sharpness;
            }
            Primitive::Sphere(s) => {
                let d = s.center.dim;
                out[..d].copy_from_slice(s.center.coords());
                out[d] = s.radius_raw;
                out[d + 1] = s.sharpness;
            }
            Primitive::Plane(p) => {
                out[..p.dim].copy_from_slice(&p.normal[..p.dim]);
                out[p.dim] = p.offset;
                out[p.dim + 1] = p.sharpness;
            }
        }
    }

    pub fn read_params(&mut self, src: &[f64]) {
        debug_assert_eq!(src.len(), self.param_count());
        match self {
            Primitive::Quadric(q) if q.dim == 2 => {
                for (&v, &slot) in src.iter().zip(QUADRIC_SLOTS_2D.iter()) {
                    q.q[slot] = v;
                }
                q.sharpness = src[6];
            }
            Primitive::Quadric(q) => {
                q.q.copy_from_slice(&src[..10]);
                q.sharpness = src[10];
            }
            Primitive::Sphere(s) => {
                let d = s.center.dim;
                s.center.coords[..d].copy_from_slice(&src[..d]);
                s.radius_raw = src[d];
                s.sharpness = src[d + 1];
            }
            Primitive::Plane(p) => {
                let d = p.dim;
                p.normal[..d].copy_from_slice(&src[..d]);
                p.offset = src[d];
                p.sharpness = src[d + 1];
            }
        }
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.param_count()];
        self.write_params(&mut out);
        out
    }

    /// Field value; positive inside.
    pub fn field(&self, p: &Point) -> Result<f64> {
        check_dim(self.dim(), p)?;
        Ok(self.field_unchecked(p))
    }

    #[inline]
    pub(crate) fn field_unchecked(&self, p: &Point) -> f64 {
        let c = p.padded();
        match self {
            Primitive::Quadric(q) => q.field_at(c),
            Primitive::Sphere(s) => s.radius() - s.distance(c),
            Primitive::Plane(pl) => {
                let dot: f64 = (0..pl.dim).map(|k| pl.normal[k] * c[k]).sum();
                pl.offset - dot / pl.norm()
            }
        }
    }

    pub fn occupancy(&self, p: &Point) -> Result<f64> {
        check_dim(self.dim(), p)?;
        Ok(self.occupancy_unchecked(p))
    }

    #[inline]
    pub(crate) fn occupancy_unchecked(&self, p: &Point) -> f64 {
        sigmoid(self.sharpness() * self.field_unchecked(p))
    }

    /// Adds `scale * ∂occupancy/∂θ` into `out` (one slot per trainable scalar).
    pub(crate) fn accumulate_grad(&self, p: &Point, scale: f64, out: &mut [f64]) {
        let f = self.field_unchecked(p);
        let ds = sigmoid_prime(self.sharpness() * f) * scale;
        self.accumulate_grad_at(p, f, ds, out);
    }

    /// [`Primitive::accumulate_grad`] given the field `f` at `p` and
    /// `ds = scale * sigmoid'(sharpness * f)`.
    #[inline]
    pub(crate) fn accumulate_grad_at(&self, p: &Point, f: f64, ds: f64, out: &mut [f64]) {
        let c = p.padded();
        let s = self.sharpness();
        // ds * s is the common factor for every shape parameter
        let dfield = ds * s;
        match self {
            Primitive::Quadric(q) => {
                let m = QuadricPrimitive::monomials(c);
                if q.dim == 2 {
                    for (o, &slot) in out.iter_mut().zip(QUADRIC_SLOTS_2D.iter()) {
                        *o += dfield * m[slot];
                    }
                    out[6] += ds * f;
                } else {
                    for (o, mi) in out.iter_mut().zip(m) {
                        *o += dfield * mi;
                    }
                    out[10] += ds * f;
                }
            }
            Primitive::Sphere(sp) => {
                let d = sp.center.dim;
                let dist = sp.distance(c);
                if dist > 0.0 {
                    let cc = sp.center.padded();
                    for k in 0..d {
                        out[k] += dfield * (c[k] - cc[k]) / dist;
                    }
                }
                out[d] += dfield * sigmoid(sp.radius_raw);
                out[d + 1] += ds * f;
            }
            Primitive::Plane(pl) => {
                let d = pl.dim;
                let norm = pl.norm();
                let dot: f64 = (0..d).map(|k| pl.normal[k] * c[k]).sum();
                let n3 = norm * norm * norm;
                for k in 0..d {
                    out[k] -= dfield * (c[k] / norm - dot * pl.normal[k] / n3);
                }
                out[d] += dfield;
                out[d + 1] += ds * f;
            }
        }
    }

    /// Gradient of occupancy at `p` with respect to every trainable parameter.
    pub fn grad(&self, p: &Point) -> Result<PrimitiveGrad> {
        check_dim(self.dim(), p)?;
        let mut g = vec![0.0; self.param_count()];
        self.accumulate_grad(p, 1.0, &mut g);
        let sharpness = g.pop().unwrap_or(0.0);
        Ok(PrimitiveGrad {
            params: g,
            sharpness,
        })
    }
}

/// Draws a primitive with every trainable scalar uniform on `[-0.5, 0.5]`.
///
/// Sphere radii come out as `softplus(raw)`, so always positive. Plane normals
/// shorter than `1e-6` are redrawn.
pub fn init_primitive<R: Rng + ?Sized>(
    rng: &mut R,
    kind: PrimitiveKind,
    dim: usize,
) -> Result<Primitive> {
    check_dimension(dim)?;
    let n = Primitive::param_count_for(kind, dim);
    let draw = |rng: &mut R| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-0.5..=0.5)).collect() };
    let mut prim = match kind {
        PrimitiveKind::Quadric => Primitive::Quadric(QuadricPrimitive {
            q: [0.0; 10],
            sharpness: 0.0,
            dim,
        }),
        PrimitiveKind::Sphere => Primitive::Sphere(SpherePrimitive {
            center: Point {
                coords: [0.0; 3],
                dim,
            },
            radius_raw: 0.0,
            sharpness: 0.0,
        }),
        PrimitiveKind::Plane => Primitive::Plane(PlanePrimitive {
            normal: [0.0; 3],
            offset: 0.0,
            sharpness: 0.0,
            dim,
        }),
    };
    let mut params = draw(rng);
    if kind == PrimitiveKind::Plane {
        while params[..dim].iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-6 {
            params = draw(rng);
        }
    }
    prim.read_params(&params);
    Ok(prim)
}
