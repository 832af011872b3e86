//! Fuzzy-set boolean algebra on membership values in `[0, 1]`.
//!
//! Named t-norm, t-conorm and complement families, the product-logic
//! operators, the unified barycentric boolean operator with its gradients,
//! and the bilinear blend that the barycentric operator replaces.
//!
//! The typed functions (`tnorm`, `unified_boolean`, ...) validate their
//! inputs. Hot loops in the tree evaluator use the unchecked `f64` kernels
//! (`unified`, `unified_partials`, [`OpKind::product`], ...) directly.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Tolerance on `c0 + c1 + c2 + c3 = 1` for barycentric weights.
pub const BARYCENTRIC_SUM_TOL: f64 = 1e-9;

/// A soft occupancy / fuzzy membership value in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
#[repr(transparent)]
pub struct Membership(f64);

impl Membership {
    pub const EMPTY: Membership = Membership(0.0);
    pub const FULL: Membership = Membership(1.0);

    /// Out-of-range or NaN values are rejected, never clamped.
    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) {
            Ok(Membership(value))
        } else {
            Err(Error::Parameter(format!(
                "membership value {value} outside [0, 1]"
            )))
        }
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }
}

impl From<Membership> for f64 {
    fn from(m: Membership) -> f64 {
        m.0
    }
}

impl TryFrom<f64> for Membership {
    type Error = Error;
    fn try_from(value: f64) -> Result<Self> {
        Membership::new(value)
    }
}

fn checked(value: f64) -> Result<Membership> {
    // Tiny overshoots from rounding in pow/cos are folded back; anything
    // larger is a bug in the operator and is reported.
    if (-1e-12..=1.0 + 1e-12).contains(&value) {
        Ok(Membership(value.clamp(0.0, 1.0)))
    } else {
        Err(Error::Numerical {
            node: 0,
            what: format!("operator produced {value} outside [0, 1]"),
        })
    }
}

/// The four boolean operation types, in barycentric-vertex order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    /// `X ∩ Y`, vertex `c0`.
    Intersection,
    /// `X ∪ Y`, vertex `c1`.
    Union,
    /// `X ∖ Y`, vertex `c2`.
    Difference,
    /// `Y ∖ X`, vertex `c3`.
    ReverseDifference,
}

impl OpKind {
    pub const ALL: [OpKind; 4] = [
        OpKind::Intersection,
        OpKind::Union,
        OpKind::Difference,
        OpKind::ReverseDifference,
    ];

    pub fn index(self) -> usize {
        match self {
            OpKind::Intersection => 0,
            OpKind::Union => 1,
            OpKind::Difference => 2,
            OpKind::ReverseDifference => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<OpKind> {
        OpKind::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Intersection => "intersection",
            OpKind::Union => "union",
            OpKind::Difference => "difference",
            OpKind::ReverseDifference => "reverse-difference",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|op| op.name() == name)
    }

    /// Product-logic realisation of this operation.
    #[inline]
    pub fn product(self, x: f64, y: f64) -> f64 {
        match self {
            OpKind::Intersection => x * y,
            OpKind::Union => x + y - x * y,
            OpKind::Difference => x - x * y,
            OpKind::ReverseDifference => y - x * y,
        }
    }

    /// Partial derivatives `(∂/∂x, ∂/∂y)` of [`OpKind::product`].
    #[inline]
    pub fn product_partials(self, x: f64, y: f64) -> (f64, f64) {
        match self {
            OpKind::Intersection => (y, x),
            OpKind::Union => (1.0 - y, 1.0 - x),
            OpKind::Difference => (1.0 - y, -x),
            OpKind::ReverseDifference => (-y, 1.0 - x),
        }
    }

    /// Gödel (min/max) realisation; differences use the standard complement.
    #[inline]
    pub fn godel(self, x: f64, y: f64) -> f64 {
        match self {
            OpKind::Intersection => x.min(y),
            OpKind::Union => x.max(y),
            OpKind::Difference => x.min(1.0 - y),
            OpKind::ReverseDifference => y.min(1.0 - x),
        }
    }

    /// Subgradient of [`OpKind::godel`]. Ties go to the left operand.
    #[inline]
    pub fn godel_partials(self, x: f64, y: f64) -> (f64, f64) {
        match self {
            OpKind::Intersection => min_partials(x, y),
            OpKind::Union => max_partials(x, y),
            OpKind::Difference => {
                let (dx, dny) = min_partials(x, 1.0 - y);
                (dx, -dny)
            }
            OpKind::ReverseDifference => {
                let (dnx, dy) = min_partials(1.0 - x, y);
                (-dnx, dy)
            }
        }
    }
}

#[inline]
fn min_partials(a: f64, b: f64) -> (f64, f64) {
    if a <= b {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    }
}

#[inline]
fn max_partials(a: f64, b: f64) -> (f64, f64) {
    if a >= b {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TNormKind {
    Godel,
    Product,
    Lukasiewicz,
    Yager(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TConormKind {
    Godel,
    ProbabilisticSum,
    BoundedSum,
    Yager(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ComplementKind {
    /// `1 - x`
    Standard,
    /// `(1 + cos(πx)) / 2`
    Cosine,
    /// `(1 - x) / (1 + λx)`, `λ > -1`
    Sugeno(f64),
    /// `(1 - x^λ)^(1/λ)`, `λ > 0`
    Yager(f64),
}

fn yager_exponent(p: f64) -> Result<()> {
    if p.is_finite() && p > 0.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "Yager exponent must be > 0, got {p}"
        )))
    }
}

impl TNormKind {
    pub fn validate(self) -> Result<()> {
        match self {
            TNormKind::Yager(p) => yager_exponent(p),
            _ => Ok(()),
        }
    }

    /// Unchecked evaluation.
    pub fn apply(self, x: f64, y: f64) -> f64 {
        match self {
            TNormKind::Godel => x.min(y),
            TNormKind::Product => x * y,
            TNormKind::Lukasiewicz => (x + y - 1.0).max(0.0),
            TNormKind::Yager(p) => {
                let s = ((1.0 - x).powf(p) + (1.0 - y).powf(p)).powf(p.recip());
                (1.0 - s).max(0.0)
            }
        }
    }
}

impl TConormKind {
    pub fn validate(self) -> Result<()> {
        match self {
            TConormKind::Yager(p) => yager_exponent(p),
            _ => Ok(()),
        }
    }

    pub fn apply(self, x: f64, y: f64) -> f64 {
        match self {
            TConormKind::Godel => x.max(y),
            TConormKind::ProbabilisticSum => x + y - x * y,
            TConormKind::BoundedSum => (x + y).min(1.0),
            TConormKind::Yager(p) => (x.powf(p) + y.powf(p)).powf(p.recip()).min(1.0),
        }
    }
}

impl ComplementKind {
    pub fn validate(self) -> Result<()> {
        match self {
            ComplementKind::Sugeno(l) if !(l.is_finite() && l > -1.0) => Err(Error::Parameter(
                format!("Sugeno lambda must lie in (-1, inf), got {l}"),
            )),
            ComplementKind::Yager(l) if !(l.is_finite() && l > 0.0) => Err(Error::Parameter(
                format!("Yager complement lambda must be > 0, got {l}"),
            )),
            _ => Ok(()),
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            ComplementKind::Standard => 1.0 - x,
            ComplementKind::Cosine => 0.5 * (1.0 + (PI * x).cos()),
            ComplementKind::Sugeno(l) => (1.0 - x) / (1.0 + l * x),
            ComplementKind::Yager(l) => (1.0 - x.powf(l)).powf(l.recip()),
        }
    }
}

pub fn tnorm(kind: TNormKind, x: Membership, y: Membership) -> Result<Membership> {
    kind.validate()?;
    checked(kind.apply(x.0, y.0))
}

pub fn tconorm(kind: TConormKind, x: Membership, y: Membership) -> Result<Membership> {
    kind.validate()?;
    checked(kind.apply(x.0, y.0))
}

pub fn complement(kind: ComplementKind, x: Membership) -> Result<Membership> {
    kind.validate()?;
    checked(kind.apply(x.0))
}

/// Product-logic difference `X ∖ Y = x - xy`.
pub fn product_difference(x: Membership, y: Membership) -> Membership {
    Membership(x.0 - x.0 * y.0)
}

/// Convex weights over the four operation types (`c0..c3`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarycentricWeights([f64; 4]);

impl BarycentricWeights {
    pub fn new(c: [f64; 4]) -> Result<Self> {
        if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Parameter(format!(
                "barycentric weights {c:?} must each lie in [0, 1]"
            )));
        }
        let sum: f64 = c.iter().sum();
        if (sum - 1.0).abs() > BARYCENTRIC_SUM_TOL {
            return Err(Error::Parameter(format!(
                "barycentric weights {c:?} sum to {sum}, expected 1"
            )));
        }
        Ok(BarycentricWeights(c))
    }

    pub fn one_hot(op: OpKind) -> Self {
        let mut c = [0.0; 4];
        c[op.index()] = 1.0;
        BarycentricWeights(c)
    }

    pub fn as_array(&self) -> &[f64; 4] {
        &self.0
    }

    /// `(1 - t) a + t b`; stays on the simplex for `t` in `[0, 1]`.
    pub fn lerp(&self, other: &BarycentricWeights, t: f64) -> Result<Self> {
        let mut c = [0.0; 4];
        for (i, v) in c.iter_mut().enumerate() {
            *v = (1.0 - t) * self.0[i] + t * other.0[i];
        }
        BarycentricWeights::new(c)
    }
}

/// `B_c(x, y) = (c1 + c2) x + (c1 + c3) y + (c0 - c1 - c2 - c3) xy`, unchecked.
#[inline]
pub fn unified(c: &[f64; 4], x: f64, y: f64) -> f64 {
    (c[1] + c[2]) * x + (c[1] + c[3]) * y + (c[0] - c[1] - c[2] - c[3]) * x * y
}

/// `(∂B/∂x, ∂B/∂y)` of [`unified`].
#[inline]
pub fn unified_partials(c: &[f64; 4], x: f64, y: f64) -> (f64, f64) {
    let k = c[0] - c[1] - c[2] - c[3];
    (c[1] + c[2] + k * y, c[1] + c[3] + k * x)
}

/// `∂B/∂c`: the four product-logic operators evaluated at `(x, y)`.
#[inline]
pub fn unified_weight_partials(x: f64, y: f64) -> [f64; 4] {
    let xy = x * y;
    [xy, x + y - xy, x - xy, y - xy]
}

pub fn unified_boolean(c: &BarycentricWeights, x: Membership, y: Membership) -> Membership {
    // A convex combination of four values in [0, 1]; only rounding can
    // push it out, by a few ulps.
    Membership(unified(&c.0, x.0, y.0).clamp(0.0, 1.0))
}

/// Gradient of the unified operator with respect to inputs and weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnifiedGrad {
    pub dx: f64,
    pub dy: f64,
    pub dc: [f64; 4],
}

pub fn unified_boolean_grad(c: &BarycentricWeights, x: Membership, y: Membership) -> UnifiedGrad {
    let (dx, dy) = unified_partials(&c.0, x.0, y.0);
    UnifiedGrad {
        dx,
        dy,
        dc: unified_weight_partials(x.0, y.0),
    }
}

/// Corner operators of the bilinear blend: `(u, v) = (0,0), (1,0), (0,1), (1,1)`.
pub const BILINEAR_CORNERS: [OpKind; 4] = [
    OpKind::Union,
    OpKind::Intersection,
    OpKind::ReverseDifference,
    OpKind::Difference,
];

#[inline]
fn bilinear_corner_weights(u: f64, v: f64) -> [f64; 4] {
    [(1.0 - u) * (1.0 - v), u * (1.0 - v), (1.0 - u) * v, u * v]
}

/// Unchecked bilinear blend of the product-logic corner operators.
#[inline]
pub fn bilinear(u: f64, v: f64, x: f64, y: f64) -> f64 {
    let w = bilinear_corner_weights(u, v);
    BILINEAR_CORNERS
        .iter()
        .zip(w)
        .map(|(op, w)| w * op.product(x, y))
        .sum()
}

/// Partials of [`bilinear`]: `(∂/∂u, ∂/∂v, ∂/∂x, ∂/∂y)`.
pub fn bilinear_partials(u: f64, v: f64, x: f64, y: f64) -> [f64; 4] {
    let [un, it, ryx, dxy] = BILINEAR_CORNERS.map(|op| op.product(x, y));
    let du = (1.0 - v) * (it - un) + v * (dxy - ryx);
    let dv = (1.0 - u) * (ryx - un) + u * (dxy - it);
    let w = bilinear_corner_weights(u, v);
    let (mut dx, mut dy) = (0.0, 0.0);
    for (op, w) in BILINEAR_CORNERS.iter().zip(w) {
        let (px, py) = op.product_partials(x, y);
        dx += w * px;
        dy += w * py;
    }
    [du, dv, dx, dy]
}

pub fn bilinear_boolean(u: f64, v: f64, x: Membership, y: Membership) -> Result<Membership> {
    for (name, t) in [("u", u), ("v", v)] {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Parameter(format!(
                "bilinear coordinate {name} = {t} outside [0, 1]"
            )));
        }
    }
    checked(bilinear(u, v, x.0, y.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(v: f64) -> Membership {
        Membership::new(v).unwrap()
    }

    #[test]
    fn membership_rejects_out_of_range() {
        assert!(Membership::new(1.2).is_err());
        assert!(Membership::new(-0.01).is_err());
        assert!(Membership::new(f64::NAN).is_err());
        assert_eq!(Membership::new(1.0).unwrap().get(), 1.0);
    }

    #[test]
    fn tnorm_examples() {
        assert_eq!(
            tnorm(TNormKind::Product, m(0.3), m(1.0)).unwrap().get(),
            0.3
        );
        assert_eq!(
            tnorm(TNormKind::Lukasiewicz, m(0.4), m(0.5)).unwrap().get(),
            0.0
        );
        assert_eq!(tnorm(TNormKind::Godel, m(0.2), m(0.7)).unwrap().get(), 0.2);
        assert!(tnorm(TNormKind::Yager(0.0), m(0.2), m(0.7)).is_err());
        assert!(tnorm(TNormKind::Yager(-1.0), m(0.2), m(0.7)).is_err());
    }

    #[test]
    fn tconorm_examples() {
        let ps = TConormKind::ProbabilisticSum;
        assert_eq!(tconorm(ps, m(0.5), m(0.0)).unwrap().get(), 0.5);
        assert_eq!(tconorm(ps, m(0.5), m(0.5)).unwrap().get(), 0.75);
        assert_eq!(
            tconorm(TConormKind::BoundedSum, m(0.8), m(0.7))
                .unwrap()
                .get(),
            1.0
        );
        assert!(tconorm(TConormKind::Yager(f64::NAN), m(0.1), m(0.1)).is_err());
    }

    #[test]
    fn complement_examples() {
        assert_eq!(
            complement(ComplementKind::Standard, m(0.0)).unwrap().get(),
            1.0
        );
        assert!((complement(ComplementKind::Standard, m(0.3)).unwrap().get() - 0.7).abs() < 1e-15);
        assert!((complement(ComplementKind::Cosine, m(0.5)).unwrap().get() - 0.5).abs() < 1e-15);
        assert!(complement(ComplementKind::Sugeno(-1.0), m(0.5)).is_err());
        assert!(complement(ComplementKind::Yager(0.0), m(0.5)).is_err());
    }

    #[test]
    fn complement_boundaries_all_families() {
        for kind in [
            ComplementKind::Standard,
            ComplementKind::Cosine,
            ComplementKind::Sugeno(-0.5),
            ComplementKind::Sugeno(3.0),
            ComplementKind::Yager(0.5),
            ComplementKind::Yager(2.0),
        ] {
            assert!(
                (complement(kind, m(0.0)).unwrap().get() - 1.0).abs() < 1e-15,
                "{kind:?}"
            );
            assert!(
                complement(kind, m(1.0)).unwrap().get().abs() < 1e-15,
                "{kind:?}"
            );
            let mut prev = 1.0;
            for i in 1..=100 {
                let c = kind.apply(i as f64 / 100.0);
                assert!(c < prev, "{kind:?} not strictly decreasing at {i}");
                prev = c;
            }
        }
    }

    #[test]
    fn product_difference_examples() {
        assert_eq!(product_difference(m(1.0), m(0.0)).get(), 1.0);
        assert_eq!(product_difference(m(1.0), m(1.0)).get(), 0.0);
        assert!((product_difference(m(0.8), m(0.5)).get() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn unified_examples() {
        let union = BarycentricWeights::one_hot(OpKind::Union);
        let inter = BarycentricWeights::one_hot(OpKind::Intersection);
        let mean = BarycentricWeights::new([0.25; 4]).unwrap();
        assert_eq!(unified_boolean(&union, m(0.5), m(0.5)).get(), 0.75);
        assert_eq!(unified_boolean(&inter, m(0.5), m(0.5)).get(), 0.25);
        assert_eq!(unified_boolean(&mean, m(1.0), m(1.0)).get(), 0.5);
    }

    #[test]
    fn unified_grad_examples() {
        let inter = BarycentricWeights::one_hot(OpKind::Intersection);
        let g = unified_boolean_grad(&inter, m(0.5), m(0.5));
        assert_eq!((g.dx, g.dy), (0.5, 0.5));
        let any = BarycentricWeights::new([0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(unified_boolean_grad(&any, m(0.0), m(0.0)).dc, [0.0; 4]);
        let union = BarycentricWeights::one_hot(OpKind::Union);
        let g = unified_boolean_grad(&union, m(0.3), m(0.9));
        assert!((g.dx - 0.1).abs() < 1e-15);
    }

    #[test]
    fn barycentric_validation() {
        assert!(BarycentricWeights::new([0.5, 0.5, 0.0, 0.0]).is_ok());
        assert!(BarycentricWeights::new([0.5, 0.5 + 5e-10, 0.0, 0.0]).is_ok());
        assert!(BarycentricWeights::new([0.5, 0.6, 0.0, 0.0]).is_err());
        assert!(BarycentricWeights::new([1.5, -0.5, 0.0, 0.0]).is_err());
        assert!(BarycentricWeights::new([f64::NAN, 1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn bilinear_examples() {
        let (x, y) = (0.3, 0.6);
        for (i, (u, v)) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]
            .into_iter()
            .enumerate()
        {
            let got = bilinear_boolean(u, v, m(x), m(y)).unwrap().get();
            assert_eq!(got, BILINEAR_CORNERS[i].product(x, y));
        }
        assert_eq!(
            bilinear_boolean(0.0, 0.0, m(x), m(y)).unwrap().get(),
            x + y - x * y
        );
        assert_eq!(
            bilinear_boolean(0.5, 0.5, m(1.0), m(1.0)).unwrap().get(),
            0.5
        );
        assert!(bilinear_boolean(1.5, 0.5, m(1.0), m(1.0)).is_err());
    }

    #[test]
    fn godel_tie_rule_prefers_left() {
        assert_eq!(OpKind::Union.godel_partials(0.4, 0.4), (1.0, 0.0));
        assert_eq!(OpKind::Intersection.godel_partials(0.4, 0.4), (1.0, 0.0));
        assert_eq!(OpKind::Union.godel_partials(0.7, 0.2), (1.0, 0.0));
        assert_eq!(OpKind::Union.godel_partials(0.1, 0.2), (0.0, 1.0));
    }

    fn central(f: impl Fn(f64) -> f64, at: f64) -> f64 {
        let h = 1e-6;
        (f(at + h) - f(at - h)) / (2.0 * h)
    }

    proptest! {
        #[test]
        fn unified_range_closure(raw in prop::array::uniform4(0.0f64..1.0), x in 0.0f64..=1.0, y in 0.0f64..=1.0) {
            let s: f64 = raw.iter().sum::<f64>() + 1e-12;
            let c = BarycentricWeights::new(raw.map(|v| (v + 2.5e-13) / s)).unwrap();
            let b = unified(c.as_array(), x, y);
            prop_assert!((-1e-15..=1.0 + 1e-15).contains(&b));
        }

        #[test]
        fn unified_grad_matches_finite_differences(
            raw in prop::array::uniform4(0.01f64..1.0),
            x in 0.05f64..0.95,
            y in 0.05f64..0.95,
        ) {
            let s: f64 = raw.iter().sum();
            let c = raw.map(|v| v / s);
            let (dx, dy) = unified_partials(&c, x, y);
            let nx = central(|t| unified(&c, t, y), x);
            let ny = central(|t| unified(&c, x, t), y);
            // bilinear in x and y, so the central difference is exact up to rounding
            prop_assert!((dx - nx).abs() < 1e-8);
            prop_assert!((dy - ny).abs() < 1e-8);
            let dc = unified_weight_partials(x, y);
            for i in 0..4 {
                let nc = central(|t| { let mut cc = c; cc[i] = t; unified(&cc, x, y) }, c[i]);
                prop_assert!((dc[i] - nc).abs() < 1e-8);
            }
        }

        #[test]
        fn bilinear_partials_match_finite_differences(
            u in 0.05f64..0.95, v in 0.05f64..0.95, x in 0.05f64..0.95, y in 0.05f64..0.95,
        ) {
            let g = bilinear_partials(u, v, x, y);
            let n = [
                central(|t| bilinear(t, v, x, y), u),
                central(|t| bilinear(u, t, x, y), v),
                central(|t| bilinear(u, v, t, y), x),
                central(|t| bilinear(u, v, x, t), y),
            ];
            for i in 0..4 {
                prop_assert!((g[i] - n[i]).abs() / g[i].abs().max(n[i].abs()).max(1e-8) < 1e-6);
            }
        }
    }
}
