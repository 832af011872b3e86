//! Double-double arithmetic (about 31 significant digits).
//!
//! Only what the reference evaluator needs: field operations, `exp`, `ln`,
//! `sin`, `cos` and `sqrt`. Algorithms follow the usual error-free
//! transformations (`two_sum`, fused `two_prod`).

use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Dd {
    hi: f64,
    lo: f64,
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.3190468138462996e-17,
};
const FRAC_PI_2: Dd = Dd {
    hi: std::f64::consts::FRAC_PI_2,
    lo: 6.123233995736766e-17,
};

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd {
        hi: s,
        lo: b - (s - a),
    }
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub fn new(v: f64) -> Dd {
        Dd { hi: v, lo: 0.0 }
    }

    pub fn hi(self) -> f64 {
        self.hi
    }

    pub fn lo(self) -> f64 {
        self.lo
    }

    fn scale(self, f: f64) -> Dd {
        Dd {
            hi: self.hi * f,
            lo: self.lo * f,
        }
    }

    fn mul_f64(self, b: f64) -> Dd {
        let (p, e) = two_prod(self.hi, b);
        quick_two_sum(p, e + self.lo * b)
    }

    pub fn abs(self) -> Dd {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    pub fn sqrt(self) -> Dd {
        if self.hi <= 0.0 {
            return Dd::ZERO;
        }
        let y = self.hi.sqrt();
        let (p, e) = two_prod(y, y);
        let r = (self - Dd { hi: p, lo: e }).hi / (2.0 * y);
        quick_two_sum(y, r)
    }

    pub fn exp(self) -> Dd {
        if self.hi > 709.0 {
            return Dd::new(f64::INFINITY);
        }
        if self.hi < -745.0 {
            return Dd::ZERO;
        }
        let k = (self.hi / LN2.hi).round();
        // |r| <= ln2/2, then shrink further so the series converges quickly
        let r = (self - LN2.mul_f64(k)).scale(1.0 / 1024.0);
        let mut sum = Dd::ONE;
        let mut term = Dd::ONE;
        for n in 1..30 {
            term = term * r / Dd::new(n as f64);
            sum = sum + term;
            if term.hi.abs() < 1e-36 {
                break;
            }
        }
        for _ in 0..10 {
            sum = sum * sum;
        }
        // 2^k split in two so neither factor overflows
        let k = k as i32;
        let half = k / 2;
        sum.scale(2f64.powi(half)).scale(2f64.powi(k - half))
    }

    pub fn ln(self) -> Dd {
        if self.hi <= 0.0 {
            return Dd::new(f64::NAN);
        }
        let x = Dd::new(self.hi.ln());
        x + self * (-x).exp() - Dd::ONE
    }

    /// `(sin, cos)` after reduction by π/2.
    fn sin_cos(self) -> (Dd, Dd) {
        let k = (self.hi / FRAC_PI_2.hi).round();
        let r = self - FRAC_PI_2.mul_f64(k);
        let r2 = r * r;
        let (mut s, mut ts) = (r, r);
        let (mut c, mut tc) = (Dd::ONE, Dd::ONE);
        for n in 1..20 {
            let n = n as f64;
            ts = -(ts * r2) / Dd::new((2.0 * n) * (2.0 * n + 1.0));
            tc = -(tc * r2) / Dd::new((2.0 * n - 1.0) * (2.0 * n));
            s = s + ts;
            c = c + tc;
            if ts.hi.abs() < 1e-36 && tc.hi.abs() < 1e-36 {
                break;
            }
        }
        match (k as i64).rem_euclid(4) {
            0 => (s, c),
            1 => (c, -s),
            2 => (-s, -c),
            _ => (-c, s),
        }
    }

    pub fn sin(self) -> Dd {
        self.sin_cos().0
    }

    pub fn cos(self) -> Dd {
        self.sin_cos().1
    }
}

impl From<f64> for Dd {
    fn from(v: f64) -> Dd {
        Dd::new(v)
    }
}

impl Add for Dd {
    type Output = Dd;
    #[inline]
    fn add(self, b: Dd) -> Dd {
        let (s1, s2) = two_sum(self.hi, b.hi);
        let (t1, t2) = two_sum(self.lo, b.lo);
        let s = quick_two_sum(s1, s2 + t1);
        quick_two_sum(s.hi, s.lo + t2)
    }
}

impl Sub for Dd {
    type Output = Dd;
    #[inline]
    fn sub(self, b: Dd) -> Dd {
        self + (-b)
    }
}

impl Neg for Dd {
    type Output = Dd;
    #[inline]
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Mul for Dd {
    type Output = Dd;
    #[inline]
    fn mul(self, b: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, b.hi);
        quick_two_sum(p, e + (self.hi * b.lo + self.lo * b.hi))
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, b: Dd) -> Dd {
        let q1 = self.hi / b.hi;
        let r = self - b.mul_f64(q1);
        let q2 = r.hi / b.hi;
        let r = r - b.mul_f64(q2);
        let q3 = r.hi / b.hi;
        quick_two_sum(q1, q2) + Dd::new(q3)
    }
}
