//! Double-double scalar for finite-difference checks, good to about 30
//! significant digits. Arithmetic, `sqrt`, `exp`, `ln` and `tanh` are carried out in full
//! precision; the remaining `Float` methods go through `f64` and are not used
//! on the network's forward path.

use std::cmp::Ordering;
use std::fmt;
use std::iter::Sum;
use std::num::FpCategory;
use std::ops::{Add, Div, Mul, Neg, Rem, Sub};

use num_traits::{Float, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};
use tdln::Scalar;

/// `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const fn new(v: f64) -> Dd {
        Dd { hi: v, lo: 0.0 }
    }

    fn renorm(hi: f64, lo: f64) -> Dd {
        if !hi.is_finite() {
            return Dd::new(hi);
        }
        let (hi, lo) = quick_two_sum(hi, lo);
        Dd { hi, lo }
    }

    fn scale2(self, k: i32) -> Dd {
        let f = 2f64.powi(k);
        Dd {
            hi: self.hi * f,
            lo: self.lo * f,
        }
    }

    pub fn value(self) -> f64 {
        self.hi + self.lo
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, y: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, y.hi);
        if !s.is_finite() {
            return Dd::new(s);
        }
        let (t, f) = two_sum(self.lo, y.lo);
        let (s, e) = quick_two_sum(s, e + t);
        Dd::renorm(s, e + f)
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, y: Dd) -> Dd {
        self + (-y)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, y: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, y.hi);
        if !p.is_finite() {
            return Dd::new(p);
        }
        Dd::renorm(p, e + (self.hi * y.lo + self.lo * y.hi))
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, y: Dd) -> Dd {
        let q1 = self.hi / y.hi;
        if !q1.is_finite() || y.hi == 0.0 {
            return Dd::new(q1);
        }
        let r = self - y * Dd::new(q1);
        let q2 = r.hi / y.hi;
        let r = r - y * Dd::new(q2);
        let q3 = r.hi / y.hi;
        let (q1, q2) = quick_two_sum(q1, q2);
        Dd { hi: q1, lo: q2 } + Dd::new(q3)
    }
}

impl Rem for Dd {
    type Output = Dd;
    fn rem(self, y: Dd) -> Dd {
        self - (self / y).trunc() * y
    }
}

impl PartialOrd for Dd {
    fn partial_cmp(&self, other: &Dd) -> Option<Ordering> {
        match self.hi.partial_cmp(&other.hi)? {
            Ordering::Equal => self.lo.partial_cmp(&other.lo),
            o => Some(o),
        }
    }
}

impl Zero for Dd {
    fn zero() -> Dd {
        Dd::new(0.0)
    }
    fn is_zero(&self) -> bool {
        self.hi == 0.0
    }
}

impl One for Dd {
    fn one() -> Dd {
        Dd::new(1.0)
    }
}

impl Num for Dd {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Dd, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Dd::new)
    }
}

impl ToPrimitive for Dd {
    fn to_i64(&self) -> Option<i64> {
        self.value().to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.value().to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.value())
    }
}

impl FromPrimitive for Dd {
    fn from_i64(n: i64) -> Option<Dd> {
        let hi = n as f64;
        Some(Dd::renorm(hi, (n - hi as i64) as f64))
    }
    fn from_u64(n: u64) -> Option<Dd> {
        let hi = n as f64;
        Some(Dd::renorm(hi, (n as i128 - hi as i128) as f64))
    }
    fn from_f64(n: f64) -> Option<Dd> {
        Some(Dd::new(n))
    }
}

impl NumCast for Dd {
    fn from<N: ToPrimitive>(n: N) -> Option<Dd> {
        n.to_f64().map(Dd::new)
    }
}

impl Sum for Dd {
    fn sum<I: Iterator<Item = Dd>>(iter: I) -> Dd {
        iter.fold(Dd::zero(), |a, b| a + b)
    }
}

impl fmt::Display for Dd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.value(), f)
    }
}

impl fmt::LowerExp for Dd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::LowerExp::fmt(&self.value(), f)
    }
}

fn via_f64(x: Dd, f: impl Fn(f64) -> f64) -> Dd {
    Dd::new(f(x.value()))
}

impl Float for Dd {
    fn nan() -> Dd {
        Dd::new(f64::NAN)
    }
    fn infinity() -> Dd {
        Dd::new(f64::INFINITY)
    }
    fn neg_infinity() -> Dd {
        Dd::new(f64::NEG_INFINITY)
    }
    fn neg_zero() -> Dd {
        Dd::new(-0.0)
    }
    fn min_value() -> Dd {
        Dd::new(f64::MIN)
    }
    fn min_positive_value() -> Dd {
        Dd::new(f64::MIN_POSITIVE)
    }
    fn max_value() -> Dd {
        Dd::new(f64::MAX)
    }
    fn epsilon() -> Dd {
        Dd::new(f64::EPSILON * f64::EPSILON)
    }
    fn is_nan(self) -> bool {
        self.hi.is_nan()
    }
    fn is_infinite(self) -> bool {
        self.hi.is_infinite()
    }
    fn is_finite(self) -> bool {
        self.hi.is_finite()
    }
    fn is_normal(self) -> bool {
        self.hi.is_normal()
    }
    fn classify(self) -> FpCategory {
        self.hi.classify()
    }
    fn floor(self) -> Dd {
        let hi = self.hi.floor();
        if hi == self.hi {
            Dd::renorm(hi, self.lo.floor())
        } else {
            Dd::new(hi)
        }
    }
    fn ceil(self) -> Dd {
        -(-self).floor()
    }
    fn round(self) -> Dd {
        (self + Dd::new(0.5)).floor()
    }
    fn trunc(self) -> Dd {
        if self.hi >= 0.0 {
            self.floor()
        } else {
            self.ceil()
        }
    }
    fn fract(self) -> Dd {
        self - self.trunc()
    }
    fn abs(self) -> Dd {
        if self.hi < 0.0 || (self.hi == 0.0 && self.lo < 0.0) {
            -self
        } else {
            self
        }
    }
    fn signum(self) -> Dd {
        Dd::new(self.hi.signum())
    }
    fn is_sign_positive(self) -> bool {
        self.hi.is_sign_positive()
    }
    fn is_sign_negative(self) -> bool {
        self.hi.is_sign_negative()
    }
    fn mul_add(self, a: Dd, b: Dd) -> Dd {
        self * a + b
    }
    fn recip(self) -> Dd {
        Dd::one() / self
    }
    fn powi(self, n: i32) -> Dd {
        let mut base = if n < 0 { self.recip() } else { self };
        let mut e = n.unsigned_abs();
        let mut acc = Dd::one();
        while e > 0 {
            if e & 1 == 1 {
                acc = acc * base;
            }
            base = base * base;
            e >>= 1;
        }
        acc
    }
    fn powf(self, n: Dd) -> Dd {
        (self.ln() * n).exp()
    }
    fn sqrt(self) -> Dd {
        if self.hi <= 0.0 {
            return Dd::new(self.hi.sqrt());
        }
        let s = Dd::new(self.hi.sqrt());
        s + (self - s * s) / (s * Dd::new(2.0))
    }
    fn exp(self) -> Dd {
        if self.hi > 709.0 {
            return Dd::infinity();
        }
        if self.hi < -745.0 {
            return Dd::zero();
        }
        let k = (self.hi / LN2.hi).round();
        // r in [-ln2/2, ln2/2], scaled down by 2^6 so the series is short.
        let r = (self - LN2 * Dd::new(k)).scale2(-6);
        let mut term = Dd::one();
        let mut sum = Dd::one();
        for i in 1..=24 {
            term = term * r / Dd::new(i as f64);
            sum = sum + term;
            if term.hi.abs() < 1e-36 {
                break;
            }
        }
        for _ in 0..6 {
            sum = sum * sum;
        }
        sum.scale2(k as i32)
    }
    fn exp2(self) -> Dd {
        (self * LN2).exp()
    }
    fn ln(self) -> Dd {
        if self.hi <= 0.0 || !self.hi.is_finite() {
            return Dd::new(self.hi.ln());
        }
        let mut y = Dd::new(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp() - Dd::one();
        }
        y
    }
    fn log(self, base: Dd) -> Dd {
        self.ln() / base.ln()
    }
    fn log2(self) -> Dd {
        self.ln() / LN2
    }
    fn log10(self) -> Dd {
        self.ln() / Dd::new(10.0).ln()
    }
    fn max(self, other: Dd) -> Dd {
        if self.is_nan() || other > self {
            other
        } else {
            self
        }
    }
    fn min(self, other: Dd) -> Dd {
        if self.is_nan() || other < self {
            other
        } else {
            self
        }
    }
    fn abs_sub(self, other: Dd) -> Dd {
        if self > other {
            self - other
        } else {
            Dd::zero()
        }
    }
    fn cbrt(self) -> Dd {
        via_f64(self, f64::cbrt)
    }
    fn hypot(self, other: Dd) -> Dd {
        (self * self + other * other).sqrt()
    }
    fn sin(self) -> Dd {
        via_f64(self, f64::sin)
    }
    fn cos(self) -> Dd {
        via_f64(self, f64::cos)
    }
    fn tan(self) -> Dd {
        via_f64(self, f64::tan)
    }
    fn asin(self) -> Dd {
        via_f64(self, f64::asin)
    }
    fn acos(self) -> Dd {
        via_f64(self, f64::acos)
    }
    fn atan(self) -> Dd {
        via_f64(self, f64::atan)
    }
    fn atan2(self, other: Dd) -> Dd {
        Dd::new(self.value().atan2(other.value()))
    }
    fn sin_cos(self) -> (Dd, Dd) {
        (self.sin(), self.cos())
    }
    fn exp_m1(self) -> Dd {
        if self.hi.abs() >= 0.5 {
            return self.exp() - Dd::one();
        }
        let mut term = self;
        let mut sum = self;
        for i in 2..=40 {
            term = term * self / Dd::new(i as f64);
            sum = sum + term;
            if term.hi.abs() < 1e-34 * sum.hi.abs() {
                break;
            }
        }
        sum
    }
    fn ln_1p(self) -> Dd {
        (self + Dd::one()).ln()
    }
    fn sinh(self) -> Dd {
        (self.exp() - (-self).exp()) / Dd::new(2.0)
    }
    fn cosh(self) -> Dd {
        (self.exp() + (-self).exp()) / Dd::new(2.0)
    }
    fn tanh(self) -> Dd {
        let a = self.abs();
        if a.hi > 40.0 {
            return Dd::new(self.hi.signum());
        }
        let m = (a * Dd::new(-2.0)).exp_m1();
        let t = -m / (m + Dd::new(2.0));
        if self.hi < 0.0 {
            -t
        } else {
            t
        }
    }
    fn asinh(self) -> Dd {
        via_f64(self, f64::asinh)
    }
    fn acosh(self) -> Dd {
        via_f64(self, f64::acosh)
    }
    fn atanh(self) -> Dd {
        via_f64(self, f64::atanh)
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.hi.integer_decode()
    }
}

impl Scalar for Dd {}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Dd, b: Dd, tol: f64) -> bool {
        ((a - b).abs() / b.abs().max(Dd::new(1e-300))).value() < tol
    }

    #[test]
    fn identities_hold_to_double_double_precision() {
        let third = Dd::one() / Dd::new(3.0);
        assert!(close(third * Dd::new(3.0), Dd::one(), 1e-31));
        let two = Dd::new(2.0);
        assert!(close(two.sqrt() * two.sqrt(), two, 1e-31));
        for x in [-3.7, -0.3, 1e-6, 0.25, 1.0, 5.5] {
            let x = Dd::new(x) + third * Dd::new(1e-20);
            let err = ((x.exp().ln() - x).abs() / x.abs().max(Dd::one())).value();
            assert!(err < 1e-29, "{x:?}: {err:e}");
            let err = (x.exp() * (-x).exp() - Dd::one()).abs().value();
            assert!(err < 1e-29, "{x:?}: {err:e}");
            let t = x.tanh();
            assert!(close((x * two).tanh(), two * t / (Dd::one() + t * t), 1e-29), "{x:?}");
            assert!(close((-x).tanh(), -t, 1e-31));
        }
        let t = Dd::new(0.5).tanh();
        assert_eq!(t.hi, 0.462_117_157_260_009_74);
        assert!((t.lo - 2.191_660_323_826_092_8e-17).abs() < 1e-30, "{t:?}");
        let t = Dd::new(1e-6).tanh();
        assert_eq!(t.hi, 9.999_999_999_996_666e-7);
        assert!((t.lo + 2.586_858_863_277_132_5e-23).abs() < 1e-36);
        // e to 32 digits: 2.7182818284590452353602874713527
        let e = Dd::one().exp();
        assert_eq!(e.hi, std::f64::consts::E);
        assert!((e.lo - 1.445_646_891_729_250_2e-16).abs() < 1e-30, "{e:?}");
    }
}
