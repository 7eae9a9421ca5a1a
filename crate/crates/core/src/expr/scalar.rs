use std::ops::{Add, Div, Mul, Neg, Sub};

use twofloat::TwoFloat;

/// Number types the expression evaluator can run on.
///
/// `f64` is the working precision everywhere. `TwoFloat` (double-double) is
/// used where a difference of two nearly equal evaluations is needed, e.g.
/// `V(x + dx) - V(x)` with `dx` far below the ulp of `x`.
pub trait Scalar:
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
    fn abs(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn powf(self, p: Self) -> Self;

    fn is_zero(self) -> bool {
        self.to_f64() == 0.0
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    fn powf(self, p: Self) -> Self {
        f64::powf(self, p)
    }
}

impl Scalar for TwoFloat {
    fn from_f64(v: f64) -> Self {
        TwoFloat::from(v)
    }
    fn to_f64(self) -> f64 {
        self.hi() + self.lo()
    }
    fn abs(self) -> Self {
        TwoFloat::abs(&self)
    }
    fn exp(self) -> Self {
        TwoFloat::exp(self)
    }
    fn ln(self) -> Self {
        TwoFloat::ln(self)
    }
    fn powi(self, n: i32) -> Self {
        TwoFloat::powi(self, n)
    }
    fn powf(self, p: Self) -> Self {
        TwoFloat::powf(self, p)
    }
    fn is_zero(self) -> bool {
        self.hi() == 0.0 && self.lo() == 0.0
    }
}
