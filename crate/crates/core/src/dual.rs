//! Forward-mode dual numbers and the scalar abstraction shared by the
//! generic LSTM step.
//!
//! The generic step lets the same roll-out code run on plain `f64` values and
//! on `Dual` values, which carry one directional derivative alongside the
//! value. A stop-gradient is then just "keep the value, zero the tangent".

use std::ops::{Add, Mul, Neg, Sub};

/// Numeric type the generic LSTM step can run on.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
    + std::fmt::Debug
{
    fn constant(x: f64) -> Self;
    /// The quantity being differentiated against (unit tangent for duals).
    fn variable(x: f64) -> Self;
    fn value(self) -> f64;
    fn tanh(self) -> Self;
    fn sigmoid(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    /// Same value, no derivative.
    fn detach(self) -> Self;
}

impl Scalar for f64 {
    fn constant(x: f64) -> Self {
        x
    }
    fn variable(x: f64) -> Self {
        x
    }
    fn value(self) -> f64 {
        self
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sigmoid(self) -> Self {
        crate::numerics::sigmoid_scalar(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn detach(self) -> Self {
        self
    }
}

/// `re + du·ε` with `ε² = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dual {
    pub re: f64,
    pub du: f64,
}

impl Dual {
    pub fn new(re: f64, du: f64) -> Self {
        Dual { re, du }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.du + o.du)
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.du - o.du)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.du + self.du * o.re)
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.du)
    }
}

impl Scalar for Dual {
    fn constant(x: f64) -> Self {
        Dual::new(x, 0.0)
    }
    fn variable(x: f64) -> Self {
        Dual::new(x, 1.0)
    }
    fn value(self) -> f64 {
        self.re
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual::new(t, self.du * (1.0 - t * t))
    }
    fn sigmoid(self) -> Self {
        let s = crate::numerics::sigmoid_scalar(self.re);
        Dual::new(s, self.du * s * (1.0 - s))
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, self.du * e)
    }
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.du / self.re)
    }
    fn detach(self) -> Self {
        Dual::new(self.re, 0.0)
    }
}
