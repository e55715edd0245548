//! Forward-mode dual numbers with a single tangent.

use std::ops::{Add, Mul, Neg, Sub};

/// Arithmetic needed by the toy models, over plain and dual numbers.
pub trait Scalar: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self> {
    fn constant(x: f64) -> Self;
    fn tanh(self) -> Self;
    fn value(self) -> f64;
}

impl Scalar for f64 {
    fn constant(x: f64) -> Self {
        x
    }

    fn tanh(self) -> Self {
        f64::tanh(self)
    }

    fn value(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub eps: f64,
}

impl Dual {
    pub fn new(re: f64, eps: f64) -> Self {
        Self { re, eps }
    }
}

impl Add for Dual {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Dual::new(self.re + o.re, self.eps + o.eps)
    }
}

impl Sub for Dual {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Dual::new(self.re - o.re, self.eps - o.eps)
    }
}

impl Mul for Dual {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Dual::new(self.re * o.re, self.re * o.eps + self.eps * o.re)
    }
}

impl Neg for Dual {
    type Output = Self;
    fn neg(self) -> Self {
        Dual::new(-self.re, -self.eps)
    }
}

impl Scalar for Dual {
    fn constant(x: f64) -> Self {
        Dual::new(x, 0.0)
    }

    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual::new(t, self.eps * (1.0 - t * t))
    }

    fn value(self) -> f64 {
        self.re
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_and_tanh_rules() {
        let x = Dual::new(0.3, 1.0);
        let y = x * x * x - x;
        assert!((y.eps - (3.0 * 0.09 - 1.0)).abs() < 1e-15);
        let t = x.tanh();
        let h = 1e-6;
        let fd = ((0.3f64 + h).tanh() - (0.3f64 - h).tanh()) / (2.0 * h);
        assert!((t.eps - fd).abs() < 1e-9);
    }
}
