//! Invertible skew products `f(x₁, x₂) = (f̄(x₁), g(x₁, x₂))` over the LSV map.

use serde::{Deserialize, Serialize};

use super::lsv::LsvMap;
use crate::error::{Error, Result};

/// Fiber maps. Both branches are increasing in `x₂`, map `[0, 1]` into
/// `[0, 1/2]` (left) and `[1/2, 1]` (right), and contract by at most `γ₀`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FiberMap {
    /// `x₂/2` on the left branch, `(x₂ + 1)/2` on the right.
    Halving,
    /// `(x₂ + κx₂(1-x₂))/2` and `(1 + x₂ + κx₂(1-x₂))/2`, `|κ| < 1`.
    Quadratic { kappa: f64 },
}

impl FiberMap {
    pub fn validate(&self) -> Result<()> {
        if let FiberMap::Quadratic { kappa } = self {
            if !(kappa.abs() < 1.0) {
                return Err(Error::domain(
                    "FiberMap",
                    format!("|kappa| = {} must be < 1", kappa.abs()),
                ));
            }
        }
        Ok(())
    }

    /// Certified bound on `|∂g/∂x₂|`.
    pub fn gamma0(&self) -> f64 {
        match self {
            FiberMap::Halving => 0.5,
            FiberMap::Quadratic { kappa } => 0.5 * (1.0 + kappa.abs()),
        }
    }

    #[inline]
    pub fn left(&self, x2: f64) -> f64 {
        match self {
            FiberMap::Halving => 0.5 * x2,
            FiberMap::Quadratic { kappa } => 0.5 * (x2 + kappa * x2 * (1.0 - x2)),
        }
    }

    #[inline]
    pub fn right(&self, x2: f64) -> f64 {
        match self {
            FiberMap::Halving => 0.5 * (x2 + 1.0),
            FiberMap::Quadratic { kappa } => 0.5 * (1.0 + x2 + kappa * x2 * (1.0 - x2)),
        }
    }

    pub fn apply(&self, x1: f64, x2: f64) -> f64 {
        if x1 < 0.5 {
            self.left(x2)
        } else {
            self.right(x2)
        }
    }

    /// `(g(a) - g(b)) / (a - b)` in closed form; both branches share it.
    pub fn difference_quotient(&self, a: f64, b: f64) -> f64 {
        match self {
            FiberMap::Halving => 0.5,
            FiberMap::Quadratic { kappa } => 0.5 * (1.0 + kappa * (1.0 - a - b)),
        }
    }

    /// `∂g/∂x₂`.
    pub fn derivative(&self, x2: f64) -> f64 {
        self.difference_quotient(x2, x2)
    }

    /// Fiber part of the return from a column of height `c`:
    /// `g_L^{c-1} ∘ g_R`.
    pub fn column_return(&self, c: u64, x2: f64) -> f64 {
        let x = self.right(x2);
        match self {
            FiberMap::Halving => {
                if c > 1100 {
                    0.0
                } else {
                    x * 0.5f64.powi((c - 1) as i32)
                }
            }
            FiberMap::Quadratic { .. } => {
                let mut x = x;
                for _ in 1..c {
                    if x == 0.0 {
                        break;
                    }
                    x = self.left(x);
                }
                x
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkewProduct {
    pub base: LsvMap,
    pub fiber: FiberMap,
}

impl SkewProduct {
    pub fn new(base: LsvMap, fiber: FiberMap) -> Result<Self> {
        fiber.validate()?;
        Ok(SkewProduct { base, fiber })
    }

    pub fn step(&self, x1: f64, x2: f64) -> Result<(f64, f64)> {
        if !(0.0..=1.0).contains(&x2) {
            return Err(Error::domain("skew_step", format!("x2 = {x2} outside [0,1]")));
        }
        Ok((self.base.step(x1)?, self.fiber.apply(x1, x2)))
    }

    /// `F(y) = (F̄(y₁), G(y₁, y₂))` and `φ(y)`.
    pub fn induced_step(&self, y1: f64, y2: f64, cap: u64) -> Result<((f64, f64), u64)> {
        let (fy1, n) = self.base.induced_step(y1, cap)?;
        Ok(((fy1, self.fiber.column_return(n, y2)), n))
    }

    /// Sampled `sup |∂G/∂y₂|` for returns from columns `1..=max_height`.
    pub fn sampled_fiber_contraction(&self, grid: usize, max_height: u64) -> f64 {
        let mut sup: f64 = 0.0;
        for c in 1..=max_height {
            for i in 0..grid {
                let a = i as f64 / grid as f64;
                let b = (i + 1) as f64 / grid as f64;
                let d = (self.fiber.column_return(c, b) - self.fiber.column_return(c, a)) / (b - a);
                sup = sup.max(d.abs());
            }
        }
        sup
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn skew(gamma: f64, fiber: FiberMap) -> SkewProduct {
        SkewProduct::new(LsvMap::new(gamma).unwrap(), fiber).unwrap()
    }

    #[test]
    fn induced_step_example() {
        let s = skew(1.0, FiberMap::Halving);
        let ((a, b), n) = s.induced_step(0.75, 0.2, 1000).unwrap();
        assert_eq!((a, b, n), (0.5, 0.6, 1));
    }

    #[test]
    fn column_return_matches_iteration() {
        for fiber in [FiberMap::Halving, FiberMap::Quadratic { kappa: 0.6 }] {
            let s = skew(1.25, fiber);
            for y1 in [0.52, 0.6, 0.7, 0.8, 0.99] {
                for y2 in [0.0, 0.3, 1.0] {
                    let ((fy1, fy2), n) = s.induced_step(y1, y2, 1_000_000).unwrap();
                    let (mut x1, mut x2) = (y1, y2);
                    for _ in 0..n {
                        (x1, x2) = s.step(x1, x2).unwrap();
                    }
                    assert_eq!(x1, fy1);
                    assert!((x2 - fy2).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn contraction_bound_holds() {
        for kappa in [-0.9, -0.3, 0.0, 0.5, 0.95] {
            let s = skew(1.25, FiberMap::Quadratic { kappa });
            assert!(s.sampled_fiber_contraction(200, 6) <= s.fiber.gamma0() + 1e-12);
        }
        assert!(FiberMap::Quadratic { kappa: 1.0 }.validate().is_err());
    }

    proptest! {
        #[test]
        fn projects_to_base(gamma in 0.5f64..3.0, x1 in 0.0f64..=1.0, x2 in 0.0f64..=1.0,
                            kappa in -0.99f64..0.99) {
            let s = skew(gamma, FiberMap::Quadratic { kappa });
            let (a, b) = s.step(x1, x2).unwrap();
            prop_assert_eq!(a, s.base.step(x1).unwrap());
            prop_assert!((0.0..=1.0).contains(&b));
        }

        #[test]
        fn difference_quotient_exact(a in 0.0f64..=1.0, b in 0.0f64..=1.0, kappa in -0.99f64..0.99) {
            let f = FiberMap::Quadratic { kappa };
            prop_assume!((a - b).abs() > 1e-6);
            let q = (f.left(a) - f.left(b)) / (a - b);
            prop_assert!((q - f.difference_quotient(a, b)).abs() < 1e-9);
            let q = (f.right(a) - f.right(b)) / (a - b);
            prop_assert!((q - f.difference_quotient(a, b)).abs() < 1e-9);
        }
    }
}
