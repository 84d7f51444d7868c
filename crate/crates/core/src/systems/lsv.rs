//! The Liverani–Saussol–Vaienti family `f(x) = x(1 + 2^γ x^γ)` on `[0, 1/2)`,
//! `2x - 1` on `[1/2, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default iteration cap for return times.
pub const DEFAULT_CAP: u64 = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LsvMap {
    pub gamma: f64,
}

impl LsvMap {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::domain("LsvMap::new", format!("gamma = {gamma} must be > 0")));
        }
        Ok(LsvMap { gamma })
    }

    /// Left branch `x(1 + (2x)^γ)`, with cheap paths for γ ∈ {1, 1.25, 2}.
    #[inline]
    pub fn left(&self, x: f64) -> f64 {
        if self.gamma == 1.0 {
            x + 2.0 * x * x
        } else if self.gamma == 1.25 {
            let t = 2.0 * x;
            x * (1.0 + t * t.sqrt().sqrt())
        } else if self.gamma == 2.0 {
            x + 4.0 * x * x * x
        } else {
            x * (1.0 + (2.0 * x).powf(self.gamma))
        }
    }

    /// Derivative of the left branch, `1 + (γ+1)(2x)^γ`.
    pub fn left_derivative(&self, x: f64) -> f64 {
        1.0 + (self.gamma + 1.0) * (2.0 * x).powf(self.gamma)
    }

    pub fn step(&self, x: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::domain("lsv_step", format!("x = {x} outside [0,1]")));
        }
        Ok(self.step_unchecked(x))
    }

    #[inline]
    pub fn step_unchecked(&self, x: f64) -> f64 {
        if x < 0.5 {
            self.left(x)
        } else {
            2.0 * x - 1.0
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        if x < 0.5 {
            self.left_derivative(x)
        } else {
            2.0
        }
    }

    /// Inverse of the left branch on `[0, 1]`: the unique `x ∈ [0, 1/2]` with
    /// `left(x) = t`. Closed form at γ = 1; otherwise Newton from `x = t`,
    /// which decreases monotonically to the root because the branch is convex.
    pub fn left_preimage(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        if self.gamma == 1.0 {
            // 2x² + x - t = 0, written to avoid cancellation for small t.
            return 2.0 * t / (1.0 + (1.0 + 8.0 * t).sqrt());
        }
        let mut x = t.min(0.5);
        for _ in 0..200 {
            let next = x - (self.left(x) - t) / self.left_derivative(x);
            if !(next < x) || next <= 0.0 {
                break;
            }
            x = next;
        }
        x
    }

    /// Exact first return to `Y = [1/2, 1]`: `(F y, φ(y))`.
    pub fn induced_step(&self, y: f64, cap: u64) -> Result<(f64, u64)> {
        if !(0.5..=1.0).contains(&y) {
            return Err(Error::domain("return_time", format!("y = {y} not in Y")));
        }
        let mut x = 2.0 * y - 1.0;
        let mut n = 1u64;
        while x < 0.5 {
            if n >= cap {
                return Err(Error::Overflow { op: "return_time", cap });
            }
            x = self.left(x);
            n += 1;
        }
        Ok((x, n))
    }

    pub fn return_time(&self, y: f64, cap: u64) -> Result<u64> {
        self.induced_step(y, cap).map(|r| r.1)
    }

    /// Preimage boundaries `z_0 = 1/2`, `z_n = left_preimage(z_{n-1})`.
    pub fn boundaries(&self, count: usize) -> Vec<f64> {
        let mut z = Vec::with_capacity(count + 1);
        z.push(0.5);
        for i in 0..count {
            z.push(self.left_preimage(z[i]));
        }
        z
    }

    /// Inverse of `F` on the cylinder `{φ = c}`: `y = (1 + f_L^{-(c-1)}(t))/2`.
    pub fn inverse_branch(&self, c: usize, t: f64) -> f64 {
        let mut x = t;
        for _ in 1..c {
            x = self.left_preimage(x);
        }
        0.5 * (1.0 + x)
    }

    /// Tail exponent `β = 1/γ` (capped at 1).
    pub fn beta(&self) -> f64 {
        (1.0 / self.gamma).min(1.0)
    }
}

/// `{φ = c}` intervals of `Y` for `c = 1..=count`, plus the residual deep
/// interval `[1/2, y_count)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnPartition {
    /// `edges[c-1]` is the left end of `{φ = c}`; decreasing, `edges[0] = 3/4`.
    pub edges: Vec<f64>,
    /// Underlying `z_n`, `n = 0..=count`.
    pub z: Vec<f64>,
}

impl ReturnPartition {
    pub fn new(map: &LsvMap, count: usize) -> Self {
        let z = map.boundaries(count);
        let edges = z[..count].iter().map(|&zn| 0.5 * (1.0 + zn)).collect();
        ReturnPartition { edges, z }
    }

    pub fn count(&self) -> usize {
        self.edges.len()
    }

    /// Interval `[lo, hi)` of `{φ = c}`.
    pub fn interval(&self, c: usize) -> (f64, f64) {
        let lo = self.edges[c - 1];
        let hi = if c == 1 { 1.0 } else { self.edges[c - 2] };
        (lo, hi)
    }

    /// `φ(y)` when `y` lies in a tabulated cylinder, `None` when deeper.
    pub fn lookup(&self, y: f64) -> Option<usize> {
        // edges decrease; first index with edges[i] <= y.
        let i = self.edges.partition_point(|&e| e > y);
        (i < self.edges.len()).then_some(i + 1)
    }

    /// Lebesgue measure of `{φ = c}`.
    pub fn length(&self, c: usize) -> f64 {
        let (lo, hi) = self.interval(c);
        hi - lo
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn step_examples() {
        let m = LsvMap::new(1.0).unwrap();
        assert_relative_eq!(m.step(0.25).unwrap(), 0.375);
        assert_eq!(m.step(0.5).unwrap(), 0.0);
        assert_eq!(m.step(0.75).unwrap(), 0.5);
        assert!(m.step(1.5).is_err());
        assert!(m.step(-0.1).is_err());
        assert!(LsvMap::new(0.0).is_err());
    }

    #[test]
    fn return_time_examples() {
        let m = LsvMap::new(1.0).unwrap();
        assert_eq!(m.return_time(0.8, DEFAULT_CAP).unwrap(), 1);
        assert_eq!(m.return_time(0.75, DEFAULT_CAP).unwrap(), 1);
        assert_eq!(m.return_time(0.7, DEFAULT_CAP).unwrap(), 2);
        let (fy, n) = m.induced_step(0.8, DEFAULT_CAP).unwrap();
        assert_relative_eq!(fy, 0.6, max_relative = 1e-15);
        assert_eq!(n, 1);
        let (fy, n) = m.induced_step(0.7, DEFAULT_CAP).unwrap();
        assert_relative_eq!(fy, 0.72, max_relative = 1e-14);
        assert_eq!(n, 2);
        assert!(matches!(
            m.return_time(0.5, 1000),
            Err(Error::Overflow { cap: 1000, .. })
        ));
    }

    #[test]
    fn partition_matches_iteration() {
        for gamma in [1.0, 1.25, 2.0] {
            let m = LsvMap::new(gamma).unwrap();
            let part = ReturnPartition::new(&m, 500);
            for c in [1usize, 2, 3, 10, 77, 500] {
                let (lo, hi) = part.interval(c);
                for t in [0.001, 0.5, 0.999] {
                    let y = lo + t * (hi - lo);
                    assert_eq!(m.return_time(y, DEFAULT_CAP).unwrap() as usize, c);
                    assert_eq!(part.lookup(y), Some(c));
                }
            }
            assert_eq!(part.lookup(0.5 + 0.5 * part.z[500] * 0.5), None);
        }
    }

    #[test]
    fn inverse_branch_inverts_induced_map() {
        let m = LsvMap::new(1.25).unwrap();
        for c in [1usize, 2, 5, 40] {
            for t in [0.5001, 0.61, 0.9, 0.999] {
                let y = m.inverse_branch(c, t);
                let (fy, n) = m.induced_step(y, DEFAULT_CAP).unwrap();
                assert_eq!(n as usize, c);
                assert!((fy - t).abs() < 1e-12, "c={c} t={t}: {fy}");
            }
        }
    }

    proptest! {
        #[test]
        fn left_preimage_inverts(gamma in 0.3f64..3.0, t in 0.0f64..1.0) {
            let m = LsvMap::new(gamma).unwrap();
            let x = m.left_preimage(t);
            prop_assert!((0.0..=0.5).contains(&x));
            prop_assert!((m.left(x) - t).abs() <= 1e-14 * t.max(1e-300) + 1e-300);
        }

        #[test]
        fn step_stays_in_unit_interval(gamma in 0.1f64..4.0, x in 0.0f64..=1.0) {
            let y = LsvMap::new(gamma).unwrap().step(x).unwrap();
            prop_assert!((0.0..=1.0).contains(&y));
        }
    }
}
