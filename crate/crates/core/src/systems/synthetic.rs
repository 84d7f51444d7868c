//! Full-branch affine map on `[0, 1]` whose return times are i.i.d. with a
//! prescribed law: `{φ = n}` is an interval of length `p_n` mapped affinely
//! onto `[0, 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::renewal::ReturnDistribution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSystem {
    pub dist: ReturnDistribution,
    /// `cum[n] = p_1 + … + p_n`, `cum[0] = 0`.
    cum: Vec<f64>,
}

impl SyntheticSystem {
    pub fn new(dist: ReturnDistribution) -> Self {
        let mut cum = Vec::with_capacity(dist.len() + 1);
        let mut acc = 0.0;
        cum.push(0.0);
        for &p in &dist.p {
            acc += p;
            cum.push(acc);
        }
        SyntheticSystem { dist, cum }
    }

    /// Truncation length `N` of the law.
    pub fn max_height(&self) -> usize {
        self.dist.len()
    }

    /// `φ(y)`; points in the deficit region `[Σp, 1]` return after the cap.
    pub fn return_time(&self, y: f64) -> Result<u64> {
        if !(0.0..=1.0).contains(&y) {
            return Err(Error::domain("return_time", format!("y = {y} not in Y")));
        }
        let i = self.cum.partition_point(|&c| c <= y);
        if i >= self.cum.len() {
            return Err(Error::Overflow {
                op: "return_time",
                cap: self.max_height() as u64,
            });
        }
        Ok(i as u64)
    }

    pub fn induced_step(&self, y: f64) -> Result<(f64, u64)> {
        let n = self.return_time(y)?;
        let (lo, p) = (self.cum[n as usize - 1], self.dist.p[n as usize - 1]);
        Ok((((y - lo) / p).clamp(0.0, 1.0 - f64::EPSILON / 2.0), n))
    }

    /// Cylinder `{φ = n}`.
    pub fn interval(&self, n: usize) -> (f64, f64) {
        (self.cum[n - 1], self.cum[n])
    }

    pub fn inverse_branch(&self, n: usize, t: f64) -> f64 {
        self.cum[n - 1] + t * self.dist.p[n - 1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cylinders_have_prescribed_mass() {
        let d = ReturnDistribution::new(vec![0.5, 0.25, 0.125]).unwrap();
        let s = SyntheticSystem::new(d);
        assert_eq!(s.return_time(0.1).unwrap(), 1);
        assert_eq!(s.return_time(0.5).unwrap(), 2);
        assert_eq!(s.return_time(0.8).unwrap(), 3);
        assert!(matches!(s.return_time(0.9), Err(Error::Overflow { .. })));
        let (fy, n) = s.induced_step(0.625).unwrap();
        assert_eq!((fy, n), (0.5, 2));
        assert_eq!(s.inverse_branch(2, 0.5), 0.625);
    }
}
