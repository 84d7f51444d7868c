//! Return-time cylinders of the quotient induced map and the symbolic metric.

use serde::Serialize;

use super::{DynSystem, LsvMap, Point, ReturnPartition, SyntheticSystem, DEFAULT_CAP};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
enum Base {
    Lsv(LsvMap, ReturnPartition),
    Synthetic(SyntheticSystem),
}

/// Depth-1 cylinders `{φ = c}` of `Ȳ`, tabulated for `c ≤ count`, with
/// deeper cylinders reached through inverse branches.
#[derive(Debug, Clone, PartialEq)]
pub struct CylinderPartition {
    base: Base,
    /// `log(dμ̄/dμ̄∘F̄)` per depth-1 cylinder, once a density is attached.
    pub potential: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Separation {
    pub s: u64,
    pub capped: bool,
}

impl CylinderPartition {
    pub fn new(sys: &DynSystem, count: usize) -> Result<Self> {
        let base = match sys.quotient() {
            DynSystem::Lsv(m) => Base::Lsv(m, ReturnPartition::new(&m, count)),
            DynSystem::Synthetic(s) => Base::Synthetic(s),
            DynSystem::Skew(_) => unreachable!("quotient is one-sided"),
        };
        Ok(CylinderPartition { base, potential: None })
    }

    pub fn count(&self) -> usize {
        match &self.base {
            Base::Lsv(_, p) => p.count(),
            Base::Synthetic(s) => s.max_height(),
        }
    }

    pub fn y_interval(&self) -> (f64, f64) {
        match &self.base {
            Base::Lsv(..) => (0.5, 1.0),
            Base::Synthetic(_) => (0.0, 1.0),
        }
    }

    /// Symbol (return time) of `y`.
    pub fn symbol(&self, y: f64) -> Result<u64> {
        match &self.base {
            Base::Lsv(m, p) => match p.lookup(y) {
                Some(c) => Ok(c as u64),
                None => m.return_time(y, DEFAULT_CAP),
            },
            Base::Synthetic(s) => s.return_time(y),
        }
    }

    /// `(F̄ y, φ(y))`.
    pub fn step(&self, y: f64) -> Result<(f64, u64)> {
        match &self.base {
            Base::Lsv(m, _) => m.induced_step(y, DEFAULT_CAP),
            Base::Synthetic(s) => s.induced_step(y),
        }
    }

    pub fn interval(&self, c: usize) -> Result<(f64, f64)> {
        if c == 0 || c > self.count() {
            return Err(Error::Range {
                op: "cylinder",
                index: c,
                max: self.count(),
            });
        }
        Ok(match &self.base {
            Base::Lsv(_, p) => p.interval(c),
            Base::Synthetic(s) => s.interval(c),
        })
    }

    /// Inverse of `F̄` on `{φ = c}`.
    pub fn inverse_branch(&self, c: usize, t: f64) -> f64 {
        match &self.base {
            Base::Lsv(m, _) => m.inverse_branch(c, t),
            Base::Synthetic(s) => s.inverse_branch(c, t),
        }
    }

    /// Interval `[c₀] ∩ F̄⁻¹[c₁] ∩ … ∩ F̄^{-(m-1)}[c_{m-1}]`.
    pub fn cylinder(&self, word: &[usize]) -> Result<(f64, f64)> {
        let Some((&last, rest)) = word.split_last() else {
            return Ok(self.y_interval());
        };
        let (mut lo, mut hi) = self.interval(last)?;
        for &c in rest.iter().rev() {
            self.interval(c)?;
            let a = self.inverse_branch(c, lo);
            let b = self.inverse_branch(c, hi);
            (lo, hi) = (a.min(b), a.max(b));
        }
        Ok((lo, hi))
    }

    /// Streams `F̄`-preimages of `targets` on cylinders `c = 1..=count`, in
    /// offset coordinates `u = y - inf Ȳ` (which keeps deep cylinders near the
    /// indifferent point at full relative precision). `targets` are offsets
    /// too and must be increasing; each row is increasing.
    pub fn for_each_preimage_row(&self, targets: &[f64], count: usize, mut f: impl FnMut(usize, &[f64])) {
        let mut row = vec![0.0; targets.len()];
        match &self.base {
            Base::Lsv(m, _) => {
                // u = x/2 with x = f_L^{-(c-1)}(t), t = 1/2 + u_target.
                let mut x: Vec<f64> = targets.iter().map(|&u| 0.5 + u).collect();
                for c in 1..=count {
                    if c > 1 {
                        for xi in x.iter_mut() {
                            *xi = m.left_preimage(*xi);
                        }
                    }
                    for (r, &xi) in row.iter_mut().zip(&x) {
                        *r = 0.5 * xi;
                    }
                    f(c, &row);
                }
            }
            Base::Synthetic(s) => {
                for c in 1..=count.min(s.max_height()) {
                    for (r, &t) in row.iter_mut().zip(targets) {
                        *r = s.inverse_branch(c, t);
                    }
                    f(c, &row);
                }
            }
        }
    }

    /// Points of `Ȳ` (as offsets) deeper than cylinder `count`.
    pub fn residual(&self, count: usize) -> (f64, f64) {
        match &self.base {
            Base::Lsv(m, _) => {
                let z = if count <= self.count() {
                    match &self.base {
                        Base::Lsv(_, p) => p.z[count - 1],
                        _ => unreachable!(),
                    }
                } else {
                    m.boundaries(count)[count - 1]
                };
                (0.0, 0.5 * z)
            }
            Base::Synthetic(s) => {
                let n = count.min(s.max_height());
                (s.interval(n).1, 1.0)
            }
        }
    }

    /// Measure of `Ȳ` not covered by the tabulated depth-1 cylinders.
    pub fn uncovered(&self) -> f64 {
        let (lo, hi) = self.y_interval();
        let covered: f64 = (1..=self.count())
            .map(|c| self.interval(c).map(|(a, b)| b - a).unwrap_or(0.0))
            .sum();
        ((hi - lo) - covered).max(0.0)
    }

    /// Least `n ≥ 0` with `F̄ⁿx`, `F̄ⁿy` in different cylinders, up to `cap`.
    pub fn separation_time(&self, x: Point, y: Point, cap: u64) -> Result<Separation> {
        let (mut a, mut b) = (x.x1, y.x1);
        for n in 0..cap {
            if a == b {
                return Ok(Separation { s: cap, capped: true });
            }
            let (fa, ca) = self.step(a)?;
            let (fb, cb) = self.step(b)?;
            if ca != cb {
                return Ok(Separation { s: n, capped: false });
            }
            (a, b) = (fa, fb);
        }
        Ok(Separation { s: cap, capped: true })
    }

    /// `θ^{s(x,y)}`; zero when the cap is hit.
    pub fn d_theta(&self, theta: f64, x: Point, y: Point, cap: u64) -> Result<f64> {
        let sep = self.separation_time(x, y, cap)?;
        Ok(if sep.capped { 0.0 } else { theta.powi(sep.s as i32) })
    }

    /// Attach `log(h(y)/h(F̄y)) - log|F̄′|` sampled at cylinder midpoints,
    /// where `h` is the invariant density of `F̄`.
    pub fn attach_potential(&mut self, density: impl Fn(f64) -> f64) -> Result<()> {
        let mut pot = Vec::with_capacity(self.count());
        for c in 1..=self.count() {
            let (lo, hi) = self.interval(c)?;
            let y = 0.5 * (lo + hi);
            let (fy, _) = self.step(y)?;
            // |F̄′| on the cylinder is its image length over its own length.
            let (ilo, ihi) = self.y_interval();
            let jac = (ihi - ilo) / (hi - lo);
            pot.push((density(y) / density(fy)).ln() - jac.ln());
        }
        self.potential = Some(pot);
        Ok(())
    }
}
