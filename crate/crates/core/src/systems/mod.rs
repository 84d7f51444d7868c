//! Concrete systems: the LSV family, skew products over it, and an i.i.d.
//! return-time fixture, with their first-return structure.

pub mod lsv;
pub mod partition;
pub mod sampling;
pub mod skew;
pub mod synthetic;

use std::io::Write;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Exec;
use crate::regvar::{linear_slope, log_spaced};

pub use lsv::{LsvMap, ReturnPartition, DEFAULT_CAP};
pub use partition::CylinderPartition;
pub use sampling::{rng_for, uniform, InducedOrbit, InducedSample};
pub use skew::{FiberMap, SkewProduct};
pub use synthetic::SyntheticSystem;

/// A point of the phase space; `x2` is ignored by one-dimensional systems.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x1: f64,
    pub x2: f64,
}

impl Point {
    pub fn new(x1: f64, x2: f64) -> Self {
        Point { x1, x2 }
    }

    pub fn base(x1: f64) -> Self {
        Point { x1, x2: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DynSystem {
    Lsv(LsvMap),
    Skew(SkewProduct),
    Synthetic(SyntheticSystem),
}

impl DynSystem {
    pub fn is_two_sided(&self) -> bool {
        matches!(self, DynSystem::Skew(_))
    }

    /// The base interval `Ȳ`.
    pub fn y_interval(&self) -> (f64, f64) {
        match self {
            DynSystem::Synthetic(_) => (0.0, 1.0),
            _ => (0.5, 1.0),
        }
    }

    pub fn in_y(&self, p: Point) -> bool {
        let (lo, hi) = self.y_interval();
        (lo..=hi).contains(&p.x1)
    }

    /// Quotient (base) system.
    pub fn quotient(&self) -> DynSystem {
        match self {
            DynSystem::Skew(s) => DynSystem::Lsv(s.base),
            other => other.clone(),
        }
    }

    pub fn lsv(&self) -> Option<LsvMap> {
        match self {
            DynSystem::Lsv(m) => Some(*m),
            DynSystem::Skew(s) => Some(s.base),
            DynSystem::Synthetic(_) => None,
        }
    }

    /// Declared tail exponent, `1/γ` for the LSV family.
    pub fn beta(&self) -> Option<f64> {
        self.lsv().map(|m| m.beta())
    }

    /// Lebesgue-uniform point of `Y`.
    pub fn sample_lebesgue(&self, rng: &mut ChaCha8Rng) -> Point {
        let (lo, hi) = self.y_interval();
        let x1 = uniform(rng, lo, hi);
        let x2 = if self.is_two_sided() {
            uniform(rng, 0.0, 1.0)
        } else {
            0.0
        };
        Point { x1, x2 }
    }

    /// `(F y, φ(y))`.
    pub fn induced_step(&self, y: Point, cap: u64) -> Result<(Point, u64)> {
        match self {
            DynSystem::Lsv(m) => m.induced_step(y.x1, cap).map(|(x, n)| (Point::base(x), n)),
            DynSystem::Skew(s) => s.induced_step(y.x1, y.x2, cap).map(|((a, b), n)| (Point::new(a, b), n)),
            DynSystem::Synthetic(s) => {
                let (x, n) = s.induced_step(y.x1)?;
                if n > cap {
                    return Err(Error::Overflow { op: "return_time", cap });
                }
                Ok((Point::base(x), n))
            }
        }
    }

    pub fn return_time(&self, y: Point, cap: u64) -> Result<u64> {
        self.induced_step(y, cap).map(|r| r.1)
    }

    /// One step of `f` (for the i.i.d. fixture: of the tower map, with the
    /// level carried in `level`).
    fn advance(&self, p: Point, level: &mut u64, height: &mut u64) -> Result<Point> {
        match self {
            DynSystem::Lsv(m) => Ok(Point::base(m.step(p.x1)?)),
            DynSystem::Skew(s) => s.step(p.x1, p.x2).map(|(a, b)| Point::new(a, b)),
            DynSystem::Synthetic(s) => {
                if *level == 0 {
                    *height = s.return_time(p.x1)?;
                }
                *level += 1;
                if *level == *height {
                    *level = 0;
                    return Ok(Point::base(s.induced_step(p.x1)?.0));
                }
                Ok(p)
            }
        }
    }

    /// `steps + 1` orbit points starting at `start`.
    pub fn orbit(&self, start: Point, steps: usize) -> Result<Vec<OrbitRow>> {
        let (mut level, mut height) = (0u64, 0u64);
        let mut p = start;
        let mut rows = Vec::with_capacity(steps + 1);
        for step in 0..=steps {
            let in_y = match self {
                DynSystem::Synthetic(_) => level == 0,
                _ => self.in_y(p),
            };
            rows.push(OrbitRow {
                step,
                x1: p.x1,
                x2: self.is_two_sided().then_some(p.x2),
                in_y,
            });
            if step < steps {
                p = self.advance(p, &mut level, &mut height)?;
            }
        }
        Ok(rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OrbitRow {
    pub step: usize,
    pub x1: f64,
    pub x2: Option<f64>,
    pub in_y: bool,
}

/// CSV with columns `step,x1[,x2],in_Y`.
pub fn write_orbit_csv<W: Write>(rows: &[OrbitRow], mut out: W) -> Result<()> {
    let two = rows.first().is_some_and(|r| r.x2.is_some());
    writeln!(out, "{}", if two { "step,x1,x2,in_Y" } else { "step,x1,in_Y" })?;
    for r in rows {
        match r.x2 {
            Some(x2) => writeln!(out, "{},{:e},{:e},{}", r.step, r.x1, x2, r.in_y as u8)?,
            None => writeln!(out, "{},{:e},{}", r.step, r.x1, r.in_y as u8)?,
        }
    }
    Ok(())
}

/// Options for [`empirical_tail`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailFitOptions {
    pub window: (u64, u64),
    pub burn_in: usize,
    pub cap: u64,
    pub streams: usize,
    pub exec: Exec,
}

impl Default for TailFitOptions {
    fn default() -> Self {
        TailFitOptions {
            window: (100, 10_000),
            burn_in: 10_000,
            cap: DEFAULT_CAP,
            streams: 8,
            exec: Exec::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailEstimate {
    pub samples: u64,
    /// `(n, P̂(φ > n))` at log-spaced `n` across the window.
    pub tail: Vec<(u64, f64)>,
    pub beta_hat: f64,
    pub window: (u64, u64),
    pub overflows: u64,
    /// Lower bound on `E[min(φ, cap)]`.
    pub mean_phi: f64,
}

/// Tail of `φ` under `μ|_Y` from burned-in induced orbits, and the log-log
/// slope `-β̂` over `window`. Work is split across independent streams
/// `(seed, 0..streams)` and merged in stream order.
pub fn empirical_tail(sys: &DynSystem, samples: u64, seed: u64, opts: TailFitOptions) -> Result<TailEstimate> {
    const OP: &str = "empirical_tail";
    if samples < 10_000 {
        return Err(Error::domain(OP, "at least 10^4 samples required"));
    }
    let (lo, hi) = opts.window;
    if !(1 <= lo && lo < hi) {
        return Err(Error::domain(OP, "fit window must satisfy 1 <= lo < hi"));
    }
    let streams = opts.streams.max(1);
    let per = samples / streams as u64;
    let parts: Vec<Result<(Vec<u64>, u64, f64)>> = opts.exec.map_range(streams, |s| {
        let n_here = if s + 1 == streams {
            samples - per * (streams as u64 - 1)
        } else {
            per
        };
        let mut orbit = InducedOrbit::new(sys, seed, s as u64, opts.cap, opts.burn_in)?;
        let mut counts = vec![0u64; hi as usize + 2];
        let mut sum = 0.0;
        for _ in 0..n_here {
            let smp = orbit.next_sample()?;
            counts[(smp.phi.min(hi + 1)) as usize] += 1;
            sum += smp.phi as f64;
        }
        Ok((counts, orbit.overflows, sum))
    });
    let mut counts = vec![0u64; hi as usize + 2];
    let (mut overflows, mut sum) = (0u64, 0.0);
    for part in parts {
        let (c, o, s) = part?;
        for (a, b) in counts.iter_mut().zip(c) {
            *a += b;
        }
        overflows += o;
        sum += s;
    }
    // above[n] = #{φ > n}
    let mut above = vec![0u64; hi as usize + 2];
    let mut acc = 0u64;
    for n in (0..=hi as usize + 1).rev() {
        above[n] = acc;
        acc += counts[n];
    }
    let tail: Vec<(u64, f64)> = log_spaced(lo, hi, 40)
        .into_iter()
        .map(|n| (n, above[n as usize] as f64 / samples as f64))
        .collect();
    let pts: Vec<(f64, f64)> = tail
        .iter()
        .filter(|(n, t)| above[*n as usize] >= 10 && *t > 0.0)
        .map(|&(n, t)| ((n as f64).ln(), t.ln()))
        .collect();
    let distinct = counts.iter().filter(|&&c| c > 0).count();
    if pts.len() < 5 || distinct < 5 {
        return Err(Error::Fit {
            op: OP,
            msg: format!("{} usable tail points, {distinct} distinct return times", pts.len()),
        });
    }
    Ok(TailEstimate {
        samples,
        tail,
        beta_hat: -linear_slope(&pts),
        window: opts.window,
        overflows,
        mean_phi: sum / samples as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperbolicityReport {
    pub gamma0: f64,
    pub pairs: usize,
    /// `sup over pairs of d(fⁿy, fⁿy′)/γ₀ⁿ`, index `n = 0..=n_max`.
    pub sup_ratio: Vec<f64>,
    /// `max_n sup_ratio / min_n sup_ratio - 1`.
    pub spread: f64,
    /// Stable disks map into stable disks under the induced map.
    pub disks_invariant: bool,
}

/// Contraction along stable fibres `{x₁} × [0, 1]` over `n ≤ n_max` steps of
/// `f`. Distances are propagated through the closed-form difference
/// quotient of the fibre map, so exact halving is reproduced bit for bit.
pub fn check_hyperbolicity(skew: &SkewProduct, pairs: usize, n_max: usize, seed: u64) -> Result<HyperbolicityReport> {
    let mut rng = rng_for(seed, 0);
    let g0 = skew.fiber.gamma0();
    let mut sup = vec![0.0f64; n_max + 1];
    let mut disks_invariant = true;
    for i in 0..pairs {
        let x1 = uniform(&mut rng, 0.5, 1.0);
        let a = uniform(&mut rng, 0.0, 1.0);
        // The last pair is an identical pair.
        let b = if i + 1 == pairs { a } else { uniform(&mut rng, 0.0, 1.0) };
        let (mut p, mut q) = (Point::new(x1, a), Point::new(x1, b));
        let mut d = (a - b).abs();
        let mut scale = 1.0;
        sup[0] = sup[0].max(d);
        for s in sup.iter_mut().skip(1) {
            d *= skew.fiber.difference_quotient(p.x2, q.x2).abs();
            scale *= g0;
            let (p1, p2) = skew.step(p.x1, p.x2)?;
            let (q1, q2) = skew.step(q.x1, q.x2)?;
            if p1 != q1 {
                disks_invariant = false;
            }
            p = Point::new(p1, p2);
            q = Point::new(q1, q2);
            *s = s.max(d / scale);
        }
        let fy = skew.induced_step(x1, a, DEFAULT_CAP)?;
        let fz = skew.induced_step(x1, b, DEFAULT_CAP)?;
        if fy.0 .0 != fz.0 .0 {
            disks_invariant = false;
        }
    }
    let max = sup.iter().cloned().fold(f64::MIN, f64::max);
    let min = sup.iter().cloned().fold(f64::MAX, f64::min);
    Ok(HyperbolicityReport {
        gamma0: g0,
        pairs,
        spread: if min > 0.0 { max / min - 1.0 } else { f64::INFINITY },
        sup_ratio: sup,
        disks_invariant,
    })
}

/// `max_{0≤j<φ} |f^j y - f^j y′| / |F y - F y′|` over sampled pairs from the
/// same return-time cylinder.
pub fn expansion_spot_check(map: &LsvMap, pairs: usize, seed: u64) -> Result<f64> {
    let part = ReturnPartition::new(map, 400);
    let mut rng = rng_for(seed, 1);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let c = 1 + (uniform(&mut rng, 0.0, 1.0) * 12.0) as usize;
        let (lo, hi) = part.interval(c);
        let y = uniform(&mut rng, lo, hi);
        let z = uniform(&mut rng, lo, hi);
        let (mut a, mut b) = (y, z);
        let (fy, _) = map.induced_step(y, DEFAULT_CAP)?;
        let (fz, _) = map.induced_step(z, DEFAULT_CAP)?;
        let base = (fy - fz).abs();
        if base == 0.0 {
            continue;
        }
        for _ in 0..c {
            worst = worst.max((a - b).abs() / base);
            a = map.step_unchecked(a);
            b = map.step_unchecked(b);
        }
    }
    Ok(worst)
}
