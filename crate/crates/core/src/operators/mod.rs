//! Discretised transfer operators on the quotient tower: `L`, `T_n`, `A_j`,
//! `P`, `U_n`, the renewal decomposition and its error terms.

pub mod eterms;
pub mod markov;
pub mod renewal_ops;
pub mod ulam;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regvar::TailLaw;
use crate::renewal::estimate_beta;
use crate::systems::{CylinderPartition, DynSystem};

pub use eterms::{e_term_diagnostics, ETermReport, EnvelopeFit};
pub use markov::{BaseOrbit, CellLayout, MarkovTower};
pub use renewal_ops::{
    a_j_apply, convolution_check, level_mass_check, t_n, u_n_minus_p_norm, ConvolutionReport, Fault, LevelMassReport,
    TestFamily, UnNorm,
};
pub use ulam::{ulam_density, UlamDensity, UlamOptions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BundleOptions {
    /// Sub-intervals of `Ȳ` carrying the Markov memory of the return.
    pub ports: usize,
    /// Ulam bins.
    pub bins: usize,
    /// Cylinders resolved in the tower; deeper ones are lumped.
    pub depth: usize,
    /// Cylinders resolved in the Ulam matrix.
    pub ulam_cylinders: usize,
    /// Tail exponent used for the tabulated law; defaults to `1/γ` or the
    /// fitted value.
    pub beta: Option<f64>,
}

impl Default for BundleOptions {
    fn default() -> Self {
        BundleOptions {
            ports: 16,
            bins: 1024,
            depth: 20_000,
            ulam_cylinders: 4096,
            beta: None,
        }
    }
}

/// Everything needed to run operator diagnostics on one system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorBundle {
    pub density: UlamDensity,
    pub tower: MarkovTower,
    pub law: TailLaw,
    /// `inf_a μ̄(F̄ a)` over the resolved cylinders.
    pub big_images: f64,
    /// `sup |L 1 - 1|` on the model.
    pub constants_defect: f64,
}

pub fn build_bundle(sys: &DynSystem, opts: BundleOptions) -> Result<OperatorBundle> {
    const OP: &str = "build_bundle";
    let part = CylinderPartition::new(sys, opts.ulam_cylinders.clamp(1, 4096))?;
    let ulam = UlamOptions {
        bins: opts.bins,
        cylinders: opts.ulam_cylinders,
        ..Default::default()
    };
    let density = ulam_density(&part, ulam)?;
    let tower = match sys.quotient() {
        DynSystem::Synthetic(s) => MarkovTower::from_distribution(&s.dist)?,
        _ => MarkovTower::from_density(&part, &density, opts.ports, opts.depth)?,
    };
    let beta = match (opts.beta, sys.beta()) {
        (Some(b), _) | (None, Some(b)) => b,
        (None, None) => {
            let dist = tower.return_distribution()?;
            let hi = dist.len().saturating_sub(1).max(20);
            estimate_beta(&dist, (hi / 100).max(10), hi)
                .ok_or_else(|| Error::Fit {
                    op: OP,
                    msg: "cannot estimate the tail exponent".into(),
                })?
                .clamp(1e-3, 1.0)
        }
    };
    let law = tower.tail_law(beta)?;
    // Full branches: every cylinder maps onto Ȳ.
    let big_images = density.measure(0.0, density.len());
    let layout_defect = constants_defect(&tower);
    Ok(OperatorBundle {
        density,
        tower,
        law,
        big_images,
        constants_defect: layout_defect,
    })
}

fn constants_defect(t: &MarkovTower) -> f64 {
    let mut arrive = vec![0.0; t.ports];
    for a in 0..t.len() {
        for (x, &o) in arrive.iter_mut().zip(t.out_row(a)) {
            *x += t.mass[a] * o;
        }
    }
    arrive
        .iter()
        .zip(&t.pi)
        .filter(|(_, &pi)| pi > 0.0)
        .map(|(d, pi)| (d / pi - 1.0).abs())
        .fold(0.0, f64::max)
}

impl OperatorBundle {
    /// Atom averages `∫_a v dμ̄ / μ̄(a)` of a function of `y` (offset
    /// coordinates are handled internally), by midpoint quadrature on `nodes`
    /// points per atom.
    pub fn project(&self, part: &CylinderPartition, v: impl Fn(f64) -> f64, nodes: usize) -> Result<Vec<f64>> {
        let (lo, _) = part.y_interval();
        let t = &self.tower;
        let w = self.density.len() / t.ports as f64;
        let mut out = Vec::with_capacity(t.len());
        for a in 0..t.len() {
            let c = t.height[a];
            let (ya, yb) = if Some(c) == t.lump_height {
                let (ra, rb) = part.residual(c - 1);
                (ra, rb)
            } else {
                let (ya, yb) = part.interval(c).map_err(|_| Error::Range {
                    op: "project",
                    index: c,
                    max: part.count(),
                })?;
                (ya - lo, yb - lo)
            };
            let p = t.port[a];
            let (a0, b0) = (ya.max(p as f64 * w), yb.min((p + 1) as f64 * w));
            let mut s = 0.0;
            let mut m = 0.0;
            for i in 0..nodes {
                let u = a0 + (i as f64 + 0.5) * (b0 - a0) / nodes as f64;
                let h = self.density.eval(u);
                s += h * v(lo + u);
                m += h;
            }
            out.push(if m > 0.0 { s / m } else { 0.0 });
        }
        Ok(out)
    }

    /// Spectral and normalisation diagnostics of the discretisation.
    pub fn spectrum(&self) -> SpectrumReport {
        let d = &self.density.values;
        SpectrumReport {
            bins: d.len(),
            iterations: self.density.iterations,
            residual: self.density.residual,
            unresolved: self.density.unresolved,
            density_min: d.iter().cloned().fold(f64::MAX, f64::min),
            density_max: d.iter().cloned().fold(f64::MIN, f64::max),
            big_images: self.big_images,
            constants_defect: self.constants_defect,
            atoms: self.tower.len(),
            ports: self.tower.ports,
            max_height: self.tower.max_height(),
            lumped_mass: self.tower.lump_height.map_or(0.0, |h| self.tower.tails()[h - 1]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub bins: usize,
    pub iterations: usize,
    pub residual: f64,
    pub unresolved: f64,
    pub density_min: f64,
    pub density_max: f64,
    pub big_images: f64,
    pub constants_defect: f64,
    pub atoms: usize,
    pub ports: usize,
    pub max_height: usize,
    pub lumped_mass: f64,
}
