//! Markov tower over the base: atoms are (cylinder ∩ port) cells of `Ȳ`,
//! each a column of height `φ`; on return the mass lands in port `p` with
//! probability `out(a, p)` and is redistributed over the atoms of that port
//! in proportion to their measure. For i.i.d. return times (a single port)
//! this is the quotient tower exactly.

use serde::{Deserialize, Serialize};

use super::ulam::UlamDensity;
use crate::error::{Error, Result};
use crate::regvar::{SlowlyVarying, TailLaw};
use crate::renewal::ReturnDistribution;
use crate::systems::CylinderPartition;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovTower {
    pub ports: usize,
    /// Atoms sorted by height.
    pub height: Vec<usize>,
    pub port: Vec<usize>,
    pub mass: Vec<f64>,
    /// `out[a * ports + p]`.
    pub out: Vec<f64>,
    /// `π_p = Σ_{a ∈ p} μ_a`.
    pub pi: Vec<f64>,
    /// Height of the column collecting all deeper cylinders, if any.
    pub lump_height: Option<usize>,
    /// Base mass dropped by truncation (zero for complete towers).
    pub dropped: f64,
}

impl MarkovTower {
    fn assemble(ports: usize, mut atoms: Vec<(usize, usize, f64, Vec<f64>)>, lump_height: Option<usize>) -> Self {
        atoms.sort_by_key(|a| a.0);
        let mut t = MarkovTower {
            ports,
            height: atoms.iter().map(|a| a.0).collect(),
            port: atoms.iter().map(|a| a.1).collect(),
            mass: atoms.iter().map(|a| a.2).collect(),
            out: atoms.iter().flat_map(|a| a.3.iter().copied()).collect(),
            pi: vec![0.0; ports],
            lump_height,
            dropped: 0.0,
        };
        t.refresh_pi();
        t
    }

    fn refresh_pi(&mut self) {
        self.pi = vec![0.0; self.ports];
        for (a, &p) in self.port.iter().enumerate() {
            self.pi[p] += self.mass[a];
        }
    }

    /// Single-port tower of i.i.d. returns; a deficit becomes one column of
    /// height `N + 1`.
    pub fn from_distribution(dist: &ReturnDistribution) -> Result<Self> {
        let mut atoms: Vec<_> = dist
            .p
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(i, &p)| (i + 1, 0, p, vec![1.0]))
            .collect();
        let deficit = 1.0 - dist.p.iter().sum::<f64>();
        let lump = (deficit > 0.0).then(|| {
            atoms.push((dist.len() + 1, 0, deficit, vec![1.0]));
            dist.len() + 1
        });
        if atoms.is_empty() {
            return Err(Error::domain("MarkovTower", "no return mass"));
        }
        Ok(Self::assemble(1, atoms, lump))
    }

    /// Tower of a Markov induced map with invariant density `density`,
    /// resolving cylinders `1..=depth` against `ports` equal sub-intervals of
    /// `Ȳ`; deeper cylinders are lumped into one column of height
    /// `depth + 1` that returns like cylinder `depth`.
    pub fn from_density(part: &CylinderPartition, density: &UlamDensity, ports: usize, depth: usize) -> Result<Self> {
        const OP: &str = "MarkovTower::from_density";
        if ports == 0 || depth == 0 {
            return Err(Error::domain(OP, "ports and depth must be positive"));
        }
        let len = density.len();
        let w = len / ports as f64;
        let edges: Vec<f64> = (0..=ports).map(|p| p as f64 * w).collect();
        let mut atoms: Vec<(usize, usize, f64, Vec<f64>)> = Vec::new();
        let mut last_out: Vec<Option<Vec<f64>>> = vec![None; ports];
        let mut last_row: Vec<f64> = Vec::new();
        let mut resolved = 0;
        part.for_each_preimage_row(&edges, depth, |c, row| {
            resolved = c;
            let (lo, hi) = (row[0], row[ports]);
            let p0 = ((lo / w) as usize).min(ports - 1);
            let p1 = ((hi / w) as usize).min(ports - 1);
            for p in p0..=p1 {
                let (a, b) = (lo.max(edges[p]), hi.min(edges[p + 1]));
                let m = density.measure(a, b);
                if !(m > 0.0) {
                    continue;
                }
                let mut out: Vec<f64> = (0..ports)
                    .map(|q| density.measure(a.max(row[q]), b.min(row[q + 1])))
                    .collect();
                let s: f64 = out.iter().sum();
                out.iter_mut().for_each(|x| *x /= s);
                last_out[p] = Some(out.clone());
                atoms.push((c, p, m, out));
            }
            last_row.clear();
            last_row.extend_from_slice(row);
        });
        let (ra, rb) = part.residual(resolved);
        let mut lump = None;
        if rb > ra {
            let p0 = ((ra / w) as usize).min(ports - 1);
            let p1 = ((rb / w) as usize).min(ports - 1);
            for p in p0..=p1 {
                let m = density.measure(ra.max(edges[p]), rb.min(edges[p + 1]));
                if !(m > 0.0) {
                    continue;
                }
                let out = last_out[p].clone().unwrap_or_else(|| {
                    let tot = last_row[ports] - last_row[0];
                    (0..ports).map(|q| (last_row[q + 1] - last_row[q]) / tot).collect()
                });
                atoms.push((resolved + 1, p, m, out));
                lump = Some(resolved + 1);
            }
        }
        let mut t = Self::assemble(ports, atoms, lump);
        t.make_stationary()?;
        Ok(t)
    }

    /// Rescales port masses to the stationary law of the port chain so that
    /// `μ` is exactly invariant for the model.
    fn make_stationary(&mut self) -> Result<()> {
        let p = self.ports;
        let total: f64 = self.mass.iter().sum();
        self.mass.iter_mut().for_each(|m| *m /= total);
        self.refresh_pi();
        let mut chain = vec![0.0; p * p];
        for a in 0..self.len() {
            let from = self.port[a];
            let r = self.mass[a] / self.pi[from];
            for q in 0..p {
                chain[from * p + q] += r * self.out[a * p + q];
            }
        }
        let mut pi = self.pi.clone();
        let mut residual = f64::INFINITY;
        for _ in 0..100_000 {
            let mut next = vec![0.0; p];
            for i in 0..p {
                for j in 0..p {
                    next[j] += pi[i] * chain[i * p + j];
                }
            }
            let s: f64 = next.iter().sum();
            next.iter_mut().for_each(|x| *x /= s);
            residual = pi.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            pi = next;
            if residual < 1e-15 {
                break;
            }
        }
        if residual > 1e-12 {
            return Err(Error::Convergence {
                op: "MarkovTower::make_stationary",
                iterations: 100_000,
                residual,
            });
        }
        for a in 0..self.len() {
            let q = self.port[a];
            if self.pi[q] > 0.0 {
                self.mass[a] *= pi[q] / self.pi[q];
            }
        }
        self.refresh_pi();
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.height.len()
    }

    pub fn is_empty(&self) -> bool {
        self.height.is_empty()
    }

    pub fn max_height(&self) -> usize {
        self.height.last().copied().unwrap_or(0)
    }

    #[inline]
    pub fn out_row(&self, a: usize) -> &[f64] {
        &self.out[a * self.ports..(a + 1) * self.ports]
    }

    /// Share of port `p_a` carried by atom `a`.
    #[inline]
    pub fn in_frac(&self, a: usize) -> f64 {
        let pi = self.pi[self.port[a]];
        if pi > 0.0 {
            self.mass[a] / pi
        } else {
            0.0
        }
    }

    /// `μ(φ > n)` for `n = 0..=max_height`.
    pub fn tails(&self) -> Vec<f64> {
        let h = self.max_height();
        let mut at = vec![0.0; h + 2];
        for (a, &ha) in self.height.iter().enumerate() {
            at[ha] += self.mass[a];
        }
        let mut tails = vec![0.0; h + 1];
        let mut acc = self.dropped;
        for n in (0..=h).rev() {
            tails[n] = acc;
            acc += at[n];
        }
        tails
    }

    /// Return-time law `p_n = μ(φ = n)`.
    pub fn return_distribution(&self) -> Result<ReturnDistribution> {
        let mut p = vec![0.0; self.max_height()];
        for (a, &h) in self.height.iter().enumerate() {
            p[h - 1] += self.mass[a];
        }
        ReturnDistribution::new(p)
    }

    /// Tabulated tail law `ℓ(n) = μ(φ > n) n^β` up to the last positive tail.
    pub fn tail_law(&self, beta: f64) -> Result<TailLaw> {
        let tails = self.tails();
        let values: Vec<f64> = (1..tails.len())
            .take_while(|&n| tails[n] > 0.0)
            .map(|n| tails[n] * (n as f64).powf(beta))
            .collect();
        if values.is_empty() {
            return Err(Error::domain("tail_law", "tower has no tail"));
        }
        TailLaw::new(beta, SlowlyVarying::Table { values }, None)
    }

    /// Drops every column taller than `h_max`.
    pub fn truncated(&self, h_max: usize) -> MarkovTower {
        let keep = self.height.partition_point(|&h| h <= h_max);
        let dropped: f64 = self.mass[keep..].iter().sum();
        MarkovTower {
            ports: self.ports,
            height: self.height[..keep].to_vec(),
            port: self.port[..keep].to_vec(),
            mass: self.mass[..keep].to_vec(),
            out: self.out[..keep * self.ports].to_vec(),
            pi: self.pi.clone(),
            lump_height: self.lump_height.filter(|&h| h <= h_max),
            dropped: self.dropped + dropped,
        }
    }

    /// Mass returning to each port at times `m = 1..=n` from an initial
    /// density `v` on the base atoms. The result holds `(n + 1) × ports`
    /// entries; row 0 is zero.
    pub fn arrivals(&self, v: &[f64], n: usize) -> Vec<f64> {
        let p = self.ports;
        let mut d = vec![0.0; (n + 1) * p];
        let inf: Vec<f64> = (0..self.len()).map(|a| self.in_frac(a)).collect();
        for m in 1..=n {
            let upto = self.height.partition_point(|&h| h <= m);
            let (past, cur) = d.split_at_mut(m * p);
            let cur = &mut cur[..p];
            for a in 0..upto {
                let h = self.height[a];
                let mut c = inf[a] * past[(m - h) * p + self.port[a]];
                if h == m {
                    c += self.mass[a] * v[a];
                }
                if c != 0.0 {
                    for (x, &o) in cur.iter_mut().zip(self.out_row(a)) {
                        *x += c * o;
                    }
                }
            }
        }
        d
    }

    /// Base densities `b_m(a)` for `m = 0..=n` from arrivals: `b_0 = v`,
    /// `b_m(a) = D_m(p_a) / π_{p_a}`.
    pub fn base_orbit(&self, v: &[f64], n: usize) -> BaseOrbit {
        BaseOrbit {
            v: v.to_vec(),
            arrivals: self.arrivals(v, n),
            ports: self.ports,
            pi: self.pi.clone(),
            port: self.port.clone(),
        }
    }

    /// `Q_s(p)`, `s = 0..=k`: expected value of `1_Y w₀` at time `s` for a
    /// point distributed as `μ` on port `p`.
    pub fn koopman_ports(&self, w0: &[f64], k: usize) -> Vec<f64> {
        let p = self.ports;
        let mut q = vec![0.0; (k + 1) * p];
        for a in 0..self.len() {
            q[self.port[a]] += self.in_frac(a) * w0[a];
        }
        for s in 1..=k {
            let upto = self.height.partition_point(|&h| h <= s);
            for a in 0..upto {
                let r = self.return_expectation(a, s, &q);
                q[s * p + self.port[a]] += self.in_frac(a) * r;
            }
        }
        q
    }

    /// `Σ_p out(a, p) Q_{s-h_a}(p)` for `s ≥ h_a`.
    #[inline]
    fn return_expectation(&self, a: usize, s: usize, q: &[f64]) -> f64 {
        let p = self.ports;
        let base = (s - self.height[a]) * p;
        self.out_row(a).iter().zip(&q[base..base + p]).map(|(o, x)| o * x).sum()
    }

    /// `(K^k (1_Y w₀))(a, ℓ)` given the port table from
    /// [`MarkovTower::koopman_ports`].
    pub fn koopman_value(&self, w0: &[f64], q: &[f64], k: usize, a: usize, level: usize) -> f64 {
        if k == 0 {
            return if level == 0 { w0[a] } else { 0.0 };
        }
        let r = self.height[a] - level;
        if r > k {
            0.0
        } else {
            self.return_expectation(a, k - r + self.height[a], q)
        }
    }

    pub fn cell_layout(&self) -> CellLayout {
        let mut offsets = Vec::with_capacity(self.len() + 1);
        let mut acc = 0;
        for &h in &self.height {
            offsets.push(acc);
            acc += h;
        }
        offsets.push(acc);
        CellLayout { offsets }
    }

    /// One step of the transfer operator on a cell function.
    pub fn step_l(&self, layout: &CellLayout, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        let mut arrive = vec![0.0; self.ports];
        for a in 0..self.len() {
            let (s, e) = (layout.offsets[a], layout.offsets[a + 1]);
            out[s + 1..e].copy_from_slice(&v[s..e - 1]);
            let top = self.mass[a] * v[e - 1];
            if top != 0.0 {
                for (x, &o) in arrive.iter_mut().zip(self.out_row(a)) {
                    *x += top * o;
                }
            }
        }
        for a in 0..self.len() {
            let pi = self.pi[self.port[a]];
            out[layout.offsets[a]] = if pi > 0.0 { arrive[self.port[a]] / pi } else { 0.0 };
        }
        out
    }

    /// Composition `w ∘ f` on a cell function (conditional expectation
    /// across the return).
    pub fn step_koopman(&self, layout: &CellLayout, w: &[f64]) -> Vec<f64> {
        let mut port_mean = vec![0.0; self.ports];
        for a in 0..self.len() {
            port_mean[self.port[a]] += self.in_frac(a) * w[layout.offsets[a]];
        }
        let mut out = vec![0.0; w.len()];
        for a in 0..self.len() {
            let (s, e) = (layout.offsets[a], layout.offsets[a + 1]);
            out[s..e - 1].copy_from_slice(&w[s + 1..e]);
            out[e - 1] = self.out_row(a).iter().zip(&port_mean).map(|(o, m)| o * m).sum();
        }
        out
    }

    /// `∫ v w dμ_Δ` for cell functions.
    pub fn pair(&self, layout: &CellLayout, v: &[f64], w: &[f64]) -> f64 {
        (0..self.len())
            .map(|a| {
                let (s, e) = (layout.offsets[a], layout.offsets[a + 1]);
                self.mass[a] * v[s..e].iter().zip(&w[s..e]).map(|(x, y)| x * y).sum::<f64>()
            })
            .sum()
    }

    /// `Σ_a μ_a v(a)` for a base function.
    pub fn base_integral(&self, v: &[f64]) -> f64 {
        self.mass.iter().zip(v).map(|(m, x)| m * x).sum()
    }
}

/// Offsets of each atom's column in a flattened cell function.
#[derive(Debug, Clone, PartialEq)]
pub struct CellLayout {
    pub offsets: Vec<usize>,
}

impl CellLayout {
    pub fn cells(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn index(&self, a: usize, level: usize) -> usize {
        self.offsets[a] + level
    }

    /// Lift a base function to level 0.
    pub fn lift(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cells()];
        for (&o, &x) in self.offsets[..self.offsets.len() - 1].iter().zip(v) {
            out[o] = x;
        }
        out
    }
}

/// Base densities of `Lᵐ v` for a base-supported `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseOrbit {
    pub v: Vec<f64>,
    /// `arrivals[m * ports + p]`.
    pub arrivals: Vec<f64>,
    ports: usize,
    pi: Vec<f64>,
    port: Vec<usize>,
}

impl BaseOrbit {
    pub fn horizon(&self) -> usize {
        self.arrivals.len() / self.ports - 1
    }

    /// `b_m(a)`; zero for negative times.
    #[inline]
    pub fn density(&self, m: isize, a: usize) -> f64 {
        if m < 0 {
            0.0
        } else if m == 0 {
            self.v[a]
        } else {
            let p = self.port[a];
            let pi = self.pi[p];
            if pi > 0.0 {
                self.arrivals[m as usize * self.ports + p] / pi
            } else {
                0.0
            }
        }
    }

    /// `(T_m v)` as a base function.
    pub fn t(&self, m: usize) -> Vec<f64> {
        (0..self.v.len()).map(|a| self.density(m as isize, a)).collect()
    }

    /// `D_m(p)` for all ports.
    pub fn arrivals_at(&self, m: usize) -> &[f64] {
        &self.arrivals[m * self.ports..(m + 1) * self.ports]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::ulam::{ulam_density, UlamOptions};
    use crate::renewal::renewal_direct;
    use crate::systems::{rng_for, uniform, DynSystem, LsvMap};

    fn lsv_tower(depth: usize) -> MarkovTower {
        let sys = DynSystem::Lsv(LsvMap::new(1.25).unwrap());
        let part = CylinderPartition::new(&sys, 10).unwrap();
        let h = ulam_density(
            &part,
            UlamOptions {
                bins: 256,
                cylinders: 1024,
                ..Default::default()
            },
        )
        .unwrap();
        MarkovTower::from_density(&part, &h, 8, depth).unwrap()
    }

    #[test]
    fn single_port_arrivals_are_renewal() {
        let d = ReturnDistribution::new(vec![0.3, 0.2, 0.1, 0.25]).unwrap();
        let t = MarkovTower::from_distribution(&d).unwrap();
        assert_eq!(t.lump_height, Some(5));
        let orbit = t.base_orbit(&vec![1.0; t.len()], 50);
        let mut p = vec![0.3, 0.2, 0.1, 0.25, 0.15];
        p.resize(50, 0.0);
        let full = ReturnDistribution::new(p).unwrap();
        let u = renewal_direct(&full, 50).unwrap();
        for m in 1..=50 {
            assert!((orbit.arrivals_at(m)[0] - u[m]).abs() < 1e-14);
        }
    }

    #[test]
    fn lsv_tower_is_stationary() {
        let t = lsv_tower(300);
        assert!((t.mass.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let layout = t.cell_layout();
        let one = vec![1.0; layout.cells()];
        let l1 = t.step_l(&layout, &one);
        assert!(l1.iter().all(|x| (x - 1.0).abs() < 1e-10));
        for a in 0..t.len() {
            assert!((t.out_row(a).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn duality_on_cells() {
        let t = lsv_tower(60);
        let layout = t.cell_layout();
        let mut rng = rng_for(4, 0);
        for _ in 0..5 {
            let v: Vec<f64> = (0..layout.cells()).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
            let w: Vec<f64> = (0..layout.cells()).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
            let lhs = t.pair(&layout, &t.step_l(&layout, &v), &w);
            let rhs = t.pair(&layout, &v, &t.step_koopman(&layout, &w));
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn recursions_match_explicit_stepping() {
        let t = lsv_tower(40);
        let layout = t.cell_layout();
        let mut rng = rng_for(5, 0);
        let v: Vec<f64> = (0..t.len()).map(|_| uniform(&mut rng, 0.0, 1.0)).collect();
        let w0: Vec<f64> = (0..t.len()).map(|_| uniform(&mut rng, 0.0, 1.0)).collect();
        let orbit = t.base_orbit(&v, 60);
        let mut cell = layout.lift(&v);
        for m in 1..=60 {
            cell = t.step_l(&layout, &cell);
            for a in 0..t.len() {
                for l in 0..t.height[a] {
                    let want = orbit.density(m as isize - l as isize, a);
                    assert!((cell[layout.index(a, l)] - want).abs() < 1e-12);
                }
            }
        }
        let k = 25;
        let q = t.koopman_ports(&w0, k);
        let mut w = layout.lift(&w0);
        for _ in 0..k {
            w = t.step_koopman(&layout, &w);
        }
        for a in 0..t.len() {
            for l in 0..t.height[a] {
                let got = t.koopman_value(&w0, &q, k, a, l);
                assert!((w[layout.index(a, l)] - got).abs() < 1e-12, "a={a} l={l}");
            }
        }
    }

    #[test]
    fn tail_law_reproduces_tails() {
        let t = lsv_tower(2000);
        let law = t.tail_law(0.8).unwrap();
        let tails = t.tails();
        for n in [1usize, 10, 100, 1999] {
            assert!((law.tail_prob(n as u64) / tails[n] - 1.0).abs() < 1e-12);
        }
        let tr = t.truncated(100);
        assert!((tr.dropped - tails[100]).abs() < 1e-15);
    }
}
