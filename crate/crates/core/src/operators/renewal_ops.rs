//! `T_n`, `A_j`, the convolution `Lⁿ1_Y = Σ A_j T_{n-j}`, the level-mass
//! inequality for `A_j`, and `‖U_n - P‖` on a test family.

use serde::{Deserialize, Serialize};

use super::markov::{CellLayout, MarkovTower};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::regvar::NormalizingSequence;
use crate::systems::{rng_for, uniform};

/// Deliberate defects used by the self-test to show that the checks bite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    #[default]
    None,
    /// `A_j` scaled by 1.05.
    PerturbAj,
    /// `a_n` scaled by 1.5.
    PerturbAn,
}

impl Fault {
    pub(crate) fn aj_scale(self) -> f64 {
        if self == Fault::PerturbAj {
            1.05
        } else {
            1.0
        }
    }

    pub fn an_scale(self) -> f64 {
        if self == Fault::PerturbAn {
            1.5
        } else {
            1.0
        }
    }
}

/// `T_n v` as a base function.
pub fn t_n(tower: &MarkovTower, v: &[f64], n: usize) -> Vec<f64> {
    if n == 0 {
        return v.to_vec();
    }
    tower.base_orbit(v, n).t(n)
}

/// `A_j v`: `v` placed on level `j` of every column taller than `j`.
pub fn a_j_apply(tower: &MarkovTower, layout: &CellLayout, v: &[f64], j: usize) -> Vec<f64> {
    let mut out = vec![0.0; layout.cells()];
    for a in tower.height.partition_point(|&h| h <= j)..tower.len() {
        out[layout.index(a, j)] = v[a];
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvolutionReport {
    pub n_max: usize,
    pub h_max: usize,
    /// `sup_cells |Lⁿ(1_Y v) - Σ_j A_j T_{n-j} v|` on retained cells, per `n`.
    pub sup_defect: Vec<f64>,
    /// The same difference in `L¹(μ_Δ)` over the untruncated model.
    pub l1_defect: Vec<f64>,
    /// Mass entering dropped columns by time `n`.
    pub truncation_bound: Vec<f64>,
    /// `|1_Δ - Σ_{j≤H} A_j 1_Y|₁`.
    pub partition_defect: f64,
    /// `Σ_{j>H} μ(φ > j)`.
    pub dropped_tail_mass: f64,
    pub worst_n: usize,
}

impl ConvolutionReport {
    pub fn max_sup_defect(&self) -> f64 {
        self.sup_defect.iter().cloned().fold(0.0, f64::max)
    }

    /// Every `L¹` defect is within its truncation bound.
    pub fn within_bound(&self) -> bool {
        self.l1_defect
            .iter()
            .zip(&self.truncation_bound)
            .all(|(d, b)| *d <= b * (1.0 + 1e-9) + 1e-12)
    }
}

/// Steps `1_Y v` explicitly on the tower truncated at `h_max` and compares
/// with the renewal convolution evaluated through the recursion on the full
/// model.
pub fn convolution_check(
    tower: &MarkovTower,
    v: &[f64],
    n_max: usize,
    h_max: Option<usize>,
) -> Result<ConvolutionReport> {
    let h_max = h_max.unwrap_or(tower.max_height());
    if h_max == 0 {
        return Err(Error::domain("convolution_check", "h_max must be positive"));
    }
    let trunc = tower.truncated(h_max);
    let layout = trunc.cell_layout();
    let keep = trunc.len();
    let orbit = tower.base_orbit(v, n_max);

    // Mass entering each dropped column: initial load plus returns.
    let mut dropped_in = vec![0.0; tower.ports];
    for a in keep..tower.len() {
        dropped_in[tower.port[a]] += tower.in_frac(a);
    }
    let initial: f64 = (keep..tower.len()).map(|a| tower.mass[a] * v[a].abs()).sum();

    let mut cell = layout.lift(v);
    let mut sup_defect = Vec::with_capacity(n_max + 1);
    let mut l1_defect = Vec::with_capacity(n_max + 1);
    let mut bound = Vec::with_capacity(n_max + 1);
    let mut entered = initial;
    for n in 0..=n_max {
        if n > 0 {
            cell = trunc.step_l(&layout, &cell);
            entered += orbit
                .arrivals_at(n)
                .iter()
                .zip(&dropped_in)
                .map(|(d, f)| d.abs() * f)
                .sum::<f64>();
        }
        let mut sup: f64 = 0.0;
        for a in 0..keep {
            for l in 0..trunc.height[a].min(n + 1) {
                let rhs = orbit.density(n as isize - l as isize, a);
                sup = sup.max((cell[layout.index(a, l)] - rhs).abs());
            }
            for l in n + 1..trunc.height[a] {
                sup = sup.max(cell[layout.index(a, l)].abs());
            }
        }
        let mut l1 = 0.0;
        for a in keep..tower.len() {
            for l in 0..tower.height[a].min(n + 1) {
                l1 += tower.mass[a] * orbit.density(n as isize - l as isize, a).abs();
            }
        }
        for a in 0..keep {
            for l in 0..trunc.height[a].min(n + 1) {
                l1 += tower.mass[a] * (cell[layout.index(a, l)] - orbit.density(n as isize - l as isize, a)).abs();
            }
        }
        sup_defect.push(sup);
        l1_defect.push(l1);
        bound.push(entered);
    }
    let partition_defect: f64 = (0..tower.len())
        .map(|a| tower.mass[a] * tower.height[a].saturating_sub(h_max + 1) as f64)
        .sum();
    let tails = tower.tails();
    let dropped_tail_mass: f64 = tails.iter().skip(h_max + 1).sum();
    let worst_n = sup_defect
        .iter()
        .enumerate()
        .fold((0, -1.0), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc })
        .0;
    Ok(ConvolutionReport {
        n_max,
        h_max,
        sup_defect,
        l1_defect,
        truncation_bound: bound,
        partition_defect,
        dropped_tail_mass,
        worst_n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelMassReport {
    pub checked: usize,
    /// `(j, k, lhs, rhs)` for every violation.
    pub violations: Vec<(usize, usize, f64, f64)>,
    /// `max lhs / rhs` over pairs with positive right-hand side.
    pub max_ratio: f64,
}

/// `|1_{Y_k} A_j 1_Y|₁ ≤ μ(φ > j) - μ(φ > j + k)` for `0 ≤ j ≤ j_max`,
/// `1 ≤ k ≤ k_max`. `Y_k = f^{-k} Y`; at `k = 0` it is `Y` itself and the
/// level-0 term is the whole base, so `k` starts at 1.
pub fn level_mass_check(tower: &MarkovTower, j_max: usize, k_max: usize, fault: Fault) -> LevelMassReport {
    let ones = vec![1.0; tower.len()];
    let q = tower.koopman_ports(&ones, k_max);
    let tails = tower.tails();
    let tail = |n: usize| tails.get(n).copied().unwrap_or(tower.dropped);
    let mut violations = Vec::new();
    let mut max_ratio: f64 = 0.0;
    let mut checked = 0;
    for j in 0..=j_max {
        let first = tower.height.partition_point(|&h| h <= j);
        for k in 1..=k_max {
            let lhs: f64 = fault.aj_scale()
                * (first..tower.len())
                    .map(|a| tower.mass[a] * tower.koopman_value(&ones, &q, k, a, j))
                    .sum::<f64>();
            let rhs = tail(j) - tail(j + k);
            checked += 1;
            if rhs > 0.0 {
                max_ratio = max_ratio.max(lhs / rhs);
            }
            if lhs > rhs * (1.0 + 1e-12) + 1e-15 {
                violations.push((j, k, lhs, rhs));
            }
        }
    }
    LevelMassReport {
        checked,
        violations,
        max_ratio,
    }
}

/// Test functions on the base with their `F_θ` norms.
#[derive(Debug, Clone, PartialEq)]
pub struct TestFamily {
    pub functions: Vec<Vec<f64>>,
    pub norms: Vec<f64>,
    pub labels: Vec<String>,
}

impl TestFamily {
    /// Indicators of `{φ = c}` for `c ≤ depth`, then `random` functions that
    /// are constant on each depth-one cylinder with values in `[-1, 1]`
    /// (their `θ`-seminorm vanishes, so the norm is the sup norm).
    pub fn standard(tower: &MarkovTower, depth: usize, random: usize, seed: u64) -> Self {
        let mut fam = TestFamily {
            functions: vec![vec![1.0; tower.len()]],
            norms: vec![1.0],
            labels: vec!["one".into()],
        };
        for c in 1..=depth {
            let f: Vec<f64> = tower.height.iter().map(|&h| if h == c { 1.0 } else { 0.0 }).collect();
            if f.iter().any(|&x| x != 0.0) {
                fam.functions.push(f);
                fam.norms.push(1.0);
                fam.labels.push(format!("cyl{c}"));
            }
        }
        let mut rng = rng_for(seed, 0);
        for i in 0..random {
            let vals: Vec<f64> = (0..64).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
            let f: Vec<f64> = tower.height.iter().map(|&h| vals[(h - 1).min(63)]).collect();
            let norm = f.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
            fam.functions.push(f);
            fam.norms.push(norm);
            fam.labels.push(format!("rand{i}"));
        }
        fam
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnNorm {
    pub n: usize,
    /// `max_v |(U_n - P) v|_∞ / ‖v‖` over the family.
    pub lower_bound: f64,
    /// `|(U_n - P) 1|_∞`.
    pub constants: f64,
    /// `a_n μ(lumped column)`: mass whose dynamics the model does not resolve.
    pub gap: f64,
    pub argmax: String,
}

/// `‖U_n - P‖` surrogates for each `n` in `ns`.
pub fn u_n_minus_p_norm(
    tower: &MarkovTower,
    a: &NormalizingSequence,
    family: &TestFamily,
    ns: &[usize],
    exec: Exec,
) -> Result<Vec<UnNorm>> {
    let n_max = ns.iter().copied().max().unwrap_or(0);
    if n_max > a.len() {
        return Err(Error::Range {
            op: "u_n_minus_p_norm",
            index: n_max,
            max: a.len(),
        });
    }
    let per_fn: Vec<Vec<f64>> = exec.map_slice(&family.functions, |v| {
        let orbit = tower.base_orbit(v, n_max);
        let pv = tower.base_integral(v);
        ns.iter()
            .map(|&n| {
                (0..tower.len())
                    .map(|i| (a.get(n) * orbit.density(n as isize, i) - pv).abs())
                    .fold(0.0, f64::max)
            })
            .collect()
    });
    let lumped = tower.lump_height.map_or(0.0, |h| tower.tails()[h - 1]);
    Ok(ns
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let (mut best, mut arg) = (0.0, String::new());
            for (f, vals) in per_fn.iter().enumerate() {
                let r = vals[i] / family.norms[f];
                if r > best {
                    best = r;
                    arg = family.labels[f].clone();
                }
            }
            UnNorm {
                n,
                lower_bound: best,
                constants: per_fn[0][i],
                gap: a.get(n) * lumped,
                argmax: arg,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regvar::{a_seq, SlowlyVarying, TailLaw};
    use crate::renewal::{renewal_direct, ReturnDistribution};
    use proptest::prelude::*;

    fn half_half() -> MarkovTower {
        MarkovTower::from_distribution(&ReturnDistribution::new(vec![0.5, 0.5]).unwrap()).unwrap()
    }

    #[test]
    fn t_n_examples() {
        let t = half_half();
        assert_eq!(t_n(&t, &[0.3, 0.7], 0), vec![0.3, 0.7]);
        let mut p = vec![0.5, 0.5];
        p.resize(30, 0.0);
        let u = renewal_direct(&ReturnDistribution::new(p).unwrap(), 30).unwrap();
        for n in 1..=30 {
            let tn = t_n(&t, &[1.0, 1.0], n);
            assert!(tn.iter().all(|x| (x - u[n]).abs() < 1e-14));
        }
        let det = MarkovTower::from_distribution(&ReturnDistribution::new(vec![1.0]).unwrap()).unwrap();
        assert_eq!(t_n(&det, &[1.0], 17), vec![1.0]);
    }

    #[test]
    fn a_j_is_kronecker() {
        let t = half_half();
        let layout = t.cell_layout();
        let a0 = a_j_apply(&t, &layout, &[1.0, 1.0], 0);
        assert_eq!(a0, vec![1.0, 1.0, 0.0]);
        let a1 = a_j_apply(&t, &layout, &[1.0, 1.0], 1);
        assert_eq!(a1, vec![0.0, 0.0, 1.0]);
        let mass: f64 = t.pair(&layout, &a1, &[1.0; 3]);
        assert_eq!(mass, 0.5);
    }

    #[test]
    fn convolution_exact_on_finite_tower() {
        let t = half_half();
        let r = convolution_check(&t, &[1.0, 1.0], 200, None).unwrap();
        assert!(r.max_sup_defect() <= 1e-10);
        assert_eq!(r.sup_defect[0], 0.0);
        assert_eq!(r.partition_defect, 0.0);
    }

    #[test]
    fn truncation_accounting() {
        let law = TailLaw::constant(0.8, 1.0).unwrap();
        let t = MarkovTower::from_distribution(&ReturnDistribution::from_law(&law, 2000).unwrap()).unwrap();
        let r = convolution_check(&t, &vec![1.0; t.len()], 120, Some(100)).unwrap();
        // Before the first return from a dropped column the retained cells agree.
        assert!(r.sup_defect[..=100].iter().all(|&d| d < 1e-12));
        assert!(r.sup_defect[120] > 0.0);
        assert!(r.within_bound());
        assert!((r.partition_defect - r.dropped_tail_mass).abs() < 1e-12);
    }

    #[test]
    fn level_mass_holds_and_fault_is_caught() {
        let law = TailLaw::new(0.75, SlowlyVarying::Constant { c: 1.0 }, None).unwrap();
        let t = MarkovTower::from_distribution(&ReturnDistribution::from_law(&law, 500).unwrap()).unwrap();
        let r = level_mass_check(&t, 100, 20, Fault::None);
        assert!(r.violations.is_empty());
        assert_eq!(r.checked, 101 * 20);
        let bad = level_mass_check(&t, 100, 20, Fault::PerturbAj);
        assert!(!bad.violations.is_empty());
    }

    #[test]
    fn u_n_on_deterministic_returns() {
        let t = MarkovTower::from_distribution(&ReturnDistribution::new(vec![1.0]).unwrap()).unwrap();
        let a = NormalizingSequence {
            values: vec![1.0; 11],
            d_beta: None,
            branch: crate::regvar::Branch::BetaBelowOne,
        };
        let fam = TestFamily {
            functions: vec![vec![1.0]],
            norms: vec![1.0],
            labels: vec!["one".into()],
        };
        let r = u_n_minus_p_norm(&t, &a, &fam, &[1, 5, 10], Exec::Sequential).unwrap();
        assert!(r.iter().all(|x| x.lower_bound == 0.0));
    }

    #[test]
    fn u_n_mean_is_scalar_renewal() {
        let law = TailLaw::constant(0.75, 1.0).unwrap();
        let d = ReturnDistribution::from_law(&law, 3000).unwrap();
        let t = MarkovTower::from_distribution(&d).unwrap();
        let a = a_seq(&law, 2000).unwrap();
        let u = renewal_direct(&d, 2000).unwrap();
        for n in [1usize, 10, 500, 2000] {
            let un = t_n(&t, &vec![1.0; t.len()], n);
            let mean = t.base_integral(&un) * a.get(n);
            assert!((mean - a.get(n) * u[n]).abs() < 1e-10);
        }
    }

    fn random_tower(raw: &[f64]) -> MarkovTower {
        let total: f64 = raw.iter().sum();
        let p = raw.iter().map(|x| x / total).collect();
        MarkovTower::from_distribution(&ReturnDistribution::new(p).unwrap()).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn level_mass_inequality_on_random_laws(raw in prop::collection::vec(0.01f64..1.0, 1..30)) {
            let r = level_mass_check(&random_tower(&raw), 40, 10, Fault::None);
            prop_assert!(r.violations.is_empty(), "{:?}", r.violations.first());
        }

        #[test]
        fn convolution_identity_on_random_laws(
            raw in prop::collection::vec(0.01f64..1.0, 1..30),
            vals in prop::collection::vec(0.0f64..2.0, 30),
        ) {
            let t = random_tower(&raw);
            let v: Vec<f64> = (0..t.len()).map(|i| vals[i % vals.len()]).collect();
            let r = convolution_check(&t, &v, 60, None).unwrap();
            prop_assert!(r.max_sup_defect() <= 1e-10, "{:e}", r.max_sup_defect());
        }
    }
}
