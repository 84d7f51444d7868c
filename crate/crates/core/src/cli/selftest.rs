//! Reduced-scale invariant suite behind `infmix selftest`.

use serde::Serialize;

use crate::error::Result;
use crate::mixing::{correlation_montecarlo, correlation_operator, geometric_grid, McOptions};
use crate::operators::eterms::ETermEngine;
use crate::operators::{convolution_check, level_mass_check, Fault, MarkovTower};
use crate::regvar::{a_seq, SlowlyVarying, TailLaw};
use crate::renewal::{renewal_sequence, ReturnDistribution};
use crate::systems::{check_hyperbolicity, DynSystem, FiberMap, LsvMap, Point, SkewProduct, SyntheticSystem};
use crate::tower::{approx_observable, brute_force_vk, gamma_psi_l1, TowerObservable, TwoPoint, TwoSidedTower};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    /// Measured quantity, or the first counterexample on failure.
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match f() {
        Ok((pass, detail)) => Check { name, pass, detail },
        Err(e) => Check {
            name,
            pass: false,
            detail: format!("error: {e}"),
        },
    }
}

fn smooth_law(beta: f64) -> TailLaw {
    TailLaw::new(beta, SlowlyVarying::Constant { c: 1.0 }, Some(1.0)).expect("valid law")
}

pub fn run(fault: Fault, seed: u64) -> Vec<Check> {
    let mut out = Vec::new();
    out.push(check("renewal_finite_measure", || {
        let mut p = vec![0.5, 0.5];
        p.resize(100, 0.0);
        let u = renewal_sequence(&ReturnDistribution::new(p)?, 100)?;
        let err = (u[100] - 2.0 / 3.0).abs();
        Ok((err <= 1e-6, format!("|u_100 - 2/3| = {err:e}")))
    }));
    out.push(check("normalized_renewal_trend", || {
        let law = smooth_law(0.75);
        let d = ReturnDistribution::from_law(&law, 20_000)?;
        let u = renewal_sequence(&d, 20_000)?;
        let a = a_seq(&law, 20_000)?;
        let err = |n: usize| (fault.an_scale() * a.get(n) * u[n] - 1.0).abs();
        let e = [err(100), err(1000), err(10_000), err(20_000)];
        let pass = e[0] > e[1] && e[1] > e[2] && e[3] <= 0.15;
        Ok((pass, format!("|a_n u_n - 1| at 1e2, 1e3, 1e4, 2e4: {e:.4?}")))
    }));
    out.push(check("convolution_identity", || {
        let t = MarkovTower::from_distribution(&ReturnDistribution::new(vec![0.25, 0.5, 0.25])?)?;
        let r = convolution_check(&t, &vec![1.0; t.len()], 200, None)?;
        Ok((
            r.max_sup_defect() <= 1e-10,
            format!("max defect {:e} at n = {}", r.max_sup_defect(), r.worst_n),
        ))
    }));
    out.push(check("level_mass_inequality", || {
        let t = MarkovTower::from_distribution(&ReturnDistribution::from_law(&smooth_law(0.75), 500)?)?;
        let r = level_mass_check(&t, 100, 20, fault);
        let detail = match r.violations.first() {
            Some((j, k, lhs, rhs)) => format!(
                "{} violations; first at j = {j}, k = {k}: {lhs:e} > {rhs:e}",
                r.violations.len()
            ),
            None => format!("{} pairs, max ratio {:.6}", r.checked, r.max_ratio),
        };
        Ok((r.violations.is_empty(), detail))
    }));
    out.push(check("toy_vk_oracle", || {
        let t = TwoSidedTower::toy();
        let v = TowerObservable::on_base(&t, 64, |_, x| x);
        for k in 1..=3 {
            let approx = approx_observable(&t, &v, k);
            let len = 2 * k + 2;
            for code in 0..(1usize << len) {
                let word: Vec<usize> = (0..len).map(|i| (code >> i) & 1).collect();
                for level in 0..t.heights[word[0]] {
                    let q = TwoPoint {
                        level,
                        word: word.clone(),
                        x2: 0.3,
                    };
                    let (fast, slow) = (approx.eval(&q)?, brute_force_vk(&t, &v, k, &q, 2 * k, 64)?);
                    if fast != slow {
                        return Ok((false, format!("k = {k}, q = {q:?}: {fast} vs {slow}")));
                    }
                }
            }
        }
        Ok((true, "k = 1..3 exhaustive".into()))
    }));
    out.push(check("gamma_psi_decreasing", || {
        let t = MarkovTower::from_distribution(&ReturnDistribution::from_law(&smooth_law(0.75), 200)?)?;
        let vals: Vec<f64> = (1..=10).map(|k| gamma_psi_l1(&t, 0.5, k)).collect();
        let pass = vals.windows(2).all(|w| w[1] < w[0]);
        Ok((pass, format!("k = 1..10: {vals:.4?}")))
    }));
    out.push(check("exact_fiber_contraction", || {
        let skew = SkewProduct::new(LsvMap::new(1.25)?, FiberMap::Halving)?;
        let r = check_hyperbolicity(&skew, 16, 60, seed)?;
        Ok((r.spread == 0.0, format!("sup-ratio spread {:e}", r.spread)))
    }));
    out.push(check("eterm_identity", || {
        let law = smooth_law(0.75);
        let t = MarkovTower::from_distribution(&ReturnDistribution::from_law(&law, 3000)?)?;
        let a = a_seq(&law, 1000)?;
        let ones = vec![1.0; t.len()];
        let eng = ETermEngine::new(&t, &a, &law, &ones, 1000)?;
        let mut worst: f64 = 0.0;
        for (k, n) in [(2, 100), (5, 500), (10, 1000)] {
            worst = worst.max(eng.eval(&ones, k, n)?.identity_defect);
        }
        Ok((worst < 1e-10, format!("max identity defect {worst:e}")))
    }));
    out.push(check("operator_vs_montecarlo", || {
        let law = smooth_law(0.75);
        let d = ReturnDistribution::from_law(&law, 4000)?;
        let t = MarkovTower::from_distribution(&d)?;
        let a = a_seq(&law, 256)?;
        let grid = geometric_grid(256, &[]);
        let ones = vec![1.0; t.len()];
        let op = correlation_operator(&t, &ones, &ones, &a, &grid)?;
        let sys = DynSystem::Synthetic(SyntheticSystem::new(d));
        let one = |_: Point| 1.0;
        let opts = McOptions {
            samples: 100_000,
            burn_in: 100,
            ..Default::default()
        };
        let mc = correlation_montecarlo(&sys, &one, &one, &a, &grid, opts, seed)?;
        let again = correlation_montecarlo(&sys, &one, &one, &a, &grid, opts, seed)?;
        let mut worst: f64 = 0.0;
        for (p, q) in op.points.iter().zip(&mc.points) {
            if q.err > 0.0 {
                worst = worst.max((p.normalized - q.normalized).abs() / q.err);
            }
        }
        Ok((
            worst < 5.0 && mc == again,
            format!("max |z| {worst:.2}, repeat identical: {}", mc == again),
        ))
    }));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_build_passes() {
        let r = run(Fault::None, 1);
        assert!(r.iter().all(|c| c.pass), "{r:#?}");
    }

    #[test]
    fn faults_are_caught() {
        let aj = run(Fault::PerturbAj, 1);
        let failed: Vec<_> = aj.iter().filter(|c| !c.pass).map(|c| c.name).collect();
        assert_eq!(failed, ["level_mass_inequality"]);
        assert!(aj[3].detail.contains("first at j ="));
        let an = run(Fault::PerturbAn, 1);
        let failed: Vec<_> = an.iter().filter(|c| !c.pass).map(|c| c.name).collect();
        assert_eq!(failed, ["normalized_renewal_trend"]);
    }
}
