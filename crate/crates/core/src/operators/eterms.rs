//! The error terms `E₁, E₂, E₃` of the decomposition
//! `∫(a_n L^{n-k} v - ∫v) w = E₁ + E₂ - E₃` for `w = (1_Y w₀) ∘ f^k`, and
//! envelope fits for them.

use serde::{Deserialize, Serialize};

use super::markov::{BaseOrbit, MarkovTower};
use crate::error::{Error, Result};
use crate::regvar::{NormalizingSequence, TailLaw};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ETermReport {
    pub k: usize,
    pub n: usize,
    pub e1: f64,
    pub e2: f64,
    pub e3: f64,
    pub e2_prime: f64,
    pub e2_double_prime: f64,
    /// `a_n ∫ Lⁿv · 1_Y w₀ - ∫v ∫w₀`, computed independently of the terms.
    pub lhs: f64,
    pub identity_defect: f64,
    /// `k ℓ(n)² n^{-(2β-1)}` (β < 1).
    pub env_e2_regular: Option<f64>,
    /// `|∫v| |w|_∞ k ℓ(n) n^{-β}`.
    pub env_e3: f64,
    /// `k ℓ(n) n^{-β} log n` at `q = 1`, `k ℓ(n) n^{-(β+2q-2)}` otherwise.
    pub env_e2_smooth: Option<f64>,
}

/// Shares one base orbit of `v` across many `(k, n)` evaluations.
pub struct ETermEngine<'a> {
    tower: &'a MarkovTower,
    a: &'a NormalizingSequence,
    law: &'a TailLaw,
    orbit: BaseOrbit,
    pv: f64,
}

impl<'a> ETermEngine<'a> {
    pub fn new(
        tower: &'a MarkovTower,
        a: &'a NormalizingSequence,
        law: &'a TailLaw,
        v: &[f64],
        n_max: usize,
    ) -> Result<Self> {
        if n_max > a.len() {
            return Err(Error::Range {
                op: "e_term_diagnostics",
                index: n_max,
                max: a.len(),
            });
        }
        Ok(ETermEngine {
            tower,
            a,
            law,
            orbit: tower.base_orbit(v, n_max),
            pv: tower.base_integral(v),
        })
    }

    pub fn eval(&self, w0: &[f64], k: usize, n: usize) -> Result<ETermReport> {
        const OP: &str = "e_term_diagnostics";
        if 3 * k > n {
            return Err(Error::precondition(OP, format!("k = {k} exceeds n/3 = {}", n / 3)));
        }
        if n > self.orbit.horizon() {
            return Err(Error::Range {
                op: OP,
                index: n,
                max: self.orbit.horizon(),
            });
        }
        let t = self.tower;
        let a = |m: usize| self.a.get(m);
        let ones = vec![1.0; t.len()];
        let q = t.koopman_ports(w0, k);
        let q1 = t.koopman_ports(&ones, k);
        let (mut e1, mut e2, mut e3s) = (0.0, 0.0, 0.0);
        let mut level_mass = vec![0.0; n + 1];
        for i in 0..t.len() {
            let h = t.height[i];
            let mu = t.mass[i];
            let levels: Box<dyn Iterator<Item = usize>> = if k == 0 {
                Box::new(std::iter::once(0))
            } else {
                Box::new(h.saturating_sub(k)..h)
            };
            for j in levels {
                let w = t.koopman_value(w0, &q, k, i, j);
                let m1 = t.koopman_value(&ones, &q1, k, i, j);
                if j <= n - k {
                    let m = n - k - j;
                    let b = self.orbit.density(m as isize, i);
                    e1 += mu * w * (a(m) * b - self.pv);
                    e2 += mu * w * (a(n) - a(m)) * b;
                    level_mass[j] += mu * m1;
                } else {
                    e3s += mu * w;
                }
            }
        }
        let e3 = self.pv * e3s;
        let (mut e2p, mut e2pp) = (0.0, 0.0);
        for (j, &m) in level_mass.iter().enumerate().take(n - k + 1) {
            let r = m * (a(n) / a(n - k - j) - 1.0).abs();
            if 2 * j <= n {
                e2p += r;
            } else {
                e2pp += r;
            }
        }
        let w_int = t.base_integral(w0);
        let lhs = a(n)
            * (0..t.len())
                .map(|i| t.mass[i] * w0[i] * self.orbit.density(n as isize, i))
                .sum::<f64>()
            - self.pv * w_int;
        let w_sup = w0.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let (beta, ell, nf, kf) = (self.law.beta, self.law.ell(n as u64), n as f64, k as f64);
        let env_e2_smooth = match self.law.q {
            Some(1.0) => Some(kf * ell * nf.powf(-beta) * nf.ln()),
            Some(q) => Some(kf * ell * nf.powf(-(beta + 2.0 * q - 2.0))),
            None => None,
        };
        Ok(ETermReport {
            k,
            n,
            e1,
            e2,
            e3,
            e2_prime: e2p,
            e2_double_prime: e2pp,
            lhs,
            identity_defect: (lhs - (e1 + e2 - e3)).abs(),
            env_e2_regular: (beta < 1.0).then(|| kf * ell * ell * nf.powf(-(2.0 * beta - 1.0))),
            env_e3: self.pv.abs() * w_sup * kf * ell * nf.powf(-beta),
            env_e2_smooth,
        })
    }
}

/// One-shot evaluation at a single `(k, n)`.
pub fn e_term_diagnostics(
    tower: &MarkovTower,
    a: &NormalizingSequence,
    law: &TailLaw,
    v: &[f64],
    w0: &[f64],
    k: usize,
    n: usize,
) -> Result<ETermReport> {
    ETermEngine::new(tower, a, law, v, n)?.eval(w0, k, n)
}

/// Fit of `value ≤ C · envelope` over an `n`-range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeFit {
    /// `max value/envelope`.
    pub constant: f64,
    /// The same maximum per decade `[10^d, 10^{d+1})`.
    pub decade_constants: Vec<(u32, f64)>,
    /// Every decade constant lies within ±50% of their mean.
    pub stable: bool,
}

pub fn fit_envelope(points: &[(usize, f64, f64)]) -> EnvelopeFit {
    let mut decades: Vec<(u32, f64)> = Vec::new();
    let mut constant: f64 = 0.0;
    for &(n, value, env) in points {
        let r = value.abs() / env;
        constant = constant.max(r);
        let d = (n as f64).log10().floor() as u32;
        match decades.iter_mut().find(|x| x.0 == d) {
            Some(x) => x.1 = x.1.max(r),
            None => decades.push((d, r)),
        }
    }
    let mean = decades.iter().map(|x| x.1).sum::<f64>() / decades.len().max(1) as f64;
    let stable = !decades.is_empty() && decades.iter().all(|x| x.1 >= 0.5 * mean && x.1 <= 1.5 * mean);
    EnvelopeFit {
        constant,
        decade_constants: decades,
        stable,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regvar::{a_seq, SlowlyVarying};
    use crate::renewal::ReturnDistribution;

    fn smooth_tower(beta: f64, len: usize) -> (MarkovTower, TailLaw) {
        let law = TailLaw::new(beta, SlowlyVarying::Constant { c: 1.0 }, Some(1.0)).unwrap();
        let d = ReturnDistribution::from_law(&law, len).unwrap();
        (MarkovTower::from_distribution(&d).unwrap(), law)
    }

    #[test]
    fn decomposition_identity() {
        let (t, law) = smooth_tower(0.75, 3000);
        let a = a_seq(&law, 2000).unwrap();
        let v: Vec<f64> = t.height.iter().map(|&h| 1.0 + 0.5 * ((h % 3) as f64)).collect();
        let w0: Vec<f64> = t.height.iter().map(|&h| if h % 2 == 0 { 1.0 } else { 0.25 }).collect();
        let eng = ETermEngine::new(&t, &a, &law, &v, 2000).unwrap();
        for (k, n) in [(0, 10), (1, 3), (2, 100), (5, 2000), (10, 1000)] {
            let r = eng.eval(&w0, k, n).unwrap();
            assert!(r.identity_defect < 1e-10, "k={k} n={n}: {}", r.identity_defect);
        }
        assert!(matches!(eng.eval(&w0, 10, 20), Err(Error::Precondition { .. })));
    }

    #[test]
    fn k_zero_is_the_u_n_pairing() {
        let (t, law) = smooth_tower(0.75, 500);
        let a = a_seq(&law, 300).unwrap();
        let ones = vec![1.0; t.len()];
        let r = e_term_diagnostics(&t, &a, &law, &ones, &ones, 0, 300).unwrap();
        assert_eq!(r.e3, 0.0);
        assert_eq!(r.e2, 0.0);
        assert!((r.e1 - r.lhs).abs() < 1e-12);
    }

    #[test]
    fn e3_below_its_envelope() {
        let (t, law) = smooth_tower(0.75, 4000);
        let a = a_seq(&law, 2000).unwrap();
        let ones = vec![1.0; t.len()];
        let r = e_term_diagnostics(&t, &a, &law, &ones, &ones, 5, 2000).unwrap();
        // E₃ ≤ k μ(φ > n-k+1) holds term by term.
        assert!(r.e3 <= 5.0 * law.tail_prob(1996) + 1e-15);
        assert!(r.e3 / r.env_e3 < 2.0);
    }

    #[test]
    fn envelope_fit_stability() {
        let flat: Vec<_> = [100, 300, 1000, 3000, 9000].iter().map(|&n| (n, 2.0, 1.0)).collect();
        let f = fit_envelope(&flat);
        assert!(f.stable && f.constant == 2.0);
        let drift: Vec<_> = [100, 1000, 9000].iter().map(|&n| (n, 1.0 / n as f64, 1e-3)).collect();
        assert!(!fit_envelope(&drift).stable);
    }
}
