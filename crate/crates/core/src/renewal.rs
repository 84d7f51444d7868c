//! Scalar renewal sequences `u_n = Σ_{j=1}^n p_j u_{n-j}` for i.i.d. return
//! times, and their `a_n` normalisation.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regvar::{a_seq, linear_slope, log_spaced, NormalizingSequence, TailLaw};

/// Below this length the direct O(N²) convolution is used.
pub const DIRECT_BELOW: usize = 1 << 10;
/// Leaf size of the divide-and-conquer recursion.
const LEAF: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Explicit,
    Law,
}

/// Distribution of the return time: `p[i] = P(φ = i + 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnDistribution {
    pub p: Vec<f64>,
    pub source: Source,
}

impl ReturnDistribution {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        const OP: &str = "ReturnDistribution::new";
        if p.is_empty() {
            return Err(Error::domain(OP, "empty distribution"));
        }
        if let Some(i) = p.iter().position(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::domain(
                OP,
                format!("p_{} = {} is not a probability", i + 1, p[i]),
            ));
        }
        let total: f64 = p.iter().sum();
        if total > 1.0 + 1e-9 {
            return Err(Error::domain(OP, format!("total mass {total} exceeds 1")));
        }
        Ok(ReturnDistribution {
            p,
            source: Source::Explicit,
        })
    }

    /// Masses `tail(n-1) - tail(n)` for `n ≤ len`.
    pub fn from_law(law: &TailLaw, len: usize) -> Result<Self> {
        let mut d = Self::new(law.point_masses(len))?;
        d.source = Source::Law;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// `p_n`, zero beyond the truncation.
    pub fn mass(&self, n: usize) -> f64 {
        if n == 0 || n > self.p.len() {
            0.0
        } else {
            self.p[n - 1]
        }
    }

    /// Mass dropped at the truncation, `1 - Σ p_n`.
    pub fn deficit(&self) -> f64 {
        (1.0 - self.p.iter().sum::<f64>()).max(0.0)
    }

    /// `P(φ > n)` with the deficit counted as mass beyond the truncation.
    pub fn tail(&self, n: usize) -> f64 {
        let head: f64 = self.p.iter().take(n).sum();
        (1.0 - head).max(0.0)
    }

    pub fn tails(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.p.len() + 1);
        out.push(1.0);
        for &x in &self.p {
            acc += x;
            out.push((1.0 - acc).max(0.0));
        }
        out
    }
}

/// `u_0..u_N` by direct convolution.
pub fn renewal_direct(dist: &ReturnDistribution, n: usize) -> Result<Vec<f64>> {
    check_len(dist, n)?;
    let mut u = vec![0.0; n + 1];
    u[0] = 1.0;
    for m in 1..=n {
        let mut s = 0.0;
        for j in 1..=m.min(dist.len()) {
            s += dist.p[j - 1] * u[m - j];
        }
        u[m] = s;
    }
    Ok(u)
}

/// `u_0..u_N`; direct below [`DIRECT_BELOW`], otherwise online FFT convolution.
pub fn renewal_sequence(dist: &ReturnDistribution, n: usize) -> Result<Vec<f64>> {
    if n < DIRECT_BELOW {
        return renewal_direct(dist, n);
    }
    renewal_fft(dist, n)
}

/// Online (divide-and-conquer) convolution: the left half of each range is
/// finished before its contribution to the right half is added by FFT.
pub fn renewal_fft(dist: &ReturnDistribution, n: usize) -> Result<Vec<f64>> {
    check_len(dist, n)?;
    let mut p = vec![0.0; n + 1];
    for (j, x) in p.iter_mut().enumerate().skip(1) {
        *x = dist.mass(j);
    }
    let mut u = vec![0.0; n + 1];
    u[0] = 1.0;
    let mut conv = Convolver::default();
    cdq(&mut u, &p, 0, n + 1, &mut conv);
    Ok(u)
}

fn check_len(dist: &ReturnDistribution, n: usize) -> Result<()> {
    if n > dist.len() {
        return Err(Error::Range {
            op: "renewal_sequence",
            index: n,
            max: dist.len(),
        });
    }
    Ok(())
}

/// Solves `u` on `[l, r)` assuming contributions from indices `< l` are
/// already accumulated in `u[l..r)`.
fn cdq(u: &mut [f64], p: &[f64], l: usize, r: usize, conv: &mut Convolver) {
    if r - l <= LEAF {
        for m in l..r {
            if m == 0 {
                continue;
            }
            let mut s = u[m];
            for i in l..m {
                s += u[i] * p[m - i];
            }
            u[m] = s;
        }
        return;
    }
    let mid = l + (r - l) / 2;
    cdq(u, p, l, mid, conv);
    // out[t] = Σ_i u[l+i] p[t-i]; target index m = l + t for m in [mid, r).
    let out = conv.convolve(&u[l..mid], &p[..r - l]);
    for m in mid..r {
        u[m] += out[m - l];
    }
    cdq(u, p, mid, r, conv);
}

struct Convolver {
    planner: FftPlanner<f64>,
    cache: Vec<(usize, Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>)>,
}

impl Default for Convolver {
    fn default() -> Self {
        Convolver {
            planner: FftPlanner::new(),
            cache: Vec::new(),
        }
    }
}

impl Convolver {
    fn plans(&mut self, len: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
        if let Some((_, f, i)) = self.cache.iter().find(|c| c.0 == len) {
            return (f.clone(), i.clone());
        }
        let f = self.planner.plan_fft_forward(len);
        let i = self.planner.plan_fft_inverse(len);
        self.cache.push((len, f.clone(), i.clone()));
        (f, i)
    }

    fn convolve(&mut self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let len = (a.len() + b.len()).next_power_of_two();
        let (fwd, inv) = self.plans(len);
        let mut fa: Vec<Complex64> = a.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        fa.resize(len, Complex64::default());
        let mut fb: Vec<Complex64> = b.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        fb.resize(len, Complex64::default());
        fwd.process(&mut fa);
        fwd.process(&mut fb);
        for (x, y) in fa.iter_mut().zip(&fb) {
            *x *= y;
        }
        inv.process(&mut fa);
        let scale = 1.0 / len as f64;
        fa.iter().map(|z| z.re * scale).collect()
    }
}

/// `max_n |u_n - Σ_j p_j u_{n-j}|` for `n ≥ 1`.
pub fn renewal_residual(dist: &ReturnDistribution, u: &[f64]) -> f64 {
    (1..u.len())
        .map(|m| {
            let s: f64 = (1..=m.min(dist.len())).map(|j| dist.p[j - 1] * u[m - j]).sum();
            (u[m] - s).abs()
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedRenewal {
    pub u: Vec<f64>,
    pub a: NormalizingSequence,
    /// `a_n u_n`, index `n`.
    pub normalized: Vec<f64>,
    pub value_at_n: f64,
    /// Log-log slope of `|a_n u_n - 1|`.
    pub slope: f64,
    pub beta_hat: f64,
    pub deficit: f64,
    pub warnings: Vec<String>,
}

impl NormalizedRenewal {
    pub fn error_at(&self, n: usize) -> f64 {
        (self.normalized[n] - 1.0).abs()
    }
}

/// Tail exponent of `dist` from a log-log regression over `[lo, hi]`.
pub fn estimate_beta(dist: &ReturnDistribution, lo: usize, hi: usize) -> Option<f64> {
    let tails = dist.tails();
    let hi = hi.min(dist.len());
    let pts: Vec<(f64, f64)> = log_spaced(lo as u64, hi as u64, 40)
        .into_iter()
        .filter(|&n| tails[n as usize] > 0.0)
        .map(|n| ((n as f64).ln(), tails[n as usize].ln()))
        .collect();
    if pts.len() < 5 {
        return None;
    }
    Some(-linear_slope(&pts))
}

/// `a_n u_n` with convergence diagnostics. Distributions whose tail vanishes
/// (finite support) are rejected.
pub fn normalized_renewal(dist: &ReturnDistribution, law: &TailLaw, n: usize) -> Result<NormalizedRenewal> {
    let normalizer = a_seq(law, n)?;
    normalized_renewal_with(dist, law, &normalizer, n)
}

/// Same with a caller-supplied normaliser.
pub fn normalized_renewal_with(
    dist: &ReturnDistribution,
    law: &TailLaw,
    a: &NormalizingSequence,
    n: usize,
) -> Result<NormalizedRenewal> {
    const OP: &str = "normalized_renewal";
    if n < 10 {
        return Err(Error::domain(OP, "N must be >= 10"));
    }
    let beta_hat = estimate_beta(dist, (n / 100).max(2), n / 2).ok_or_else(|| {
        Error::precondition(
            OP,
            format!(
                "beta mismatch: distribution has no tail (finite measure), law has beta = {}",
                law.beta
            ),
        )
    })?;
    let mut warnings = Vec::new();
    if (beta_hat - law.beta).abs() > 0.1 {
        warnings.push(format!(
            "beta mismatch: estimated {beta_hat:.3} from distribution, law has {}",
            law.beta
        ));
    }
    let u = renewal_sequence(dist, n)?;
    let normalized: Vec<f64> = u.iter().enumerate().map(|(i, x)| a.get(i) * x).collect();
    let pts: Vec<(f64, f64)> = log_spaced((n / 1000).max(10) as u64, n as u64, 30)
        .into_iter()
        .map(|m| {
            let e = (normalized[m as usize] - 1.0).abs().max(1e-300);
            ((m as f64).ln(), e.ln())
        })
        .collect();
    Ok(NormalizedRenewal {
        value_at_n: normalized[n],
        slope: linear_slope(&pts),
        beta_hat,
        deficit: dist.deficit(),
        warnings,
        u,
        a: a.clone(),
        normalized,
    })
}
