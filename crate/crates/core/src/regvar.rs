//! Regularly varying return-time tails `ℓ(n) n^{-β}` and their normalising
//! sequences.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default length of precomputed tail/normaliser tables.
pub const DEFAULT_TABLE_LEN: usize = 100_000;

/// Slowly varying factor `ℓ`. A closed set of families plus a user table so
/// that the invariant checks stay decidable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SlowlyVarying {
    /// `ℓ(n) = c`.
    Constant { c: f64 },
    /// `ℓ(n) = c (ln(n+1))^a`.
    LogPower { c: f64, a: f64 },
    /// `ℓ(n) = values[n-1]` for `n ≤ len`, then the last value.
    Table { values: Vec<f64> },
}

impl SlowlyVarying {
    pub fn eval(&self, n: u64) -> f64 {
        let n = n.max(1);
        match self {
            SlowlyVarying::Constant { c } => *c,
            SlowlyVarying::LogPower { c, a } => c * ((n as f64) + 1.0).ln().powf(*a),
            SlowlyVarying::Table { values } => {
                let i = (n as usize - 1).min(values.len() - 1);
                values[i]
            }
        }
    }

    fn is_table(&self) -> bool {
        matches!(self, SlowlyVarying::Table { .. })
    }
}

/// Tail law `μ(φ > n) = ℓ(n) n^{-β}`, `β ∈ (0, 1]`, with optional smoothness
/// index `q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailLaw {
    pub beta: f64,
    pub ell: SlowlyVarying,
    #[serde(default)]
    pub q: Option<f64>,
}

/// Upper limit of the log-spaced monotonicity scan.
const MONOTONE_SCAN_MAX: f64 = 1e6;

impl TailLaw {
    pub fn new(beta: f64, ell: SlowlyVarying, q: Option<f64>) -> Result<Self> {
        let law = TailLaw { beta, ell, q };
        law.validate()?;
        Ok(law)
    }

    /// `ℓ ≡ c`.
    pub fn constant(beta: f64, c: f64) -> Result<Self> {
        Self::new(beta, SlowlyVarying::Constant { c }, None)
    }

    pub fn with_q(mut self, q: f64) -> Result<Self> {
        self.q = Some(q);
        self.validate()?;
        Ok(self)
    }

    /// Checks range, positivity, eventual monotonicity of the tail, slow
    /// variation and (for `β = 1`) nonintegrability.
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "TailLaw::new";
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::domain(OP, format!("beta = {} not in (0,1]", self.beta)));
        }
        if let Some(q) = self.q {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::domain(OP, format!("q = {q} not in (0,1]")));
            }
        }
        match &self.ell {
            SlowlyVarying::Constant { c } if !(*c > 0.0 && c.is_finite()) => {
                return Err(Error::domain(OP, "constant ell must be positive"));
            }
            SlowlyVarying::LogPower { c, a } if !(*c > 0.0 && a.is_finite()) => {
                return Err(Error::domain(OP, "log-power ell needs c > 0"));
            }
            SlowlyVarying::Table { values }
                if values.is_empty() || values.iter().any(|v| !(*v > 0.0 && v.is_finite())) =>
            {
                return Err(Error::domain(OP, "table ell must be nonempty and positive"));
            }
            _ => {}
        }
        if self.tail_prob(1) > 1.0 + 1e-12 {
            return Err(Error::domain(OP, "tail_prob(1) exceeds 1"));
        }

        // Eventual monotonicity: scan log-spaced points from n0 on.
        let n0 = self.monotone_from();
        let pts = log_spaced(n0, MONOTONE_SCAN_MAX as u64, 200);
        for w in pts.windows(2) {
            if self.tail_prob(w[1]) > self.tail_prob(w[0]) * (1.0 + 1e-12) {
                return Err(Error::domain(
                    OP,
                    format!("tail not nonincreasing between n={} and n={}", w[0], w[1]),
                ));
            }
        }

        let sv = self.slow_variation_defect(1_000_000);
        let bound = match &self.ell {
            SlowlyVarying::LogPower { a, .. } => 1.1 * a.abs() * 2f64.ln() / 1e6f64.ln() + 1e-12,
            _ => 0.01,
        };
        if sv > bound || sv > self.slow_variation_defect(1_000) + 1e-12 {
            return Err(Error::domain(
                OP,
                format!("ell(2n)/ell(n) - 1 = {sv:.3e} at n=1e6 (bound {bound:.3e})"),
            ));
        }

        if self.beta == 1.0 {
            if let SlowlyVarying::LogPower { a, .. } = self.ell {
                if a < -1.0 {
                    return Err(Error::domain(
                        OP,
                        "beta = 1 requires sum ell(n)/n = inf (log-power exponent a >= -1)",
                    ));
                }
            }
        }
        Ok(())
    }

    /// First index from which monotonicity is enforced.
    fn monotone_from(&self) -> u64 {
        match &self.ell {
            // ln(n+1)^a n^{-β} is decreasing once a/((n+1)ln(n+1)) < β/n.
            SlowlyVarying::LogPower { a, .. } if *a > 0.0 => {
                let mut n = 1u64;
                while (*a / ((n as f64 + 1.0) * (n as f64 + 1.0).ln())) >= self.beta / n as f64 {
                    n *= 2;
                }
                n
            }
            SlowlyVarying::Table { values } => values.len().max(1) as u64,
            _ => 1,
        }
    }

    /// `|ℓ(2n)/ℓ(n) - 1|`.
    pub fn slow_variation_defect(&self, n: u64) -> f64 {
        (self.ell.eval(2 * n) / self.ell.eval(n) - 1.0).abs()
    }

    pub fn ell(&self, n: u64) -> f64 {
        self.ell.eval(n)
    }

    /// `μ(φ > n)`; equals 1 at `n = 0`.
    pub fn tail_prob(&self, n: u64) -> f64 {
        if n == 0 {
            return 1.0;
        }
        self.ell.eval(n) * (n as f64).powf(-self.beta)
    }

    /// Point masses `μ(φ = n) = tail(n-1) - tail(n)`, `n = 1..=len`, stored at
    /// index `n - 1`.
    pub fn point_masses(&self, len: usize) -> Vec<f64> {
        (1..=len as u64)
            .map(|n| self.tail_prob(n - 1) - self.tail_prob(n))
            .collect()
    }

    pub fn is_table(&self) -> bool {
        self.ell.is_table()
    }
}

/// `d_β = sin(βπ)/π` for `β ∈ (0,1)`.
pub fn d_beta(beta: f64) -> Result<f64> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::domain("d_beta", format!("beta = {beta} not in (0,1)")));
    }
    Ok((beta * PI).sin() / PI)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Beta1Form {
    /// `a_n = Σ_{j≤n} ℓ(j)/j` (Karamata truncated mean).
    TruncatedMean,
    /// `a_n = Σ_{n<j≤J} ℓ(j)/j`; only valid when the tail sum converges.
    TailSum { j_max: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    BetaBelowOne,
    BetaOne(Beta1Form),
}

/// Normalising constants `a_1..a_N`. `values[n]` holds `a_n`; `values[0]`
/// holds `a_1` by convention (`a_0` never enters a limit statement).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizingSequence {
    pub values: Vec<f64>,
    pub d_beta: Option<f64>,
    pub branch: Branch,
}

impl NormalizingSequence {
    pub fn get(&self, n: usize) -> f64 {
        self.values[n]
    }

    pub fn len(&self) -> usize {
        self.values.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `max_{0≤j≤n/2} a_n / a_{n-k-j}`; the Potter-type ratio.
    pub fn potter_max(&self, n: usize, k: usize) -> f64 {
        let an = self.values[n];
        (0..=n / 2)
            .filter(|&j| n >= k + j)
            .map(|j| an / self.values[n - k - j])
            .fold(0.0, f64::max)
    }
}

/// `a_n` for `n = 1..=len` with the truncated-mean form at `β = 1`.
pub fn a_seq(law: &TailLaw, len: usize) -> Result<NormalizingSequence> {
    a_seq_with(law, len, Beta1Form::TruncatedMean)
}

pub fn a_seq_with(law: &TailLaw, len: usize, beta1: Beta1Form) -> Result<NormalizingSequence> {
    if len < 1 {
        return Err(Error::domain("a_seq", "N must be >= 1"));
    }
    let mut values = vec![0.0; len + 1];
    if law.beta < 1.0 {
        let d = d_beta(law.beta)?;
        for (n, a) in values.iter_mut().enumerate().skip(1) {
            *a = law.ell(n as u64) * (n as f64).powf(1.0 - law.beta) / d;
        }
        values[0] = values[1];
        return Ok(NormalizingSequence {
            values,
            d_beta: Some(d),
            branch: Branch::BetaBelowOne,
        });
    }
    match beta1 {
        Beta1Form::TruncatedMean => {
            let mut acc = 0.0;
            for (n, a) in values.iter_mut().enumerate().skip(1) {
                acc += law.ell(n as u64) / n as f64;
                *a = acc;
            }
        }
        Beta1Form::TailSum { j_max } => {
            let te = tilde_ell(law, 1, j_max)?;
            if te.diverging {
                return Err(Error::domain(
                    "a_seq",
                    "tail sum of ell(j)/j diverges; printed beta=1 form unavailable",
                ));
            }
            let mut upper = te.upper + law.ell(1);
            for (n, a) in values.iter_mut().enumerate().skip(1) {
                upper -= law.ell(n as u64) / n as f64;
                *a = upper.max(0.0);
            }
        }
    }
    values[0] = values[1];
    Ok(NormalizingSequence {
        values,
        d_beta: None,
        branch: Branch::BetaOne(beta1),
    })
}

/// Partial and tail sums of `ℓ(j)/j` around `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TildeEll {
    /// `Σ_{j≤n} ℓ(j)/j`.
    pub partial: f64,
    /// `Σ_{n<j≤J} ℓ(j)/j`.
    pub upper: f64,
    /// Dyadic-block decay exponent of the upper sum; `≤ 1` means divergence.
    pub block_decay: f64,
    pub diverging: bool,
}

/// Both truncations of `ℓ̃`. Divergence is judged from the dyadic block sums
/// `B_k = Σ_{2^k<j≤2^{k+1}} ℓ(j)/j`: for the built-in families `B_k ~ k^{-s}`
/// and the series converges iff `s > 1`.
pub fn tilde_ell(law: &TailLaw, n: u64, j_max: u64) -> Result<TildeEll> {
    if n < 1 {
        return Err(Error::domain("tilde_ell", "n must be >= 1"));
    }
    let j_max = j_max.max(4 * n).max(1 << 10);
    let term = |j: u64| law.ell(j) / j as f64;
    let partial: f64 = (1..=n).map(term).sum();
    let upper: f64 = (n + 1..=j_max).map(term).sum();

    let kmax = 63 - j_max.leading_zeros() as u64;
    let blocks: Vec<(f64, f64)> = (kmax.saturating_sub(6)..kmax)
        .filter(|k| *k >= 1)
        .map(|k| {
            let s: f64 = ((1u64 << k) + 1..=(1u64 << (k + 1))).map(term).sum();
            ((k as f64).ln(), s.ln())
        })
        .collect();
    let block_decay = -linear_slope(&blocks);
    Ok(TildeEll {
        partial,
        upper,
        block_decay,
        diverging: block_decay <= 1.25,
    })
}

/// Smooth-tails diagnostic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothTailReport {
    /// `max_n p_n / (ℓ(n) n^{-(β+q)})`.
    pub c_star: f64,
    pub pass: bool,
    /// Log-log growth rate of `max |ℓ̂(n+1)-ℓ̂(n)| / (ℓ̂(n) n^{-q})` over
    /// dyadic windows of `n`.
    pub increment_growth: f64,
    /// The increment ratio grows slower than `n^{q/2}`.
    pub increment_pass: bool,
}

/// Checks `p_n ≤ C ℓ(n) n^{-(β+q)}` and the equivalent increment condition
/// `|ℓ(n+1) - ℓ(n)| ≪ ℓ(n) n^{-q}` on the empirical `ℓ̂(n) = (1 - Σ_{j≤n} p_j) n^β`.
/// `p[i]` is the mass at `n = i + 1`. Entries may be negative when `p` was
/// derived from a non-monotone `ℓ`; the check still runs.
pub fn check_smooth_tails(p: &[f64], law: &TailLaw, q: f64, c: f64) -> Result<SmoothTailReport> {
    const OP: &str = "check_smooth_tails";
    if p.is_empty() {
        return Err(Error::domain(OP, "empty sequence"));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::domain(OP, format!("q = {q} not in (0,1]")));
    }
    if p.iter().any(|x| !x.is_finite()) || p.iter().sum::<f64>() > 1.0 + 1e-9 {
        return Err(Error::domain(OP, "p must be finite with total mass <= 1"));
    }
    let beta = law.beta;
    let c_star = p
        .iter()
        .enumerate()
        .map(|(i, &pn)| {
            let n = (i + 1) as u64;
            pn / (law.ell(n) * (n as f64).powf(-(beta + q)))
        })
        .fold(f64::NEG_INFINITY, f64::max);

    let mut cum = 0.0;
    let ell_hat: Vec<f64> = p
        .iter()
        .enumerate()
        .map(|(i, &pn)| {
            cum += pn;
            (1.0 - cum) * ((i + 1) as f64).powf(beta)
        })
        .collect();
    let ratio = |i: usize| {
        let (l0, l1) = (ell_hat[i], ell_hat[i + 1]);
        if l0.abs() < 1e-300 {
            return 0.0;
        }
        (l1 - l0).abs() / (l0.abs() * ((i + 1) as f64).powf(-q))
    };
    let len = ell_hat.len();
    let mut windows = Vec::new();
    let mut lo = 8usize;
    while 2 * lo < len {
        let m = (lo..2 * lo).map(ratio).fold(0.0, f64::max);
        if m > 1e-12 {
            windows.push(((lo as f64).ln(), m.ln()));
        }
        lo *= 2;
    }
    let increment_growth = if windows.len() >= 2 {
        linear_slope(&windows)
    } else {
        0.0
    };
    Ok(SmoothTailReport {
        c_star,
        pass: c_star <= c,
        increment_growth,
        increment_pass: increment_growth < 0.5 * q,
    })
}

/// Log-spaced integers in `[lo, hi]`, deduplicated.
pub fn log_spaced(lo: u64, hi: u64, count: usize) -> Vec<u64> {
    let lo = lo.max(1);
    if hi <= lo || count < 2 {
        return vec![lo];
    }
    let (a, b) = ((lo as f64).ln(), (hi as f64).ln());
    let mut v: Vec<u64> = (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp().round() as u64)
        .collect();
    v.dedup();
    v
}

/// Least-squares slope of `y` on `x`.
pub fn linear_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn d_beta_values() {
        assert_relative_eq!(d_beta(0.5).unwrap(), 1.0 / PI, max_relative = 1e-15);
        // sin(3π/4)/π = (√2/2)/π
        assert_relative_eq!(d_beta(0.75).unwrap(), 0.2250790790392765, max_relative = 1e-12);
        assert_relative_eq!(d_beta(1.0 / 3.0).unwrap(), 0.275_664_447_710_896, max_relative = 1e-12);
        assert!(d_beta(1.0).is_err());
        assert!(d_beta(0.0).is_err());
    }

    #[test]
    fn a_seq_examples() {
        let a = a_seq(&TailLaw::constant(0.5, 1.0).unwrap(), 200).unwrap();
        assert_relative_eq!(a.get(100), PI * 10.0, max_relative = 1e-13);
        let a = a_seq(&TailLaw::constant(0.75, 1.0).unwrap(), 20).unwrap();
        assert_relative_eq!(a.get(16), 2.0 / 0.2250790790392765, max_relative = 1e-12);
        // β = 1: truncated mean H_100.
        let a = a_seq(&TailLaw::constant(1.0, 1.0).unwrap(), 100).unwrap();
        let h100: f64 = (1..=100).map(|j| 1.0 / j as f64).sum();
        assert_relative_eq!(a.get(100), h100, max_relative = 1e-14);
        assert_relative_eq!(h100, 5.187377517639621, max_relative = 1e-14);
    }

    #[test]
    fn printed_beta_one_form_needs_convergence() {
        let law = TailLaw::constant(1.0, 1.0).unwrap();
        assert!(a_seq_with(&law, 10, Beta1Form::TailSum { j_max: 1 << 16 }).is_err());
    }

    #[test]
    fn tail_prob_examples() {
        assert_relative_eq!(TailLaw::constant(0.5, 1.0).unwrap().tail_prob(4), 0.5);
        assert_relative_eq!(
            TailLaw::constant(0.75, 1.0).unwrap().tail_prob(16),
            0.125,
            max_relative = 1e-15
        );
        assert_eq!(TailLaw::constant(0.3, 0.7).unwrap().tail_prob(0), 1.0);
    }

    #[test]
    fn tilde_ell_examples() {
        let law = TailLaw::constant(1.0, 1.0).unwrap();
        let t = tilde_ell(&law, 4, 1 << 20).unwrap();
        assert_relative_eq!(t.partial, 1.0 + 0.5 + 1.0 / 3.0 + 0.25, max_relative = 1e-15);
        assert!(t.diverging);

        let law = TailLaw::new(0.5, SlowlyVarying::LogPower { c: 0.4, a: -2.0 }, None).unwrap();
        let t = tilde_ell(&law, 10, 1 << 20).unwrap();
        assert!(!t.diverging, "block decay {}", t.block_decay);
        // Integral comparison: ∫_{n}^{J} dx/(x ln²(x+1)) brackets the sum.
        let lo = 1.0 / (12f64).ln() - 1.0 / ((1u64 << 20) as f64 + 1.0).ln();
        let hi = 1.0 / (11f64).ln() - 1.0 / ((1u64 << 20) as f64).ln() + 0.1;
        assert!(
            t.upper > 0.4 * 0.8 * lo && t.upper < 0.4 * hi,
            "{} not in [{lo},{hi}]",
            t.upper
        );
    }

    #[test]
    fn smooth_tails_examples() {
        // p_n = c n^{-1.5} against ℓ ≡ 1, β = 0.5, q = 1: C* = c exactly.
        let c = 0.3;
        let p: Vec<f64> = (1..=5000).map(|n| c * (n as f64).powf(-1.5)).collect();
        let law = TailLaw::constant(0.5, 1.0).unwrap();
        let r = check_smooth_tails(&p, &law, 1.0, c + 1e-12).unwrap();
        assert_relative_eq!(r.c_star, c, max_relative = 1e-12);
        assert!(r.pass);

        // Geometric masses pass for any (β, q).
        let p: Vec<f64> = (1..=60).map(|n| 0.5f64.powi(n)).collect();
        for (beta, q) in [(0.3, 0.5), (0.9, 1.0)] {
            let law = TailLaw::constant(beta, 1.0).unwrap();
            assert!(check_smooth_tails(&p, &law, q, 10.0).unwrap().pass);
        }

        // ℓ(n) = 2 + (-1)^n: increments never shrink like n^{-q}.
        let beta = 0.5;
        let tail = |n: u64| {
            if n == 0 {
                1.0
            } else {
                (2.0 + if n.is_multiple_of(2) { 1.0 } else { -1.0 }) * (n as f64).powf(-beta) / 3.0
            }
        };
        let p: Vec<f64> = (1..=4000).map(|n| tail(n - 1) - tail(n)).collect();
        for q in [0.1, 0.5, 1.0] {
            let r = check_smooth_tails(&p, &law_half(), q, 10.0).unwrap();
            assert!(!r.increment_pass, "q={q}: {r:?}");
        }
        assert!(check_smooth_tails(&[], &law_half(), 1.0, 1.0).is_err());
    }

    fn law_half() -> TailLaw {
        TailLaw::constant(0.5, 1.0).unwrap()
    }

    #[test]
    fn construction_rejects_bad_laws() {
        assert!(TailLaw::constant(0.0, 1.0).is_err());
        assert!(TailLaw::constant(1.2, 1.0).is_err());
        assert!(TailLaw::constant(0.5, 1.5).is_err());
        assert!(TailLaw::new(1.0, SlowlyVarying::LogPower { c: 0.1, a: -2.0 }, None).is_err());
        assert!(TailLaw::new(0.5, SlowlyVarying::Table { values: vec![] }, None).is_err());
        assert!(TailLaw::constant(0.5, 1.0).unwrap().with_q(1.5).is_err());
    }

    #[test]
    fn regular_variation_of_a() {
        for beta in [0.3, 0.5, 0.8] {
            let a = a_seq(&TailLaw::constant(beta, 1.0).unwrap(), 200_000).unwrap();
            let r = a.get(200_000) / a.get(100_000);
            assert!((r / 2f64.powf(1.0 - beta) - 1.0).abs() < 0.02);
        }
    }

    #[test]
    fn potter_ratio_exact_for_constant_ell() {
        for beta in [0.4, 0.75] {
            let a = a_seq(&TailLaw::constant(beta, 1.0).unwrap(), 5000).unwrap();
            for n in [1000usize, 3000, 5000] {
                for k in [0, n / 10, n / 3] {
                    let exact = (n as f64 / (n - k - n / 2) as f64).powf(1.0 - beta);
                    let got = a.potter_max(n, k);
                    assert!((got / exact - 1.0).abs() < 0.05);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn tail_telescopes(beta in 0.05f64..1.0, k in 1u64..50) {
            let law = TailLaw::constant(beta, 1.0).unwrap();
            let big = 20_000u64;
            let lhs: f64 = (0..big).map(|n| law.tail_prob(n) - law.tail_prob(n + k)).sum();
            let rhs: f64 = (0..k).map(|n| law.tail_prob(n)).sum::<f64>()
                - (big..big + k).map(|n| law.tail_prob(n)).sum::<f64>();
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn a_reproduces_tail(beta in 0.05f64..0.99, n in 1usize..5000) {
            let law = TailLaw::constant(beta, 0.8).unwrap();
            let a = a_seq(&law, 5000).unwrap();
            let d = a.d_beta.unwrap();
            let tail_back = a.get(n) * d / n as f64;
            prop_assert!((tail_back / law.tail_prob(n as u64) - 1.0).abs() < 1e-12);
        }
    }
}
