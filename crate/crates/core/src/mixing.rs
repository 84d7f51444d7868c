//! Correlation series `ρ_n = ∫ v·w∘fⁿ dμ` by transfer operators and by
//! Monte Carlo, their `a_n`-normalised limits, rate fits and higher-order
//! expansions.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::MarkovTower;
use crate::par::Exec;
use crate::regvar::{NormalizingSequence, TailLaw};
use crate::systems::{DynSystem, InducedOrbit, Point, DEFAULT_CAP};

/// Two-sided 97.5% quantile of Student's t with 31 degrees of freedom.
const T31: f64 = 2.0395;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Operator,
    MonteCarlo,
}

impl Method {
    fn label(self) -> &'static str {
        match self {
            Method::Operator => "operator",
            Method::MonteCarlo => "montecarlo",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub n: usize,
    pub rho: f64,
    pub a_n: f64,
    pub normalized: f64,
    pub target: f64,
    pub lo95: f64,
    pub hi95: f64,
    /// Standard error of `normalized` (Monte Carlo) or its truncation bias
    /// bound (operator).
    pub err: f64,
    /// Pairs with `fⁿy ∈ Y` behind the estimate (Monte Carlo only).
    pub hits: Option<u64>,
    pub reliable: bool,
}

impl SeriesPoint {
    pub fn residual(&self) -> f64 {
        (self.normalized - self.target).abs()
    }

    pub fn relative_residual(&self) -> f64 {
        self.residual() / self.target.abs()
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.hi95 - self.lo95)
    }

    pub fn band_contains(&self, x: f64) -> bool {
        self.lo95 <= x && x <= self.hi95
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSeries {
    pub method: Method,
    pub target: f64,
    pub points: Vec<SeriesPoint>,
}

impl CorrelationSeries {
    pub fn at(&self, n: usize) -> Option<&SeriesPoint> {
        self.points.iter().find(|p| p.n == n)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "n,rho,a_n,normalized,target,lo95,hi95,method")?;
        for p in &self.points {
            writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{}",
                p.n,
                p.rho,
                p.a_n,
                p.normalized,
                p.target,
                p.lo95,
                p.hi95,
                self.method.label()
            )?;
        }
        Ok(())
    }

    /// Reads the CSV written by [`Self::write_csv`].
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Config(format!("series csv line {line}: {msg}"));
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| bad(1, "empty file"))??;
        if header.trim() != "n,rho,a_n,normalized,target,lo95,hi95,method" {
            return Err(bad(1, "unexpected header"));
        }
        let mut points = Vec::new();
        let mut method = None;
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 8 {
                return Err(bad(i + 2, "expected 8 fields"));
            }
            let num = |j: usize| f[j].parse::<f64>().map_err(|_| bad(i + 2, "not a number"));
            let m = match f[7] {
                "operator" => Method::Operator,
                "montecarlo" => Method::MonteCarlo,
                _ => return Err(bad(i + 2, "unknown method")),
            };
            if *method.get_or_insert(m) != m {
                return Err(bad(i + 2, "mixed methods"));
            }
            let (lo, hi) = (num(5)?, num(6)?);
            points.push(SeriesPoint {
                n: f[0].parse().map_err(|_| bad(i + 2, "n is not an integer"))?,
                rho: num(1)?,
                a_n: num(2)?,
                normalized: num(3)?,
                target: num(4)?,
                lo95: lo,
                hi95: hi,
                err: 0.5 * (hi - lo) / T31,
                hits: None,
                reliable: true,
            });
        }
        let target = points.first().map(|p| p.target).ok_or_else(|| bad(2, "no data rows"))?;
        Ok(CorrelationSeries {
            method: method.unwrap_or(Method::Operator),
            target,
            points,
        })
    }
}

/// `ρ_n = Σ_p D_n(p) w̄_p` from the base arrivals of `v`, where `w̄_p` is the
/// `μ`-average of `w` over port `p`. `v` and `w` are atom values on the base.
///
/// The error bar is `a_n |v|_∞ |w|_∞ μ(φ > H)` with `H` the deepest resolved
/// column: the most the unresolved columns could contribute.
pub fn correlation_operator(
    tower: &MarkovTower,
    v: &[f64],
    w: &[f64],
    a: &NormalizingSequence,
    n_grid: &[usize],
) -> Result<CorrelationSeries> {
    const OP: &str = "correlation_operator";
    if v.len() != tower.len() || w.len() != tower.len() {
        return Err(Error::domain(OP, "observables must have one value per atom"));
    }
    let n_max = n_grid.iter().copied().max().unwrap_or(0);
    if n_max > a.len() {
        return Err(Error::Range {
            op: OP,
            index: n_max,
            max: a.len(),
        });
    }
    let orbit = tower.base_orbit(v, n_max);
    let mut wbar = vec![0.0; tower.ports];
    for i in 0..tower.len() {
        let pi = tower.pi[tower.port[i]];
        if pi > 0.0 {
            wbar[tower.port[i]] += tower.mass[i] * w[i] / pi;
        }
    }
    let target = tower.base_integral(v) * tower.base_integral(w);
    let sup = |x: &[f64]| x.iter().fold(0.0f64, |m, y| m.max(y.abs()));
    let resolved = tower.lump_height.map_or(tower.max_height(), |h| h - 1);
    let tails = tower.tails();
    let unresolved = tails.get(resolved).copied().unwrap_or(0.0);
    let points = n_grid
        .iter()
        .map(|&n| {
            let rho = if n == 0 {
                (0..tower.len()).map(|i| tower.mass[i] * v[i] * w[i]).sum()
            } else {
                orbit.arrivals_at(n).iter().zip(&wbar).map(|(d, x)| d * x).sum::<f64>()
            };
            let an = a.get(n);
            let bias = an * sup(v) * sup(w) * unresolved;
            SeriesPoint {
                n,
                rho,
                a_n: an,
                normalized: an * rho,
                target,
                lo95: an * rho - bias,
                hi95: an * rho + bias,
                err: bias,
                hits: None,
                reliable: n <= resolved,
            }
        })
        .collect();
    Ok(CorrelationSeries {
        method: Method::Operator,
        target,
        points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McOptions {
    pub samples: u64,
    pub batches: usize,
    pub burn_in: usize,
    pub cap: u64,
    pub exec: Exec,
}

impl Default for McOptions {
    fn default() -> Self {
        McOptions {
            samples: 1_000_000,
            batches: 32,
            burn_in: 10_000,
            cap: DEFAULT_CAP,
            exec: Exec::Parallel,
        }
    }
}

/// A pair of observables on `Y`.
pub type ObservablePair<'a> = (&'a (dyn Fn(Point) -> f64 + Sync), &'a (dyn Fn(Point) -> f64 + Sync));

struct Batch {
    /// `sums[pair][grid index]`.
    sums: Vec<Vec<f64>>,
    hits: Vec<u64>,
    v_mean: Vec<f64>,
    w_mean: Vec<f64>,
}

/// One stream: a burned-in induced orbit `y_i = F^i y_0` supplies the
/// samples, and `fⁿ y_i ∈ Y` exactly when `n` is a difference of visit
/// times, so one orbit serves every `n` through a ring buffer of the last
/// `n_max` time units.
fn mc_batch(
    sys: &DynSystem,
    pairs: &[ObservablePair],
    grid: &[usize],
    count: u64,
    opts: &McOptions,
    seed: u64,
    stream: u64,
) -> Result<Batch> {
    let n_max = grid.iter().copied().max().unwrap_or(0);
    let size = n_max + 1;
    let mut orbit = InducedOrbit::new(sys, seed, stream, opts.cap, opts.burn_in)?;
    let np = pairs.len();
    let mut stamp = vec![u64::MAX; size];
    let mut ring_v = vec![0.0; size * np];
    let mut b = Batch {
        sums: vec![vec![0.0; grid.len()]; np],
        hits: vec![0; grid.len()],
        v_mean: vec![0.0; np],
        w_mean: vec![0.0; np],
    };
    let mut t: u64 = 0;
    let mut last_source: u64 = 0;
    let mut i: u64 = 0;
    let mut wv = vec![0.0; np];
    loop {
        let y = orbit.current();
        if i >= count && t > last_source + n_max as u64 {
            break;
        }
        for (k, (_, w)) in pairs.iter().enumerate() {
            wv[k] = w(y);
        }
        for (g, &n) in grid.iter().enumerate() {
            let n = n as u64;
            if n > t {
                continue;
            }
            let slot = ((t - n) % size as u64) as usize;
            if stamp[slot] == t - n {
                b.hits[g] += 1;
                for k in 0..np {
                    b.sums[k][g] += ring_v[slot * np + k] * wv[k];
                }
            }
        }
        if i < count {
            let slot = (t % size as u64) as usize;
            stamp[slot] = t;
            for (k, (v, _)) in pairs.iter().enumerate() {
                let x = v(y);
                ring_v[slot * np + k] = x;
                b.v_mean[k] += x;
                b.w_mean[k] += wv[k];
            }
            last_source = t;
        }
        i += 1;
        let s = orbit.next_sample()?;
        t += s.phi;
    }
    let c = count as f64;
    for k in 0..np {
        b.v_mean[k] /= c;
        b.w_mean[k] /= c;
        for x in &mut b.sums[k] {
            *x /= c;
        }
    }
    Ok(b)
}

/// Monte Carlo series for several observable pairs sharing the same orbits.
/// `∫v` and `∫w` are Birkhoff averages along the samples; bands are
/// batch-means 95% intervals over independent streams.
pub fn correlation_montecarlo_multi(
    sys: &DynSystem,
    pairs: &[ObservablePair],
    a: &NormalizingSequence,
    n_grid: &[usize],
    opts: McOptions,
    seed: u64,
) -> Result<Vec<CorrelationSeries>> {
    const OP: &str = "correlation_montecarlo";
    if opts.batches < 2 {
        return Err(Error::domain(OP, "need at least two batches"));
    }
    let n_max = n_grid.iter().copied().max().unwrap_or(0);
    if n_max > a.len() {
        return Err(Error::Range {
            op: OP,
            index: n_max,
            max: a.len(),
        });
    }
    if n_max as u64 >= opts.cap {
        return Err(Error::domain(OP, "n_max must stay below the return-time cap"));
    }
    let per = opts.samples / opts.batches as u64;
    if per == 0 {
        return Err(Error::domain(OP, "fewer samples than batches"));
    }
    let batches: Vec<Result<Batch>> = opts.exec.map_range(opts.batches, |s| {
        mc_batch(sys, pairs, n_grid, per, &opts, seed, s as u64)
    });
    let batches: Vec<Batch> = batches.into_iter().collect::<Result<_>>()?;
    let nb = batches.len() as f64;
    let mut out = Vec::with_capacity(pairs.len());
    for k in 0..pairs.len() {
        let vm = batches.iter().map(|b| b.v_mean[k]).sum::<f64>() / nb;
        let wm = batches.iter().map(|b| b.w_mean[k]).sum::<f64>() / nb;
        let target = vm * wm;
        let points = n_grid
            .iter()
            .enumerate()
            .map(|(g, &n)| {
                let an = a.get(n);
                let xs: Vec<f64> = batches.iter().map(|b| an * b.sums[k][g]).collect();
                let mean = xs.iter().sum::<f64>() / nb;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nb - 1.0);
                let se = (var / nb).sqrt();
                let hits: u64 = batches.iter().map(|b| b.hits[g]).sum();
                SeriesPoint {
                    n,
                    rho: mean / an,
                    a_n: an,
                    normalized: mean,
                    target,
                    lo95: mean - T31 * se,
                    hi95: mean + T31 * se,
                    err: se,
                    hits: Some(hits),
                    reliable: hits >= 100,
                }
            })
            .collect();
        out.push(CorrelationSeries {
            method: Method::MonteCarlo,
            target,
            points,
        });
    }
    Ok(out)
}

pub fn correlation_montecarlo(
    sys: &DynSystem,
    v: &(dyn Fn(Point) -> f64 + Sync),
    w: &(dyn Fn(Point) -> f64 + Sync),
    a: &NormalizingSequence,
    n_grid: &[usize],
    opts: McOptions,
    seed: u64,
) -> Result<CorrelationSeries> {
    Ok(correlation_montecarlo_multi(sys, &[(v, w)], a, n_grid, opts, seed)?.remove(0))
}

/// `{2^k} ∪ extra`, sorted, within `[1, n_max]`.
pub fn geometric_grid(n_max: usize, extra: &[usize]) -> Vec<usize> {
    let mut g: Vec<usize> = (0..usize::BITS)
        .map(|k| 1usize << k)
        .take_while(|&n| n <= n_max)
        .collect();
    g.extend(extra.iter().copied().filter(|&n| n >= 1 && n <= n_max));
    g.sort_unstable();
    g.dedup();
    g
}

/// Largest `|x - y| / sqrt(se_x² + se_y²)` over common grid points.
pub fn max_z_score(x: &CorrelationSeries, y: &CorrelationSeries) -> f64 {
    x.points
        .iter()
        .filter_map(|p| y.at(p.n).map(|q| (p, q)))
        .map(|(p, q)| (p.normalized - q.normalized).abs() / (p.err.powi(2) + q.err.powi(2)).sqrt())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RateSpec {
    /// Fixes the log power `c`; fitted over `c_range` otherwise.
    pub c: Option<f64>,
    pub c_range: (f64, f64),
    pub tau_range: (f64, f64),
    /// Allowed factor between a residual and the fitted envelope.
    pub slack: f64,
}

impl Default for RateSpec {
    fn default() -> Self {
        RateSpec {
            c: None,
            c_range: (-1.0, 3.0),
            tau_range: (0.0, 2.0),
            slack: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnCheck {
    pub sup: f64,
    /// `max_n n |b_{n+1} - b_n|`.
    pub lipschitz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateModel {
    pub tau: Option<f64>,
    pub c: Option<f64>,
    pub constant: Option<f64>,
    /// Higher-order coefficients, `d[0] = d_1 = 1`.
    pub d: Vec<f64>,
    pub b_n: BnCheck,
    pub beta: f64,
    pub points: usize,
    /// `max_n residual / (C · envelope)`.
    pub envelope_ratio: Option<f64>,
    pub envelope_holds: bool,
    /// Every residual lies inside its error band: nothing to fit.
    pub no_rate: bool,
}

/// `(log n)^{c+1} n^{-τ} + ℓ(n) n^{-β} (log n)²`.
pub fn rate_envelope(law: &TailLaw, n: usize, tau: f64, c: f64) -> f64 {
    let (nf, l) = (n as f64, (n as f64).ln());
    l.powf(c + 1.0) * nf.powf(-tau) + law.ell(n as u64) * nf.powf(-law.beta) * l * l
}

pub fn b_n_check(d: &[f64], a: &NormalizingSequence) -> BnCheck {
    let b = |n: usize| {
        d.iter()
            .enumerate()
            .map(|(j, dj)| dj * a.get(n).powi(-(j as i32)))
            .sum::<f64>()
    };
    let mut sup: f64 = 0.0;
    let mut lip: f64 = 0.0;
    for n in 1..a.len() {
        let (x, y) = (b(n), b(n + 1));
        sup = sup.max(x.abs());
        lip = lip.max(n as f64 * (y - x).abs());
    }
    BnCheck { sup, lipschitz: lip }
}

/// Least-squares fit of `log |a_nρ_n − target|` against
/// `log C + log envelope(τ, c)` over a `(τ, c)` grid, `C` in closed form.
pub fn fit_rate(
    series: &CorrelationSeries,
    law: &TailLaw,
    a: &NormalizingSequence,
    spec: RateSpec,
) -> Result<RateModel> {
    const OP: &str = "fit_rate";
    let reliable: Vec<&SeriesPoint> = series.points.iter().filter(|p| p.reliable && p.n >= 2).collect();
    let span = |ps: &[&SeriesPoint]| {
        let lo = ps.iter().map(|p| p.n).min().unwrap_or(1) as f64;
        let hi = ps.iter().map(|p| p.n).max().unwrap_or(1) as f64;
        (hi / lo).log10()
    };
    if reliable.len() < 10 || span(&reliable) < 2.0 - 1e-9 {
        return Err(Error::precondition(
            OP,
            "need at least 10 reliable points spanning two decades",
        ));
    }
    let b_n = b_n_check(&[1.0], a);
    let signal: Vec<&SeriesPoint> = reliable
        .iter()
        .copied()
        .filter(|p| p.residual() > p.half_width())
        .collect();
    if signal.is_empty() {
        return Ok(RateModel {
            tau: None,
            c: None,
            constant: None,
            d: vec![1.0],
            b_n,
            beta: law.beta,
            points: 0,
            envelope_ratio: None,
            envelope_holds: false,
            no_rate: true,
        });
    }
    if signal.len() < 3 {
        return Err(Error::Fit {
            op: OP,
            msg: format!("only {} points rise above the noise", signal.len()),
        });
    }
    let logs: Vec<f64> = signal.iter().map(|p| p.residual().ln()).collect();
    let cs: Vec<f64> = match spec.c {
        Some(c) => vec![c],
        None => {
            let steps = ((spec.c_range.1 - spec.c_range.0) / 0.05).round() as usize;
            (0..=steps).map(|i| spec.c_range.0 + 0.05 * i as f64).collect()
        }
    };
    let tau_steps = ((spec.tau_range.1 - spec.tau_range.0) / 1e-3).round() as usize;
    let mut best = (f64::INFINITY, 0.0, 0.0, 0.0);
    for &c in &cs {
        for i in 0..=tau_steps {
            let tau = spec.tau_range.0 + 1e-3 * i as f64;
            let env: Vec<f64> = signal.iter().map(|p| rate_envelope(law, p.n, tau, c).ln()).collect();
            let log_c = logs.iter().zip(&env).map(|(r, e)| r - e).sum::<f64>() / logs.len() as f64;
            let sse: f64 = logs.iter().zip(&env).map(|(r, e)| (r - e - log_c).powi(2)).sum();
            if sse < best.0 {
                best = (sse, tau, c, log_c);
            }
        }
    }
    let (_, tau, c, log_c) = best;
    let constant = log_c.exp();
    let ratio = reliable
        .iter()
        .map(|p| p.residual() / (constant * rate_envelope(law, p.n, tau, c)))
        .fold(0.0, f64::max);
    Ok(RateModel {
        tau: Some(tau),
        c: Some(c),
        constant: Some(constant),
        d: vec![1.0],
        b_n,
        beta: law.beta,
        points: signal.len(),
        envelope_ratio: Some(ratio),
        envelope_holds: ratio <= spec.slack,
        no_rate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CnRegime {
    /// `(log n) n^{-1/2}`.
    Half,
    /// `(log n) n^{-β}`.
    Beta,
    /// `(log n)² n^{-1}`.
    One,
}

impl CnRegime {
    pub fn eval(self, n: usize, beta: f64) -> f64 {
        let (nf, l) = (n as f64, (n as f64).ln());
        match self {
            CnRegime::Half => l / nf.sqrt(),
            CnRegime::Beta => l * nf.powf(-beta),
            CnRegime::One => l * l / nf,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HigherOrderPoint {
    pub n: usize,
    /// `|ρ_n − a_n^{-1} ∫v∫w|`.
    pub first_order: f64,
    /// `|ρ_n − Σ_j d_j a_n^{-j} ∫v∫w|`.
    pub higher_order: f64,
    pub envelope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HigherOrderReport {
    pub d: Vec<f64>,
    pub regime: CnRegime,
    pub points: Vec<HigherOrderPoint>,
    /// `max higher_order / envelope`.
    pub envelope_constant: f64,
    pub b_n: BnCheck,
}

pub fn higher_order_check(
    series: &CorrelationSeries,
    law: &TailLaw,
    a: &NormalizingSequence,
    d: &[f64],
    regime: CnRegime,
) -> Result<HigherOrderReport> {
    if d.first() != Some(&1.0) {
        return Err(Error::precondition("higher_order_check", "d_1 must equal 1"));
    }
    let t = series.target;
    let points: Vec<HigherOrderPoint> = series
        .points
        .iter()
        .filter(|p| p.n >= 2)
        .map(|p| {
            let an = a.get(p.n);
            let expansion: f64 = d.iter().enumerate().map(|(j, dj)| dj * an.powi(-(j as i32 + 1))).sum();
            HigherOrderPoint {
                n: p.n,
                first_order: (p.rho - t / an).abs(),
                higher_order: (p.rho - expansion * t).abs(),
                envelope: regime.eval(p.n, law.beta),
            }
        })
        .collect();
    Ok(HigherOrderReport {
        envelope_constant: points.iter().map(|p| p.higher_order / p.envelope).fold(0.0, f64::max),
        d: d.to_vec(),
        regime,
        points,
        b_n: b_n_check(d, a),
    })
}

/// Least-squares `d₂` in `ρ_n ≈ (a_n^{-1} + d₂ a_n^{-2}) ∫v∫w`, relative to
/// the first-order term, over the points selected by `keep`.
pub fn fit_d2(series: &CorrelationSeries, keep: impl Fn(usize) -> bool) -> Result<f64> {
    let t = series.target;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, p) in series.points.iter().enumerate() {
        if !keep(i) || p.n < 2 {
            continue;
        }
        let e = (p.a_n * p.rho - t) * p.a_n / t;
        let w = p.a_n.powi(-2);
        num += w * e;
        den += w;
    }
    if den == 0.0 || !num.is_finite() {
        return Err(Error::Fit {
            op: "fit_d2",
            msg: "no points to fit".into(),
        });
    }
    Ok(num / den)
}
