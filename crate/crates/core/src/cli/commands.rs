//! Subcommand bodies. Each returns named artifacts; the caller decides where
//! they go.

use serde::Serialize;

use super::config::{ExperimentConfig, Observable, SystemSpec};
use super::Format;
use crate::error::{Error, Result};
use crate::mixing::{
    correlation_montecarlo, correlation_operator, fit_rate, geometric_grid, higher_order_check, CorrelationSeries,
    HigherOrderReport, McOptions, Method, RateModel,
};
use crate::operators::eterms::{fit_envelope, ETermEngine, ETermReport, EnvelopeFit};
use crate::operators::{
    build_bundle, convolution_check, level_mass_check, Fault, LevelMassReport, MarkovTower, OperatorBundle,
};
use crate::regvar::{a_seq, log_spaced, NormalizingSequence, TailLaw};
use crate::renewal::{estimate_beta, renewal_sequence, ReturnDistribution};
use crate::systems::{empirical_tail, write_orbit_csv, CylinderPartition, DynSystem, Point, TailFitOptions};
use crate::tower::Tower;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

impl Artifact {
    fn json<T: Serialize>(name: &str, value: &T) -> Result<Self> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
        bytes.push(b'\n');
        Ok(Artifact {
            name: name.into(),
            bytes,
        })
    }

    fn text(name: &str, bytes: Vec<u8>) -> Self {
        Artifact {
            name: name.into(),
            bytes,
        }
    }
}

/// The operator model of a configured system.
pub struct Model {
    pub sys: DynSystem,
    pub tower: MarkovTower,
    pub law: Option<TailLaw>,
    pub bundle: Option<OperatorBundle>,
    pub dist: Option<ReturnDistribution>,
}

impl Model {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let sys = cfg.system()?;
        match &cfg.system {
            SystemSpec::Lsv { .. } | SystemSpec::Skew { .. } => {
                let bundle = build_bundle(&sys.quotient(), cfg.tower.bundle(None))?;
                Ok(Model {
                    sys,
                    tower: bundle.tower.clone(),
                    law: Some(bundle.law.clone()),
                    bundle: Some(bundle),
                    dist: None,
                })
            }
            _ => {
                let dist = cfg.distribution()?.expect("synthetic or finite");
                Ok(Model {
                    sys,
                    tower: MarkovTower::from_distribution(&dist)?,
                    law: cfg.tail.clone(),
                    bundle: None,
                    dist: Some(dist),
                })
            }
        }
    }

    pub fn law(&self) -> Result<&TailLaw> {
        self.law
            .as_ref()
            .ok_or_else(|| Error::Config("this command needs a heavy-tailed system with a tail law".into()))
    }

    /// `a_n`, or `a_n ≡ 1` for a finite-measure system without a law.
    pub fn normalizer(&self, n: usize) -> Result<NormalizingSequence> {
        match &self.law {
            Some(law) => a_seq(law, n),
            None => Ok(NormalizingSequence {
                values: vec![1.0; n + 1],
                d_beta: None,
                branch: crate::regvar::Branch::BetaBelowOne,
            }),
        }
    }

    /// Atom averages of a fiber-constant observable.
    pub fn project(&self, obs: &Observable, nodes: usize) -> Result<Vec<f64>> {
        let f = |y: f64| obs.eval(Point::base(y));
        let part = CylinderPartition::new(&self.sys.quotient(), self.tower.max_height())?;
        if let Some(b) = &self.bundle {
            return b.project(&part, f, nodes);
        }
        let t = &self.tower;
        (0..t.len())
            .map(|a| {
                let h = t.height[a];
                let (lo, hi) = if Some(h) == t.lump_height {
                    part.residual(h - 1)
                } else {
                    part.interval(h)?
                };
                let s: f64 = (0..nodes)
                    .map(|i| f(lo + (i as f64 + 0.5) * (hi - lo) / nodes as f64))
                    .sum();
                Ok(s / nodes as f64)
            })
            .collect()
    }
}

fn csv(header: &str, rows: impl IntoIterator<Item = String>) -> Vec<u8> {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s.into_bytes()
}

#[derive(Serialize)]
struct RenewalRow {
    n: usize,
    u_n: f64,
    a_n: f64,
    normalized: f64,
}

#[derive(Serialize)]
struct RenewalReport {
    n: usize,
    value_at_n: f64,
    beta_hat: Option<f64>,
    deficit: f64,
    rows: Vec<RenewalRow>,
}

pub fn renewal(cfg: &ExperimentConfig, model: &Model, fmt: Format, fault: Fault) -> Result<Vec<Artifact>> {
    let dist = match &model.dist {
        Some(d) => d.clone(),
        None => model.tower.return_distribution()?,
    };
    let n = cfg.renewal.n;
    let dist = if dist.len() < n {
        let mut p = dist.p.clone();
        p.resize(n, 0.0);
        ReturnDistribution::new(p)?
    } else {
        dist
    };
    let u = renewal_sequence(&dist, n)?;
    let a = model.normalizer(n)?;
    let idx: Vec<usize> = if cfg.renewal.points == 0 {
        (1..=n).collect()
    } else {
        let mut v: Vec<usize> = log_spaced(1, n as u64, cfg.renewal.points)
            .into_iter()
            .map(|x| x as usize)
            .collect();
        v.dedup();
        v
    };
    let rows: Vec<RenewalRow> = idx
        .iter()
        .map(|&k| {
            let an = a.get(k) * fault.an_scale();
            RenewalRow {
                n: k,
                u_n: u[k],
                a_n: an,
                normalized: an * u[k],
            }
        })
        .collect();
    Ok(vec![match fmt {
        Format::Csv => Artifact::text(
            "renewal.csv",
            csv(
                "n,u_n,a_n,a_n_u_n",
                rows.iter()
                    .map(|r| format!("{},{:e},{:e},{:e}", r.n, r.u_n, r.a_n, r.normalized)),
            ),
        ),
        Format::Json => Artifact::json(
            "renewal.json",
            &RenewalReport {
                n,
                value_at_n: a.get(n) * fault.an_scale() * u[n],
                beta_hat: estimate_beta(&dist, (n / 100).max(2), n / 2),
                deficit: dist.deficit(),
                rows,
            },
        )?,
    }])
}

#[derive(Serialize)]
struct TailsReport {
    beta_declared: Option<f64>,
    beta_hat: f64,
    samples: Option<u64>,
    overflows: u64,
    window: (u64, u64),
    tail: Vec<(u64, f64)>,
}

pub fn tails(cfg: &ExperimentConfig, model: &Model, fmt: Format) -> Result<Vec<Artifact>> {
    let spec = &cfg.tails;
    let report = match &model.dist {
        None => {
            let opts = TailFitOptions {
                window: spec.window,
                burn_in: spec.burn_in,
                streams: spec.streams,
                ..Default::default()
            };
            let est = empirical_tail(&model.sys.quotient(), spec.samples, cfg.seed, opts)?;
            TailsReport {
                beta_declared: cfg.beta(),
                beta_hat: est.beta_hat,
                samples: Some(est.samples),
                overflows: est.overflows,
                window: est.window,
                tail: est.tail,
            }
        }
        Some(dist) => {
            let (lo, hi) = spec.window;
            let hi = hi.min(dist.len() as u64 / 2);
            let beta_hat = estimate_beta(dist, lo as usize, hi as usize)
                .ok_or_else(|| Error::Config("no tail to fit: the return law has finite support".into()))?;
            TailsReport {
                beta_declared: cfg.beta(),
                beta_hat,
                samples: None,
                overflows: 0,
                window: (lo, hi),
                tail: log_spaced(lo, hi, 40)
                    .into_iter()
                    .map(|n| (n, dist.tail(n as usize)))
                    .collect(),
            }
        }
    };
    let mut out = vec![match fmt {
        Format::Json => Artifact::json("tails.json", &report)?,
        Format::Csv => Artifact::text(
            "tails.csv",
            csv("n,tail", report.tail.iter().map(|(n, t)| format!("{n},{t:e}"))),
        ),
    }];
    if spec.orbit_steps > 0 {
        let (lo, hi) = model.sys.y_interval();
        let start = spec
            .orbit_start
            .map_or(Point::new(0.5 * (lo + hi), 0.5), |(a, b)| Point::new(a, b));
        let rows = model.sys.orbit(start, spec.orbit_steps)?;
        let mut bytes = Vec::new();
        write_orbit_csv(&rows, &mut bytes)?;
        out.push(Artifact::text("orbit.csv", bytes));
    }
    Ok(out)
}

#[derive(Serialize)]
struct TowerSummary<'a> {
    #[serde(flatten)]
    tower: &'a Tower,
    level_masses: Vec<f64>,
    mass_balance: (f64, f64),
    atoms: usize,
    ports: usize,
    lump_height: Option<usize>,
}

pub fn tower_inspect(cfg: &ExperimentConfig, model: &Model) -> Result<Vec<Artifact>> {
    let tower = match &model.dist {
        Some(d) => Tower::from_distribution(d, cfg.tower.h_max),
        None => Tower::from_markov(&model.tower, cfg.tower.h_max),
    };
    let summary = TowerSummary {
        level_masses: tower.level_masses(),
        mass_balance: tower.mass_balance(),
        atoms: model.tower.len(),
        ports: model.tower.ports,
        lump_height: model.tower.lump_height,
        tower: &tower,
    };
    Ok(vec![Artifact::json("tower.json", &summary)?])
}

pub fn spectrum(model: &Model) -> Result<Vec<Artifact>> {
    let b = model
        .bundle
        .as_ref()
        .ok_or_else(|| Error::Config("spectrum needs an interval map (lsv or skew)".into()))?;
    Ok(vec![Artifact::json("spectrum.json", &b.spectrum())?])
}

#[derive(Serialize)]
struct ConvReport {
    h_max: usize,
    max_sup_defect: f64,
    within_bound: bool,
    partition_defect: f64,
    dropped_tail_mass: f64,
    level_mass: LevelMassReport,
    rows: Vec<(usize, f64, f64, f64)>,
}

pub fn convcheck(cfg: &ExperimentConfig, model: &Model, fmt: Format, fault: Fault) -> Result<Vec<Artifact>> {
    let ones = vec![1.0; model.tower.len()];
    let h = cfg.tower.h_max.min(model.tower.max_height());
    let r = convolution_check(&model.tower, &ones, cfg.operators.convcheck_n, Some(h))?;
    let rows: Vec<(usize, f64, f64, f64)> = (0..=r.n_max)
        .map(|n| (n, r.sup_defect[n], r.l1_defect[n], r.truncation_bound[n]))
        .collect();
    let lm = level_mass_check(
        &model.tower,
        cfg.operators.level_mass_j,
        cfg.operators.level_mass_k,
        fault,
    );
    Ok(match fmt {
        Format::Csv => vec![
            Artifact::text(
                "convcheck.csv",
                csv(
                    "n,sup_defect,l1_defect,bound",
                    rows.iter().map(|(n, s, l, b)| format!("{n},{s:e},{l:e},{b:e}")),
                ),
            ),
            Artifact::json("level_mass.json", &lm)?,
        ],
        Format::Json => vec![Artifact::json(
            "convcheck.json",
            &ConvReport {
                h_max: h,
                max_sup_defect: r.max_sup_defect(),
                within_bound: r.within_bound(),
                partition_defect: r.partition_defect,
                dropped_tail_mass: r.dropped_tail_mass,
                level_mass: lm,
                rows,
            },
        )?],
    })
}

#[derive(Serialize)]
struct EtermFits {
    k: usize,
    e2_regular: Option<EnvelopeFit>,
    e3: EnvelopeFit,
    e2_smooth: Option<EnvelopeFit>,
}

#[derive(Serialize)]
struct EtermReport {
    fits: Vec<EtermFits>,
    rows: Vec<ETermReport>,
}

pub fn eterms(cfg: &ExperimentConfig, model: &Model, fmt: Format) -> Result<Vec<Artifact>> {
    let law = model.law()?;
    let spec = &cfg.operators;
    let grid: Vec<usize> = log_spaced(spec.eterm_range.0, spec.eterm_range.1, spec.eterm_points)
        .into_iter()
        .map(|n| n as usize)
        .collect();
    let n_max = *grid.last().unwrap_or(&1);
    let a = a_seq(law, n_max)?;
    let ones = vec![1.0; model.tower.len()];
    let eng = ETermEngine::new(&model.tower, &a, law, &ones, n_max)?;
    let mut rows = Vec::new();
    let mut fits = Vec::new();
    for &k in &spec.eterm_k {
        let mut here = Vec::new();
        for &n in &grid {
            here.push(eng.eval(&ones, k, n)?);
        }
        let fit = |val: fn(&ETermReport) -> f64, env: fn(&ETermReport) -> Option<f64>| {
            let pts: Option<Vec<_>> = here.iter().map(|r| env(r).map(|e| (r.n, val(r), e))).collect();
            pts.map(|p| fit_envelope(&p))
        };
        fits.push(EtermFits {
            k,
            e2_regular: fit(|r| r.e2_double_prime, |r| r.env_e2_regular),
            e3: fit(|r| r.e3, |r| Some(r.env_e3)).expect("always defined"),
            e2_smooth: fit(|r| r.e2_double_prime, |r| r.env_e2_smooth),
        });
        rows.extend(here);
    }
    Ok(vec![match fmt {
        Format::Json => Artifact::json("eterms.json", &EtermReport { fits, rows })?,
        Format::Csv => {
            let fitted = |k: usize| fits.iter().find(|f| f.k == k).expect("fit per k");
            let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:e}"));
            Artifact::text(
                "eterms.csv",
                csv(
                    "k,n,e2_double_prime,env_e2_regular,c_e2_regular,e3,env_e3,c_e3,env_e2_smooth,c_e2_smooth,identity_defect",
                    rows.iter().map(|r| {
                        let f = fitted(r.k);
                        format!(
                            "{},{},{:e},{},{},{:e},{:e},{:e},{},{},{:e}",
                            r.k,
                            r.n,
                            r.e2_double_prime,
                            opt(r.env_e2_regular),
                            opt(f.e2_regular.as_ref().map(|x| x.constant)),
                            r.e3,
                            r.env_e3,
                            f.e3.constant,
                            opt(r.env_e2_smooth),
                            opt(f.e2_smooth.as_ref().map(|x| x.constant)),
                            r.identity_defect
                        )
                    }),
                ),
            )
        }
    }])
}

pub fn mixing_series(cfg: &ExperimentConfig, model: &Model) -> Result<CorrelationSeries> {
    let spec = &cfg.mixing;
    let (v, w) = cfg.observables(model.sys.y_interval());
    let a = model.normalizer(spec.n_max)?;
    match spec.method {
        Method::Operator => {
            let grid: Vec<usize> = log_spaced(1, spec.n_max as u64, spec.points)
                .into_iter()
                .map(|n| n as usize)
                .collect();
            let mut grid: Vec<usize> = grid
                .into_iter()
                .chain(spec.extra.iter().copied())
                .filter(|&n| n <= spec.n_max)
                .collect();
            grid.sort_unstable();
            grid.dedup();
            let pv = model.project(&v, spec.nodes)?;
            let pw = model.project(&w, spec.nodes)?;
            correlation_operator(&model.tower, &pv, &pw, &a, &grid)
        }
        Method::MonteCarlo => {
            let grid = geometric_grid(spec.n_max, &spec.extra);
            let opts = McOptions {
                samples: spec.samples,
                batches: spec.batches,
                burn_in: spec.burn_in,
                ..Default::default()
            };
            let fv = move |p: Point| v.eval(p);
            let fw = move |p: Point| w.eval(p);
            correlation_montecarlo(&model.sys, &fv, &fw, &a, &grid, opts, cfg.seed)
        }
    }
}

/// Fails when the reliable residuals do not shrink from the first to the
/// last decade of the grid.
pub fn assert_converging(series: &CorrelationSeries) -> Result<()> {
    let pts: Vec<_> = series.points.iter().filter(|p| p.reliable && p.n >= 10).collect();
    let (Some(first), Some(last)) = (pts.first(), pts.last()) else {
        return Err(Error::precondition("mixing_assert", "no reliable points with n >= 10"));
    };
    if last.residual() < first.residual() {
        Ok(())
    } else {
        Err(Error::Fit {
            op: "mixing_assert",
            msg: format!(
                "|a_n rho_n - target| grew from {:.3e} at n = {} to {:.3e} at n = {}",
                first.residual(),
                first.n,
                last.residual(),
                last.n
            ),
        })
    }
}

pub fn mixing_run(cfg: &ExperimentConfig, model: &Model, fmt: Format) -> Result<(CorrelationSeries, Vec<Artifact>)> {
    let series = mixing_series(cfg, model)?;
    if cfg.mixing.assert {
        assert_converging(&series)?;
    }
    let art = match fmt {
        Format::Csv => {
            let mut bytes = Vec::new();
            series.write_csv(&mut bytes)?;
            Artifact::text("mixing.csv", bytes)
        }
        Format::Json => Artifact::json("mixing.json", &series)?,
    };
    Ok((series, vec![art]))
}

#[derive(Serialize)]
struct RateOutput {
    #[serde(flatten)]
    model: RateModel,
    higher_order: HigherOrderReport,
}

pub fn mixing_rate(cfg: &ExperimentConfig, model: &Model, series: &CorrelationSeries) -> Result<Vec<Artifact>> {
    let law = model.law()?;
    let n_max = series.points.iter().map(|p| p.n).max().unwrap_or(1);
    let a = a_seq(law, n_max)?;
    let mut rate = fit_rate(series, law, &a, cfg.mixing.rate)?;
    let ho = higher_order_check(series, law, &a, &cfg.mixing.d, cfg.mixing.regime)?;
    rate.d = cfg.mixing.d.clone();
    rate.b_n = ho.b_n.clone();
    Ok(vec![Artifact::json(
        "rate.json",
        &RateOutput {
            model: rate,
            higher_order: ho,
        },
    )?])
}
