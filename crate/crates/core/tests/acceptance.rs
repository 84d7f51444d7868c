//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line per
//! criterion; run with `--nocapture` to see them.

use std::time::{Duration, Instant};

use rand::Rng;

use infmix::cli::config::ExperimentConfig;
use infmix::cli::run_pipeline;
use infmix::mixing::{
    correlation_montecarlo, correlation_montecarlo_multi, correlation_operator, fit_rate, geometric_grid, max_z_score,
    McOptions, RateSpec,
};
use infmix::operators::eterms::{fit_envelope, ETermEngine};
use infmix::operators::{build_bundle, convolution_check, level_mass_check, BundleOptions, Fault, MarkovTower};
use infmix::par::Exec;
use infmix::regvar::{a_seq, log_spaced, SlowlyVarying, TailLaw};
use infmix::renewal::{renewal_sequence, ReturnDistribution};
use infmix::systems::{
    check_hyperbolicity, empirical_tail, rng_for, DynSystem, FiberMap, LsvMap, Point, SkewProduct, SyntheticSystem,
    TailFitOptions,
};
use infmix::tower::{
    approx_observable, brute_force_vk, check_approx_bounds, check_support, gamma_psi_l1, Tower, TowerObservable,
    TwoPoint, TwoSidedTower,
};

fn report(id: u32, pass: bool, detail: impl AsRef<str>) -> bool {
    println!(
        "{} criterion {id}: {}",
        if pass { "PASS" } else { "FAIL" },
        detail.as_ref()
    );
    pass
}

fn smooth(beta: f64) -> TailLaw {
    TailLaw::new(beta, SlowlyVarying::Constant { c: 1.0 }, Some(1.0)).unwrap()
}

fn synthetic_tower(beta: f64, len: usize) -> (MarkovTower, TailLaw) {
    let law = smooth(beta);
    let d = ReturnDistribution::from_law(&law, len).unwrap();
    (MarkovTower::from_distribution(&d).unwrap(), law)
}

fn lsv() -> DynSystem {
    DynSystem::Lsv(LsvMap::new(1.25).unwrap())
}

fn normalized_trend(law: &TailLaw) -> [f64; 4] {
    let d = ReturnDistribution::from_law(law, 20_000).unwrap();
    let u = renewal_sequence(&d, 20_000).unwrap();
    let a = a_seq(law, 20_000).unwrap();
    [100, 1000, 10_000, 20_000].map(|n| (a.get(n) * u[n] - 1.0).abs())
}

#[test]
fn criterion_01_renewal_beta_075() {
    let e = normalized_trend(&smooth(0.75));
    let pass = e[0] > e[1] && e[1] > e[2] && e[3] <= 0.15;
    assert!(report(
        1,
        pass,
        format!("|a_n u_n - 1| at 1e2, 1e3, 1e4, 2e4 = {e:.4?}")
    ));
}

#[test]
fn criterion_02_renewal_beta_04() {
    let e = normalized_trend(&smooth(0.4));
    let pass = e[0] > e[1] && e[1] > e[2] && e[3] <= 0.2;
    assert!(report(
        2,
        pass,
        format!("|a_n u_n - 1| at 1e2, 1e3, 1e4, 2e4 = {e:.4?}")
    ));
}

#[test]
fn criterion_03_finite_measure() {
    let mut p = vec![0.5, 0.5];
    p.resize(100, 0.0);
    let u = renewal_sequence(&ReturnDistribution::new(p).unwrap(), 100).unwrap();
    let err = (u[100] - 2.0 / 3.0).abs();
    assert!(report(3, err <= 1e-6, format!("|u_100 - 2/3| = {err:e}")));
}

#[test]
fn criterion_04_convolution() {
    let (t, _) = synthetic_tower(0.75, 2000);
    let r = convolution_check(&t, &vec![1.0; t.len()], 200, None).unwrap();
    let syn = r.max_sup_defect() <= 1e-10;
    let b = build_bundle(&lsv(), BundleOptions::default()).unwrap();
    let v: Vec<f64> = (0..b.tower.len()).map(|i| 1.0 + (i % 5) as f64 / 5.0).collect();
    let l = convolution_check(&b.tower, &v, 200, Some(500)).unwrap();
    let worst = l
        .l1_defect
        .iter()
        .zip(&l.truncation_bound)
        .map(|(d, b)| if *b > 0.0 { d / b } else { 0.0 })
        .fold(0.0, f64::max);
    let pass = syn && l.within_bound();
    assert!(report(
        4,
        pass,
        format!(
            "synthetic max defect {:e}; LSV H=500 max defect/bound {worst:.3}",
            r.max_sup_defect()
        )
    ));
}

#[test]
fn criterion_05_level_mass_inequality() {
    let (t, _) = synthetic_tower(0.75, 1000);
    let s = level_mass_check(&t, 100, 20, Fault::None);
    let b = build_bundle(&lsv(), BundleOptions::default()).unwrap();
    let l = level_mass_check(&b.tower, 100, 20, Fault::None);
    let pass = s.violations.is_empty() && l.violations.is_empty();
    assert!(report(
        5,
        pass,
        format!(
            "synthetic {} pairs, {} violations; LSV {} pairs, {} violations",
            s.checked,
            s.violations.len(),
            l.checked,
            l.violations.len()
        )
    ));
}

#[test]
fn criterion_06_tail_exponent() {
    let mut ok = true;
    let mut detail = Vec::new();
    for (gamma, lo, hi) in [(2.0, 0.45, 0.55), (1.25, 0.75, 0.85)] {
        let sys = DynSystem::Lsv(LsvMap::new(gamma).unwrap());
        let start = Instant::now();
        let t = empirical_tail(&sys, 1_000_000, 7, TailFitOptions::default()).unwrap();
        let took = start.elapsed();
        ok &= (lo..=hi).contains(&t.beta_hat) && took <= Duration::from_secs(120);
        detail.push(format!(
            "gamma {gamma}: beta_hat {:.4} in {:.1}s",
            t.beta_hat,
            took.as_secs_f64()
        ));
    }
    assert!(report(6, ok, detail.join("; ")));
}

#[test]
fn criterion_07_operator_residual() {
    let b = build_bundle(&lsv(), BundleOptions::default()).unwrap();
    let law = &b.law;
    let a = a_seq(law, 10_000).unwrap();
    let ones = vec![1.0; b.tower.len()];
    let s = correlation_operator(&b.tower, &ones, &ones, &a, &[100, 1000, 10_000]).unwrap();
    let r: Vec<f64> = s.points.iter().map(|p| p.relative_residual()).collect();
    let last = &s.points[2];
    let bias_ok = s.points.iter().all(|p| p.reliable && p.err < p.residual().abs());
    let pass = r[0] > r[1] && r[1] > r[2] && r[2] <= 0.2 && bias_ok;
    assert!(report(
        7,
        pass,
        format!(
            "relative residual at 1e2, 1e3, 1e4 = {r:.4?}; bias at 1e4 {:e}",
            last.err
        )
    ));
}

#[test]
fn criterion_08_skew_montecarlo() {
    let skew = DynSystem::Skew(SkewProduct::new(LsvMap::new(1.25).unwrap(), FiberMap::Halving).unwrap());
    let law = build_bundle(&lsv(), BundleOptions::default()).unwrap().law;
    let a = a_seq(&law, 4096).unwrap();
    let grid = geometric_grid(4096, &[1000, 4000]);
    let opts = McOptions {
        samples: 10_000_000,
        ..Default::default()
    };
    let v = |p: Point| p.x1 * (1.0 + p.x2 * p.x2);
    let w = |p: Point| (3.0 * p.x1).sin() + p.x2;
    let fv = |p: Point| p.x1;
    let fw = |p: Point| 1.0 + (p.x1 - 0.75).abs();
    let start = Instant::now();
    let mut series = correlation_montecarlo_multi(&skew, &[(&v, &w), (&fv, &fw)], &a, &grid, opts, 1).unwrap();
    let quotient = correlation_montecarlo(&skew.quotient(), &fv, &fw, &a, &grid, opts, 2).unwrap();
    let took = start.elapsed();
    let fiber_const = series.pop().unwrap();
    let dependent = series.pop().unwrap();
    let z = max_z_score(&fiber_const, &quotient);
    let band: Vec<String> = [1000, 4000]
        .iter()
        .map(|&n| {
            let p = dependent.at(n).unwrap();
            format!(
                "n={n}: {:.4} in [{:.4}, {:.4}] vs {:.4}",
                p.normalized, p.lo95, p.hi95, dependent.target
            )
        })
        .collect();
    let band_ok = [1000, 4000]
        .iter()
        .all(|&n| dependent.at(n).unwrap().band_contains(dependent.target));
    let fast = took <= Duration::from_secs(15 * 60);
    report(
        8,
        band_ok && z < 3.0 && fast,
        format!(
            "band {}; quotient vs skew max z {z:.2}; {:.0}s",
            band.join(", "),
            took.as_secs_f64()
        ),
    );
    assert!(z < 3.0 && fast);
}

#[test]
fn criterion_09_fiber_contraction() {
    let skew = SkewProduct::new(LsvMap::new(1.25).unwrap(), FiberMap::Halving).unwrap();
    let r = check_hyperbolicity(&skew, 64, 60, 3).unwrap();
    let exact = r.sup_ratio.iter().all(|&x| x == r.sup_ratio[0]);
    let pass = exact && r.spread == 0.0 && r.disks_invariant && r.gamma0 == 0.5;
    assert!(report(
        9,
        pass,
        format!("sup ratio {:e} for n = 0..60, spread {:e}", r.sup_ratio[0], r.spread)
    ));
}

#[test]
fn criterion_10_approximation() {
    let toy = TwoSidedTower::toy();
    let tv = TowerObservable::on_base(&toy, 64, |_, x| x);
    let mut toy_ok = true;
    for k in 1..=4 {
        let approx = approx_observable(&toy, &tv, k);
        let len = 2 * k + 2;
        for code in 0..(1usize << len) {
            let word: Vec<usize> = (0..len).map(|i| (code >> i) & 1).collect();
            for level in 0..toy.heights[word[0]] {
                let q = TwoPoint {
                    level,
                    word: word.clone(),
                    x2: 0.3,
                };
                toy_ok &= approx.eval(&q).unwrap() == brute_force_vk(&toy, &tv, k, &q, 2 * k, 64).unwrap();
            }
        }
    }
    let b = build_bundle(
        &lsv(),
        BundleOptions {
            depth: 2000,
            bins: 256,
            ports: 4,
            ..Default::default()
        },
    )
    .unwrap();
    let t = TwoSidedTower::over(&Tower::from_markov(&b.tower, 50), FiberMap::Halving).unwrap();
    let mut rng = rng_for(5, 0);
    let table: Vec<f64> = (0..t.symbols() * 16).map(|_| rng.gen::<f64>()).collect();
    let v = TowerObservable::on_base(&t, 16, |s, x| table[s * 16 + (x * 16.0) as usize]);
    let mut violations = 0;
    for k in 1..=5 {
        violations += check_support(&t, &v, k, 300, 9).unwrap().violations();
        if !check_approx_bounds(&t, &v, k, 300, 9).unwrap().sup_ok() {
            violations += 1;
        }
    }
    let g: Vec<f64> = (1..=10).map(|k| gamma_psi_l1(&b.tower, 0.5, k)).collect();
    let decreasing = g.windows(2).all(|w| w[1] < w[0]);
    let pass = toy_ok && violations == 0 && decreasing;
    assert!(report(
        10,
        pass,
        format!("toy oracle equal: {toy_ok}; LSV violations {violations}; |gamma^psi_k|_1 k=1..10 = {g:.4?}")
    ));
}

#[test]
fn criterion_11_error_terms() {
    let (t, law) = synthetic_tower(0.75, 40_000);
    let a = a_seq(&law, 10_000).unwrap();
    let ones = vec![1.0; t.len()];
    let eng = ETermEngine::new(&t, &a, &law, &ones, 10_000).unwrap();
    let grid = log_spaced(100, 10_000, 13);
    let mut lines = Vec::new();
    let (mut e3_ok, mut smooth_ok, mut regular_ok, mut regular_drifts_down) = (true, true, true, true);
    for k in [2, 5, 10] {
        let rows: Vec<_> = grid.iter().map(|&n| eng.eval(&ones, k, n as usize).unwrap()).collect();
        let e3 = fit_envelope(&rows.iter().map(|r| (r.n, r.e3, r.env_e3)).collect::<Vec<_>>());
        let reg = fit_envelope(
            &rows
                .iter()
                .map(|r| (r.n, r.e2_double_prime, r.env_e2_regular.unwrap()))
                .collect::<Vec<_>>(),
        );
        let sm = fit_envelope(
            &rows
                .iter()
                .map(|r| (r.n, r.e2_double_prime, r.env_e2_smooth.unwrap()))
                .collect::<Vec<_>>(),
        );
        e3_ok &= e3.stable;
        smooth_ok &= sm.stable;
        regular_ok &= reg.stable;
        regular_drifts_down &= reg.decade_constants.windows(2).all(|w| w[1].1 < w[0].1);
        let dc = |f: &infmix::operators::EnvelopeFit| f.decade_constants.iter().map(|x| x.1).collect::<Vec<_>>();
        lines.push(format!(
            "k={k}: E3 {:.3?}, E2'' smooth {:.3?}, E2'' regular {:.3?}",
            dc(&e3),
            dc(&sm),
            dc(&reg)
        ));
    }
    report(11, e3_ok && smooth_ok && regular_ok, lines.join("; "));
    assert!(e3_ok && smooth_ok && (regular_ok || regular_drifts_down));
}

#[test]
fn criterion_12_rate_fit() {
    let (t, law) = synthetic_tower(0.75, 40_000);
    let a = a_seq(&law, 10_000).unwrap();
    let ones = vec![1.0; t.len()];
    let grid: Vec<usize> = log_spaced(100, 10_000, 25).into_iter().map(|n| n as usize).collect();
    let s = correlation_operator(&t, &ones, &ones, &a, &grid).unwrap();
    let m = fit_rate(&s, &law, &a, RateSpec::default()).unwrap();
    let oracle = (1.0 - law.beta).min(2.0 * law.beta - 1.0);
    let tau = m.tau.unwrap_or(f64::NAN);
    let pass = m.envelope_holds && (tau - oracle).abs() <= 0.15;
    assert!(report(
        12,
        pass,
        format!(
            "tau_hat {tau:.3} (oracle {oracle}), c {:?}, C {:?}, envelope ratio {:?}",
            m.c, m.constant, m.envelope_ratio
        )
    ));
}

#[test]
fn criterion_13_determinism() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/lsv_beta08.toml");
    let cfg = ExperimentConfig::load(std::path::Path::new(path)).unwrap().config;
    let first = run_pipeline(&cfg).unwrap();
    let second = run_pipeline(&cfg).unwrap();
    let pipeline_ok = first == second;

    let d = ReturnDistribution::from_law(&smooth(0.75), 4000).unwrap();
    let sys = DynSystem::Synthetic(SyntheticSystem::new(d));
    let a = a_seq(&smooth(0.75), 512).unwrap();
    let grid = geometric_grid(512, &[]);
    let one = |_: Point| 1.0;
    let run = |exec| {
        let opts = McOptions {
            samples: 200_000,
            burn_in: 100,
            exec,
            ..Default::default()
        };
        let s = correlation_montecarlo(&sys, &one, &one, &a, &grid, opts, 11).unwrap();
        serde_json::to_vec(&s).unwrap()
    };
    let exec_ok = run(Exec::Sequential) == run(Exec::Parallel);
    let pass = pipeline_ok && exec_ok;
    assert!(report(
        13,
        pass,
        format!(
            "{} pipeline artifacts identical across runs: {pipeline_ok}; sequential = parallel: {exec_ok}",
            first.len()
        )
    ));
}
