//! Truncated one-sided and two-sided towers and the approximation
//! `v_k(q) = inf{v(f^k q′) : s(q, q′) ≥ 2ψ_k(q)}` of tower observables.
//!
//! The two-sided tower is symbolic: a base point is a sequence of columns
//! (its future) together with a fiber coordinate `x₂ ∈ [0, 1]` (its past),
//! which is updated on every return by the column map of a [`FiberMap`].

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::MarkovTower;
use crate::renewal::ReturnDistribution;
use crate::systems::{rng_for, FiberMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sided {
    One,
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub height: usize,
    /// Base measure `μ(φ = height)`.
    pub mass: f64,
}

/// Columns of a tower cut at `h_max`, with `μ_Δ = μ × counting`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tower {
    pub sided: Sided,
    pub h_max: usize,
    pub columns: Vec<Column>,
    /// `Σ_{n ≤ h_max} n μ(φ = n)`.
    pub retained_mass: f64,
    /// `μ(φ > h_max)`.
    pub discarded_base_mass: f64,
}

impl Tower {
    pub fn from_distribution(dist: &ReturnDistribution, h_max: usize) -> Self {
        let mut by_height = vec![0.0; dist.len() + 1];
        for (i, &p) in dist.p.iter().enumerate() {
            by_height[i + 1] += p;
        }
        Self::from_heights(by_height, dist.deficit(), h_max)
    }

    /// Aggregates the atoms of a Markov tower by height.
    pub fn from_markov(t: &MarkovTower, h_max: usize) -> Self {
        let mut by_height = vec![0.0; t.max_height() + 1];
        for (a, &h) in t.height.iter().enumerate() {
            by_height[h] += t.mass[a];
        }
        Self::from_heights(by_height, t.dropped, h_max)
    }

    fn from_heights(by_height: Vec<f64>, deficit: f64, h_max: usize) -> Self {
        let mut columns = Vec::new();
        let mut discarded = deficit;
        for (h, &m) in by_height.iter().enumerate().skip(1) {
            if m <= 0.0 {
                continue;
            }
            if h <= h_max {
                columns.push(Column { height: h, mass: m });
            } else {
                discarded += m;
            }
        }
        Tower {
            sided: Sided::One,
            h_max,
            retained_mass: columns.iter().map(|c| c.height as f64 * c.mass).sum(),
            columns,
            discarded_base_mass: discarded,
        }
    }

    /// Fails when more than `eps` of the base was cut away.
    pub fn require_discarded_below(&self, eps: f64) -> Result<()> {
        if self.discarded_base_mass > eps {
            return Err(Error::precondition(
                "tower",
                format!(
                    "truncation at {} discards {:.3e} of the base, above {eps:e}",
                    self.h_max, self.discarded_base_mass
                ),
            ));
        }
        Ok(())
    }

    /// Mass of level `ℓ`, i.e. `μ(φ > ℓ)` restricted to the retained columns.
    pub fn level_masses(&self) -> Vec<f64> {
        let top = self.columns.iter().map(|c| c.height).max().unwrap_or(0);
        let mut m = vec![0.0; top];
        for c in &self.columns {
            for x in &mut m[..c.height] {
                *x += c.mass;
            }
        }
        m
    }

    /// Per-level mass balance of one tower step: level `ℓ + 1` receives what
    /// leaves level `ℓ` without returning, the base receives every top. The
    /// base defect equals the discarded mass.
    pub fn mass_balance(&self) -> (f64, f64) {
        let m = self.level_masses();
        let mut interior: f64 = 0.0;
        for l in 0..m.len().saturating_sub(1) {
            let moved: f64 = self.columns.iter().filter(|c| c.height > l + 1).map(|c| c.mass).sum();
            interior = interior.max((moved - m[l + 1]).abs());
        }
        let tops: f64 = self.columns.iter().map(|c| c.mass).sum();
        (
            interior,
            (tops + self.discarded_base_mass - m.first().copied().unwrap_or(0.0)).abs(),
        )
    }

    /// `ψ_n` for a point given by its level and the heights of the columns
    /// it climbs.
    pub fn psi(&self, q: &TowerPoint, n: usize) -> Result<usize> {
        if let Some(&h) = q.word.iter().find(|&&h| h > self.h_max || h == 0) {
            return Err(Error::Truncation { op: "psi", height: h });
        }
        visits(q.level, &q.word, |&h| h, n)
    }
}

/// A tower point: its level and the sequence of columns visited from now on
/// (the current column first).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TowerPoint {
    pub level: usize,
    pub word: Vec<usize>,
}

/// `#{0 ≤ j < n : f^j q ∈ Y}` along the column sequence `word`.
fn visits<S>(level: usize, word: &[S], height: impl Fn(&S) -> usize, n: usize) -> Result<usize> {
    const OP: &str = "psi";
    if n == 0 {
        return Ok(0);
    }
    let depth = |i: usize| Error::Depth {
        op: OP,
        needed: i + 1,
        available: word.len(),
    };
    let (mut t, mut i) = if level == 0 {
        (0, 0)
    } else {
        let h = height(word.first().ok_or_else(|| depth(0))?);
        if level >= h {
            return Err(Error::domain(
                OP,
                format!("level {level} outside a column of height {h}"),
            ));
        }
        (h - level, 1)
    };
    let mut count = 0;
    while t < n {
        count += 1;
        if t + 1 >= n {
            break;
        }
        t += height(word.get(i).ok_or_else(|| depth(i))?);
        i += 1;
    }
    Ok(count)
}

/// Point of the two-sided tower: `word` lists symbol indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoPoint {
    pub level: usize,
    pub word: Vec<usize>,
    pub x2: f64,
}

/// Two-sided symbolic tower: symbol `s` is a column of height
/// `heights[s]`; on return from it the fiber moves by
/// `x₂ ↦ fiber.column_return(heights[s], x₂)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoSidedTower {
    pub heights: Vec<usize>,
    pub weights: Vec<f64>,
    pub fiber: FiberMap,
}

impl TwoSidedTower {
    pub fn new(heights: Vec<usize>, weights: Vec<f64>, fiber: FiberMap) -> Result<Self> {
        const OP: &str = "two_sided_tower";
        if heights.is_empty() || heights.len() != weights.len() {
            return Err(Error::domain(OP, "need one weight per column"));
        }
        if heights.contains(&0) || weights.iter().any(|&w| !(w >= 0.0)) || !(weights.iter().sum::<f64>() > 0.0) {
            return Err(Error::domain(
                OP,
                "heights must be positive and weights a nonzero measure",
            ));
        }
        fiber.validate()?;
        Ok(TwoSidedTower {
            heights,
            weights,
            fiber,
        })
    }

    /// Two columns of heights 1 and 2 over the halving fiber.
    pub fn toy() -> Self {
        TwoSidedTower {
            heights: vec![1, 2],
            weights: vec![0.5, 0.5],
            fiber: FiberMap::Halving,
        }
    }

    /// The retained columns of a one-sided tower, lifted with `fiber`.
    pub fn over(tower: &Tower, fiber: FiberMap) -> Result<Self> {
        Self::new(
            tower.columns.iter().map(|c| c.height).collect(),
            tower.columns.iter().map(|c| c.mass).collect(),
            fiber,
        )
    }

    pub fn symbols(&self) -> usize {
        self.heights.len()
    }

    pub fn h_max(&self) -> usize {
        self.heights.iter().copied().max().unwrap_or(0)
    }

    fn ret(&self, s: usize, x2: f64) -> f64 {
        self.fiber.column_return(self.heights[s] as u64, x2)
    }

    pub fn psi(&self, q: &TwoPoint, n: usize) -> Result<usize> {
        visits(q.level, &q.word, |&s| self.heights[s], n)
    }

    /// One step of `f_Δ`.
    pub fn step(&self, q: &TwoPoint) -> Result<TwoPoint> {
        let s = *q.word.first().ok_or(Error::Depth {
            op: "tower_step",
            needed: 1,
            available: 0,
        })?;
        if q.level + 1 < self.heights[s] {
            return Ok(TwoPoint {
                level: q.level + 1,
                word: q.word.clone(),
                x2: q.x2,
            });
        }
        if q.word.len() < 2 {
            return Err(Error::Depth {
                op: "tower_step",
                needed: 2,
                available: 1,
            });
        }
        Ok(TwoPoint {
            level: 0,
            word: q.word[1..].to_vec(),
            x2: self.ret(s, q.x2),
        })
    }

    pub fn iterate(&self, q: &TwoPoint, k: usize) -> Result<TwoPoint> {
        let mut p = q.clone();
        for _ in 0..k {
            p = self.step(&p)?;
        }
        Ok(p)
    }

    /// Point with i.i.d. columns drawn from the weights, uniform level and
    /// fiber; `len` symbols of future.
    pub fn sample(&self, rng: &mut impl Rng, len: usize) -> TwoPoint {
        let pick = WeightedIndex::new(&self.weights).expect("validated weights");
        let word: Vec<usize> = (0..len.max(1)).map(|_| pick.sample(rng)).collect();
        TwoPoint {
            level: rng.gen_range(0..self.heights[word[0]]),
            word,
            x2: rng.gen::<f64>(),
        }
    }
}

/// Observable on the two-sided tower, piecewise constant on `bins` equal
/// fiber bins of every cell `(s, ℓ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowerObservable {
    pub bins: usize,
    offsets: Vec<usize>,
    pub values: Vec<f64>,
    /// Vanishes off the base.
    pub supported_in_y: bool,
    /// Hölder exponent in `x₂`.
    pub eta: f64,
    /// Estimated `η`-seminorm at bin resolution.
    pub seminorm: f64,
}

impl TowerObservable {
    /// Tabulates `f(s, ℓ, x)` at the left end `x` of each fiber bin.
    pub fn tabulate(tower: &TwoSidedTower, bins: usize, f: impl Fn(usize, usize, f64) -> f64) -> Self {
        let mut offsets = Vec::with_capacity(tower.symbols() + 1);
        let mut acc = 0;
        for &h in &tower.heights {
            offsets.push(acc);
            acc += h;
        }
        offsets.push(acc);
        let mut values = Vec::with_capacity(acc * bins);
        for (s, &h) in tower.heights.iter().enumerate() {
            for l in 0..h {
                for b in 0..bins {
                    values.push(f(s, l, b as f64 / bins as f64));
                }
            }
        }
        let mut v = TowerObservable {
            bins,
            offsets,
            values,
            supported_in_y: false,
            eta: 1.0,
            seminorm: 0.0,
        };
        v.supported_in_y = tower
            .heights
            .iter()
            .enumerate()
            .all(|(s, &h)| (1..h).all(|l| v.cell(s, l).iter().all(|&x| x == 0.0)));
        v.seminorm = v
            .values
            .chunks(bins)
            .flat_map(|c| c.windows(2).map(|w| (w[1] - w[0]).abs() * bins as f64))
            .fold(0.0, f64::max);
        v
    }

    /// `f(s, x₂)` on the base, zero elsewhere.
    pub fn on_base(tower: &TwoSidedTower, bins: usize, f: impl Fn(usize, f64) -> f64) -> Self {
        Self::tabulate(tower, bins, |s, l, x| if l == 0 { f(s, x) } else { 0.0 })
    }

    fn cell(&self, s: usize, level: usize) -> &[f64] {
        let i = (self.offsets[s] + level) * self.bins;
        &self.values[i..i + self.bins]
    }

    fn bin(&self, x: f64) -> usize {
        ((x * self.bins as f64) as usize).min(self.bins - 1)
    }

    pub fn eval(&self, q: &TwoPoint) -> f64 {
        self.cell(q.word[0], q.level)[self.bin(q.x2)]
    }

    /// `inf v` over the cell `(s, ℓ)` and fibers in `[lo, hi]`.
    fn min_over(&self, s: usize, level: usize, lo: f64, hi: f64) -> f64 {
        self.cell(s, level)[self.bin(lo)..=self.bin(hi)]
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn sup(&self) -> f64 {
        self.values.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// `|v|_∞ + seminorm`.
    pub fn norm(&self) -> f64 {
        self.sup() + self.seminorm
    }
}

/// The approximation `v_k` of an observable, with its global infimum (used
/// where `ψ_k = 0`, since then every `q′` qualifies) precomputed.
pub struct Approximation<'a> {
    tower: &'a TwoSidedTower,
    v: &'a TowerObservable,
    pub k: usize,
    global: f64,
}

pub fn approx_observable<'a>(tower: &'a TwoSidedTower, v: &'a TowerObservable, k: usize) -> Approximation<'a> {
    let mut global = f64::INFINITY;
    for (s, &h) in tower.heights.iter().enumerate() {
        for l in 0..h {
            global = global.min(inf_forward(tower, v, s, l, k, 0.0, 1.0, &[]));
        }
    }
    Approximation { tower, v, k, global }
}

/// `inf v(f^r q′)` over `q′` in cell `(s, level)` with fiber in `[lo, hi]`
/// whose later columns start with `word`; columns beyond `word` are free.
#[allow(clippy::too_many_arguments)]
fn inf_forward(
    t: &TwoSidedTower,
    v: &TowerObservable,
    s: usize,
    level: usize,
    r: usize,
    lo: f64,
    hi: f64,
    word: &[usize],
) -> f64 {
    let h = t.heights[s];
    if level + r < h {
        return v.min_over(s, level + r, lo, hi);
    }
    let r = r - (h - level);
    let (lo, hi) = (t.ret(s, lo), t.ret(s, hi));
    match word.split_first() {
        Some((&next, rest)) => inf_forward(t, v, next, 0, r, lo, hi, rest),
        None => (0..t.symbols())
            .map(|next| inf_forward(t, v, next, 0, r, lo, hi, &[]))
            .fold(f64::INFINITY, f64::min),
    }
}

impl Approximation<'_> {
    /// `v_k(q)`. It depends on `q` only through its level and first
    /// `2ψ_k(q)` columns, so it also defines `v̄_k` on the quotient.
    pub fn eval(&self, q: &TwoPoint) -> Result<f64> {
        self.eval_quotient(q.level, &q.word)
    }

    pub fn eval_quotient(&self, level: usize, word: &[usize]) -> Result<f64> {
        let psi = visits(level, word, |&s| self.tower.heights[s], self.k)?;
        if psi == 0 {
            return Ok(self.global);
        }
        let need = 2 * psi;
        if word.len() < need {
            return Err(Error::Depth {
                op: "approx_observable",
                needed: need,
                available: word.len(),
            });
        }
        Ok(inf_forward(
            self.tower,
            self.v,
            word[0],
            level,
            self.k,
            0.0,
            1.0,
            &word[1..need],
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxReport {
    pub k: usize,
    pub samples: usize,
    /// `sup |v∘f^k − v_k| / (‖v‖ γ^{ψ_k})` with `γ = γ₀^η`.
    pub constant: f64,
    pub vk_sup: f64,
    pub v_sup: f64,
    /// Sampled `sup |v̄_k(q) − v̄_k(q′)| / θ^{s(q,q′)}`, `θ = γ^{1/2}`.
    pub theta_lipschitz: f64,
    /// Points where `v_k` depended on the fiber coordinate.
    pub fiber_dependence: usize,
}

impl ApproxReport {
    pub fn sup_ok(&self) -> bool {
        self.vk_sup <= self.v_sup
    }
}

/// Sampled checks of the approximation bounds at a fixed `k`.
pub fn check_approx_bounds(
    tower: &TwoSidedTower,
    v: &TowerObservable,
    k: usize,
    samples: usize,
    seed: u64,
) -> Result<ApproxReport> {
    let approx = approx_observable(tower, v, k);
    let gamma = tower.fiber.gamma0().powf(v.eta);
    let theta = gamma.sqrt();
    let mut rng = rng_for(seed, k as u64);
    let norm = v.norm().max(f64::MIN_POSITIVE);
    let mut report = ApproxReport {
        k,
        samples,
        constant: 0.0,
        vk_sup: 0.0,
        v_sup: v.sup(),
        theta_lipschitz: 0.0,
        fiber_dependence: 0,
    };
    let len = 2 * k + 2;
    for _ in 0..samples {
        let q = tower.sample(&mut rng, len);
        let vk = approx.eval(&q)?;
        let psi = tower.psi(&q, k)?;
        let moved = v.eval(&tower.iterate(&q, k)?);
        report.constant = report
            .constant
            .max((moved - vk).abs() / (norm * gamma.powi(psi as i32)));
        report.vk_sup = report.vk_sup.max(vk.abs());
        let mut other = q.clone();
        other.x2 = rng.gen::<f64>();
        if approx.eval(&other)? != vk {
            report.fiber_dependence += 1;
        }
        // Same level, first `m ≥ 1` columns shared, column `m` different.
        let m = rng.gen_range(1..len);
        let fresh = tower.sample(&mut rng, len);
        if fresh.word[m] != q.word[m] {
            let mut word = q.word[..m].to_vec();
            word.extend_from_slice(&fresh.word[m..]);
            let other = approx.eval_quotient(q.level, &word)?;
            report.theta_lipschitz = report.theta_lipschitz.max((other - vk).abs() / theta.powi(m as i32));
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportReport {
    pub k: usize,
    pub checked_points: usize,
    /// Points with `v_k(q) ≠ 0` but `f^k q ∉ Y`.
    pub violations_lift: usize,
    pub checked_preimages: usize,
    /// Nonzero terms `v̄_k(q′)` in `(L^k v̄_k)(q)` for `q ∉ Ȳ`.
    pub violations_transfer: usize,
    pub witness: Option<String>,
}

impl SupportReport {
    pub fn violations(&self) -> usize {
        self.violations_lift + self.violations_transfer
    }
}

/// Checks `supp v_k ⊂ f^{-k}Y` and `supp L^k v̄_k ⊂ Ȳ` on sampled points;
/// the second by enumerating every `k`-step preimage in the quotient.
pub fn check_support(
    tower: &TwoSidedTower,
    v: &TowerObservable,
    k: usize,
    samples: usize,
    seed: u64,
) -> Result<SupportReport> {
    const OP: &str = "check_support";
    if !v.supported_in_y {
        return Err(Error::precondition(OP, "observable is not supported in Y"));
    }
    if k == 0 {
        return Err(Error::precondition(OP, "the support inclusions are stated for k ≥ 1"));
    }
    let approx = approx_observable(tower, v, k);
    let mut rng = rng_for(seed, 1 << 20 | k as u64);
    let mut r = SupportReport {
        k,
        checked_points: 0,
        violations_lift: 0,
        checked_preimages: 0,
        violations_transfer: 0,
        witness: None,
    };
    let len = 2 * k + 2;
    for _ in 0..samples {
        let q = tower.sample(&mut rng, len);
        r.checked_points += 1;
        let vk = approx.eval(&q)?;
        if vk != 0.0 && tower.iterate(&q, k)?.level != 0 {
            r.violations_lift += 1;
            r.witness
                .get_or_insert_with(|| format!("v_{k}({q:?}) = {vk} but f^{k} q is off the base"));
        }
        if q.level == 0 {
            continue;
        }
        let mut stack = vec![(q.level, q.word.clone(), k)];
        while let Some((level, word, steps)) = stack.pop() {
            if steps == 0 {
                r.checked_preimages += 1;
                let x = approx.eval_quotient(level, &word)?;
                if x != 0.0 {
                    r.violations_transfer += 1;
                    r.witness.get_or_insert_with(|| {
                        format!(
                            "preimage (level {level}, word {word:?}) of level {} carries {x}",
                            q.level
                        )
                    });
                }
            } else if level > 0 {
                stack.push((level - 1, word, steps - 1));
            } else {
                for s in 0..tower.symbols() {
                    let mut w = Vec::with_capacity(word.len() + 1);
                    w.push(s);
                    w.extend_from_slice(&word);
                    stack.push((tower.heights[s] - 1, w, steps - 1));
                }
            }
        }
    }
    Ok(r)
}

/// `|γ^{ψ_k}|₁ = ∫ γ^{ψ_k} dμ_Δ` over the (truncated) quotient tower.
///
/// `V_t(a)` is the expectation of `γ^{ψ_t}` from the base of atom `a` and
/// `W_t(p)` its average over the atoms of port `p`; a point at level `ℓ > 0`
/// of atom `a` first returns at `r = h_a − ℓ`.
pub fn gamma_psi_l1(tower: &MarkovTower, gamma: f64, k: usize) -> f64 {
    let (na, np) = (tower.len(), tower.ports);
    let inf: Vec<f64> = (0..na).map(|a| tower.in_frac(a)).collect();
    let mut w = vec![vec![0.0; np]; k + 1];
    let mut v_k = vec![1.0; na];
    for t in 0..=k {
        let vt: Vec<f64> = (0..na)
            .map(|a| {
                if t == 0 {
                    1.0
                } else if t <= tower.height[a] {
                    gamma
                } else {
                    let s = t - tower.height[a];
                    gamma * tower.out_row(a).iter().zip(&w[s]).map(|(o, x)| o * x).sum::<f64>()
                }
            })
            .collect();
        for (a, x) in vt.iter().enumerate() {
            w[t][tower.port[a]] += inf[a] * x;
        }
        if t == k {
            v_k = vt;
        }
    }
    let mut total = 0.0;
    for a in 0..na {
        let h = tower.height[a];
        let mut col = v_k[a] + h.saturating_sub(k.max(1)) as f64;
        for r in 1..k.min(h) {
            col += tower.out_row(a).iter().zip(&w[k - r]).map(|(o, x)| o * x).sum::<f64>();
        }
        total += tower.mass[a] * col;
    }
    total
}

/// Exhaustive `v_k` on a small tower: every point of the given level (or of
/// any level when `ψ_k(q) = 0`) with `len` columns drawn from the alphabet
/// and fiber on the grid `{j / grid}`, iterated step by step.
pub fn brute_force_vk(
    tower: &TwoSidedTower,
    v: &TowerObservable,
    k: usize,
    q: &TwoPoint,
    len: usize,
    grid: usize,
) -> Result<f64> {
    let psi = tower.psi(q, k)?;
    let need = 2 * psi;
    let n = tower.symbols();
    let mut best = f64::INFINITY;
    for code in 0..n.pow(len as u32) {
        let mut c = code;
        let word: Vec<usize> = (0..len)
            .map(|_| {
                let s = c % n;
                c /= n;
                s
            })
            .collect();
        if psi > 0 && word[..need] != q.word[..need] {
            continue;
        }
        let levels: Vec<usize> = if psi > 0 {
            vec![q.level]
        } else {
            (0..tower.heights[word[0]]).collect()
        };
        for level in levels {
            if level >= tower.heights[word[0]] {
                continue;
            }
            for j in 0..=grid {
                let p = TwoPoint {
                    level,
                    word: word.clone(),
                    x2: j as f64 / grid as f64,
                };
                best = best.min(v.eval(&tower.iterate(&p, k)?));
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{build_bundle, BundleOptions};
    use crate::systems::{DynSystem, LsvMap};
    use proptest::prelude::{prop_assert, proptest};

    fn pt(level: usize, word: &[usize]) -> TowerPoint {
        TowerPoint {
            level,
            word: word.to_vec(),
        }
    }

    fn geometric_tower(h_max: usize) -> Tower {
        let p: Vec<f64> = (1..=60).map(|n| 0.5f64.powi(n)).collect();
        Tower::from_distribution(&ReturnDistribution::new(p).unwrap(), h_max)
    }

    #[test]
    fn psi_examples() {
        let t = geometric_tower(10);
        assert_eq!(t.psi(&pt(3, &[5]), 0).unwrap(), 0);
        assert_eq!(t.psi(&pt(0, &[5]), 5).unwrap(), 1);
        assert_eq!(t.psi(&pt(0, &[5]), 6).unwrap(), 2);
        assert_eq!(t.psi(&pt(0, &[5, 2, 1]), 9).unwrap(), 4);
        assert_eq!(t.psi(&pt(4, &[5, 2, 1]), 4).unwrap(), 2);
        assert!(matches!(t.psi(&pt(0, &[11]), 3), Err(Error::Truncation { .. })));
        assert!(matches!(t.psi(&pt(0, &[2]), 5), Err(Error::Depth { .. })));
    }

    #[test]
    fn retained_mass_and_balance() {
        let t = geometric_tower(20);
        let expect: f64 = (1..=20).map(|n| n as f64 * 0.5f64.powi(n)).sum();
        assert!((t.retained_mass - expect).abs() < 1e-15);
        assert!((t.discarded_base_mass - 0.5f64.powi(20)).abs() < 1e-15);
        assert!(t.require_discarded_below(1e-4).is_ok());
        assert!(geometric_tower(5).require_discarded_below(1e-4).is_err());
        let (interior, base) = t.mass_balance();
        assert!(interior < 1e-15);
        assert!((base - t.discarded_base_mass).abs() < 1e-15);
    }

    fn x2_obs(t: &TwoSidedTower) -> TowerObservable {
        TowerObservable::on_base(t, 64, |_, x| x)
    }

    #[test]
    fn toy_vk_equals_enumeration() {
        let t = TwoSidedTower::toy();
        let v = x2_obs(&t);
        for k in 1..=4 {
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
                    let fast = approx.eval(&q).unwrap();
                    let slow = brute_force_vk(&t, &v, k, &q, 2 * k, 64).unwrap();
                    assert_eq!(fast, slow, "k={k} q={q:?}");
                }
            }
        }
    }

    #[test]
    fn constant_on_base_gives_indicator() {
        let t = TwoSidedTower::toy();
        let v = TowerObservable::on_base(&t, 8, |_, _| 2.5);
        // Every point of the toy tower visits the base within 2 steps, so
        // for k ≥ 2 the cylinder fixes whether f^k q lies in Y.
        for k in 2..=5 {
            let approx = approx_observable(&t, &v, k);
            for code in 0..(1usize << (2 * k + 2)) {
                let word: Vec<usize> = (0..2 * k + 2).map(|i| (code >> i) & 1).collect();
                for level in 0..t.heights[word[0]] {
                    let q = TwoPoint {
                        level,
                        word: word.clone(),
                        x2: 0.9,
                    };
                    let lands = t.iterate(&q, k).unwrap().level == 0;
                    assert_eq!(approx.eval(&q).unwrap(), if lands { 2.5 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn zero_visits_take_the_global_infimum() {
        let t = TwoSidedTower::toy();
        let v = x2_obs(&t);
        let approx = approx_observable(&t, &v, 1);
        let q = TwoPoint {
            level: 1,
            word: vec![1, 0],
            x2: 0.5,
        };
        assert_eq!(t.psi(&q, 1).unwrap(), 0);
        assert_eq!(approx.eval(&q).unwrap(), 0.0);
    }

    fn lsv_two_sided(h_max: usize) -> (TwoSidedTower, MarkovTower) {
        let sys = DynSystem::Lsv(LsvMap::new(1.25).unwrap());
        let b = build_bundle(
            &sys,
            BundleOptions {
                depth: 2000,
                bins: 256,
                ports: 4,
                ..Default::default()
            },
        )
        .unwrap();
        let one = Tower::from_markov(&b.tower, h_max);
        (TwoSidedTower::over(&one, FiberMap::Halving).unwrap(), b.tower)
    }

    #[test]
    fn lsv_support_and_sup_bounds() {
        let (t, _) = lsv_two_sided(50);
        let mut rng = rng_for(5, 0);
        let table: Vec<f64> = (0..t.symbols() * 16).map(|_| rng.gen::<f64>()).collect();
        let v = TowerObservable::on_base(&t, 16, |s, x| table[s * 16 + (x * 16.0) as usize]);
        for k in 1..=5 {
            let r = check_support(&t, &v, k, 200, 9).unwrap();
            assert_eq!(r.violations(), 0, "{:?}", r.witness);
            assert!(r.checked_preimages > 0);
            let a = check_approx_bounds(&t, &v, k, 200, 9).unwrap();
            assert!(a.sup_ok());
            assert_eq!(a.fiber_dependence, 0);
        }
    }

    #[test]
    fn signed_observables_break_the_lift_inclusion_only_where_psi_vanishes() {
        let (t, _) = lsv_two_sided(50);
        let v = TowerObservable::on_base(&t, 16, |s, x| if s % 2 == 0 { x - 0.5 } else { 0.25 });
        let r = check_support(&t, &v, 3, 400, 2).unwrap();
        assert!(r.violations_lift > 0);
        let approx = approx_observable(&t, &v, 3);
        let mut rng = rng_for(2, 1 << 20 | 3);
        for _ in 0..400 {
            let q = t.sample(&mut rng, 8);
            let bad = approx.eval(&q).unwrap() != 0.0 && t.iterate(&q, 3).unwrap().level != 0;
            if bad {
                assert_eq!(t.psi(&q, 3).unwrap(), 0);
            }
        }
    }

    #[test]
    fn hoelder_constant_is_stable() {
        let (t, _) = lsv_two_sided(50);
        let v = TowerObservable::on_base(&t, 1024, |s, x| (s as f64 * 0.1).sin() + x);
        let cs: Vec<f64> = (1..=10)
            .map(|k| check_approx_bounds(&t, &v, k, 300, 4).unwrap().constant)
            .collect();
        let (lo, hi) = cs.iter().fold((f64::MAX, 0.0f64), |(a, b), &c| (a.min(c), b.max(c)));
        assert!(hi.is_finite() && hi <= 2.0 && hi / lo < 2.0, "{cs:?}");
    }

    #[test]
    fn gamma_psi_decreases() {
        let (_, m) = lsv_two_sided(50);
        let m = m.truncated(500);
        let xs: Vec<f64> = (1..=20).map(|k| gamma_psi_l1(&m, 0.5, k)).collect();
        assert!(xs.windows(2).all(|w| w[1] < w[0]), "{xs:?}");
    }

    #[test]
    fn gamma_psi_matches_brute_force_on_iid_tower() {
        // Two columns of heights 1 and 3, equal mass.
        let d = ReturnDistribution::new(vec![0.5, 0.0, 0.5]).unwrap();
        let m = MarkovTower::from_distribution(&d).unwrap();
        let t = TwoSidedTower::new(vec![1, 3], vec![0.5, 0.5], FiberMap::Halving).unwrap();
        for k in 1..=6 {
            let mut exact = 0.0;
            let len = k + 2;
            for code in 0..(1usize << len) {
                let word: Vec<usize> = (0..len).map(|i| (code >> i) & 1).collect();
                let w = 0.5f64.powi(len as i32);
                for level in 0..t.heights[word[0]] {
                    let q = TwoPoint {
                        level,
                        word: word.clone(),
                        x2: 0.0,
                    };
                    exact += w * 0.7f64.powi(t.psi(&q, k).unwrap() as i32);
                }
            }
            assert!((gamma_psi_l1(&m, 0.7, k) - exact).abs() < 1e-12, "k={k}");
        }
    }

    proptest! {
        #[test]
        fn vk_never_exceeds_sup(seed in 0u64..200, k in 1usize..6) {
            let t = TwoSidedTower::new(vec![1, 2, 4], vec![0.5, 0.3, 0.2], FiberMap::Quadratic { kappa: 0.4 }).unwrap();
            let mut rng = rng_for(seed, 0);
            let table: Vec<f64> = (0..3 * 8).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let v = TowerObservable::on_base(&t, 8, |s, x| table[s * 8 + (x * 8.0) as usize]);
            let approx = approx_observable(&t, &v, k);
            for _ in 0..20 {
                let q = t.sample(&mut rng, 2 * k + 2);
                prop_assert!(approx.eval(&q).unwrap().abs() <= v.sup());
            }
        }
    }
}
