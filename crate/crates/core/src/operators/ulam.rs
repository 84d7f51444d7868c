//! Ulam discretisation of the induced-map transfer operator on `Ȳ` and its
//! fixed-point density.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::systems::CylinderPartition;

/// Piecewise-constant density on `K` equal bins of `Ȳ` (offset coordinates),
/// normalised so that its mean over `Ȳ` is 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UlamDensity {
    pub width: f64,
    pub values: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    /// Lebesgue measure of `Ȳ` beyond the last resolved cylinder.
    pub unresolved: f64,
}

impl UlamDensity {
    /// Uniform density on `bins` bins of an interval of length `len`.
    pub fn uniform(len: f64, bins: usize) -> Self {
        UlamDensity {
            width: len / bins as f64,
            values: vec![1.0; bins],
            iterations: 0,
            residual: 0.0,
            unresolved: 0.0,
        }
    }

    pub fn bins(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> f64 {
        self.width * self.values.len() as f64
    }

    fn bin(&self, u: f64) -> usize {
        ((u / self.width) as usize).min(self.values.len() - 1)
    }

    pub fn eval(&self, u: f64) -> f64 {
        self.values[self.bin(u)]
    }

    /// `μ̄([a, b])` for offsets `a ≤ b`, with `μ̄(Ȳ) = 1`.
    pub fn measure(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        let (i, j) = (self.bin(a), self.bin(b));
        let total = self.len();
        if i == j {
            return self.values[i] * (b - a) / total;
        }
        let mut m = self.values[i] * ((i + 1) as f64 * self.width - a);
        for k in i + 1..j {
            m += self.values[k] * self.width;
        }
        m += self.values[j] * (b - j as f64 * self.width);
        m / total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UlamOptions {
    pub bins: usize,
    /// Cylinders resolved explicitly; deeper mass follows the last one.
    pub cylinders: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for UlamOptions {
    fn default() -> Self {
        UlamOptions {
            bins: 1024,
            cylinders: 4096,
            tol: 1e-12,
            max_iter: 20_000,
        }
    }
}

/// Adds the Lebesgue measure of `[a, b] ∩ bin_i` to `row[i]` for every bin.
fn deposit(m: &mut [f64], bins: usize, width: f64, j: usize, a: f64, b: f64) {
    if b <= a {
        return;
    }
    let bin = |u: f64| ((u / width) as usize).min(bins - 1);
    let (i0, i1) = (bin(a), bin(b));
    if i0 == i1 {
        m[i0 * bins + j] += b - a;
        return;
    }
    m[i0 * bins + j] += (i0 + 1) as f64 * width - a;
    for i in i0 + 1..i1 {
        m[i * bins + j] += width;
    }
    m[i1 * bins + j] += b - i1 as f64 * width;
}

/// Ulam matrix `M[i][j] = Leb(binᵢ ∩ F̄⁻¹ binⱼ)` and its invariant density by
/// power iteration.
pub fn ulam_density(part: &CylinderPartition, opts: UlamOptions) -> Result<UlamDensity> {
    const OP: &str = "ulam_density";
    let k = opts.bins;
    if k < 2 {
        return Err(Error::domain(OP, "need at least two bins"));
    }
    let (lo, hi) = part.y_interval();
    let len = hi - lo;
    let width = len / k as f64;
    let edges: Vec<f64> = (0..=k).map(|j| j as f64 * width).collect();
    let mut m = vec![0.0; k * k];
    let mut last: Vec<f64> = Vec::new();
    let mut resolved = 0;
    part.for_each_preimage_row(&edges, opts.cylinders, |_, row| {
        for j in 0..k {
            deposit(&mut m, k, width, j, row[j], row[j + 1]);
        }
        last.clear();
        last.extend_from_slice(row);
        resolved += 1;
    });
    let (ra, rb) = part.residual(resolved);
    let unresolved = (rb - ra).max(0.0);
    if unresolved > 0.0 && !last.is_empty() {
        // Deeper cylinders are spread over F̄⁻¹ binⱼ like the deepest one.
        let total = last[k] - last[0];
        let mut a = ra;
        for j in 0..k {
            let b = a + unresolved * (last[j + 1] - last[j]) / total;
            deposit(&mut m, k, width, j, a, b.min(rb));
            a = b;
        }
    }
    let mut h = vec![1.0; k];
    let mut next = vec![0.0; k];
    let mut residual = f64::INFINITY;
    for it in 1..=opts.max_iter {
        next.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..k {
            let hi = h[i];
            let row = &m[i * k..(i + 1) * k];
            for (n, &x) in next.iter_mut().zip(row) {
                *n += hi * x;
            }
        }
        let mass: f64 = next.iter().sum::<f64>() / len;
        for x in next.iter_mut() {
            *x /= width * mass;
        }
        residual = h.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        std::mem::swap(&mut h, &mut next);
        if residual <= opts.tol {
            return Ok(UlamDensity {
                width,
                values: h,
                iterations: it,
                residual,
                unresolved,
            });
        }
    }
    Err(Error::Convergence {
        op: OP,
        iterations: opts.max_iter,
        residual,
    })
}
