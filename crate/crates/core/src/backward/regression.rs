//! Least-squares conditional expectations on a polynomial basis in the forward
//! state, optionally multiplied by tangent features, jointly with the forward
//! increment so that the `Z` coefficient is read off the same fit.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionConfig {
    /// Total polynomial degree in the state coordinates.
    pub degree: usize,
    /// Ridge, relative to the mean Gram diagonal, added when the Gram matrix fails to factor.
    pub ridge: f64,
    /// Minimum particles per candidate column.
    pub min_per_column: usize,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self { degree: 3, ridge: 1e-8, min_per_column: 16 }
    }
}

impl RegressionConfig {
    pub fn with_degree(degree: usize) -> Self {
        Self { degree, ..Self::default() }
    }
}

/// Exponent vectors of all monomials in `d` variables with total degree `<= deg`.
fn monomials(d: usize, deg: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; d]];
    for total in 1..=deg {
        let mut cur = vec![0; d];
        fn rec(pos: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if pos + 1 == cur.len() {
                cur[pos] = left;
                out.push(cur.clone());
                return;
            }
            for e in (0..=left).rev() {
                cur[pos] = e;
                rec(pos + 1, left - e, cur, out);
            }
        }
        rec(0, total, &mut cur, &mut out);
    }
    out
}

/// Regression design at one node, shared by every backward path.
#[derive(Debug, Clone)]
pub struct Design {
    n: usize,
    d: usize,
    q: usize,
    /// `[N][q]` products of standardized monomials and scaled features.
    base: Vec<f64>,
    /// `[N][d]` increments divided by `√Δ`.
    dws: Vec<f64>,
    inv_sqrt_dt: f64,
    /// Kept columns as `(base index, part)`, part 0 is the plain column and
    /// part `l + 1` the column times `ΔW^l`.
    kept: Vec<(usize, usize)>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

/// Fitted coefficients for one target.
#[derive(Debug, Clone)]
pub struct Fit {
    pub coef: Vec<f64>,
}

impl Design {
    /// `x` is `[N][d]`, `feats` is `[N][nf]` (a constant feature is always added), `dw` is `[N][d]`.
    pub fn new(x: &[f64], d: usize, feats: &[f64], nf: usize, dw: &[f64], dt: f64, cfg: &RegressionConfig) -> Result<Self> {
        let n = x.len() / d;
        let monos = monomials(d, cfg.degree);
        let q = monos.len() * (nf + 1);
        let candidates = q * (d + 1);
        if n < cfg.min_per_column * candidates {
            return Err(Error::RegressionSingular(format!("{n} particles for {candidates} columns")));
        }
        let mut mean = vec![0.0; d];
        let mut sd = vec![0.0; d];
        for j in 0..d {
            let m = (0..n).map(|i| x[i * d + j]).sum::<f64>() / n as f64;
            let v = (0..n).map(|i| (x[i * d + j] - m).powi(2)).sum::<f64>() / n as f64;
            mean[j] = m;
            sd[j] = if v > 0.0 { v.sqrt() } else { 1.0 };
        }
        let mut fscale = vec![1.0; nf];
        for (c, s) in fscale.iter_mut().enumerate() {
            let r = ((0..n).map(|i| feats[i * nf + c].powi(2)).sum::<f64>() / n as f64).sqrt();
            if r > 0.0 {
                *s = 1.0 / r;
            }
        }
        let mut base = vec![0.0; n * q];
        let mut u = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                u[j] = (x[i * d + j] - mean[j]) / sd[j];
            }
            let row = &mut base[i * q..(i + 1) * q];
            for (a, e) in monos.iter().enumerate() {
                let p: f64 = e.iter().zip(&u).map(|(&k, &v)| v.powi(k as i32)).product();
                row[a * (nf + 1)] = p;
                for c in 0..nf {
                    row[a * (nf + 1) + c + 1] = p * feats[i * nf + c] * fscale[c];
                }
            }
        }
        let inv_sqrt_dt = 1.0 / dt.sqrt();
        let dws: Vec<f64> = dw.iter().map(|v| v * inv_sqrt_dt).collect();
        let mut design = Design { n, d, q, base, dws, inv_sqrt_dt, kept: Vec::new(), chol: DMatrix::<f64>::identity(1, 1).cholesky().unwrap() };

        let all: Vec<(usize, usize)> = (0..=d).flat_map(|part| (0..q).map(move |j| (j, part))).collect();
        let p = all.len();
        let mut gram = DMatrix::<f64>::zeros(p, p);
        let mut col = vec![0.0; p];
        for i in 0..n {
            for (c, &(j, part)) in all.iter().enumerate() {
                col[c] = design.value(i, j, part);
            }
            for a in 0..p {
                let ca = col[a];
                if ca == 0.0 {
                    continue;
                }
                for b in a..p {
                    gram[(a, b)] += ca * col[b];
                }
            }
        }
        for a in 0..p {
            for b in a..p {
                gram[(a, b)] /= n as f64;
                gram[(b, a)] = gram[(a, b)];
            }
        }
        // In-order pivoted Cholesky: keep a column only if it adds new directions.
        let mut kept_idx: Vec<usize> = Vec::new();
        let mut l: Vec<Vec<f64>> = Vec::new();
        for j in 0..p {
            let gjj = gram[(j, j)];
            if !(gjj > 0.0) {
                continue;
            }
            let mut row = Vec::with_capacity(kept_idx.len() + 1);
            for (r, &kr) in kept_idx.iter().enumerate() {
                let mut v = gram[(j, kr)];
                for s in 0..r {
                    v -= row[s] * l[r][s];
                }
                row.push(v / l[r][r]);
            }
            let diag = gjj - row.iter().map(|v| v * v).sum::<f64>();
            if diag > 1e-9 * gjj {
                row.push(diag.sqrt());
                l.push(row);
                kept_idx.push(j);
            }
        }
        let k = kept_idx.len();
        let mut g = DMatrix::<f64>::zeros(k, k);
        let mut tr = 0.0;
        for a in 0..k {
            for b in 0..k {
                g[(a, b)] = gram[(kept_idx[a], kept_idx[b])];
            }
            tr += g[(a, a)];
        }
        // The ridge only repairs a Gram matrix that fails to factor.
        let chol = match g.clone().cholesky() {
            Some(c) => c,
            None => {
                let ridge = cfg.ridge * tr / k.max(1) as f64;
                for a in 0..k {
                    g[(a, a)] += ridge;
                }
                g.cholesky().ok_or_else(|| Error::RegressionSingular("Gram matrix not positive definite after ridge".into()))?
            }
        };
        design.chol = chol;
        design.kept = kept_idx.iter().map(|&c| all[c]).collect();
        Ok(design)
    }

    #[inline]
    fn value(&self, i: usize, j: usize, part: usize) -> f64 {
        let b = self.base[i * self.q + j];
        if part == 0 {
            b
        } else {
            b * self.dws[i * self.d + part - 1]
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_columns(&self) -> usize {
        self.kept.len()
    }

    pub fn fit(&self, target: &[f64]) -> Fit {
        let k = self.kept.len();
        let mut rhs = DVector::<f64>::zeros(k);
        for (i, &t) in target.iter().enumerate() {
            for (c, &(j, part)) in self.kept.iter().enumerate() {
                rhs[c] += self.value(i, j, part) * t;
            }
        }
        rhs /= self.n as f64;
        Fit { coef: self.chol.solve(&rhs).iter().copied().collect() }
    }

    /// Part of the fit not multiplied by the increment: the conditional mean given the state.
    pub fn a_part(&self, fit: &Fit, i: usize) -> f64 {
        self.kept.iter().zip(&fit.coef).filter(|((_, p), _)| *p == 0).map(|(&(j, _), c)| c * self.base[i * self.q + j]).sum()
    }

    /// Coefficient of `ΔW^l` in the fit, i.e. the `Z` component `l`.
    pub fn b_part(&self, fit: &Fit, i: usize, l: usize) -> f64 {
        self.kept
            .iter()
            .zip(&fit.coef)
            .filter(|((_, p), _)| *p == l + 1)
            .map(|(&(j, _), c)| c * self.base[i * self.q + j])
            .sum::<f64>()
            * self.inv_sqrt_dt
    }

    /// Full fitted value at particle `i`.
    pub fn fitted(&self, fit: &Fit, i: usize) -> f64 {
        self.kept.iter().zip(&fit.coef).map(|(&(j, p), c)| c * self.value(i, j, p)).sum()
    }

    /// Unbiased residual variance of `target` around the full fit.
    pub fn residual_variance(&self, fit: &Fit, target: &[f64]) -> f64 {
        let ss: f64 = target.iter().enumerate().map(|(i, t)| (t - self.fitted(fit, i)).powi(2)).sum();
        ss / (self.n.saturating_sub(self.kept.len())).max(1) as f64
    }
}
