//! Uniform-weight empirical measures, exact W2 transport on equal-size clouds
//! and finite-difference Lions derivatives.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<f64>,
    mean: Vec<f64>,
    second: Vec<f64>,
}

impl EmpiricalMeasure {
    /// Builds a measure from row-major points `[N][dim]`.
    pub fn new(points: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return Err(Error::LengthMismatch { expected: dim.max(1), got: points.len() });
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonfiniteState { node: 0 });
        }
        let n = points.len() / dim;
        let mut mean = vec![0.0; dim];
        let mut second = vec![0.0; dim];
        for p in points.chunks_exact(dim) {
            for j in 0..dim {
                mean[j] += p[j];
                second[j] += p[j] * p[j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        second.iter_mut().for_each(|m| *m /= n as f64);
        Ok(Self { dim, points, mean, second })
    }

    pub fn from_scalars(values: &[f64]) -> Result<Self> {
        Self::new(values.to_vec(), 1)
    }

    pub fn dirac(point: &[f64]) -> Self {
        Self::new(point.to_vec(), point.len()).expect("finite point")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    /// Per-coordinate mean `∫y dμ`.
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Per-coordinate raw second moment `∫y² dμ`.
    pub fn second_moment(&self) -> &[f64] {
        &self.second
    }

    /// Measure of the coordinates `start..start + len`.
    pub fn marginal(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.dim || len == 0 {
            return Err(Error::DimMismatch(start + len, self.dim));
        }
        let pts = self.points.chunks_exact(self.dim).flat_map(|p| p[start..start + len].iter().copied()).collect();
        Self::new(pts, len)
    }

    /// Copy with coordinate `j` of atom `i` moved by `delta`.
    pub fn with_atom_shifted(&self, i: usize, j: usize, delta: f64) -> Result<Self> {
        let mut pts = self.points.clone();
        pts[i * self.dim + j] += delta;
        Self::new(pts, self.dim)
    }

    /// Copy with every atom moved by `eps · zeta_i`.
    pub fn shifted(&self, zeta: &[f64], eps: f64) -> Result<Self> {
        if zeta.len() != self.points.len() {
            return Err(Error::LengthMismatch { expected: self.points.len(), got: zeta.len() });
        }
        let pts = self.points.iter().zip(zeta).map(|(p, z)| p + eps * z).collect();
        Self::new(pts, self.dim)
    }
}

fn check_pair(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<()> {
    if mu.dim != nu.dim {
        return Err(Error::DimMismatch(mu.dim, nu.dim));
    }
    if mu.len() != nu.len() {
        return Err(Error::UnequalSupportSize(mu.len(), nu.len()));
    }
    Ok(())
}

/// Minimum-cost perfect assignment for a square cost matrix (row-major, `n×n`).
/// Returns `assign[row] = col`. Shortest augmenting path with potentials, O(n³).
pub fn assignment(cost: &[f64], n: usize) -> Vec<usize> {
    const INF: f64 = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Sum of matched costs in ascending order, so that relabeling is bit-exact.
fn canonical_total(mut costs: Vec<f64>) -> f64 {
    costs.sort_by(|a, b| a.total_cmp(b));
    costs.iter().sum()
}

fn transport_sq(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, weights: &[f64]) -> f64 {
    let n = mu.len();
    let d = mu.dim;
    let cost_of = |i: usize, j: usize| -> f64 {
        let (a, b) = (mu.point(i), nu.point(j));
        (0..d).map(|c| weights[c] * (a[c] - b[c]) * (a[c] - b[c])).sum()
    };
    if d == 1 {
        let mut a: Vec<f64> = mu.points.clone();
        let mut b: Vec<f64> = nu.points.clone();
        a.sort_by(|x, y| x.total_cmp(y));
        b.sort_by(|x, y| x.total_cmp(y));
        let costs = a.iter().zip(&b).map(|(x, y)| weights[0] * (x - y) * (x - y)).collect();
        return canonical_total(costs) / n as f64;
    }
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = cost_of(i, j);
        }
    }
    let assign = assignment(&cost, n);
    let costs = (0..n).map(|i| cost[i * n + assign[i]]).collect();
    canonical_total(costs) / n as f64
}

/// Exact W2 between equal-size empirical measures.
pub fn w2(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    check_pair(mu, nu)?;
    Ok(transport_sq(mu, nu, &vec![1.0; mu.dim]).max(0.0).sqrt())
}

/// Weighted W2 with cost `γ1|ξ−ξ'|² + γ2|η−η'|²`, where the first `split`
/// coordinates form the ξ block and the rest the η block.
pub fn w2_weighted(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, split: usize, gamma1: f64, gamma2: f64) -> Result<f64> {
    check_pair(mu, nu)?;
    if !(gamma1 > 0.0 && gamma2 > 0.0) {
        return Err(Error::NonpositiveWeight);
    }
    if split > mu.dim {
        return Err(Error::DimMismatch(split, mu.dim));
    }
    let weights: Vec<f64> = (0..mu.dim).map(|c| if c < split { gamma1 } else { gamma2 }).collect();
    Ok(transport_sq(mu, nu, &weights).max(0.0).sqrt())
}

/// Coupling bound `sqrt(mean_i |a_i − b_i|²)` for index-matched clouds; an upper bound on W2.
pub fn matched_rms(a: &[f64], b: &[f64], dim: usize) -> Result<f64> {
    if a.len() != b.len() || a.len() % dim != 0 {
        return Err(Error::LengthMismatch { expected: a.len(), got: b.len() });
    }
    let n = a.len() / dim;
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((s / n as f64).sqrt())
}

/// Finite-difference approximations of `∂_μφ(μ, x_i)` at every atom.
#[derive(Debug, Clone, PartialEq)]
pub struct LionsGradient {
    pub values: Vec<f64>,
    pub dim: usize,
    pub step: f64,
}

impl LionsGradient {
    pub fn at(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

/// Default step `1e-4 · max(1, |x|)`.
pub fn default_step(x: f64) -> f64 {
    1e-4 * x.abs().max(1.0)
}

/// `N · (φ(μ with x_i^j + ε) − φ(μ with x_i^j − ε)) / (2ε)` for each coordinate `j`.
pub fn lions_fd<F>(phi: F, mu: &EmpiricalMeasure, atom_index: usize, step: f64) -> Result<Vec<f64>>
where
    F: Fn(&EmpiricalMeasure) -> f64,
{
    if atom_index >= mu.len() {
        return Err(Error::LengthMismatch { expected: mu.len(), got: atom_index });
    }
    if !(step > 0.0) {
        return Err(Error::StepTooSmall);
    }
    let n = mu.len() as f64;
    (0..mu.dim)
        .map(|j| {
            let up = phi(&mu.with_atom_shifted(atom_index, j, step)?);
            let dn = phi(&mu.with_atom_shifted(atom_index, j, -step)?);
            let g = n * (up - dn) / (2.0 * step);
            if g.is_finite() {
                Ok(g)
            } else {
                Err(Error::StepTooSmall)
            }
        })
        .collect()
}

/// [`lions_fd`] at every atom with the default coordinate-wise step.
pub fn lions_gradient<F>(phi: F, mu: &EmpiricalMeasure) -> Result<LionsGradient>
where
    F: Fn(&EmpiricalMeasure) -> f64,
{
    let mut values = Vec::with_capacity(mu.points.len());
    let mut max_step: f64 = 0.0;
    for i in 0..mu.len() {
        for j in 0..mu.dim {
            let step = default_step(mu.point(i)[j]);
            max_step = max_step.max(step);
            let up = phi(&mu.with_atom_shifted(i, j, step)?);
            let dn = phi(&mu.with_atom_shifted(i, j, -step)?);
            let g = mu.len() as f64 * (up - dn) / (2.0 * step);
            if !g.is_finite() {
                return Err(Error::StepTooSmall);
            }
            values.push(g);
        }
    }
    Ok(LionsGradient { values, dim: mu.dim, step: max_step })
}

/// First-order Taylor residual of `φ` along the lifted direction `ζ`:
/// `|φ(μ + εζ) − φ(μ) − ε·(1/N)Σ_i ⟨∂_μφ(μ, x_i), ζ_i⟩|`.
pub fn directional_check<F>(phi: F, mu: &EmpiricalMeasure, zeta: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&EmpiricalMeasure) -> f64,
{
    if zeta.len() != mu.points.len() {
        return Err(Error::LengthMismatch { expected: mu.points.len(), got: zeta.len() });
    }
    if !(step > 0.0) {
        return Err(Error::StepTooSmall);
    }
    let grad = lions_gradient(&phi, mu)?;
    let pairing: f64 = grad.values.iter().zip(zeta).map(|(g, z)| g * z).sum::<f64>() / mu.len() as f64;
    let moved = phi(&mu.shifted(zeta, step)?);
    let r = (moved - phi(mu) - step * pairing).abs();
    if r.is_finite() {
        Ok(r)
    } else {
        Err(Error::StepTooSmall)
    }
}
