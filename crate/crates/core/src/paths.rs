//! Time grids, counter-keyed Brownian increments and discrete Itô sums.

use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    nodes: Vec<f64>,
    steps: Vec<f64>,
}

/// Uniform grid of `n` steps on `[t, horizon]`.
pub fn make_grid(t: f64, horizon: f64, n: usize) -> Result<TimeGrid> {
    if !(horizon > t) {
        return Err(Error::NonpositiveHorizon { t, horizon });
    }
    if n == 0 {
        return Err(Error::ZeroSteps);
    }
    let h = (horizon - t) / n as f64;
    let mut nodes: Vec<f64> = (0..=n).map(|k| t + k as f64 * h).collect();
    nodes[n] = horizon;
    TimeGrid::from_nodes(nodes)
}

impl TimeGrid {
    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::ZeroSteps);
        }
        let steps: Vec<f64> = nodes.windows(2).map(|w| w[1] - w[0]).collect();
        if steps.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::NonpositiveHorizon {
                t: nodes[0],
                horizon: nodes[nodes.len() - 1],
            });
        }
        Ok(Self { nodes, steps })
    }

    pub fn t0(&self) -> f64 {
        self.nodes[0]
    }

    pub fn horizon(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Sub-grid starting at node `start`; node values are copied, not recomputed.
    pub fn tail(&self, start: usize) -> Result<TimeGrid> {
        if start >= self.n_steps() {
            return Err(Error::ZeroSteps);
        }
        Ok(Self {
            nodes: self.nodes[start..].to_vec(),
            steps: self.steps[start..].to_vec(),
        })
    }

    /// Index of the node equal to `time` (within 1e-12), if any.
    pub fn node_of(&self, time: f64) -> Option<usize> {
        self.nodes.iter().position(|&s| (s - time).abs() <= 1e-12 * (1.0 + time.abs()))
    }
}

/// Role tags that separate the independent noise families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    ForwardW,
    PilotW,
    BackwardB,
    InitialLaw,
    Probe,
    Custom(u64),
}

impl Role {
    fn tag(self) -> u64 {
        match self {
            Role::ForwardW => 0x57,
            Role::PilotW => 0x50,
            Role::BackwardB => 0x42,
            Role::InitialLaw => 0x58,
            Role::Probe => 0x3f,
            Role::Custom(c) => 0x1000 ^ c.wrapping_mul(0x9e37_79b9_7f4a_7c15),
        }
    }
}

/// Root seed from which every stream is derived by hashing its key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seed {
    pub root: u64,
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Seed {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    /// Pure key derivation for `(root, role, index, step)`.
    pub fn key(&self, role: Role, index: u64, step: u64) -> u64 {
        let mut h = mix64(self.root);
        h = mix64(h ^ role.tag());
        h = mix64(h ^ index);
        mix64(h ^ step.wrapping_mul(0xd6e8_feb8_6659_fd93))
    }

    /// Generator for the stream keyed by `(role, index, step)`.
    pub fn rng(&self, role: Role, index: u64, step: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.key(role, index, step))
    }

    /// Standard normal draws for `(role, index, step)`, one per coordinate.
    pub fn normals(&self, role: Role, index: u64, step: u64, out: &mut [f64]) {
        let mut rng = self.rng(role, index, step);
        for v in out.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
    }
}

/// Brownian increments laid out as `[path][step][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Increments {
    pub n_paths: usize,
    pub n_steps: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Increments {
    /// Increments for paths `0..n_paths` of `role`, with absolute step
    /// indices `offset..offset + grid.n_steps()` used as keys.
    pub fn generate(grid: &TimeGrid, dim: usize, n_paths: usize, seed: Seed, role: Role, offset: usize) -> Self {
        let n_steps = grid.n_steps();
        let mut data = vec![0.0; n_paths * n_steps * dim];
        data.par_chunks_mut(n_steps * dim).enumerate().for_each(|(p, chunk)| {
            for k in 0..n_steps {
                let out = &mut chunk[k * dim..(k + 1) * dim];
                seed.normals(role, p as u64, (offset + k) as u64, out);
                let s = grid.steps()[k].sqrt();
                out.iter_mut().for_each(|v| *v *= s);
            }
        });
        Self { n_paths, n_steps, dim, data }
    }

    pub fn get(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * self.n_steps + step) * self.dim;
        &self.data[o..o + self.dim]
    }

    /// Increments from step `start` onward.
    pub fn tail(&self, start: usize) -> Self {
        let n_steps = self.n_steps - start;
        let mut data = Vec::with_capacity(self.n_paths * n_steps * self.dim);
        for p in 0..self.n_paths {
            let o = (p * self.n_steps + start) * self.dim;
            data.extend_from_slice(&self.data[o..o + n_steps * self.dim]);
        }
        Self { n_paths: self.n_paths, n_steps, dim: self.dim, data }
    }

    /// Path values `W_{t_k} - W_{t_0}` of one coordinate, one entry per node.
    pub fn cumulative(&self, path: usize, coord: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_steps + 1);
        let mut acc = 0.0;
        out.push(0.0);
        for k in 0..self.n_steps {
            acc += self.get(path, k)[coord];
            out.push(acc);
        }
        out
    }

    /// Increments of one coordinate along one path.
    pub fn series(&self, path: usize, coord: usize) -> Vec<f64> {
        (0..self.n_steps).map(|k| self.get(path, k)[coord]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub grid: TimeGrid,
    pub d: usize,
    pub l: usize,
    pub n_particles: usize,
    pub n_bpaths: usize,
    pub seed: Seed,
    /// Absolute index of the first step; nonzero for restarted bundles.
    pub step_offset: usize,
    pub w: Increments,
    pub b: Increments,
}

pub fn sample_paths(grid: &TimeGrid, d: usize, l: usize, n_particles: usize, n_bpaths: usize, seed: Seed) -> PathBundle {
    assert!(d >= 1 && l >= 1 && n_particles >= 1 && n_bpaths >= 1, "dimensions and counts must be positive");
    PathBundle {
        grid: grid.clone(),
        d,
        l,
        n_particles,
        n_bpaths,
        seed,
        step_offset: 0,
        w: Increments::generate(grid, d, n_particles, seed, Role::ForwardW, 0),
        b: Increments::generate(grid, l, n_bpaths, seed, Role::BackwardB, 0),
    }
}

impl PathBundle {
    /// Forward increments for pilot paths, drawn from a stream independent of the law particles.
    pub fn pilot_w(&self) -> Increments {
        Increments::generate(&self.grid, self.d, self.n_particles, self.seed, Role::PilotW, self.step_offset)
    }

    /// Bundle restricted to the steps from node `start` on, with identical increments.
    pub fn tail(&self, start: usize) -> Result<PathBundle> {
        Ok(PathBundle {
            grid: self.grid.tail(start)?,
            d: self.d,
            l: self.l,
            n_particles: self.n_particles,
            n_bpaths: self.n_bpaths,
            seed: self.seed,
            step_offset: self.step_offset + start,
            w: self.w.tail(start),
            b: self.b.tail(start),
        })
    }
}

/// Left-endpoint sum `Σ_k values[k]·increments[k]`; `values` holds one entry per node.
pub fn forward_ito_sum(values: &[f64], increments: &[f64]) -> Result<f64> {
    if values.len() != increments.len() + 1 && values.len() != increments.len() {
        return Err(Error::LengthMismatch { expected: increments.len() + 1, got: values.len() });
    }
    Ok(increments.iter().zip(values).map(|(dw, v)| v * dw).sum())
}

/// Right-endpoint sum `Σ_k values[k+1]·increments[k]`; `values` holds one entry per node.
pub fn backward_ito_sum(values: &[f64], increments: &[f64]) -> Result<f64> {
    if values.len() != increments.len() + 1 {
        return Err(Error::LengthMismatch { expected: increments.len() + 1, got: values.len() });
    }
    Ok(increments.iter().zip(&values[1..]).map(|(db, v)| v * db).sum())
}

/// Vector form of [`forward_ito_sum`]: values `[node][dim]`, increments `[step][dim]`.
pub fn forward_ito_sum_vec(values: &[f64], increments: &[f64], dim: usize) -> Result<f64> {
    let n = increments.len() / dim;
    if values.len() != (n + 1) * dim || increments.len() % dim != 0 {
        return Err(Error::LengthMismatch { expected: (n + 1) * dim, got: values.len() });
    }
    Ok((0..n)
        .map(|k| (0..dim).map(|j| values[k * dim + j] * increments[k * dim + j]).sum::<f64>())
        .sum())
}

/// Vector form of [`backward_ito_sum`].
pub fn backward_ito_sum_vec(values: &[f64], increments: &[f64], dim: usize) -> Result<f64> {
    let n = increments.len() / dim;
    if values.len() != (n + 1) * dim || increments.len() % dim != 0 {
        return Err(Error::LengthMismatch { expected: (n + 1) * dim, got: values.len() });
    }
    Ok((0..n)
        .map(|k| (0..dim).map(|j| values[(k + 1) * dim + j] * increments[k * dim + j]).sum::<f64>())
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_examples() {
        assert_eq!(make_grid(0.0, 1.0, 1).unwrap().nodes(), &[0.0, 1.0]);
        let g = make_grid(0.0, 1.0, 4).unwrap();
        assert!(g.steps().iter().all(|&s| s == 0.25));
        assert!(matches!(make_grid(0.5, 0.5, 2), Err(Error::NonpositiveHorizon { .. })));
        assert_eq!(make_grid(0.0, 1.0, 0), Err(Error::ZeroSteps));
    }

    #[test]
    fn tail_copies_nodes() {
        let g = make_grid(0.0, 1.0, 7).unwrap();
        let t = g.tail(3).unwrap();
        assert_eq!(t.nodes(), &g.nodes()[3..]);
        assert_eq!(t.horizon(), 1.0);
    }

    #[test]
    fn bundle_is_deterministic() {
        let g = make_grid(0.0, 1.0, 8).unwrap();
        let a = sample_paths(&g, 2, 1, 5, 3, Seed::new(9));
        let b = sample_paths(&g, 2, 1, 5, 3, Seed::new(9));
        assert_eq!(a, b);
        let c = sample_paths(&g, 2, 1, 5, 3, Seed::new(10));
        assert_ne!(a.w.data, c.w.data);
    }

    #[test]
    fn tail_bundle_matches_pilot_stream() {
        let g = make_grid(0.0, 1.0, 8).unwrap();
        let a = sample_paths(&g, 1, 1, 4, 2, Seed::new(3));
        let t = a.tail(5).unwrap();
        assert_eq!(t.w.get(2, 0), a.w.get(2, 5));
        assert_eq!(t.pilot_w().get(1, 1), a.pilot_w().get(1, 6));
    }

    #[test]
    fn ito_sums() {
        let dw = [0.1, -0.2, 0.3];
        assert_eq!(forward_ito_sum(&[0.0; 4], &dw).unwrap(), 0.0);
        let c = forward_ito_sum(&[2.0; 4], &dw).unwrap();
        assert!((c - 2.0 * 0.2).abs() < 1e-15);
        let v = [1.0, 2.0, 3.0, 4.0];
        assert!((forward_ito_sum(&v, &dw).unwrap() - (0.1 - 0.4 + 0.9)).abs() < 1e-15);
        assert!((backward_ito_sum(&v, &dw).unwrap() - (0.2 - 0.6 + 1.2)).abs() < 1e-15);
        assert!(matches!(backward_ito_sum(&v[..2], &dw), Err(Error::LengthMismatch { .. })));
    }
}
