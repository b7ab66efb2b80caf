//! Flow properties: restarting the forward system or the full backward solve at
//! an intermediate node with the remaining increments reproduces the original.

use super::SolverConfig;
use crate::backward::solve_mf_bdsde;
use crate::coefficients::Coefficients;
use crate::error::{Error, Result};
use crate::forward::{restart, ForwardCloud};
use crate::paths::PathBundle;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowReport {
    pub restart_node: usize,
    /// Largest absolute difference between restarted and original forward states.
    pub forward_max_diff: f64,
    pub forward_bit_exact: bool,
    /// Largest nodewise RMS difference of the pilot `Y` over nodes `r ≥ s`.
    pub backward_rms: f64,
    /// `2 · (Picard tolerance + largest nodewise regression standard error of Y)`.
    pub backward_tolerance: f64,
    pub pass: bool,
}

/// Restarts at node `s` from the node-`s` states of `cloud` (law particles and
/// pilots) and compares both the forward paths and the backward pilot `Y` on
/// nodes `s..=n` against a full solve on the same increments.
pub fn check_flow<C: Coefficients + ?Sized>(
    coeffs: &C,
    cloud: &ForwardCloud,
    bundle: &PathBundle,
    s: usize,
    cfg: &SolverConfig,
) -> Result<FlowReport> {
    let n = cloud.grid.n_steps();
    if s == 0 || s >= n {
        return Err(Error::Config(format!("restart node {s} outside 1..{n}")));
    }
    let re = restart(coeffs, cloud, bundle, s)?;
    let mut fwd = 0.0f64;
    let mut exact = true;
    let pairs = std::iter::once((&cloud.law, &re.law)).chain(cloud.pilots.iter().zip(&re.pilots).map(|(a, b)| (&a.paths, &b.paths)));
    for (a, b) in pairs {
        for r in 0..=n - s {
            for (u, v) in a.slab(s + r).iter().zip(b.slab(r)) {
                exact &= u.to_bits() == v.to_bits();
                fwd = fwd.max((u - v).abs());
            }
        }
    }

    let full = solve_mf_bdsde(coeffs, cloud, bundle, &cfg.reg, &cfg.picard)?;
    let tail = bundle.tail(s)?;
    let part = solve_mf_bdsde(coeffs, &re, &tail, &cfg.reg, &cfg.picard)?;
    let mut rms = 0.0f64;
    let mut se = 0.0f64;
    for (a, b) in full.pilots.iter().zip(&part.pilots) {
        for r in 0..=n - s {
            let (ya, yb) = (a.field.y.slab(s + r), b.field.y.slab(r));
            let ms = ya.iter().zip(yb).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / ya.len() as f64;
            rms = rms.max(ms.sqrt());
        }
        for f in [&a.field, &b.field] {
            se = f.se_y.iter().fold(se, |acc, v| acc.max(*v));
        }
    }
    let tol = 2.0 * (cfg.picard.tol + se);
    Ok(FlowReport {
        restart_node: s,
        forward_max_diff: fwd,
        forward_bit_exact: exact,
        backward_rms: rms,
        backward_tolerance: tol,
        pass: exact && rms <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{coefficients_by_name, LawSampler};
    use crate::backward::RegressionConfig;
    use crate::forward::solve_from_starts;
    use crate::paths::{make_grid, sample_paths, Seed};

    #[test]
    fn restart_reproduces_forward_bits_and_backward_values() {
        let c = coefficients_by_name("S4").unwrap();
        let b = sample_paths(&make_grid(0.0, 1.0, 8).unwrap(), 1, 1, 256, 4, Seed::new(2));
        let init = LawSampler::Gaussian { mean: 0.2, sd: 0.5 }.draw(256, 1, b.seed);
        let f = solve_from_starts(&c, &init, &b, &[vec![0.3]]).unwrap();
        let cfg = SolverConfig { reg: RegressionConfig::with_degree(2), ..Default::default() };
        let r = check_flow(&c, &f, &b, 3, &cfg).unwrap();
        assert!(r.forward_bit_exact && r.forward_max_diff == 0.0);
        assert!(r.backward_rms <= r.backward_tolerance, "{r:?}");
    }

    #[test]
    fn restart_node_is_validated() {
        let c = coefficients_by_name("S0").unwrap();
        let b = sample_paths(&make_grid(0.0, 1.0, 4).unwrap(), 1, 1, 32, 1, Seed::new(2));
        let f = solve_from_starts(&c, &vec![0.0; 32], &b, &[vec![0.0]]).unwrap();
        assert!(check_flow(&c, &f, &b, 4, &SolverConfig::default()).is_err());
    }
}
