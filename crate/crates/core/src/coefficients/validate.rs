use super::Coefficients;
use crate::error::{Error, Result};
use crate::measures::{w2, w2_weighted, EmpiricalMeasure};
use crate::paths::{Role, Seed};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Declared Lipschitz constant `C`, z-sensitivities `α1, α2`, and moment order `p0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub c: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub p0: u32,
}

impl Budget {
    pub fn new(c: f64, alpha1: f64, alpha2: f64, p0: u32) -> Result<Self> {
        let b = Self { c, alpha1, alpha2, p0 };
        if !(c > 0.0) || !(alpha1 > 0.0) || !(alpha2 > 0.0) || alpha1 + alpha2 >= 1.0 || p0 < 16 || p0 % 2 != 0 {
            return Err(Error::Config(format!("invalid assumption budget {b:?}")));
        }
        Ok(b)
    }

    /// `ln C*_p` with `C*_p = 2^{-p-2} 3^p p^{3p} + 2^{p/2}`.
    pub fn ln_c_star(p: f64) -> f64 {
        let a = (-p - 2.0) * 2f64.ln() + p * 3f64.ln() + 3.0 * p * p.ln();
        let b = 0.5 * p * 2f64.ln();
        log_add(a, b)
    }

    /// `ln C'_p` with `C'_p = (p/(p−1))^p 3^{p−1} max(2 C^p 5^{p−1}, (6p³)^p 5^{p/2−1})`.
    pub fn ln_c_prime(&self, p: f64) -> f64 {
        let lhs = 2f64.ln() + p * self.c.ln() + (p - 1.0) * 5f64.ln();
        let rhs = p * (6.0 * p * p * p).ln() + (0.5 * p - 1.0) * 5f64.ln();
        p * (p / (p - 1.0)).ln() + (p - 1.0) * 3f64.ln() + lhs.max(rhs)
    }

    /// `ln C̄_p` with `C̄_p = 2^{p−1} C*_p ((p/(p−1))^p + 1) C'_p`.
    pub fn ln_c_bar(&self, p: f64) -> f64 {
        (p - 1.0) * 2f64.ln() + Self::ln_c_star(p) + log_add(p * (p / (p - 1.0)).ln(), 0.0) + self.ln_c_prime(p)
    }

    /// `ln(C̄_p (α1+α2)^{p/2})` at `p ∈ {p0, p0/2, p0/8}`; the condition holds when negative.
    pub fn moment_condition(&self) -> Vec<(u32, f64)> {
        [self.p0, self.p0 / 2, self.p0 / 8]
            .iter()
            .map(|&p| {
                let pf = p as f64;
                (p, self.ln_c_bar(pf) + 0.5 * pf * (self.alpha1 + self.alpha2).ln())
            })
            .collect()
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioEntry {
    pub coefficient: String,
    pub argument: String,
    pub max_ratio: f64,
    pub bound: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub probes: usize,
    pub ratios: Vec<RatioEntry>,
    /// Largest `|Δg|² / (C(|Δx|²+|Δy|²) + α1|Δz|² + W_{2,C,α2}²)` over joint probe pairs.
    pub g_condition: f64,
    pub max_abs_values: Vec<(String, f64)>,
    pub affine_checked: bool,
    pub affine_max_error: f64,
    pub affine_violation: bool,
    /// `(p, ln(C̄_p (α1+α2)^{p/2}))`.
    pub moment_condition: Vec<(u32, f64)>,
    pub disclaimer: String,
}

impl ValidationReport {
    pub fn lipschitz_pass(&self) -> bool {
        !self.ratios.iter().any(|r| r.flagged) && self.g_condition <= 1.0 && !self.affine_violation
    }

    pub fn moment_condition_holds(&self) -> bool {
        self.moment_condition.iter().all(|(_, v)| *v < 0.0)
    }

    pub fn ratio(&self, coefficient: &str, argument: &str) -> Option<f64> {
        self.ratios.iter().find(|r| r.coefficient == coefficient && r.argument == argument).map(|r| r.max_ratio)
    }
}

struct Tracker {
    entries: Vec<RatioEntry>,
    maxabs: Vec<(String, f64)>,
}

impl Tracker {
    fn ratio(&mut self, coefficient: &str, argument: &str, num: f64, den: f64, bound: f64) {
        let r = if den > 0.0 { num / den } else { 0.0 };
        match self.entries.iter_mut().find(|e| e.coefficient == coefficient && e.argument == argument) {
            Some(e) => e.max_ratio = e.max_ratio.max(r),
            None => self.entries.push(RatioEntry {
                coefficient: coefficient.into(),
                argument: argument.into(),
                max_ratio: r,
                bound,
                flagged: false,
            }),
        }
    }

    fn value(&mut self, name: &str, v: &[f64]) {
        let a = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        match self.maxabs.iter_mut().find(|e| e.0 == name) {
            Some(e) => e.1 = e.1.max(a),
            None => self.maxabs.push((name.into(), a)),
        }
    }
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Samples `n_probes` argument pairs in the box `[-3, 3]` and reports observed
/// Lipschitz ratios, the anisotropic `g` condition, the affine identity and the
/// moment-order inequality.
pub fn validate_assumptions<C: Coefficients + ?Sized>(coeffs: &C, budget: &Budget, n_probes: usize, seed: u64) -> Result<ValidationReport> {
    if n_probes < 2 {
        return Err(Error::Config("validation needs at least two probes".into()));
    }
    let d = coeffs.dim();
    let l = coeffs.noise_dim();
    let pd = 2 * d + 1;
    let atoms = 8;
    let seed = Seed::new(seed);
    let mut t = Tracker { entries: Vec::new(), maxabs: Vec::new() };
    let mut g_condition: f64 = 0.0;
    let mut affine_max_error: f64 = 0.0;
    let bound = budget.c;
    let sq_c = budget.c.sqrt();
    let sq_a1 = budget.alpha1.sqrt();

    let mut b0 = vec![0.0; d];
    let mut b1 = vec![0.0; d];
    let mut s0 = vec![0.0; d * d];
    let mut s1 = vec![0.0; d * d];
    let mut g0 = vec![0.0; l];
    let mut g1 = vec![0.0; l];
    let mut h0 = vec![0.0; l];
    let mut h1 = vec![0.0; l];

    for probe in 0..n_probes {
        let mut rng = seed.rng(Role::Probe, probe as u64, 0);
        let box_pt = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect() };
        let x = box_pt(d, &mut rng);
        let y = box_pt(1, &mut rng)[0];
        let z = box_pt(d, &mut rng);
        let scale = 10f64.powf(rng.gen_range(-3.0..0.0));
        let nudge = |v: &[f64], rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            v.iter().map(|a| a + scale * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let x2 = nudge(&x, &mut rng);
        let y2 = nudge(&[y], &mut rng)[0];
        let z2 = nudge(&z, &mut rng);
        let shift: f64 = rng.gen_range(-1.0..1.0);
        let cloud: Vec<f64> = (0..atoms * pd).map(|_| shift + rng.sample::<f64, _>(StandardNormal)).collect();
        let cloud2 = nudge(&cloud, &mut rng);
        let law = EmpiricalMeasure::new(cloud, pd)?;
        let law2 = EmpiricalMeasure::new(cloud2, pd)?;
        let mux = law.marginal(0, d)?;
        let mux2 = law2.marginal(0, d)?;
        let wx = w2(&mux, &mux2)?;
        let wpi = w2(&law, &law2)?;
        let wpi_g = w2_weighted(&law, &law2, d + 1, budget.c, budget.alpha2)?;
        let dx = norm_diff(&x, &x2);
        let dy = (y - y2).abs();
        let dz = norm_diff(&z, &z2);

        coeffs.b(&x, &mux, &mut b0);
        t.value("b", &b0);
        coeffs.b(&x2, &mux, &mut b1);
        t.ratio("b", "x", norm_diff(&b0, &b1), dx, bound);
        coeffs.b(&x, &mux2, &mut b1);
        t.ratio("b", "measure", norm_diff(&b0, &b1), wx, bound);

        coeffs.sigma(&x, &mux, &mut s0);
        t.value("sigma", &s0);
        coeffs.sigma(&x2, &mux, &mut s1);
        t.ratio("sigma", "x", norm_diff(&s0, &s1), dx, bound);
        coeffs.sigma(&x, &mux2, &mut s1);
        t.ratio("sigma", "measure", norm_diff(&s0, &s1), wx, bound);

        let f0 = coeffs.f(&x, y, &z, &law);
        t.value("f", &[f0]);
        t.ratio("f", "x", (coeffs.f(&x2, y, &z, &law) - f0).abs(), dx, bound);
        t.ratio("f", "y", (coeffs.f(&x, y2, &z, &law) - f0).abs(), dy, bound);
        t.ratio("f", "z", (coeffs.f(&x, y, &z2, &law) - f0).abs(), dz, bound);
        t.ratio("f", "measure", (coeffs.f(&x, y, &z, &law2) - f0).abs(), wpi, bound);

        coeffs.g(&x, y, &z, &law, &mut g0);
        t.value("g", &g0);
        coeffs.g(&x2, y, &z, &law, &mut g1);
        t.ratio("g", "x", norm_diff(&g0, &g1), dx, sq_c);
        coeffs.g(&x, y2, &z, &law, &mut g1);
        t.ratio("g", "y", norm_diff(&g0, &g1), dy, sq_c);
        coeffs.g(&x, y, &z2, &law, &mut g1);
        t.ratio("g", "z", norm_diff(&g0, &g1), dz, sq_a1);
        coeffs.g(&x, y, &z, &law2, &mut g1);
        t.ratio("g", "measure", norm_diff(&g0, &g1), wpi_g, 1.0);
        coeffs.g(&x2, y2, &z2, &law2, &mut g1);
        let lhs = norm_diff(&g0, &g1).powi(2);
        let rhs = budget.c * (dx * dx + dy * dy) + budget.alpha1 * dz * dz + wpi_g * wpi_g;
        if rhs > 0.0 {
            g_condition = g_condition.max(lhs / rhs);
        }

        coeffs.h(&law, &mut h0);
        t.value("h", &h0);
        coeffs.h(&law2, &mut h1);
        t.ratio("h", "measure", norm_diff(&h0, &h1), wpi, bound);

        let p0 = coeffs.phi(&x, &mux);
        t.value("phi", &[p0]);
        t.ratio("phi", "x", (coeffs.phi(&x2, &mux) - p0).abs(), dx, bound);
        t.ratio("phi", "measure", (coeffs.phi(&x, &mux2) - p0).abs(), wx, bound);

        if coeffs.affine_g() {
            let a = coeffs.g1(&x, y, &law).ok_or(Error::MissingDerivative("g1"))?;
            let m = coeffs.g2(&law).ok_or(Error::MissingDerivative("g2"))?;
            for r in 0..l {
                let lin: f64 = (0..d).map(|c| m[r * d + c] * z[c]).sum();
                let err = (g0[r] - a[r] - lin).abs() / (1.0 + g0[r].abs());
                affine_max_error = affine_max_error.max(err);
            }
        }
    }

    for e in &mut t.entries {
        e.flagged = e.max_ratio > e.bound * (1.0 + 1e-9);
    }
    Ok(ValidationReport {
        probes: n_probes,
        ratios: t.entries,
        g_condition,
        max_abs_values: t.maxabs,
        affine_checked: coeffs.affine_g(),
        affine_max_error,
        affine_violation: affine_max_error > 1e-12,
        moment_condition: budget.moment_condition(),
        disclaimer: "boundedness and Lipschitz ratios are observed on the probe box [-3, 3] only".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::coefficients_by_name;

    #[test]
    fn constants_are_finite_and_huge() {
        let b = Budget::new(1.0, 0.1, 0.1, 16).unwrap();
        let cond = b.moment_condition();
        assert_eq!(cond.iter().map(|c| c.0).collect::<Vec<_>>(), vec![16, 8, 2]);
        assert!(cond.iter().all(|c| c.1.is_finite()));
        // C*_2 = 2^-4 · 9 · 64 + 2 = 38
        assert!((Budget::ln_c_star(2.0) - 38f64.ln()).abs() < 1e-12);
        assert!(!(Budget::new(1.0, 0.6, 0.5, 16).is_ok()));
        assert!(Budget::new(1.0, 0.1, 0.1, 8).is_err());
    }

    #[test]
    fn constant_coefficients_have_zero_ratios() {
        let m = crate::coefficients::Model { b0: 0.3, s0: 0.4, f0: 1.0, g0: 0.2, h0: 0.1, ..Default::default() };
        let r = validate_assumptions(&m, &Budget::new(1.0, 0.2, 0.2, 16).unwrap(), 200, 1).unwrap();
        assert!(r.ratios.iter().all(|e| e.max_ratio == 0.0));
        assert!(r.lipschitz_pass());
    }

    #[test]
    fn catalog_scenarios_pass_lipschitz_budget() {
        for id in ["S0", "S1", "S2", "S3", "S4", "S5"] {
            let m = coefficients_by_name(id).unwrap();
            let r = validate_assumptions(&m, &Budget::new(2.0, 0.3, 0.2, 16).unwrap(), 2000, 3).unwrap();
            assert!(r.lipschitz_pass(), "{id}: {:?}", r.ratios);
        }
    }
}
