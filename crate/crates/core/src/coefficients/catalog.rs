use super::{Coefficients, LawSampler, ScenarioSpec, Triple};
use crate::measures::EmpiricalMeasure;
use serde::{Deserialize, Serialize};

/// One-dimensional parametric coefficient family used by the catalog.
///
/// With `m`, `q` the mean and raw second moment of the relevant marginal:
///
/// ```text
/// b   = b0 + b1 x + b2 sin x + b3 m_X + b4 tanh q_X
/// σ   = s0 + s1 x + s2 cos x + s3 sin m_X
/// f   = f0 + fx cos x + fy y + fys sin y + fz z + fzs sin z + fm tanh m_Y + fq tanh q_Y
/// g   = g0 + gx sin x + gy y + gys sin y + gm m_Y + g20 z + gzs sin z
/// h   = h0 + hm sin m_Y
/// Φ   = p1 x + p2 sin x + p3 m_X + p4 tanh q_X
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
    pub s0: f64,
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
    pub f0: f64,
    pub fx: f64,
    pub fy: f64,
    pub fys: f64,
    pub fz: f64,
    pub fzs: f64,
    pub fm: f64,
    pub fq: f64,
    pub g0: f64,
    pub gx: f64,
    pub gy: f64,
    pub gys: f64,
    pub gm: f64,
    pub g20: f64,
    pub gzs: f64,
    pub h0: f64,
    pub hm: f64,
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub p4: f64,
}

fn sech2(v: f64) -> f64 {
    let c = v.cosh();
    1.0 / (c * c)
}

impl Model {
    fn mx(mu: &EmpiricalMeasure) -> (f64, f64) {
        (mu.mean()[0], mu.second_moment()[0])
    }

    fn my(law: &EmpiricalMeasure) -> (f64, f64) {
        (law.mean()[1], law.second_moment()[1])
    }

    fn g1_scalar(&self, x: f64, y: f64, law: &EmpiricalMeasure) -> f64 {
        self.g0 + self.gx * x.sin() + self.gy * y + self.gys * y.sin() + self.gm * Self::my(law).0
    }
}

impl Coefficients for Model {
    fn dim(&self) -> usize {
        1
    }

    fn noise_dim(&self) -> usize {
        1
    }

    fn b(&self, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        let (m, q) = Self::mx(mu);
        let x = x[0];
        out[0] = self.b0 + self.b1 * x + self.b2 * x.sin() + self.b3 * m + self.b4 * q.tanh();
    }

    fn sigma(&self, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        let (m, _) = Self::mx(mu);
        let x = x[0];
        out[0] = self.s0 + self.s1 * x + self.s2 * x.cos() + self.s3 * m.sin();
    }

    fn f(&self, x: &[f64], y: f64, z: &[f64], law: &EmpiricalMeasure) -> f64 {
        let (m, q) = Self::my(law);
        let (x, z) = (x[0], z[0]);
        self.f0
            + self.fx * x.cos()
            + self.fy * y
            + self.fys * y.sin()
            + self.fz * z
            + self.fzs * z.sin()
            + self.fm * m.tanh()
            + self.fq * q.tanh()
    }

    fn g(&self, x: &[f64], y: f64, z: &[f64], law: &EmpiricalMeasure, out: &mut [f64]) {
        out[0] = self.g1_scalar(x[0], y, law) + self.g20 * z[0] + self.gzs * z[0].sin();
    }

    fn h(&self, law: &EmpiricalMeasure, out: &mut [f64]) {
        out[0] = self.h0 + self.hm * Self::my(law).0.sin();
    }

    fn phi(&self, x: &[f64], mu_x: &EmpiricalMeasure) -> f64 {
        let (m, q) = Self::mx(mu_x);
        let x = x[0];
        self.p1 * x + self.p2 * x.sin() + self.p3 * m + self.p4 * q.tanh()
    }

    fn affine_g(&self) -> bool {
        self.gzs == 0.0
    }

    fn g1(&self, x: &[f64], y: f64, law: &EmpiricalMeasure) -> Option<Vec<f64>> {
        self.affine_g().then(|| vec![self.g1_scalar(x[0], y, law)])
    }

    fn g2(&self, _law: &EmpiricalMeasure) -> Option<Vec<f64>> {
        self.affine_g().then(|| vec![self.g20])
    }

    fn lions_own_independent(&self) -> bool {
        true
    }

    fn pi_law_dependent(&self) -> bool {
        self.fm != 0.0 || self.fq != 0.0 || self.gm != 0.0 || self.hm != 0.0
    }

    fn dx_b(&self, x: &[f64], _mu: &EmpiricalMeasure) -> Option<Vec<f64>> {
        Some(vec![self.b1 + self.b2 * x[0].cos()])
    }

    fn dx_sigma(&self, x: &[f64], _mu: &EmpiricalMeasure) -> Option<Vec<f64>> {
        Some(vec![self.s1 - self.s2 * x[0].sin()])
    }

    fn dmu_b(&self, _x: f64, mu: &EmpiricalMeasure, hat: f64) -> Option<f64> {
        let (_, q) = Self::mx(mu);
        Some(self.b3 + 2.0 * self.b4 * sech2(q) * hat)
    }

    fn dmu_sigma(&self, _x: f64, mu: &EmpiricalMeasure, _hat: f64) -> Option<f64> {
        Some(self.s3 * Self::mx(mu).0.cos())
    }

    fn dxx_b(&self, x: f64, _mu: &EmpiricalMeasure) -> Option<f64> {
        Some(-self.b2 * x.sin())
    }

    fn dxx_sigma(&self, x: f64, _mu: &EmpiricalMeasure) -> Option<f64> {
        Some(-self.s2 * x.cos())
    }

    fn dy_dmu_b(&self, _x: f64, mu: &EmpiricalMeasure, _hat: f64) -> Option<f64> {
        Some(2.0 * self.b4 * sech2(Self::mx(mu).1))
    }

    fn dy_dmu_sigma(&self, _x: f64, _mu: &EmpiricalMeasure, _hat: f64) -> Option<f64> {
        Some(0.0)
    }

    fn dx_phi(&self, x: f64, _mu: &EmpiricalMeasure) -> Option<f64> {
        Some(self.p1 + self.p2 * x.cos())
    }

    fn dxx_phi(&self, x: f64, _mu: &EmpiricalMeasure) -> Option<f64> {
        Some(-self.p2 * x.sin())
    }

    fn dmu_phi(&self, _x: f64, mu: &EmpiricalMeasure, hat: f64) -> Option<f64> {
        Some(self.p3 + 2.0 * self.p4 * sech2(Self::mx(mu).1) * hat)
    }

    fn dy_dmu_phi(&self, _x: f64, mu: &EmpiricalMeasure, _hat: f64) -> Option<f64> {
        Some(2.0 * self.p4 * sech2(Self::mx(mu).1))
    }

    fn grad_f(&self, p: Triple, _law: &EmpiricalMeasure) -> Option<Triple> {
        let [x, y, z] = p;
        Some([-self.fx * x.sin(), self.fy + self.fys * y.cos(), self.fz + self.fzs * z.cos()])
    }

    fn hess_f(&self, p: Triple, _law: &EmpiricalMeasure) -> Option<[Triple; 3]> {
        let [x, y, z] = p;
        Some([
            [-self.fx * x.cos(), 0.0, 0.0],
            [0.0, -self.fys * y.sin(), 0.0],
            [0.0, 0.0, -self.fzs * z.sin()],
        ])
    }

    fn grad_g(&self, p: Triple, _law: &EmpiricalMeasure) -> Option<Triple> {
        let [x, y, z] = p;
        Some([self.gx * x.cos(), self.gy + self.gys * y.cos(), self.g20 + self.gzs * z.cos()])
    }

    fn hess_g1(&self, x: f64, y: f64, _law: &EmpiricalMeasure) -> Option<[[f64; 2]; 2]> {
        Some([[-self.gx * x.sin(), 0.0], [0.0, -self.gys * y.sin()]])
    }

    fn dmu_f(&self, _p: Triple, law: &EmpiricalMeasure, hat: Triple) -> Option<Triple> {
        let (m, q) = Self::my(law);
        Some([0.0, self.fm * sech2(m) + 2.0 * self.fq * sech2(q) * hat[1], 0.0])
    }

    fn dmu_g(&self, _p: Triple, _law: &EmpiricalMeasure, _hat: Triple) -> Option<Triple> {
        Some([0.0, self.gm, 0.0])
    }

    fn dmu_h(&self, law: &EmpiricalMeasure, _hat: Triple) -> Option<Triple> {
        Some([0.0, self.hm * Self::my(law).0.cos(), 0.0])
    }

    fn jac_dmu_f(&self, _p: Triple, law: &EmpiricalMeasure, _hat: Triple) -> Option<[Triple; 3]> {
        let (_, q) = Self::my(law);
        Some([[0.0; 3], [0.0, 2.0 * self.fq * sech2(q), 0.0], [0.0; 3]])
    }

    fn jac_dmu_g(&self, _p: Triple, _law: &EmpiricalMeasure, _hat: Triple) -> Option<[Triple; 3]> {
        Some([[0.0; 3]; 3])
    }

    fn jac_dmu_h(&self, _law: &EmpiricalMeasure, _hat: Triple) -> Option<[Triple; 3]> {
        Some([[0.0; 3]; 3])
    }
}

/// Closed-form solutions available for some catalog entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ClosedFormOracle {
    /// `Y ≡ x`, `Z ≡ 0` along a constant path.
    Null,
    /// `Y_s = X_s + c(B_T − B_s)`, `Z_s = σ₀`.
    ConstantBackward { sigma0: f64, c: f64 },
    /// `Y_s = X_s + E[X_T] + c(B_T − B_s)`, `Z_s = σ₀`; with `b = 0`, `E[X_T] = E[ξ]`.
    MeanFieldTerminal { sigma0: f64, c: f64, law_mean: f64 },
    None,
}

impl ClosedFormOracle {
    /// Oracle `Y_s` given the forward state `X_s` and `B_T − B_s`.
    pub fn y(&self, x_s: f64, back_increment: f64) -> Option<f64> {
        match *self {
            ClosedFormOracle::Null => Some(x_s),
            ClosedFormOracle::ConstantBackward { c, .. } => Some(x_s + c * back_increment),
            ClosedFormOracle::MeanFieldTerminal { c, law_mean, .. } => Some(x_s + law_mean + c * back_increment),
            ClosedFormOracle::None => None,
        }
    }

    pub fn z(&self) -> Option<f64> {
        match *self {
            ClosedFormOracle::Null => Some(0.0),
            ClosedFormOracle::ConstantBackward { sigma0, .. } | ClosedFormOracle::MeanFieldTerminal { sigma0, .. } => Some(sigma0),
            ClosedFormOracle::None => None,
        }
    }
}

/// Coefficients for a catalog id (`S0` to `S5`, plus the forward-only `mean-drift` and `linear-vol`).
pub fn coefficients_by_name(name: &str) -> Option<Model> {
    let m = match name {
        "S0" => Model { p1: 1.0, ..Default::default() },
        "S1" => Model { s0: 0.5, g0: 0.2, h0: 0.2, p1: 1.0, ..Default::default() },
        "S2" => Model { s0: 0.5, g0: 0.2, h0: 0.2, p1: 1.0, p3: 1.0, ..Default::default() },
        "S3" => Model { s0: 0.5, g20: 0.5, h0: 0.1, p2: 1.0, ..Default::default() },
        "S4" => Model {
            b2: 0.2,
            s0: 0.5,
            s2: 0.2,
            fx: 0.2,
            fy: -0.3,
            fzs: 0.2,
            gx: 0.1,
            gys: 0.2,
            g20: 0.3,
            h0: 0.1,
            p2: 1.0,
            ..Default::default()
        },
        "S5" => Model {
            b2: 0.2,
            b3: 0.3,
            b4: 0.2,
            s0: 0.5,
            s2: 0.2,
            s3: 0.1,
            fx: 0.2,
            fy: -0.3,
            fzs: 0.2,
            fm: 0.3,
            fq: 0.1,
            gx: 0.1,
            gys: 0.2,
            gm: 0.2,
            g20: 0.3,
            h0: 0.1,
            hm: 0.2,
            p2: 1.0,
            p3: 0.5,
            p4: 0.2,
            ..Default::default()
        },
        "mean-drift" => Model { b3: 1.0, s0: 1.0, p1: 1.0, ..Default::default() },
        "linear-vol" => Model { s1: 0.4, p1: 1.0, ..Default::default() },
        _ => return None,
    };
    Some(m)
}

fn spec(id: &str, x: f64, law: LawSampler) -> ScenarioSpec {
    ScenarioSpec { id: id.to_string(), coefficients: id.to_string(), x: vec![x], law, ..ScenarioSpec::default() }
}

/// Catalog entries with their closed-form oracles where one exists.
pub fn builtin_scenarios() -> Vec<(ScenarioSpec, ClosedFormOracle)> {
    let gauss = LawSampler::Gaussian { mean: 0.2, sd: 0.5 };
    vec![
        (spec("S0", 0.5, gauss.clone()), ClosedFormOracle::Null),
        (spec("S1", 1.0, gauss.clone()), ClosedFormOracle::ConstantBackward { sigma0: 0.5, c: 0.4 }),
        (spec("S2", 1.0, gauss.clone()), ClosedFormOracle::MeanFieldTerminal { sigma0: 0.5, c: 0.4, law_mean: 0.2 }),
        (spec("S3", 0.3, gauss.clone()), ClosedFormOracle::None),
        (spec("S4", 0.3, gauss.clone()), ClosedFormOracle::None),
        (spec("S5", 0.3, gauss), ClosedFormOracle::None),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn law3() -> EmpiricalMeasure {
        EmpiricalMeasure::new(vec![0.1, 0.4, -0.2, 0.7, -0.3, 0.5, -0.4, 1.1, 0.2], 3).unwrap()
    }

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let e = 1e-5;
        (f(x + e) - f(x - e)) / (2.0 * e)
    }

    #[test]
    fn analytic_x_derivatives_match_differences() {
        let m = coefficients_by_name("S5").unwrap();
        let mu = EmpiricalMeasure::from_scalars(&[0.1, -0.3, 0.8]).unwrap();
        let law = law3();
        for &x in &[-1.3, 0.2, 2.1] {
            let b = |v: f64| {
                let mut o = [0.0];
                m.b(&[v], &mu, &mut o);
                o[0]
            };
            assert!((m.dx_b(&[x], &mu).unwrap()[0] - fd(b, x)).abs() < 1e-8);
            assert!((m.dxx_b(x, &mu).unwrap() - fd(|v| m.dx_b(&[v], &mu).unwrap()[0], x)).abs() < 1e-8);
            let s = |v: f64| {
                let mut o = [0.0];
                m.sigma(&[v], &mu, &mut o);
                o[0]
            };
            assert!((m.dx_sigma(&[x], &mu).unwrap()[0] - fd(s, x)).abs() < 1e-8);
            assert!((m.dx_phi(x, &mu).unwrap() - fd(|v| m.phi(&[v], &mu), x)).abs() < 1e-8);
            let gr = m.grad_f([x, 0.3, -0.6], &law).unwrap();
            assert!((gr[0] - fd(|v| m.f(&[v], 0.3, &[-0.6], &law), x)).abs() < 1e-8);
            assert!((gr[1] - fd(|v| m.f(&[x], v, &[-0.6], &law), 0.3)).abs() < 1e-8);
            assert!((gr[2] - fd(|v| m.f(&[x], 0.3, &[v], &law), -0.6)).abs() < 1e-8);
        }
    }

    #[test]
    fn analytic_lions_derivatives_match_particle_differences() {
        let m = coefficients_by_name("S5").unwrap();
        let mu = EmpiricalMeasure::from_scalars(&[0.1, -0.3, 0.8, 1.2]).unwrap();
        for i in 0..4 {
            let fdv = crate::measures::lions_fd(
                |nu: &EmpiricalMeasure| {
                    let mut o = [0.0];
                    m.b(&[0.4], nu, &mut o);
                    o[0]
                },
                &mu,
                i,
                1e-5,
            )
            .unwrap();
            assert!((fdv[0] - m.dmu_b(0.4, &mu, mu.point(i)[0]).unwrap()).abs() < 1e-6);
            let fdp = crate::measures::lions_fd(|nu: &EmpiricalMeasure| m.phi(&[0.4], nu), &mu, i, 1e-5).unwrap();
            assert!((fdp[0] - m.dmu_phi(0.4, &mu, mu.point(i)[0]).unwrap()).abs() < 1e-6);
        }
        let law = law3();
        for i in 0..3 {
            let fdf = crate::measures::lions_fd(|nu: &EmpiricalMeasure| m.f(&[0.2], 0.1, &[0.3], nu), &law, i, 1e-5).unwrap();
            let an = m.dmu_f([0.2, 0.1, 0.3], &law, [law.point(i)[0], law.point(i)[1], law.point(i)[2]]).unwrap();
            for c in 0..3 {
                assert!((fdf[c] - an[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn oracle_values() {
        assert_eq!(ClosedFormOracle::Null.y(0.7, 3.0), Some(0.7));
        assert_eq!(ClosedFormOracle::ConstantBackward { sigma0: 0.5, c: 2.0 }.y(1.0, 0.5), Some(2.0));
        assert_eq!(ClosedFormOracle::None.z(), None);
    }
}
