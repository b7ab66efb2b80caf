use crate::error::{Error, Result};
use crate::paths::{Role, Seed};
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Sampler for the initial law of `ξ`; every coordinate is drawn independently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LawSampler {
    Gaussian { mean: f64, sd: f64 },
    Uniform { a: f64, b: f64 },
    Dirac(f64),
}

impl LawSampler {
    pub fn mean(&self) -> f64 {
        match *self {
            LawSampler::Gaussian { mean, .. } => mean,
            LawSampler::Uniform { a, b } => 0.5 * (a + b),
            LawSampler::Dirac(v) => v,
        }
    }

    /// `n` draws of dimension `d`, keyed by particle index.
    pub fn draw(&self, n: usize, d: usize, seed: Seed) -> Vec<f64> {
        self.draw_with(n, d, seed, false)
    }

    /// Draws reflected through the law's centre: same law for these symmetric
    /// samplers, different realization.
    pub fn draw_reflected(&self, n: usize, d: usize, seed: Seed) -> Vec<f64> {
        self.draw_with(n, d, seed, true)
    }

    fn draw_with(&self, n: usize, d: usize, seed: Seed, reflect: bool) -> Vec<f64> {
        let c = self.mean();
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            let mut rng = seed.rng(Role::InitialLaw, i as u64, 0);
            for _ in 0..d {
                let v = match *self {
                    LawSampler::Gaussian { mean, sd } => Normal::new(mean, sd).expect("sd ≥ 0").sample(&mut rng),
                    LawSampler::Uniform { a, b } => Uniform::new(a, b).sample(&mut rng),
                    LawSampler::Dirac(v) => v,
                };
                out.push(if reflect { 2.0 * c - v } else { v });
            }
        }
        out
    }
}

impl fmt::Display for LawSampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LawSampler::Gaussian { mean, sd } => write!(f, "gaussian({mean:?}, {sd:?})"),
            LawSampler::Uniform { a, b } => write!(f, "uniform({a:?}, {b:?})"),
            LawSampler::Dirac(v) => write!(f, "dirac({v:?})"),
        }
    }
}

impl FromStr for LawSampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("cannot parse law sampler `{s}`"));
        let open = s.find('(').ok_or_else(bad)?;
        if !s.ends_with(')') {
            return Err(bad());
        }
        let name = s[..open].trim().to_ascii_lowercase();
        let args: Vec<f64> = s[open + 1..s.len() - 1]
            .split(',')
            .map(|a| a.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        match (name.as_str(), args.as_slice()) {
            ("gaussian", [m, sd]) if *sd >= 0.0 => Ok(LawSampler::Gaussian { mean: *m, sd: *sd }),
            ("uniform", [a, b]) if a < b => Ok(LawSampler::Uniform { a: *a, b: *b }),
            ("dirac", [v]) => Ok(LawSampler::Dirac(*v)),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: String,
    pub coefficients: String,
    pub t: f64,
    pub horizon: f64,
    pub steps: usize,
    pub x: Vec<f64>,
    pub law: LawSampler,
    pub inner: usize,
    pub bpaths: usize,
    pub seed: u64,
    pub picard_tol: f64,
    pub picard_max_iter: usize,
    pub degree: usize,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            id: "S0".into(),
            coefficients: "S0".into(),
            t: 0.0,
            horizon: 1.0,
            steps: 64,
            x: vec![0.0],
            law: LawSampler::Dirac(0.0),
            inner: 4096,
            bpaths: 32,
            seed: 1,
            picard_tol: 1e-3,
            picard_max_iter: 20,
            degree: 3,
        }
    }
}

fn lookup<'a>(root: &'a toml::Value, key: &str) -> Option<&'a toml::Value> {
    key.split('.').try_fold(root, |v, part| v.get(part))
}

fn req<'a>(root: &'a toml::Value, key: &str) -> Result<&'a toml::Value> {
    lookup(root, key).ok_or_else(|| Error::Config(format!("missing key `{key}`")))
}

fn num(root: &toml::Value, key: &str) -> Result<f64> {
    match req(root, key)? {
        toml::Value::Float(v) => Ok(*v),
        toml::Value::Integer(v) => Ok(*v as f64),
        _ => Err(Error::Config(format!("`{key}` must be a number"))),
    }
}

fn count(root: &toml::Value, key: &str) -> Result<usize> {
    match req(root, key)? {
        toml::Value::Integer(v) if *v > 0 => Ok(*v as usize),
        _ => Err(Error::Config(format!("`{key}` must be a positive integer"))),
    }
}

fn text<'a>(root: &'a toml::Value, key: &str) -> Result<&'a str> {
    req(root, key)?.as_str().ok_or_else(|| Error::Config(format!("`{key}` must be a string")))
}

impl ScenarioSpec {
    /// Parses the dotted-key scenario document.
    pub fn parse(doc: &str) -> Result<Self> {
        let root: toml::Value = doc.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let x = match req(&root, "state.x")? {
            toml::Value::Array(a) => a
                .iter()
                .map(|v| v.as_float().or_else(|| v.as_integer().map(|i| i as f64)))
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| Error::Config("`state.x` must be numeric".into()))?,
            toml::Value::Float(v) => vec![*v],
            toml::Value::Integer(v) => vec![*v as f64],
            _ => return Err(Error::Config("`state.x` must be a vector".into())),
        };
        let seed = match req(&root, "seed")? {
            toml::Value::Integer(v) if *v >= 0 => *v as u64,
            // Seeds beyond the signed 64-bit range are written as strings.
            toml::Value::String(s) => s.parse().map_err(|_| Error::Config(format!("`seed` = {s:?} is not a u64")))?,
            _ => return Err(Error::Config("`seed` must be a nonnegative integer".into())),
        };
        let degree = match req(&root, "regression.degree")? {
            toml::Value::Integer(v) if *v >= 0 => *v as usize,
            _ => return Err(Error::Config("`regression.degree` must be a nonnegative integer".into())),
        };
        let spec = Self {
            id: text(&root, "scenario.id")?.to_string(),
            coefficients: text(&root, "coefficients.name")?.to_string(),
            t: num(&root, "time.t")?,
            horizon: num(&root, "time.T")?,
            steps: count(&root, "time.steps")?,
            x,
            law: text(&root, "law.sampler")?.parse()?,
            inner: count(&root, "particles.inner")?,
            bpaths: count(&root, "particles.bpaths")?,
            seed,
            picard_tol: num(&root, "picard.tol")?,
            picard_max_iter: count(&root, "picard.max_iter")?,
            degree,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > self.t) {
            return Err(Error::Config(format!("time.T = {} must exceed time.t = {}", self.horizon, self.t)));
        }
        if self.steps == 0 || self.inner == 0 || self.bpaths == 0 || self.x.is_empty() {
            return Err(Error::Config("counts must be positive".into()));
        }
        if !(self.picard_tol > 0.0) {
            return Err(Error::Config("picard.tol must be positive".into()));
        }
        Ok(())
    }

    /// Renders the scenario in the same dotted-key format accepted by [`ScenarioSpec::parse`].
    pub fn to_document(&self) -> String {
        let xs: Vec<String> = self.x.iter().map(|v| format!("{v:?}")).collect();
        format!(
            "scenario.id = \"{}\"\ncoefficients.name = \"{}\"\ntime.t = {:?}\ntime.T = {:?}\ntime.steps = {}\nstate.x = [{}]\nlaw.sampler = \"{}\"\nparticles.inner = {}\nparticles.bpaths = {}\nseed = {}\npicard.tol = {:?}\npicard.max_iter = {}\nregression.degree = {}\n",
            self.id,
            self.coefficients,
            self.t,
            self.horizon,
            self.steps,
            xs.join(", "),
            self.law,
            self.inner,
            self.bpaths,
            if self.seed > i64::MAX as u64 { format!("\"{}\"", self.seed) } else { self.seed.to_string() },
            self.picard_tol,
            self.picard_max_iter,
            self.degree
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_parsing() {
        assert_eq!("gaussian(0, 1)".parse::<LawSampler>().unwrap(), LawSampler::Gaussian { mean: 0.0, sd: 1.0 });
        assert_eq!("uniform(-1, 2.5)".parse::<LawSampler>().unwrap(), LawSampler::Uniform { a: -1.0, b: 2.5 });
        assert_eq!(" dirac(0.3) ".parse::<LawSampler>().unwrap(), LawSampler::Dirac(0.3));
        assert!("cauchy(0, 1)".parse::<LawSampler>().is_err());
        assert!("uniform(2, 1)".parse::<LawSampler>().is_err());
    }

    #[test]
    fn document_round_trip() {
        let s = ScenarioSpec { x: vec![0.25, -1.0], law: LawSampler::Uniform { a: -1.0, b: 1.0 }, ..Default::default() };
        assert_eq!(ScenarioSpec::parse(&s.to_document()).unwrap(), s);
    }

    #[test]
    fn missing_horizon_is_config_error() {
        let doc = ScenarioSpec::default().to_document().replace("time.T = 1.0\n", "");
        match ScenarioSpec::parse(&doc) {
            Err(Error::Config(m)) => assert!(m.contains("time.T")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn reflected_draws_share_the_law() {
        let s = LawSampler::Gaussian { mean: 0.5, sd: 1.0 };
        let a = s.draw(20000, 1, Seed::new(4));
        let b = s.draw_reflected(20000, 1, Seed::new(4));
        let ma: f64 = a.iter().sum::<f64>() / a.len() as f64;
        let mb: f64 = b.iter().sum::<f64>() / b.len() as f64;
        assert!((ma - 0.5).abs() < 0.03 && (mb - 0.5).abs() < 0.03);
        assert_ne!(a, b);
    }
}
