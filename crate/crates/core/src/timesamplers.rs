//! Timestep distributions on `(0, 1)` used to weight training times.
//!
//! * `LogitNormal(μ, σ)`: `sigmoid(N(μ, σ²))`, concentrates on mid-range times.
//! * `MixExp(a)`: `p(t) ∝ exp(a(t−½)) + exp(−a(t−½))`, emphasises both ends.
//!   The un-centred `exp(at) + exp(−at)` variant is kept as [`MixExpForm::Literal`]
//!   for comparison; it is monotone on `[0, 1]`.
//! * `Uniform`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Samples are kept at least this far from 0 and 1.
pub const EDGE_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixExpForm {
    Centered,
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TimestepDistribution {
    Uniform,
    LogitNormal { mu: f64, sigma: f64 },
    MixExp { a: f64, form: MixExpForm },
}

impl Default for TimestepDistribution {
    fn default() -> Self {
        TimestepDistribution::Uniform
    }
}

fn logit(t: f64) -> f64 {
    (t / (1.0 - t)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

impl TimestepDistribution {
    pub fn logit_normal(mu: f64, sigma: f64) -> Result<Self> {
        let d = TimestepDistribution::LogitNormal { mu, sigma };
        d.validate()?;
        Ok(d)
    }

    /// Centred Mix-Exp with scale `a`.
    pub fn mix_exp(a: f64) -> Result<Self> {
        let d = TimestepDistribution::MixExp {
            a,
            form: MixExpForm::Centered,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn mix_exp_literal(a: f64) -> Result<Self> {
        let d = TimestepDistribution::MixExp {
            a,
            form: MixExpForm::Literal,
        };
        d.validate()?;
        Ok(d)
    }

    /// Builds a distribution from its config name and parameters.
    pub fn from_parts(kind: &str, mu: f64, sigma: f64, a: f64, form: &str) -> Result<Self> {
        let form = match form {
            "centered" => MixExpForm::Centered,
            "literal" => MixExpForm::Literal,
            other => return Err(Error::Config(format!("unknown mix-exp form `{other}`"))),
        };
        let d = match kind {
            "uniform" => TimestepDistribution::Uniform,
            "logit_normal" => TimestepDistribution::LogitNormal { mu, sigma },
            "mix_exp" => TimestepDistribution::MixExp { a, form },
            other => return Err(Error::Config(format!("unknown time sampler `{other}`"))),
        };
        d.validate()?;
        Ok(d)
    }

    pub fn name(&self) -> &'static str {
        match self {
            TimestepDistribution::Uniform => "uniform",
            TimestepDistribution::LogitNormal { .. } => "logit_normal",
            TimestepDistribution::MixExp { .. } => "mix_exp",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TimestepDistribution::Uniform => Ok(()),
            TimestepDistribution::LogitNormal { mu, sigma } => {
                if !mu.is_finite() || !(sigma > 0.0 && sigma.is_finite()) {
                    return Err(Error::param(format!("logit-normal needs finite mu and sigma > 0, got ({mu}, {sigma})")));
                }
                Ok(())
            }
            TimestepDistribution::MixExp { a, .. } => {
                // Beyond ~700 the normaliser overflows.
                if !(a > 0.0 && a < 700.0) {
                    return Err(Error::param(format!("mix-exp scale must be in (0, 700), got {a}")));
                }
                Ok(())
            }
        }
    }

    /// Normalised density at `t ∈ (0, 1)`.
    pub fn pdf(&self, t: f64) -> Result<f64> {
        self.validate()?;
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::Domain(format!("pdf evaluated at t = {t}, outside (0, 1)")));
        }
        Ok(match *self {
            TimestepDistribution::Uniform => 1.0,
            TimestepDistribution::LogitNormal { mu, sigma } => {
                let z = (logit(t) - mu) / sigma;
                (-0.5 * z * z).exp() / ((2.0 * PI).sqrt() * sigma * t * (1.0 - t))
            }
            TimestepDistribution::MixExp { a, form } => match form {
                MixExpForm::Centered => {
                    2.0 * (a * (t - 0.5)).cosh() / ((4.0 / a) * (a / 2.0).sinh())
                }
                MixExpForm::Literal => 2.0 * (a * t).cosh() / (2.0 * a.sinh() / a),
            },
        })
    }

    /// Cumulative distribution on `[0, 1]`; clamps outside that range.
    pub fn cdf(&self, t: f64) -> Result<f64> {
        self.validate()?;
        if t.is_nan() {
            return Err(Error::Domain("cdf at NaN".into()));
        }
        if t <= 0.0 {
            return Ok(0.0);
        }
        if t >= 1.0 {
            return Ok(1.0);
        }
        Ok(match *self {
            TimestepDistribution::Uniform => t,
            TimestepDistribution::LogitNormal { mu, sigma } => std_normal_cdf((logit(t) - mu) / sigma),
            TimestepDistribution::MixExp { a, form } => match form {
                MixExpForm::Centered => {
                    let h = (a / 2.0).sinh();
                    ((a * (t - 0.5)).sinh() + h) / (2.0 * h)
                }
                MixExpForm::Literal => (a * t).sinh() / a.sinh(),
            },
        })
    }

    /// Draws one timestep strictly inside `(0, 1)`.
    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let t = match *self {
            TimestepDistribution::Uniform => rng.random::<f64>(),
            TimestepDistribution::LogitNormal { mu, sigma } => {
                let u: f64 = StandardNormal.sample(rng);
                sigmoid(mu + sigma * u)
            }
            TimestepDistribution::MixExp { a, form } => {
                let pick: f64 = rng.random();
                let u: f64 = rng.random();
                match form {
                    // Both halves carry equal mass; each is a truncated
                    // exponential inverted in closed form.
                    MixExpForm::Centered => {
                        let rising = (u * a.exp_m1()).ln_1p() / a;
                        if pick < 0.5 {
                            rising
                        } else {
                            1.0 - rising
                        }
                    }
                    MixExpForm::Literal => {
                        let up = a.exp_m1();
                        let down = -(-a).exp_m1();
                        if pick < up / (up + down) {
                            (u * up).ln_1p() / a
                        } else {
                            -(u * (-a).exp_m1()).ln_1p() / a
                        }
                    }
                }
            }
        };
        t.clamp(EDGE_CLAMP, 1.0 - EDGE_CLAMP)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Vec<f64>> {
        self.validate()?;
        if n == 0 {
            return Err(Error::param("sample count must be >= 1"));
        }
        Ok((0..n).map(|_| self.sample_one(rng)).collect())
    }
}

/// One-sample Kolmogorov–Smirnov statistic of `samples` against `cdf`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}
