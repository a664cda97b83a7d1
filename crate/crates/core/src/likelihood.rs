//! Observation models, each in two forms: the density `p(y | f)` used by the
//! cubature rules, and a continuous measurement function `y = h(f, σ)`,
//! `σ ~ N(0, Σ)`, with Jacobians for the linearisation rules.

use std::f64::consts::FRAC_1_SQRT_2;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Lower bound on the Poisson surrogate variance `Cov[y | f] = e^f`.
pub const POISSON_VARIANCE_FLOOR: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

fn default_hetero_shift() -> f64 {
    0.5
}

fn default_components() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "LikelihoodRepr", into = "LikelihoodRepr")]
pub enum Likelihood {
    Gaussian {
        variance: f64,
    },
    /// Counts with rate `exp(f)`.
    Poisson,
    /// Labels in {0, 1}.
    BernoulliLogit,
    BernoulliProbit,
    /// `y ~ N(f₁, φ(f₂)²)` with `φ(x) = softplus(x - shift)`.
    Heteroscedastic {
        shift: f64,
    },
    /// `y ~ N(Σᵢ subᵢ · φ(ampᵢ), variance)`; latent order is all subbands,
    /// then all amplitudes.
    ProductAudio {
        components: usize,
        variance: f64,
        shift: f64,
    },
}

// Serialised form; field-less variants are structs so unknown keys are
// rejected for them too.
#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum LikelihoodRepr {
    Gaussian {
        variance: f64,
    },
    Poisson {},
    BernoulliLogit {},
    BernoulliProbit {},
    Heteroscedastic {
        #[serde(default = "default_hetero_shift")]
        shift: f64,
    },
    ProductAudio {
        #[serde(default = "default_components")]
        components: usize,
        variance: f64,
        #[serde(default)]
        shift: f64,
    },
}

impl From<LikelihoodRepr> for Likelihood {
    fn from(r: LikelihoodRepr) -> Self {
        match r {
            LikelihoodRepr::Gaussian { variance } => Likelihood::Gaussian { variance },
            LikelihoodRepr::Poisson {} => Likelihood::Poisson,
            LikelihoodRepr::BernoulliLogit {} => Likelihood::BernoulliLogit,
            LikelihoodRepr::BernoulliProbit {} => Likelihood::BernoulliProbit,
            LikelihoodRepr::Heteroscedastic { shift } => Likelihood::Heteroscedastic { shift },
            LikelihoodRepr::ProductAudio {
                components,
                variance,
                shift,
            } => Likelihood::ProductAudio {
                components,
                variance,
                shift,
            },
        }
    }
}

impl From<Likelihood> for LikelihoodRepr {
    fn from(l: Likelihood) -> Self {
        match l {
            Likelihood::Gaussian { variance } => LikelihoodRepr::Gaussian { variance },
            Likelihood::Poisson => LikelihoodRepr::Poisson {},
            Likelihood::BernoulliLogit => LikelihoodRepr::BernoulliLogit {},
            Likelihood::BernoulliProbit => LikelihoodRepr::BernoulliProbit {},
            Likelihood::Heteroscedastic { shift } => LikelihoodRepr::Heteroscedastic { shift },
            Likelihood::ProductAudio {
                components,
                variance,
                shift,
            } => LikelihoodRepr::ProductAudio {
                components,
                variance,
                shift,
            },
        }
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x - 0.5 * LN_2PI).exp()
}

/// `log Φ(x)`, using the asymptotic series in the far left tail.
pub fn log_norm_cdf(x: f64) -> f64 {
    if x > -30.0 {
        norm_cdf(x).ln()
    } else {
        let x2 = x * x;
        -0.5 * x2 - (-x).ln() - 0.5 * LN_2PI + (1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2)).ln()
    }
}

fn gaussian_log_pdf(y: f64, mean: f64, var: f64) -> f64 {
    let r = y - mean;
    -0.5 * (LN_2PI + var.ln() + r * r / var)
}

impl Likelihood {
    pub fn validate(&self) -> Result<()> {
        match self {
            Likelihood::Gaussian { variance } | Likelihood::ProductAudio { variance, .. } if !(*variance > 0.0 && variance.is_finite()) => {
                Err(Error::Config(format!("likelihood variance must be positive, got {variance}")))
            }
            Likelihood::ProductAudio { components: 0, .. } => Err(Error::Config("audio model needs >= 1 component".into())),
            Likelihood::Heteroscedastic { shift } | Likelihood::ProductAudio { shift, .. } if !shift.is_finite() => {
                Err(Error::Config("softplus shift must be finite".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Likelihood::Gaussian { .. } => "gaussian",
            Likelihood::Poisson => "poisson",
            Likelihood::BernoulliLogit => "bernoulli_logit",
            Likelihood::BernoulliProbit => "bernoulli_probit",
            Likelihood::Heteroscedastic { .. } => "heteroscedastic",
            Likelihood::ProductAudio { .. } => "product_audio",
        }
    }

    /// Number of latent functions entering one observation.
    pub fn latent_dim(&self) -> usize {
        match self {
            Likelihood::Heteroscedastic { .. } => 2,
            Likelihood::ProductAudio { components, .. } => 2 * components,
            _ => 1,
        }
    }

    pub fn obs_dim(&self) -> usize {
        1
    }

    pub fn noise_dim(&self) -> usize {
        1
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self, Likelihood::Gaussian { .. })
    }

    /// Covariance `Σ` of the measurement noise `σ`.
    pub fn noise_cov(&self) -> DMatrix<f64> {
        match self {
            Likelihood::Gaussian { variance } | Likelihood::ProductAudio { variance, .. } => DMatrix::from_element(1, 1, *variance),
            _ => DMatrix::identity(1, 1),
        }
    }

    /// Trainable parameters in log space.
    pub fn params(&self) -> Vec<f64> {
        match self {
            Likelihood::Gaussian { variance } | Likelihood::ProductAudio { variance, .. } => vec![variance.ln()],
            _ => vec![],
        }
    }

    pub fn with_params(&self, p: &[f64]) -> Result<Self> {
        if p.len() != self.params().len() {
            return Err(Error::Dimension(format!(
                "likelihood expects {} parameters, got {}",
                self.params().len(),
                p.len()
            )));
        }
        Ok(match self {
            Likelihood::Gaussian { .. } => Likelihood::Gaussian { variance: p[0].exp() },
            Likelihood::ProductAudio { components, shift, .. } => Likelihood::ProductAudio {
                components: *components,
                variance: p[0].exp(),
                shift: *shift,
            },
            other => other.clone(),
        })
    }

    fn check_dims(&self, y: Option<&[f64]>, f: &[f64]) -> Result<()> {
        if f.len() != self.latent_dim() {
            return Err(Error::Dimension(format!(
                "{} expects {} latent values, got {}",
                self.name(),
                self.latent_dim(),
                f.len()
            )));
        }
        if let Some(y) = y {
            if y.len() != self.obs_dim() {
                return Err(Error::Dimension(format!("{} expects 1 observation, got {}", self.name(), y.len())));
            }
        }
        Ok(())
    }

    /// Reject observations outside the model's support.
    pub fn check_observation(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.obs_dim() {
            return Err(Error::Dimension(format!("{} expects 1 observation, got {}", self.name(), y.len())));
        }
        let v = y[0];
        match self {
            Likelihood::Poisson if !(v >= 0.0 && v.fract() == 0.0) => {
                Err(Error::InvalidObservation(format!("Poisson count must be a non-negative integer, got {v}")))
            }
            Likelihood::BernoulliLogit | Likelihood::BernoulliProbit if v != 0.0 && v != 1.0 => {
                Err(Error::InvalidObservation(format!("Bernoulli label must be 0 or 1, got {v}")))
            }
            _ if !v.is_finite() => Err(Error::InvalidObservation(format!("non-finite observation {v}"))),
            _ => Ok(()),
        }
    }

    /// Exact `log p(y | f)`.
    pub fn log_density(&self, y: &[f64], f: &[f64]) -> Result<f64> {
        self.check_dims(Some(y), f)?;
        self.check_observation(y)?;
        Ok(self.log_density_unchecked(y[0], f))
    }

    /// `log p(y | f)` for an observation already validated.
    pub fn log_density_unchecked(&self, y: f64, f: &[f64]) -> f64 {
        match self {
            Likelihood::Gaussian { variance } => gaussian_log_pdf(y, f[0], *variance),
            Likelihood::Poisson => y * f[0] - f[0].exp() - ln_gamma(y + 1.0),
            Likelihood::BernoulliLogit => {
                if y == 1.0 {
                    -softplus(-f[0])
                } else {
                    -softplus(f[0])
                }
            }
            Likelihood::BernoulliProbit => {
                if y == 1.0 {
                    log_norm_cdf(f[0])
                } else {
                    log_norm_cdf(-f[0])
                }
            }
            Likelihood::Heteroscedastic { shift } => {
                // log σ without underflow: softplus(x) ≈ eˣ for very negative x
                let x = f[1] - shift;
                let log_s = if x < -30.0 { x } else { softplus(x).ln() };
                let r = y - f[0];
                let z = if r == 0.0 { 0.0 } else { r * (-log_s).exp() };
                -0.5 * (LN_2PI + z * z) - log_s
            }
            Likelihood::ProductAudio { variance, .. } => gaussian_log_pdf(y, self.audio_mean(f), *variance),
        }
    }

    fn audio_mean(&self, f: &[f64]) -> f64 {
        match self {
            Likelihood::ProductAudio { components, shift, .. } => {
                (0..*components).map(|i| f[i] * softplus(f[components + i] - shift)).sum()
            }
            _ => unreachable!(),
        }
    }

    fn bernoulli_mean_sd(&self, f: f64) -> (f64, f64) {
        match self {
            Likelihood::BernoulliLogit => {
                let p = sigmoid(f);
                // √(ψ(1-ψ)) = e^{f/2} / (1 + e^f), symmetric in f
                let a = f.abs();
                (p, (-0.5 * a).exp() / (1.0 + (-a).exp()))
            }
            Likelihood::BernoulliProbit => {
                let p = norm_cdf(f);
                let q = norm_cdf(-f);
                (p, (p * q).sqrt())
            }
            _ => unreachable!(),
        }
    }

    /// `h(f, σ)`.
    pub fn measurement(&self, f: &DVector<f64>, sigma: &DVector<f64>) -> DVector<f64> {
        self.check_dims(None, f.as_slice()).expect("latent dimension");
        let s = sigma[0];
        let v = match self {
            Likelihood::Gaussian { .. } => f[0] + s,
            Likelihood::Poisson => f[0].exp() + (0.5 * f[0]).exp() * s,
            Likelihood::BernoulliLogit | Likelihood::BernoulliProbit => {
                let (p, sd) = self.bernoulli_mean_sd(f[0]);
                p + sd * s
            }
            Likelihood::Heteroscedastic { shift } => f[0] + softplus(f[1] - shift) * s,
            Likelihood::ProductAudio { .. } => self.audio_mean(f.as_slice()) + s,
        };
        DVector::from_element(1, v)
    }

    /// `(∂h/∂f, ∂h/∂σ)` at `(f, σ)`.
    pub fn jacobians(&self, f: &DVector<f64>, sigma: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        self.check_dims(None, f.as_slice()).expect("latent dimension");
        let s = sigma[0];
        let m = self.latent_dim();
        let mut jf = DMatrix::zeros(1, m);
        let js;
        match self {
            Likelihood::Gaussian { .. } => {
                jf[(0, 0)] = 1.0;
                js = 1.0;
            }
            Likelihood::Poisson => {
                let e = f[0].exp();
                let h = (0.5 * f[0]).exp();
                jf[(0, 0)] = e + 0.5 * h * s;
                js = h;
            }
            Likelihood::BernoulliLogit => {
                let (p, sd) = self.bernoulli_mean_sd(f[0]);
                jf[(0, 0)] = sd * sd + 0.5 * sd * (1.0 - 2.0 * p) * s;
                js = sd;
            }
            Likelihood::BernoulliProbit => {
                let (p, sd) = self.bernoulli_mean_sd(f[0]);
                let pdf = norm_pdf(f[0]);
                let dsd = if sd > 0.0 { 0.5 * pdf * (1.0 - 2.0 * p) / sd } else { 0.0 };
                jf[(0, 0)] = pdf + dsd * s;
                js = sd;
            }
            Likelihood::Heteroscedastic { shift } => {
                jf[(0, 0)] = 1.0;
                jf[(0, 1)] = sigmoid(f[1] - shift) * s;
                js = softplus(f[1] - shift);
            }
            Likelihood::ProductAudio { components, shift, .. } => {
                let c = *components;
                for i in 0..c {
                    let a = f[c + i] - shift;
                    jf[(0, i)] = softplus(a);
                    jf[(0, c + i)] = f[i] * sigmoid(a);
                }
                js = 1.0;
            }
        }
        (jf, DMatrix::from_element(1, 1, js))
    }

    /// `(E[y | f], Cov[y | f])`.
    pub fn conditional_moments(&self, f: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        self.check_dims(None, f.as_slice()).expect("latent dimension");
        let (mean, var) = self.conditional_moments_scalar(f.as_slice());
        (DVector::from_element(1, mean), DMatrix::from_element(1, 1, var))
    }

    /// Scalar form of [`conditional_moments`](Self::conditional_moments).
    pub fn conditional_moments_scalar(&self, f: &[f64]) -> (f64, f64) {
        match self {
            Likelihood::Gaussian { variance } => (f[0], *variance),
            Likelihood::Poisson => {
                let e = f[0].exp();
                (e, e.max(POISSON_VARIANCE_FLOOR))
            }
            Likelihood::BernoulliLogit | Likelihood::BernoulliProbit => {
                let (p, sd) = self.bernoulli_mean_sd(f[0]);
                (p, sd * sd)
            }
            Likelihood::Heteroscedastic { shift } => {
                let s = softplus(f[1] - shift);
                (f[0], s * s)
            }
            Likelihood::ProductAudio { variance, .. } => (self.audio_mean(f), *variance),
        }
    }
}
