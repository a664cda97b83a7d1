//! Gaussian-process priors in state-space form.
//!
//! A [`KernelSpec`] describes a stationary covariance function of one input.
//! [`KernelSpec::to_state_space`] turns it into the linear time-invariant SDE
//! `dx/dt = F x + L w`, `f = H x`, and [`ContinuousSsm::discretize`] into the
//! transition `x_k = A x_{k-1} + q_k`, `q_k ~ N(0, Q)`.
//!
//! Supported kernels: the half-integer Matérn family (ν = 1/2 .. 7/2), the
//! cosine kernel, a truncated harmonic expansion of the periodic kernel, the
//! quasi-periodic Matérn-1/2 × cosine product, and sums and products thereof.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg::{block_diag, expm, solve_lyapunov, symmetrized};

/// Default number of cosine blocks in the periodic-kernel expansion.
pub const DEFAULT_HARMONICS: usize = 6;

fn default_harmonics() -> usize {
    DEFAULT_HARMONICS
}

/// A stationary kernel over the sequential input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    Matern12 { variance: f64, lengthscale: f64 },
    Matern32 { variance: f64, lengthscale: f64 },
    Matern52 { variance: f64, lengthscale: f64 },
    Matern72 { variance: f64, lengthscale: f64 },
    /// `σ² cos(ω τ)`; `frequency` is the angular frequency ω.
    Cosine { variance: f64, frequency: f64 },
    /// Matérn-1/2 envelope times a unit cosine carrier.
    QuasiPeriodic {
        variance: f64,
        lengthscale: f64,
        frequency: f64,
    },
    /// `σ² exp(-2 sin²(π τ / p) / ℓ²)`, represented by its first `harmonics`
    /// cosine terms.
    Periodic {
        variance: f64,
        lengthscale: f64,
        period: f64,
        #[serde(default = "default_harmonics")]
        harmonics: usize,
    },
    Sum { kernels: Vec<KernelSpec> },
    Product { kernels: Vec<KernelSpec> },
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidKernel(format!("{name} must be positive, got {v}")))
    }
}

/// Half-integer Matérn covariance with smoothness `p + 1/2` at lag `r >= 0`.
pub fn matern_covariance(p: usize, variance: f64, lengthscale: f64, r: f64) -> f64 {
    let r = r.abs();
    match p {
        0 => variance * (-r / lengthscale).exp(),
        1 => {
            let a = 3f64.sqrt() * r / lengthscale;
            variance * (1.0 + a) * (-a).exp()
        }
        2 => {
            let a = 5f64.sqrt() * r / lengthscale;
            variance * (1.0 + a + a * a / 3.0) * (-a).exp()
        }
        3 => {
            let a = 7f64.sqrt() * r / lengthscale;
            variance * (1.0 + a + 2.0 * a * a / 5.0 + a * a * a / 15.0) * (-a).exp()
        }
        _ => panic!("unsupported Matérn order p={p}"),
    }
}

/// `e^{-x} I_j(x)`, the exponentially scaled modified Bessel function of the
/// first kind, by its power series evaluated in log space.
pub fn scaled_bessel_i(j: usize, x: f64) -> f64 {
    if x == 0.0 {
        return if j == 0 { 1.0 } else { 0.0 };
    }
    let half_ln = (0.5 * x).ln();
    let mut sum = 0.0;
    let mut k = 0usize;
    loop {
        let kf = k as f64;
        let ln_term = (2.0 * kf + j as f64) * half_ln
            - ln_gamma(kf + 1.0)
            - ln_gamma(kf + j as f64 + 1.0)
            - x;
        let term = ln_term.exp();
        sum += term;
        if kf > x && term < 1e-18 * sum {
            break;
        }
        k += 1;
        if k > 100_000 {
            break;
        }
    }
    sum
}

/// Per-harmonic variances `q_j²` of the periodic kernel expansion,
/// `κ(τ) = Σ_j q_j² cos(j ω₀ τ)`.
pub fn periodic_harmonic_variances(variance: f64, lengthscale: f64, harmonics: usize) -> Vec<f64> {
    let x = lengthscale.powi(-2);
    (0..harmonics)
        .map(|j| {
            let b = scaled_bessel_i(j, x);
            if j == 0 {
                variance * b
            } else {
                2.0 * variance * b
            }
        })
        .collect()
}

impl KernelSpec {
    pub fn matern(nu_times_two: usize, variance: f64, lengthscale: f64) -> Result<Self> {
        match nu_times_two {
            1 => Ok(KernelSpec::Matern12 { variance, lengthscale }),
            3 => Ok(KernelSpec::Matern32 { variance, lengthscale }),
            5 => Ok(KernelSpec::Matern52 { variance, lengthscale }),
            7 => Ok(KernelSpec::Matern72 { variance, lengthscale }),
            _ => Err(Error::InvalidKernel(format!(
                "Matérn smoothness {nu_times_two}/2 has no supported state-space form"
            ))),
        }
    }

    /// Check parameter positivity and composite arities.
    pub fn validate(&self) -> Result<()> {
        use KernelSpec::*;
        match self {
            Matern12 { variance, lengthscale }
            | Matern32 { variance, lengthscale }
            | Matern52 { variance, lengthscale }
            | Matern72 { variance, lengthscale } => {
                check_positive("variance", *variance)?;
                check_positive("lengthscale", *lengthscale)
            }
            Cosine { variance, frequency } => {
                check_positive("variance", *variance)?;
                check_positive("frequency", *frequency)
            }
            QuasiPeriodic {
                variance,
                lengthscale,
                frequency,
            } => {
                check_positive("variance", *variance)?;
                check_positive("lengthscale", *lengthscale)?;
                check_positive("frequency", *frequency)
            }
            Periodic {
                variance,
                lengthscale,
                period,
                harmonics,
            } => {
                check_positive("variance", *variance)?;
                check_positive("lengthscale", *lengthscale)?;
                check_positive("period", *period)?;
                if *harmonics == 0 {
                    return Err(Error::InvalidKernel("harmonics must be >= 1".into()));
                }
                Ok(())
            }
            Sum { kernels } => {
                if kernels.len() < 2 {
                    return Err(Error::InvalidKernel(format!(
                        "sum needs at least 2 kernels, got {}",
                        kernels.len()
                    )));
                }
                kernels.iter().try_for_each(|k| k.validate())
            }
            Product { kernels } => {
                if kernels.len() != 2 {
                    return Err(Error::InvalidKernel(format!(
                        "product needs exactly 2 kernels, got {}",
                        kernels.len()
                    )));
                }
                kernels.iter().try_for_each(|k| k.validate())
            }
        }
    }

    /// Zero white-noise spectral density: the SDE is a deterministic rotation.
    pub fn is_deterministic(&self) -> bool {
        match self {
            KernelSpec::Cosine { .. } | KernelSpec::Periodic { .. } => true,
            KernelSpec::Sum { kernels } | KernelSpec::Product { kernels } => {
                kernels.iter().all(|k| k.is_deterministic())
            }
            _ => false,
        }
    }

    /// Marginal variance `κ(0)`.
    pub fn variance(&self) -> f64 {
        self.covariance(0.0)
    }

    /// The covariance function this kernel's state-space form realises, at
    /// lag `tau`. For `Periodic` this is the truncated harmonic series.
    pub fn covariance(&self, tau: f64) -> f64 {
        use KernelSpec::*;
        match self {
            Matern12 { variance, lengthscale } => matern_covariance(0, *variance, *lengthscale, tau),
            Matern32 { variance, lengthscale } => matern_covariance(1, *variance, *lengthscale, tau),
            Matern52 { variance, lengthscale } => matern_covariance(2, *variance, *lengthscale, tau),
            Matern72 { variance, lengthscale } => matern_covariance(3, *variance, *lengthscale, tau),
            Cosine { variance, frequency } => variance * (frequency * tau).cos(),
            QuasiPeriodic {
                variance,
                lengthscale,
                frequency,
            } => matern_covariance(0, *variance, *lengthscale, tau) * (frequency * tau).cos(),
            Periodic {
                variance,
                lengthscale,
                period,
                harmonics,
            } => {
                let w0 = 2.0 * PI / period;
                periodic_harmonic_variances(*variance, *lengthscale, *harmonics)
                    .iter()
                    .enumerate()
                    .map(|(j, q)| q * (j as f64 * w0 * tau).cos())
                    .sum()
            }
            Sum { kernels } => kernels.iter().map(|k| k.covariance(tau)).sum(),
            Product { kernels } => kernels.iter().map(|k| k.covariance(tau)).product(),
        }
    }

    /// Number of trainable (log-transformed) parameters.
    pub fn num_params(&self) -> usize {
        self.params().len()
    }

    /// Unconstrained parameter vector: logs of every positive parameter, in
    /// declaration order (harmonic counts are structural and not included).
    pub fn params(&self) -> Vec<f64> {
        use KernelSpec::*;
        match self {
            Matern12 { variance, lengthscale }
            | Matern32 { variance, lengthscale }
            | Matern52 { variance, lengthscale }
            | Matern72 { variance, lengthscale } => vec![variance.ln(), lengthscale.ln()],
            Cosine { variance, frequency } => vec![variance.ln(), frequency.ln()],
            QuasiPeriodic {
                variance,
                lengthscale,
                frequency,
            } => vec![variance.ln(), lengthscale.ln(), frequency.ln()],
            Periodic {
                variance,
                lengthscale,
                period,
                ..
            } => vec![variance.ln(), lengthscale.ln(), period.ln()],
            Sum { kernels } | Product { kernels } => kernels.iter().flat_map(|k| k.params()).collect(),
        }
    }

    /// Rebuild from an unconstrained vector produced by [`params`](Self::params).
    pub fn with_params(&self, p: &[f64]) -> Result<Self> {
        if p.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "kernel expects {} parameters, got {}",
                self.num_params(),
                p.len()
            )));
        }
        use KernelSpec::*;
        let e = |i: usize| p[i].exp();
        Ok(match self {
            Matern12 { .. } => Matern12 { variance: e(0), lengthscale: e(1) },
            Matern32 { .. } => Matern32 { variance: e(0), lengthscale: e(1) },
            Matern52 { .. } => Matern52 { variance: e(0), lengthscale: e(1) },
            Matern72 { .. } => Matern72 { variance: e(0), lengthscale: e(1) },
            Cosine { .. } => Cosine { variance: e(0), frequency: e(1) },
            QuasiPeriodic { .. } => QuasiPeriodic {
                variance: e(0),
                lengthscale: e(1),
                frequency: e(2),
            },
            Periodic { harmonics, .. } => Periodic {
                variance: e(0),
                lengthscale: e(1),
                period: e(2),
                harmonics: *harmonics,
            },
            Sum { kernels } | Product { kernels } => {
                let mut out = Vec::with_capacity(kernels.len());
                let mut off = 0;
                for k in kernels {
                    let n = k.num_params();
                    out.push(k.with_params(&p[off..off + n])?);
                    off += n;
                }
                if matches!(self, Sum { .. }) {
                    Sum { kernels: out }
                } else {
                    Product { kernels: out }
                }
            }
        })
    }

    /// Continuous-time state-space realisation of the kernel.
    pub fn to_state_space(&self) -> Result<ContinuousSsm> {
        self.validate()?;
        use KernelSpec::*;
        match self {
            Matern12 { variance, lengthscale } => Ok(matern_ssm(0, *variance, *lengthscale)),
            Matern32 { variance, lengthscale } => Ok(matern_ssm(1, *variance, *lengthscale)),
            Matern52 { variance, lengthscale } => Ok(matern_ssm(2, *variance, *lengthscale)),
            Matern72 { variance, lengthscale } => Ok(matern_ssm(3, *variance, *lengthscale)),
            Cosine { variance, frequency } => Ok(cosine_ssm(*variance, *frequency)),
            QuasiPeriodic {
                variance,
                lengthscale,
                frequency,
            } => Ok(product_ssm(
                &matern_ssm(0, *variance, *lengthscale),
                &cosine_ssm(1.0, *frequency),
            )),
            Periodic {
                variance,
                lengthscale,
                period,
                harmonics,
            } => Ok(periodic_ssm(*variance, *lengthscale, *period, *harmonics)),
            Sum { kernels } => {
                let parts = kernels
                    .iter()
                    .map(|k| k.to_state_space())
                    .collect::<Result<Vec<_>>>()?;
                Ok(sum_ssm(&parts))
            }
            Product { kernels } => {
                let (a, b) = (&kernels[0], &kernels[1]);
                if matches!(a, Sum { .. }) && matches!(b, Sum { .. }) {
                    return Err(Error::UnsupportedKernel(
                        "product of two sums has no finite state-space form here".into(),
                    ));
                }
                let (stoch, det) = match (a.is_deterministic(), b.is_deterministic()) {
                    (_, true) => (a, b),
                    (true, false) => (b, a),
                    (false, false) => {
                        return Err(Error::UnsupportedKernel(format!(
                            "product needs one deterministic (cosine/periodic) factor, got {} and {}",
                            a.name(),
                            b.name()
                        )))
                    }
                };
                if matches!(stoch, Product { .. }) || matches!(det, Product { .. }) {
                    return Err(Error::UnsupportedKernel(
                        "nested products are not supported".into(),
                    ));
                }
                Ok(product_ssm(&stoch.to_state_space()?, &det.to_state_space()?))
            }
        }
    }

    pub fn name(&self) -> &'static str {
        use KernelSpec::*;
        match self {
            Matern12 { .. } => "matern12",
            Matern32 { .. } => "matern32",
            Matern52 { .. } => "matern52",
            Matern72 { .. } => "matern72",
            Cosine { .. } => "cosine",
            QuasiPeriodic { .. } => "quasi_periodic",
            Periodic { .. } => "periodic",
            Sum { .. } => "sum",
            Product { .. } => "product",
        }
    }
}

/// Exact (untruncated) periodic covariance, for checking the expansion.
pub fn periodic_exact_covariance(variance: f64, lengthscale: f64, period: f64, tau: f64) -> f64 {
    let s = (PI * tau / period).sin();
    variance * (-2.0 * s * s / (lengthscale * lengthscale)).exp()
}

/// `dx/dt = F x + L w`, `w` white noise with spectral density `Qc`, `f = H x`,
/// stationary state covariance `Pinf`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousSsm {
    pub f: DMatrix<f64>,
    pub l: DMatrix<f64>,
    pub qc: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub pinf: DMatrix<f64>,
    /// Sizes of the diagonal blocks of `F` (and therefore of every `A`).
    pub blocks: Vec<usize>,
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |a, i| a * i as f64)
}

/// Matérn ν = p + 1/2 in companion form; `Pinf` from the Lyapunov equation.
fn matern_ssm(p: usize, variance: f64, lengthscale: f64) -> ContinuousSsm {
    let s = p + 1;
    let lam = ((2 * p + 1) as f64).sqrt() / lengthscale;
    let mut f = DMatrix::zeros(s, s);
    for i in 0..s - 1 {
        f[(i, i + 1)] = 1.0;
    }
    for k in 0..s {
        // characteristic polynomial (x + λ)^s
        f[(s - 1, k)] = -binomial(s, k) * lam.powi((s - k) as i32);
    }
    let mut l = DMatrix::zeros(s, 1);
    l[(s - 1, 0)] = 1.0;
    let qc_val = variance * (2.0 * lam).powi(2 * p as i32 + 1) * factorial(p).powi(2) / factorial(2 * p);
    let qc = DMatrix::from_element(1, 1, qc_val);
    let mut h = DMatrix::zeros(1, s);
    h[(0, 0)] = 1.0;
    let pinf = if s == 1 {
        DMatrix::from_element(1, 1, variance)
    } else {
        let noise = &l * &qc * l.transpose();
        let mut p = solve_lyapunov(&f, &noise).expect("Matérn feedback matrix is stable");
        // pin the marginal variance exactly
        p[(0, 0)] = variance;
        p
    };
    ContinuousSsm {
        f,
        l,
        qc,
        h,
        pinf,
        blocks: vec![s],
    }
}

fn cosine_ssm(variance: f64, frequency: f64) -> ContinuousSsm {
    ContinuousSsm {
        f: DMatrix::from_row_slice(2, 2, &[0.0, -frequency, frequency, 0.0]),
        l: DMatrix::identity(2, 2),
        qc: DMatrix::zeros(2, 2),
        h: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        pinf: DMatrix::identity(2, 2) * variance,
        blocks: vec![2],
    }
}

fn periodic_ssm(variance: f64, lengthscale: f64, period: f64, harmonics: usize) -> ContinuousSsm {
    let w0 = 2.0 * PI / period;
    let q2 = periodic_harmonic_variances(variance, lengthscale, harmonics);
    let parts: Vec<ContinuousSsm> = q2
        .iter()
        .enumerate()
        .map(|(j, q)| {
            let w = j as f64 * w0;
            ContinuousSsm {
                f: DMatrix::from_row_slice(2, 2, &[0.0, -w, w, 0.0]),
                l: DMatrix::identity(2, 2),
                qc: DMatrix::zeros(2, 2),
                h: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
                pinf: DMatrix::identity(2, 2) * *q,
                blocks: vec![2],
            }
        })
        .collect();
    sum_ssm(&parts)
}

/// Block-diagonal stacking; `H` rows are concatenated so `f` is the sum.
fn sum_ssm(parts: &[ContinuousSsm]) -> ContinuousSsm {
    let f: Vec<_> = parts.iter().map(|p| &p.f).collect();
    let l: Vec<_> = parts.iter().map(|p| &p.l).collect();
    let qc: Vec<_> = parts.iter().map(|p| &p.qc).collect();
    let pinf: Vec<_> = parts.iter().map(|p| &p.pinf).collect();
    let h_cols: usize = parts.iter().map(|p| p.h.ncols()).sum();
    let mut h = DMatrix::zeros(1, h_cols);
    let mut off = 0;
    for p in parts {
        h.view_mut((0, off), (1, p.h.ncols())).copy_from(&p.h);
        off += p.h.ncols();
    }
    ContinuousSsm {
        f: block_diag(&f),
        l: block_diag(&l),
        qc: block_diag(&qc),
        h,
        pinf: block_diag(&pinf),
        blocks: parts.iter().flat_map(|p| p.blocks.iter().copied()).collect(),
    }
}

/// Kronecker product of a stochastic and a deterministic SSM. Exact because
/// the deterministic factor only rotates the state.
fn product_ssm(stoch: &ContinuousSsm, det: &ContinuousSsm) -> ContinuousSsm {
    let i_s = DMatrix::<f64>::identity(stoch.f.nrows(), stoch.f.nrows());
    let i_d = DMatrix::<f64>::identity(det.f.nrows(), det.f.nrows());
    let f = stoch.f.kronecker(&i_d) + i_s.kronecker(&det.f);
    let l = stoch.l.kronecker(&i_d);
    let qc = stoch.qc.kronecker(&det.pinf);
    let h = stoch.h.kronecker(&det.h);
    let pinf = symmetrized(stoch.pinf.kronecker(&det.pinf));
    let s = f.nrows();
    ContinuousSsm {
        f,
        l,
        qc,
        h,
        pinf,
        blocks: vec![s],
    }
}

impl ContinuousSsm {
    pub fn state_dim(&self) -> usize {
        self.f.nrows()
    }

    /// Independent latent processes stacked block-diagonally; `H` becomes
    /// block-diagonal so `f = H x` has one entry per process.
    pub fn stack_independent(parts: &[ContinuousSsm]) -> ContinuousSsm {
        let f: Vec<_> = parts.iter().map(|p| &p.f).collect();
        let l: Vec<_> = parts.iter().map(|p| &p.l).collect();
        let qc: Vec<_> = parts.iter().map(|p| &p.qc).collect();
        let h: Vec<_> = parts.iter().map(|p| &p.h).collect();
        let pinf: Vec<_> = parts.iter().map(|p| &p.pinf).collect();
        ContinuousSsm {
            f: block_diag(&f),
            l: block_diag(&l),
            qc: block_diag(&qc),
            h: block_diag(&h),
            pinf: block_diag(&pinf),
            blocks: parts.iter().flat_map(|p| p.blocks.iter().copied()).collect(),
        }
    }

    /// Residual of `F Pinf + Pinf F^T + L Qc L^T`, max-abs.
    pub fn lyapunov_residual(&self) -> f64 {
        let r = &self.f * &self.pinf + &self.pinf * self.f.transpose() + &self.l * &self.qc * self.l.transpose();
        r.amax()
    }

    /// `A = expm(F dt)`, `Q = Pinf - A Pinf A^T` (symmetrised).
    pub fn discretize(&self, dt: f64) -> DiscreteTransition {
        assert!(dt >= 0.0, "negative step length {dt}");
        let s = self.state_dim();
        if dt == 0.0 {
            return DiscreteTransition {
                a: DMatrix::identity(s, s),
                q: DMatrix::zeros(s, s),
                dt,
                blocks: self.blocks.clone(),
            };
        }
        // exponentiate block by block; F is block-diagonal
        let mut a = DMatrix::zeros(s, s);
        let mut off = 0;
        for &b in &self.blocks {
            let fb = self.f.view((off, off), (b, b)).clone_owned() * dt;
            a.view_mut((off, off), (b, b)).copy_from(&expm(&fb));
            off += b;
        }
        let q = symmetrized(&self.pinf - &a * &self.pinf * a.transpose());
        DiscreteTransition {
            a,
            q,
            dt,
            blocks: self.blocks.clone(),
        }
    }

    /// `N(0, Pinf)`.
    pub fn stationary_prior(&self) -> (DVector<f64>, DMatrix<f64>) {
        (DVector::zeros(self.state_dim()), self.pinf.clone())
    }
}

/// One step of the discrete linear-Gaussian transition.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteTransition {
    pub a: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub dt: f64,
    /// Diagonal block sizes of `a`, used to skip zero blocks in prediction.
    pub blocks: Vec<usize>,
}

/// Discretisations keyed by the bit pattern of `dt`; safe for concurrent reads.
#[derive(Debug, Default)]
pub struct TransitionCache {
    map: RwLock<HashMap<u64, Arc<DiscreteTransition>>>,
}

impl TransitionCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_insert(&self, ssm: &ContinuousSsm, dt: f64) -> Arc<DiscreteTransition> {
        self.get_or_insert_with(dt, || ssm.discretize(dt))
    }

    pub fn get_or_insert_with<F>(&self, dt: f64, make: F) -> Arc<DiscreteTransition>
    where
        F: FnOnce() -> DiscreteTransition,
    {
        let key = dt.to_bits();
        if let Some(t) = self.map.read().expect("cache lock poisoned").get(&key) {
            return Arc::clone(t);
        }
        let t = Arc::new(make());
        self.map
            .write()
            .expect("cache lock poisoned")
            .entry(key)
            .or_insert(t)
            .clone()
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn kernels() -> Vec<KernelSpec> {
        vec![
            KernelSpec::Matern12 { variance: 1.3, lengthscale: 0.7 },
            KernelSpec::Matern32 { variance: 0.8, lengthscale: 1.9 },
            KernelSpec::Matern52 { variance: 2.0, lengthscale: 1.1 },
            KernelSpec::Matern72 { variance: 1.0, lengthscale: 1.0 },
            KernelSpec::Cosine { variance: 0.6, frequency: 2.5 },
            KernelSpec::QuasiPeriodic {
                variance: 1.2,
                lengthscale: 3.0,
                frequency: 4.0,
            },
            KernelSpec::Periodic {
                variance: 1.0,
                lengthscale: 1.2,
                period: 2.0,
                harmonics: 6,
            },
            KernelSpec::Sum {
                kernels: vec![
                    KernelSpec::Matern32 { variance: 1.0, lengthscale: 1.0 },
                    KernelSpec::Cosine { variance: 0.5, frequency: 1.5 },
                ],
            },
            KernelSpec::Product {
                kernels: vec![
                    KernelSpec::Periodic {
                        variance: 1.0,
                        lengthscale: 1.0,
                        period: 1.0,
                        harmonics: 4,
                    },
                    KernelSpec::Matern32 { variance: 0.7, lengthscale: 5.0 },
                ],
            },
        ]
    }

    #[test]
    fn matern12_closed_form() {
        let ssm = KernelSpec::Matern12 { variance: 1.0, lengthscale: 1.0 }
            .to_state_space()
            .unwrap();
        assert_eq!(ssm.f[(0, 0)], -1.0);
        assert_eq!(ssm.l[(0, 0)], 1.0);
        assert_relative_eq!(ssm.qc[(0, 0)], 2.0, epsilon = 1e-15);
        assert_eq!(ssm.h[(0, 0)], 1.0);
        assert_eq!(ssm.pinf[(0, 0)], 1.0);
    }

    #[test]
    fn matern32_stationary_covariance() {
        let ssm = KernelSpec::Matern32 { variance: 1.0, lengthscale: 1.0 }
            .to_state_space()
            .unwrap();
        assert_eq!(ssm.state_dim(), 2);
        assert_eq!(ssm.h, DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
        assert_relative_eq!(ssm.pinf, DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0])), epsilon = 1e-12);
    }

    #[test]
    fn state_space_reproduces_kernel_on_grid() {
        for k in kernels() {
            let ssm = k.to_state_space().unwrap();
            let ell = 2.0;
            for i in 0..=50 {
                let tau = 5.0 * ell * i as f64 / 50.0;
                let a = expm(&(&ssm.f * tau));
                let c = (&ssm.h * a * &ssm.pinf * ssm.h.transpose())[(0, 0)];
                assert!(
                    (c - k.covariance(tau)).abs() <= 1e-6 * k.variance(),
                    "{} at tau={tau}: {c} vs {}",
                    k.name(),
                    k.covariance(tau)
                );
            }
        }
    }

    #[test]
    fn lyapunov_identity_holds() {
        for k in kernels() {
            let ssm = k.to_state_space().unwrap();
            assert!(ssm.lyapunov_residual() < 1e-8, "{}: {}", k.name(), ssm.lyapunov_residual());
        }
    }

    #[test]
    fn discretize_ou() {
        let ssm = KernelSpec::Matern12 { variance: 1.0, lengthscale: 1.0 }
            .to_state_space()
            .unwrap();
        let t = ssm.discretize(0.5);
        assert_relative_eq!(t.a[(0, 0)], (-0.5f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(t.q[(0, 0)], 1.0 - (-1.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn discretize_zero_step_is_identity() {
        for k in kernels() {
            let ssm = k.to_state_space().unwrap();
            let t = ssm.discretize(0.0);
            let s = ssm.state_dim();
            assert_eq!(t.a, DMatrix::identity(s, s));
            assert_eq!(t.q, DMatrix::zeros(s, s));
        }
    }

    #[test]
    fn discretize_preserves_stationarity() {
        let ssm = KernelSpec::Matern52 { variance: 1.0, lengthscale: 1.0 }
            .to_state_space()
            .unwrap();
        let t = ssm.discretize(0.1);
        let lhs = &t.a * &ssm.pinf * t.a.transpose() + &t.q;
        assert!((lhs - &ssm.pinf).amax() < 1e-10);
    }

    #[test]
    fn semigroup_property() {
        for k in kernels() {
            let ssm = k.to_state_space().unwrap();
            let (a, b) = (0.37, 1.21);
            let lhs = ssm.discretize(a + b).a;
            let rhs = ssm.discretize(a).a * ssm.discretize(b).a;
            assert!((lhs - rhs).amax() < 1e-10, "{}", k.name());
        }
    }

    #[test]
    fn stationary_prior_values() {
        let ssm = KernelSpec::Matern12 { variance: 2.0, lengthscale: 1.0 }
            .to_state_space()
            .unwrap();
        let (m, p) = ssm.stationary_prior();
        assert_eq!(m[0], 0.0);
        assert_eq!(p[(0, 0)], 2.0);

        let m72 = KernelSpec::Matern72 { variance: 1.0, lengthscale: 1.0 }
            .to_state_space()
            .unwrap();
        assert!(crate::linalg::is_psd(&m72.pinf, 1e-12));
        assert_relative_eq!((&m72.h * &m72.pinf * m72.h.transpose())[(0, 0)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn sum_is_block_diagonal() {
        let k = KernelSpec::Sum {
            kernels: vec![
                KernelSpec::Matern32 { variance: 1.0, lengthscale: 1.0 },
                KernelSpec::Cosine { variance: 0.5, frequency: 1.5 },
            ],
        };
        let ssm = k.to_state_space().unwrap();
        assert_eq!(ssm.state_dim(), 4);
        assert_eq!(ssm.h, DMatrix::from_row_slice(1, 4, &[1.0, 0.0, 1.0, 0.0]));
        assert_eq!(ssm.f[(0, 2)], 0.0);
        assert_eq!(ssm.pinf[(1, 2)], 0.0);
        assert_relative_eq!(k.variance(), 1.5, epsilon = 1e-15);
        assert_relative_eq!((&ssm.h * &ssm.pinf * ssm.h.transpose())[(0, 0)], 1.5, epsilon = 1e-12);
    }

    #[test]
    fn product_of_sums_rejected() {
        let s = KernelSpec::Sum {
            kernels: vec![
                KernelSpec::Matern12 { variance: 1.0, lengthscale: 1.0 },
                KernelSpec::Matern32 { variance: 1.0, lengthscale: 1.0 },
            ],
        };
        let p = KernelSpec::Product { kernels: vec![s.clone(), s] };
        assert!(matches!(p.to_state_space(), Err(Error::UnsupportedKernel(_))));
        let two_materns = KernelSpec::Product {
            kernels: vec![
                KernelSpec::Matern12 { variance: 1.0, lengthscale: 1.0 },
                KernelSpec::Matern32 { variance: 1.0, lengthscale: 1.0 },
            ],
        };
        assert!(two_materns.to_state_space().is_err());
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(KernelSpec::Matern32 { variance: -1.0, lengthscale: 1.0 }.validate().is_err());
        assert!(KernelSpec::Sum { kernels: vec![] }.validate().is_err());
    }

    #[test]
    fn periodic_expansion_converges_to_exact_kernel() {
        let k = KernelSpec::Periodic {
            variance: 1.0,
            lengthscale: 1.0,
            period: 1.5,
            harmonics: 16,
        };
        for i in 0..40 {
            let tau = i as f64 * 0.1;
            assert!((k.covariance(tau) - periodic_exact_covariance(1.0, 1.0, 1.5, tau)).abs() < 1e-12);
        }
    }

    #[test]
    fn params_round_trip() {
        for k in kernels() {
            let p = k.params();
            let k2 = k.with_params(&p).unwrap();
            for (a, b) in k2.params().iter().zip(&p) {
                assert_relative_eq!(a, b, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn transition_cache_reuses_entries() {
        let ssm = KernelSpec::Matern32 { variance: 1.0, lengthscale: 1.0 }
            .to_state_space()
            .unwrap();
        let cache = TransitionCache::new();
        let a = cache.get_or_insert(&ssm, 0.25);
        let b = cache.get_or_insert(&ssm, 0.25);
        assert!(Arc::ptr_eq(&a, &b));
        cache.get_or_insert(&ssm, 0.5);
        assert_eq!(cache.len(), 2);
    }

    #[test]
    fn kernel_config_rejects_unknown_keys() {
        let ok: KernelSpec = serde_json::from_str(r#"{"type":"matern52","variance":1.0,"lengthscale":2.0}"#).unwrap();
        assert_eq!(ok, KernelSpec::Matern52 { variance: 1.0, lengthscale: 2.0 });
        let bad = serde_json::from_str::<KernelSpec>(r#"{"type":"matern52","variance":1.0,"lengthscale":2.0,"foo":1}"#);
        assert!(bad.is_err());
    }
}
