//! Independent reference implementations used by the self-test and the test
//! suites: dense GP regression, textbook nonlinear Kalman filters and brute
//! force one-dimensional quadrature.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::cubature::CubatureRule;
use crate::error::{Error, Result};
use crate::likelihood::Likelihood;
use crate::prior::{ContinuousSsm, KernelSpec};
use crate::sites::GaussianMoments;

/// Posterior marginal means and variances of GP regression at the training
/// inputs, by a dense Cholesky solve.
pub fn dense_gp_posterior(kernel: &KernelSpec, t: &[f64], y: &[f64], noise: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = t.len();
    let k = DMatrix::from_fn(n, n, |i, j| kernel.covariance((t[i] - t[j]).abs()));
    let ky = &k + DMatrix::identity(n, n) * noise;
    let chol = Cholesky::new(ky).ok_or(Error::Cholesky { dim: n })?;
    let alpha = chol.solve(&DVector::from_column_slice(y));
    let mean = &k * alpha;
    let v = chol.solve(&k);
    let cov = &k - &k * v;
    Ok((mean.iter().copied().collect(), cov.diagonal().iter().copied().collect()))
}

fn dense_predict(x: &GaussianMoments, ssm: &ContinuousSsm, dt: f64) -> GaussianMoments {
    let tr = ssm.discretize(dt);
    let cov = &tr.a * &x.cov * tr.a.transpose() + &tr.q;
    GaussianMoments::new(&tr.a * &x.mean, (&cov + cov.transpose()) * 0.5)
}

fn dense_update(pred: &GaussianMoments, cross: &DMatrix<f64>, s: f64, innovation: f64) -> GaussianMoments {
    // K = C / S, m += K v, P -= K S K^T
    let k = cross / s;
    let mean = &pred.mean + &k * innovation;
    let cov = &pred.cov - &k * s * k.transpose();
    GaussianMoments::new(mean, (&cov + cov.transpose()) * 0.5)
}

/// Extended Kalman filter linearising `y = h(Hx, σ)` at `(H m_pred, 0)`.
pub fn ekf_filter(ssm: &ContinuousSsm, lik: &Likelihood, t: &[f64], y: &[f64]) -> Vec<GaussianMoments> {
    let s = ssm.state_dim();
    let mut x = GaussianMoments::new(DVector::zeros(s), ssm.pinf.clone());
    let zero = DVector::zeros(lik.noise_dim());
    let mut out = Vec::with_capacity(t.len());
    for k in 0..t.len() {
        let dt = if k == 0 { 0.0 } else { t[k] - t[k - 1] };
        let pred = dense_predict(&x, ssm, dt);
        let f = &ssm.h * &pred.mean;
        let (jf, js) = lik.jacobians(&f, &zero);
        let jh = &jf * &ssm.h;
        let s_k = (&jh * &pred.cov * jh.transpose() + &js * lik.noise_cov() * js.transpose())[(0, 0)];
        let cross = &pred.cov * jh.transpose();
        let v = y[k] - lik.measurement(&f, &zero)[0];
        x = dense_update(&pred, &cross, s_k, v);
        out.push(x.clone());
    }
    out
}

/// Sigma-point Kalman filter with the cubature applied to the latent
/// marginal `f = Hx`: the unscented filter for a UT5 rule and the
/// Gauss–Hermite filter for a tensor GH rule.
pub fn sigma_point_filter(
    ssm: &ContinuousSsm,
    lik: &Likelihood,
    t: &[f64],
    y: &[f64],
    rule: &CubatureRule,
) -> Result<Vec<GaussianMoments>> {
    let s = ssm.state_dim();
    let mut x = GaussianMoments::new(DVector::zeros(s), ssm.pinf.clone());
    let mut out = Vec::with_capacity(t.len());
    for k in 0..t.len() {
        let dt = if k == 0 { 0.0 } else { t[k] - t[k - 1] };
        let pred = dense_predict(&x, ssm, dt);
        let fm = &ssm.h * &pred.mean;
        let ph = &pred.cov * ssm.h.transpose();
        let fc = &ssm.h * &ph;
        let l = Cholesky::new(fc.clone()).ok_or(Error::Cholesky { dim: fc.nrows() })?.l();
        let pts = rule.transformed_points(&fm, &l);
        let mut mu = 0.0;
        let mut moments = Vec::with_capacity(rule.len());
        for j in 0..rule.len() {
            let (e, v) = lik.conditional_moments_scalar(pts.column(j).as_slice());
            mu += rule.weights[j] * e;
            moments.push((e, v));
        }
        let mut s_y = 0.0;
        let mut c_fy = DVector::zeros(fm.len());
        for j in 0..rule.len() {
            let (e, v) = moments[j];
            let w = rule.weights[j];
            s_y += w * ((e - mu) * (e - mu) + v);
            c_fy += (pts.column(j) - &fm) * (w * (e - mu));
        }
        // Cov[x, y] = P H^T (H P H^T)⁻¹ Cov[f, y]
        let gain_f = Cholesky::new(fc).unwrap().solve(&c_fy);
        let cross = &ph * gain_f;
        x = dense_update(&pred, &DMatrix::from_column_slice(s, 1, cross.as_slice()), s_y, y[k] - mu);
        out.push(x.clone());
    }
    Ok(out)
}

/// Trapezoid nodes and normalised weights for `N(mean, var)` on
/// `mean ± width·sd`.
pub fn trapezoid_gaussian(mean: f64, var: f64, nodes: usize, width: f64) -> (Vec<f64>, Vec<f64>) {
    let sd = var.sqrt();
    let (a, b) = (mean - width * sd, mean + width * sd);
    let h = (b - a) / (nodes - 1) as f64;
    let xs: Vec<f64> = (0..nodes).map(|i| a + h * i as f64).collect();
    let mut ws: Vec<f64> = xs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let end = if i == 0 || i == nodes - 1 { 0.5 } else { 1.0 };
            end * (-(x - mean) * (x - mean) / (2.0 * var)).exp()
        })
        .collect();
    let z: f64 = ws.iter().sum();
    ws.iter_mut().for_each(|w| *w /= z);
    (xs, ws)
}

/// Default node count for the quadrature oracles.
pub const ORACLE_NODES: usize = 200_001;
const ORACLE_WIDTH: f64 = 14.0;

/// Power-EP site `(precision, shift)` for a scalar latent by moment matching
/// the tilted distribution on a dense grid.
pub fn pep_site_oracle(lik: &Likelihood, y: f64, cav_mean: f64, cav_var: f64, alpha: f64) -> (f64, f64) {
    let (xs, ws) = trapezoid_gaussian(cav_mean, cav_var, ORACLE_NODES, ORACLE_WIDTH);
    let logs: Vec<f64> = xs.iter().map(|&f| alpha * lik.log_density_unchecked(y, &[f])).collect();
    let mx = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let u: Vec<f64> = logs.iter().zip(&ws).map(|(l, w)| w * (l - mx).exp()).collect();
    let z: f64 = u.iter().sum();
    let m: f64 = u.iter().zip(&xs).map(|(u, x)| u * x).sum::<f64>() / z;
    let v: f64 = u.iter().zip(&xs).map(|(u, x)| u * (x - m) * (x - m)).sum::<f64>() / z;
    let precision = (1.0 / v - 1.0 / cav_var) / alpha;
    let shift = (m / v - cav_mean / cav_var) / alpha;
    (precision, shift)
}

/// Statistically linearised EP site for a scalar latent: SLR moments on a
/// dense grid, then the linear-Gaussian site for `y ≈ Ω f + b + e`,
/// `e ~ N(0, S - Ω² v)`.
pub fn slep_site_oracle(lik: &Likelihood, y: f64, cav_mean: f64, cav_var: f64, alpha: f64) -> (f64, f64) {
    let (xs, ws) = trapezoid_gaussian(cav_mean, cav_var, ORACLE_NODES, ORACLE_WIDTH);
    let mom: Vec<(f64, f64)> = xs.iter().map(|&f| lik.conditional_moments_scalar(&[f])).collect();
    let mu: f64 = mom.iter().zip(&ws).map(|((e, _), w)| w * e).sum();
    let s: f64 = mom.iter().zip(&ws).map(|((e, v), w)| w * ((e - mu) * (e - mu) + v)).sum();
    let c: f64 = mom.iter().zip(&ws).zip(&xs).map(|(((e, _), w), x)| w * (x - cav_mean) * (e - mu)).sum();
    let omega = c / cav_var;
    let r = s - omega * omega * cav_var;
    let precision = omega * omega / r;
    let s_hat = r + alpha * omega * omega * cav_var;
    let shift = precision * cav_mean + (1.0 + alpha * precision * cav_var) * omega * (y - mu) / s_hat;
    (precision, shift)
}

/// Natural-gradient VI site for a scalar latent at full step:
/// `Λ = -2 ∂L/∂v`, `η = ∂L/∂μ - 2 ∂L/∂v μ` with `L = E_q[log p(y | f)]`,
/// derivatives from the Gaussian score identities on a dense grid.
pub fn cvi_site_oracle(lik: &Likelihood, y: f64, mean: f64, var: f64) -> (f64, f64) {
    let (xs, ws) = trapezoid_gaussian(mean, var, ORACLE_NODES, ORACLE_WIDTH);
    let mut dm = 0.0;
    let mut dv = 0.0;
    for (x, w) in xs.iter().zip(&ws) {
        let lp = lik.log_density_unchecked(y, &[*x]);
        let z = x - mean;
        dm += w * lp * z / var;
        dv += w * lp * (z * z / (var * var) - 1.0 / var) * 0.5;
    }
    let precision = -2.0 * dv;
    (precision, dm + precision * mean)
}

/// `log ∫ p(y | f) N(f | mean, var) df` on a dense grid.
pub fn log_evidence_oracle(lik: &Likelihood, y: f64, mean: f64, var: f64) -> f64 {
    let (xs, ws) = trapezoid_gaussian(mean, var, ORACLE_NODES, ORACLE_WIDTH);
    let logs: Vec<f64> = xs.iter().map(|&f| lik.log_density_unchecked(y, &[f])).collect();
    let mx = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mx + logs.iter().zip(&ws).map(|(l, w)| w * (l - mx).exp()).sum::<f64>().ln()
}
