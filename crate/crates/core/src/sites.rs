//! Site approximations and the interchangeable update rules.
//!
//! Sites are stored in natural parameters, `precision = Σ_site⁻¹` and
//! `shift = Σ_site⁻¹ μ_site`. Every rule produces a site through the same
//! Gaussian bookkeeping, and a zero (or rank-deficient) precision is a valid
//! site: it carries no information along the missing directions. This is how
//! the linearisation rules represent the unidentified latent in the
//! heteroscedastic model.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cubature::{CubatureRule, CubatureSpec};
use crate::error::{Error, Result};
use crate::likelihood::Likelihood;
use crate::linalg::{cholesky_factor, inverse_symmetric, sparse_mul_sym, symmetrized};

/// Mean and covariance of a Gaussian belief.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianMoments {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        assert_eq!(mean.len(), cov.nrows(), "mean/covariance dimension mismatch");
        GaussianMoments { mean, cov }
    }

    pub fn scalar(mean: f64, var: f64) -> Self {
        GaussianMoments::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, var))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Marginal of `f = H x`.
    pub fn project(&self, h: &DMatrix<f64>) -> GaussianMoments {
        let hp = sparse_mul_sym(h, &self.cov);
        GaussianMoments {
            mean: h * &self.mean,
            cov: symmetrized(&hp * h.transpose()),
        }
    }
}

/// Cavity distribution `q(f) / q_site(f)^α`.
pub type Cavity = GaussianMoments;

/// Gaussian site `N(f | μ_site, Σ_site)` in natural parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Site {
    /// `Σ_site⁻¹`; symmetric, possibly singular or indefinite.
    pub precision: DMatrix<f64>,
    /// `Σ_site⁻¹ μ_site`.
    pub shift: DVector<f64>,
}

impl Site {
    /// A site carrying no information.
    pub fn empty(dim: usize) -> Self {
        Site {
            precision: DMatrix::zeros(dim, dim),
            shift: DVector::zeros(dim),
        }
    }

    pub fn from_moments(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Option<Self> {
        let precision = inverse_symmetric(cov)?;
        let shift = &precision * mean;
        Some(Site { precision, shift })
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    /// `Σ_site`, when the precision is invertible.
    pub fn cov(&self) -> Option<DMatrix<f64>> {
        inverse_symmetric(&self.precision)
    }

    /// `μ_site`, when the precision is invertible.
    pub fn mean(&self) -> Option<DVector<f64>> {
        self.cov().map(|c| c * &self.shift)
    }

    pub fn is_finite(&self) -> bool {
        self.precision.iter().chain(self.shift.iter()).all(|v| v.is_finite())
    }

    /// Largest absolute change in either natural parameter.
    pub fn max_abs_diff(&self, other: &Site) -> f64 {
        let a = (&self.precision - &other.precision).amax();
        let b = (&self.shift - &other.shift).amax();
        a.max(b)
    }

    /// Clip negative eigenvalues of the precision to zero, moving the shift
    /// by `(Λ' - Λ) μ` so the pull of the site at `μ` is unchanged.
    /// Returns the site unchanged when the precision is already PSD.
    pub fn clip_precision(&self, at: &DVector<f64>) -> Site {
        let eig = nalgebra::SymmetricEigen::new(self.precision.clone());
        if eig.eigenvalues.iter().all(|&v| v >= 0.0) {
            return self.clone();
        }
        let vals = eig.eigenvalues.map(|v| v.max(0.0));
        let precision = symmetrized(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose());
        let shift = &self.shift + (&precision - &self.precision) * at;
        Site { precision, shift }
    }

    /// `(1 - ρ) · self + ρ · new` in natural parameters.
    pub fn blend(&self, new: &Site, damping: f64) -> Site {
        if damping == 1.0 {
            return new.clone();
        }
        Site {
            precision: &self.precision * (1.0 - damping) + &new.precision * damping,
            shift: &self.shift * (1.0 - damping) + &new.shift * damping,
        }
    }
}

/// Why a local update produced no new site.
#[derive(Clone, Debug, PartialEq)]
pub enum SiteFailure {
    /// Removing the site left a non-positive cavity variance.
    CavityNotPsd,
    /// The rule could not form a site; the stored one is kept.
    Skipped(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    /// Power EP with cubature moment matching.
    Pep,
    /// Extended EP: Taylor linearisation at the cavity mean.
    Eep,
    /// Statistically linearised EP.
    Slep,
    /// Natural-gradient variational inference.
    Cvi,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleConfig {
    pub rule: Rule,
    #[serde(default)]
    pub cubature: Option<CubatureSpec>,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub damping: f64,
}

impl RuleConfig {
    pub fn pep(alpha: f64, cubature: CubatureSpec) -> Self {
        RuleConfig {
            rule: Rule::Pep,
            cubature: Some(cubature),
            alpha,
            damping: 1.0,
        }
    }

    pub fn eep(alpha: f64) -> Self {
        RuleConfig {
            rule: Rule::Eep,
            cubature: None,
            alpha,
            damping: 1.0,
        }
    }

    pub fn slep(alpha: f64, cubature: CubatureSpec) -> Self {
        RuleConfig {
            rule: Rule::Slep,
            cubature: Some(cubature),
            alpha,
            damping: 1.0,
        }
    }

    pub fn cvi(cubature: CubatureSpec) -> Self {
        RuleConfig {
            rule: Rule::Cvi,
            cubature: Some(cubature),
            alpha: 1.0,
            damping: 1.0,
        }
    }

    pub fn with_damping(mut self, damping: f64) -> Self {
        self.damping = damping;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.alpha;
        match self.rule {
            Rule::Pep if !(a > 0.0 && a <= 1.0) => {
                return Err(Error::Config(format!("PEP needs alpha in (0, 1], got {a}")));
            }
            Rule::Eep | Rule::Slep if !(0.0..=1.0).contains(&a) => {
                return Err(Error::Config(format!("alpha must be in [0, 1], got {a}")));
            }
            _ => {}
        }
        if matches!(self.rule, Rule::Pep | Rule::Slep | Rule::Cvi) && self.cubature.is_none() {
            return Err(Error::Config(format!("{:?} needs a cubature rule", self.rule)));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Config(format!("damping must be in (0, 1], got {}", self.damping)));
        }
        Ok(())
    }

    /// Power used when forming cavities; CVI works on the full posterior.
    pub fn cavity_alpha(&self) -> f64 {
        match self.rule {
            Rule::Cvi => 0.0,
            _ => self.alpha,
        }
    }

    /// Short method label, e.g. `EP(gh20) α=0.5`.
    pub fn label(&self) -> String {
        let cub = self.cubature.map(|c| c.to_string()).unwrap_or_default();
        match self.rule {
            Rule::Pep => format!("EP({cub}) a={}", self.alpha),
            Rule::Eep => format!("EEP a={}", self.alpha),
            Rule::Slep => format!("SLEP({cub}) a={}", self.alpha),
            Rule::Cvi => format!("VI({cub})"),
        }
    }
}

/// Remove a fraction `alpha` of `site` from the posterior marginal.
///
/// One-dimensional marginals use the exact formula. For several latents the
/// subtraction is element-wise: cross-covariances of both the posterior and
/// the site are discarded. `alpha = 0` returns the full posterior marginal.
pub fn compute_cavity(post: &GaussianMoments, site: &Site, alpha: f64) -> std::result::Result<Cavity, SiteFailure> {
    if alpha == 0.0 {
        return Ok(post.clone());
    }
    let m = post.dim();
    let mut mean = DVector::zeros(m);
    let mut cov = DMatrix::zeros(m, m);
    for i in 0..m {
        let v = post.cov[(i, i)];
        if !(v > 0.0) {
            return Err(SiteFailure::CavityNotPsd);
        }
        let prec = 1.0 / v - alpha * site.precision[(i, i)];
        if !(prec > 0.0 && prec.is_finite()) {
            return Err(SiteFailure::CavityNotPsd);
        }
        let var = 1.0 / prec;
        cov[(i, i)] = var;
        mean[i] = var * (post.mean[i] / v - alpha * site.shift[i]);
    }
    Ok(Cavity { mean, cov })
}

fn finite_site(site: Site) -> std::result::Result<Site, SiteFailure> {
    if site.is_finite() {
        Ok(site)
    } else {
        Err(SiteFailure::Skipped("non-finite site parameters"))
    }
}

/// Site from the derivatives of a log-normaliser written as
/// `∇L = α g`, `∇²L = -α W`:
/// `Λ = W (I - α Σ_cav W)⁻¹`, `η = Λ μ_cav + (I - α W Σ_cav)⁻¹ g`.
/// Equivalent to `Σ_site = -α(Σ_cav + (∇²L)⁻¹)`, `μ_site = μ_cav - (∇²L)⁻¹∇L`
/// when `∇²L` is invertible, and well defined when it is not.
fn site_from_derivatives(
    cav: &Cavity,
    g: &DVector<f64>,
    w: &DMatrix<f64>,
    alpha: f64,
) -> std::result::Result<Site, SiteFailure> {
    let m = cav.dim();
    let id = DMatrix::<f64>::identity(m, m);
    let left = &id - &cav.cov * w * alpha;
    let left_inv = left.try_inverse().ok_or(SiteFailure::Skipped("singular site Hessian"))?;
    let precision = symmetrized(w * &left_inv);
    let right = &id - w * &cav.cov * alpha;
    let dir = right.lu().solve(g).ok_or(SiteFailure::Skipped("singular site Hessian"))?;
    let shift = &precision * &cav.mean + dir;
    finite_site(Site { precision, shift })
}

/// The exact site for a Gaussian likelihood: `N(f | y, σ² I)`.
pub fn conjugate_site(y: &DVector<f64>, lik: &Likelihood) -> Site {
    let prec = 1.0 / lik.noise_cov()[(0, 0)];
    Site {
        precision: DMatrix::from_element(1, 1, prec),
        shift: DVector::from_element(1, prec * y[0]),
    }
}

/// Power EP moment matching by cubature.
pub fn pep_update(
    cav: &Cavity,
    y: &DVector<f64>,
    lik: &Likelihood,
    alpha: f64,
    rule: &CubatureRule,
) -> std::result::Result<Site, SiteFailure> {
    if lik.is_gaussian() {
        return Ok(conjugate_site(y, lik));
    }
    let m = cav.dim();
    let factor = cholesky_factor(&cav.cov).map_err(|_| SiteFailure::Skipped("cavity Cholesky failed"))?;
    let pts = rule.transformed_points(&cav.mean, &factor);
    let n = rule.len();
    let mut logs = Vec::with_capacity(n);
    for j in 0..n {
        let f = pts.column(j);
        logs.push(alpha * lik.log_density_unchecked(y[0], f.as_slice()));
    }
    let shift = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return Err(SiteFailure::Skipped("tilted distribution has no mass"));
    }
    let u: Vec<f64> = logs.iter().zip(&rule.weights).map(|(l, w)| w * (l - shift).exp()).collect();
    let z: f64 = u.iter().sum();
    if !(z > 0.0 && z.is_finite()) {
        return Err(SiteFailure::Skipped("non-positive normaliser"));
    }
    let mut mhat = DVector::zeros(m);
    for j in 0..n {
        mhat.axpy(u[j] / z, &pts.column(j), 1.0);
    }
    let mut chat = DMatrix::zeros(m, m);
    let mut d = vec![0.0; m];
    for j in 0..n {
        let w = u[j] / z;
        for (a, da) in d.iter_mut().enumerate() {
            *da = pts[(a, j)] - mhat[a];
        }
        for b in 0..m {
            for a in 0..m {
                chat[(a, b)] += w * d[a] * d[b];
            }
        }
    }
    let chat = symmetrized(chat);
    let cav_prec = inverse_symmetric(&cav.cov).ok_or(SiteFailure::Skipped("singular cavity"))?;
    // ∇L = Σ⁻¹(m̂ - μ), ∇²L = Σ⁻¹(Ĉ - Σ)Σ⁻¹
    let grad = &cav_prec * (&mhat - &cav.mean);
    let hess = &cav_prec * (&chat - &cav.cov) * &cav_prec;
    site_from_derivatives(cav, &(grad / alpha), &(-hess / alpha), alpha)
}

/// Extended EP: linearise `h` at `(μ_cav, 0)`; closed form for any `α ∈ [0, 1]`.
pub fn eep_update(cav: &Cavity, y: &DVector<f64>, lik: &Likelihood, alpha: f64) -> std::result::Result<Site, SiteFailure> {
    let zero = DVector::zeros(lik.noise_dim());
    let h0 = lik.measurement(&cav.mean, &zero);
    let (jf, js) = lik.jacobians(&cav.mean, &zero);
    let r = symmetrized(&js * lik.noise_cov() * js.transpose());
    let r_inv = inverse_symmetric(&r).ok_or(SiteFailure::Skipped("singular linearised noise"))?;
    let v = y - h0;
    let precision = symmetrized(jf.transpose() * &r_inv * &jf);
    let s_hat = symmetrized(&r + &jf * &cav.cov * jf.transpose() * alpha);
    let s_inv = inverse_symmetric(&s_hat).ok_or(SiteFailure::Skipped("singular linearised innovation"))?;
    let m = cav.dim();
    let gain = (DMatrix::<f64>::identity(m, m) + &precision * &cav.cov * alpha) * jf.transpose() * s_inv * v;
    let shift = &precision * &cav.mean + gain;
    finite_site(Site { precision, shift })
}

/// Statistical linear regression moments `(μ, S, C)` of `y` under
/// `f ~ N(μ_cav, Σ_cav)` in the additive-noise form, plus `Ω = dμ/dμ_cav`.
pub struct SlrMoments {
    pub mean: DVector<f64>,
    pub s: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub omega: DMatrix<f64>,
}

pub fn slr_moments(cav: &Cavity, lik: &Likelihood, rule: &CubatureRule) -> Result<SlrMoments> {
    let factor = cholesky_factor(&cav.cov)?;
    let pts = rule.transformed_points(&cav.mean, &factor);
    let cav_prec = inverse_symmetric(&cav.cov).ok_or(Error::Cholesky { dim: cav.dim() })?;
    let n = rule.len();
    let m = cav.dim();
    let mut ey = Vec::with_capacity(n);
    let mut vy = Vec::with_capacity(n);
    for j in 0..n {
        let (e, v) = lik.conditional_moments_scalar(pts.column(j).as_slice());
        ey.push(e);
        vy.push(v);
    }
    let mu: f64 = ey.iter().zip(&rule.weights).map(|(e, w)| e * w).sum();
    let mut s = 0.0;
    let mut c = DMatrix::zeros(m, 1);
    let mut omega = DMatrix::zeros(1, m);
    for j in 0..n {
        let w = rule.weights[j];
        let de = ey[j] - mu;
        s += w * (de * de + vy[j]);
        let df = pts.column(j) - &cav.mean;
        c += &df * (w * de);
        let z = &cav_prec * &df;
        omega += z.transpose() * (w * ey[j]);
    }
    Ok(SlrMoments {
        mean: DVector::from_element(1, mu),
        s: DMatrix::from_element(1, 1, s),
        c,
        omega,
    })
}

/// Statistically linearised EP.
pub fn slep_update(
    cav: &Cavity,
    y: &DVector<f64>,
    lik: &Likelihood,
    alpha: f64,
    rule: &CubatureRule,
) -> std::result::Result<Site, SiteFailure> {
    let slr = slr_moments(cav, lik, rule).map_err(|_| SiteFailure::Skipped("cavity Cholesky failed"))?;
    let cav_prec = inverse_symmetric(&cav.cov).ok_or(SiteFailure::Skipped("singular cavity"))?;
    let s_tilde = symmetrized(&slr.s + slr.c.transpose() * &cav_prec * &slr.c * (alpha - 1.0));
    let st_inv = inverse_symmetric(&s_tilde).ok_or(SiteFailure::Skipped("singular SLR innovation"))?;
    let v = y - &slr.mean;
    let ot = slr.omega.transpose();
    let w = symmetrized(&ot * &st_inv * &slr.omega);
    let g = &ot * &st_inv * v;
    site_from_derivatives(cav, &g, &w, alpha)
}

/// Conjugate-computation VI: `Λ = -∇²L̃`, `η = Λ μ + ∇L̃`, with
/// `L̃ = E_q[log p(y | f)]`, blended with `previous` by `damping`.
pub fn cvi_update(
    post: &GaussianMoments,
    y: &DVector<f64>,
    lik: &Likelihood,
    rule: &CubatureRule,
    previous: Option<&Site>,
    damping: f64,
) -> std::result::Result<Site, SiteFailure> {
    let m = post.dim();
    let factor = cholesky_factor(&post.cov).map_err(|_| SiteFailure::Skipped("posterior Cholesky failed"))?;
    let pts = rule.transformed_points(&post.mean, &factor);
    let mut gz = DVector::zeros(m);
    let mut hz = DMatrix::zeros(m, m);
    let id = DMatrix::<f64>::identity(m, m);
    for j in 0..rule.len() {
        let lp = lik.log_density_unchecked(y[0], pts.column(j).as_slice());
        let xi = rule.points.column(j);
        let w = rule.weights[j] * lp;
        gz += xi * w;
        hz += (xi * xi.transpose() - &id) * w;
    }
    // Σ⁻¹ = L⁻ᵀ L⁻¹
    let linv = factor
        .solve_lower_triangular(&id)
        .ok_or(SiteFailure::Skipped("singular posterior factor"))?;
    let grad = linv.transpose() * gz;
    let hess = symmetrized(linv.transpose() * hz * &linv);
    let precision = -hess;
    let shift = &precision * &post.mean + grad;
    // directions of positive curvature get a zero-precision site that keeps the gradient
    let new = finite_site(Site { precision, shift }.clip_precision(&post.mean))?;
    Ok(match previous {
        Some(prev) => prev.blend(&new, damping),
        None => new,
    })
}

/// `log E[p(y | f)]` for `f ~ N(mean, cov)` by cubature.
pub fn log_expected_density(lik: &Likelihood, y: f64, marginal: &GaussianMoments, rule: &CubatureRule) -> Result<f64> {
    let factor = cholesky_factor(&marginal.cov)?;
    let pts = rule.transformed_points(&marginal.mean, &factor);
    let logs: Vec<f64> = (0..rule.len())
        .map(|j| lik.log_density_unchecked(y, pts.column(j).as_slice()))
        .collect();
    let shift = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logs.iter().zip(&rule.weights).map(|(l, w)| w * (l - shift).exp()).sum();
    Ok(shift + z.ln())
}

/// Closed-form `log N(y | mean, cov + σ²)` for the Gaussian likelihood.
pub fn gaussian_log_evidence(lik: &Likelihood, y: f64, marginal: &GaussianMoments) -> f64 {
    let var = marginal.cov[(0, 0)] + lik.noise_cov()[(0, 0)];
    let r = y - marginal.mean[0];
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + r * r / var)
}
