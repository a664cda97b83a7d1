//! Kalman filter / RTS smoother core with site-based updates, per-step energy,
//! the outer iterate-until-converged loop and hyperparameter learning.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cubature::CubatureRule;
use crate::error::{Error, Result};
use crate::likelihood::Likelihood;
use crate::linalg::{log_det_pd, solve_symmetric, sparse_mul_sym, symmetrize, symmetrized};
use crate::model::{GpModel, StateModel, TimeGrid};
use crate::prior::DiscreteTransition;
use crate::sites::{
    compute_cavity, conjugate_site, cvi_update, eep_update, log_expected_density, pep_update,
    slep_update, GaussianMoments, Rule, RuleConfig, Site, SiteFailure,
};

/// Site updates smaller than this (max-abs, natural parameters) count as
/// converged.
pub const SITE_TOLERANCE: f64 = 1e-6;

/// `A P` for block-diagonal `A` with the given block sizes.
fn block_left_mul(a: &DMatrix<f64>, blocks: &[usize], p: &DMatrix<f64>) -> DMatrix<f64> {
    if blocks.len() <= 1 {
        return a * p;
    }
    let n = a.nrows();
    let cols = p.ncols();
    let (av, pv) = (a.as_slice(), p.as_slice());
    let mut out = DMatrix::zeros(n, cols);
    let ov = out.as_mut_slice();
    let mut off = 0;
    for &b in blocks {
        for j in 0..cols {
            let pc = &pv[j * n + off..j * n + off + b];
            for i in 0..b {
                let mut acc = 0.0;
                for (l, &pl) in pc.iter().enumerate() {
                    acc += av[(off + l) * n + off + i] * pl;
                }
                ov[j * n + off + i] = acc;
            }
        }
        off += b;
    }
    out
}

/// `X A^T` for block-diagonal `A`.
fn block_right_mul_t(x: &DMatrix<f64>, a: &DMatrix<f64>, blocks: &[usize]) -> DMatrix<f64> {
    if blocks.len() <= 1 {
        return x * a.transpose();
    }
    let n = a.nrows();
    let rows = x.nrows();
    let (av, xv) = (a.as_slice(), x.as_slice());
    let mut out = DMatrix::zeros(rows, n);
    let ov = out.as_mut_slice();
    let mut off = 0;
    for &b in blocks {
        // column off+j of the result is Σ_l A[off+j, off+l] · column off+l of X
        for j in 0..b {
            let dst = (off + j) * rows;
            for l in 0..b {
                let w = av[(off + l) * n + off + j];
                if w == 0.0 {
                    continue;
                }
                let src = (off + l) * rows;
                for r in 0..rows {
                    ov[dst + r] += w * xv[src + r];
                }
            }
        }
        off += b;
    }
    out
}

/// `A m` for block-diagonal `A`.
fn block_mul_vec(a: &DMatrix<f64>, blocks: &[usize], m: &DVector<f64>) -> DVector<f64> {
    if blocks.len() <= 1 {
        return a * m;
    }
    let mut out = DVector::zeros(m.len());
    let mut off = 0;
    for &b in blocks {
        out.rows_mut(off, b)
            .copy_from(&(a.view((off, off), (b, b)) * m.rows(off, b)));
        off += b;
    }
    out
}

/// `N(A m, A P A^T + Q)`.
pub fn predict(prev: &GaussianMoments, trans: &DiscreteTransition) -> GaussianMoments {
    let ap = block_left_mul(&trans.a, &trans.blocks, &prev.cov);
    let mut cov = block_right_mul_t(&ap, &trans.a, &trans.blocks);
    cov += &trans.q;
    symmetrize(&mut cov);
    GaussianMoments {
        mean: block_mul_vec(&trans.a, &trans.blocks, &prev.mean),
        cov,
    }
}

/// Condition `pred` on the pseudo-observation `site` of `f = H x`.
///
/// Works in information form so zero or rank-deficient site precisions need
/// no special casing: with `U = H P` and `M = I + Λ H P H^T`, the gain is
/// `K = U^T M⁻¹ Λ`. The covariance uses the Joseph form
/// `(I - K H) P (I - K H)^T + K Σ_site K^T`, where `K Σ_site K^T` is
/// evaluated as `U^T M⁻¹ Λ M⁻ᵀ U`.
pub fn site_update_step(pred: &GaussianMoments, h: &DMatrix<f64>, site: &Site, step: usize) -> Result<GaussianMoments> {
    let q = h.nrows();
    if q == 0 {
        return Ok(pred.clone());
    }
    let lam = &site.precision;
    let u = sparse_mul_sym(h, &pred.cov);
    let hph = symmetrized(&u * h.transpose());
    let m = DMatrix::<f64>::identity(q, q) + lam * &hph;
    let lu = m.lu();
    // M⁻¹ Λ = (Λ⁻¹ + H P H^T)⁻¹ is symmetric
    let n = lu.solve(lam).ok_or(Error::SingularInnovation { step })?;
    let resid = &site.shift - lam * (h * &pred.mean);
    let corr = lu.solve(&resid).ok_or(Error::SingularInnovation { step })?;
    let t = lu.solve(&n).ok_or(Error::SingularInnovation { step })?;
    let ut = u.transpose();
    let k = &ut * &n;
    let mean = &pred.mean + &ut * corr;
    // B = P - K U and B H^T = U^T - K H P H^T, applied as rank-q updates
    let bh = &ut - &k * &hph;
    let tu = &t * &u;
    let mut cov = pred.cov.clone();
    cov.gemm(-1.0, &k, &u, 1.0);
    cov.gemm(-1.0, &bh, &k.transpose(), 1.0);
    cov.gemm(1.0, &ut, &tu, 1.0);
    symmetrize(&mut cov);
    if !mean.iter().chain(cov.iter()).all(|v| v.is_finite()) {
        return Err(Error::SingularInnovation { step });
    }
    Ok(GaussianMoments { mean, cov })
}

fn rts_with_prediction(
    filt: &GaussianMoments,
    post_next: &GaussianMoments,
    pred_next: &GaussianMoments,
    trans: &DiscreteTransition,
    step: usize,
) -> Result<GaussianMoments> {
    // G^T = P_pred⁻¹ A P_filt
    let apf = block_left_mul(&trans.a, &trans.blocks, &filt.cov);
    let gt = solve_symmetric(&pred_next.cov, &apf).ok_or(Error::SingularSmoother { step })?;
    let g = gt.transpose();
    let mean = &filt.mean + &g * (&post_next.mean - &pred_next.mean);
    let mut cov = &filt.cov + &g * (&post_next.cov - &pred_next.cov) * &gt;
    symmetrize(&mut cov);
    if !mean.iter().chain(cov.iter()).all(|v| v.is_finite()) {
        return Err(Error::SingularSmoother { step });
    }
    Ok(GaussianMoments { mean, cov })
}

/// One Rauch–Tung–Striebel step from `filt_k` and the smoothed `k+1` belief.
pub fn rts_smooth_step(
    filt: &GaussianMoments,
    post_next: &GaussianMoments,
    trans_next: &DiscreteTransition,
) -> Result<GaussianMoments> {
    let pred = predict(filt, trans_next);
    rts_with_prediction(filt, post_next, &pred, trans_next, 0)
}

/// `-log N(v | 0, S)`.
fn gaussian_energy(v: &DVector<f64>, s: &DMatrix<f64>) -> Result<f64> {
    let ld = log_det_pd(s)?;
    let x = solve_symmetric(s, &DMatrix::from_column_slice(v.len(), 1, v.as_slice())).ok_or(Error::Cholesky { dim: v.len() })?;
    let quad = v.dot(&x.column(0));
    Ok(0.5 * (v.len() as f64 * (2.0 * std::f64::consts::PI).ln() + ld + quad))
}

/// Energy contribution `-log p(y_k | y_{1:k-1})` of one observed step.
///
/// `rows` are `(H_r, y_r, site_r)` for the training rows of the step. Gaussian
/// likelihoods use the exact evidence, EEP the linearised Gaussian energy at
/// `H m_pred`, and cubature rules integrate each row against its predictive
/// marginal, conditioning on the preceding rows' sites in between.
pub fn energy_step(
    pred: &GaussianMoments,
    rows: &[(&DMatrix<f64>, f64, &Site)],
    lik: &Likelihood,
    rule: Rule,
    cubature: Option<&CubatureRule>,
    step: usize,
) -> Result<f64> {
    if rows.is_empty() {
        return Ok(0.0);
    }
    let e = if lik.is_gaussian() || rule == Rule::Eep {
        let hs: Vec<&DMatrix<f64>> = rows.iter().map(|r| r.0).collect();
        let h = stack_rows(&hs);
        let f_mean = &h * &pred.mean;
        let ml = lik.latent_dim();
        let nr = rows.len();
        // J (block-diagonal over rows), residual and noise
        let mut j = DMatrix::zeros(nr, nr * ml);
        let mut v = DVector::zeros(nr);
        let mut r = DMatrix::zeros(nr, nr);
        let zero = DVector::zeros(lik.noise_dim());
        let noise = lik.noise_cov();
        for (i, row) in rows.iter().enumerate() {
            let fi = f_mean.rows(i * ml, ml).clone_owned();
            let h0 = lik.measurement(&fi, &zero);
            let (jf, js) = lik.jacobians(&fi, &zero);
            j.view_mut((i, i * ml), (1, ml)).copy_from(&jf);
            v[i] = row.1 - h0[0];
            r[(i, i)] = (&js * &noise * js.transpose())[(0, 0)];
        }
        let jh = &j * &h;
        let s = symmetrized(r + sparse_mul_sym(&jh, &pred.cov) * jh.transpose());
        gaussian_energy(&v, &s)?
    } else {
        let rule_c = cubature.ok_or_else(|| Error::Config("cubature rule required for energy".into()))?;
        let mut belief = pred.clone();
        let mut total = 0.0;
        for (i, (h, y, site)) in rows.iter().enumerate() {
            let marg = belief.project(h);
            total -= log_expected_density(lik, *y, &marg, rule_c)?;
            if i + 1 < rows.len() {
                belief = site_update_step(&belief, h, site, step)?;
            }
        }
        total
    };
    if !e.is_finite() {
        return Err(Error::NonFiniteEnergy { step });
    }
    Ok(e)
}

fn stack_rows(hs: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = hs.iter().map(|h| h.nrows()).sum();
    let cols = hs[0].ncols();
    let mut out = DMatrix::zeros(rows, cols);
    let mut off = 0;
    for h in hs {
        out.rows_mut(off, h.nrows()).copy_from(*h);
        off += h.nrows();
    }
    out
}

/// Stack independent row sites into one block-diagonal site.
fn stack_sites(sites: &[&Site]) -> Site {
    if sites.len() == 1 {
        return sites[0].clone();
    }
    let q: usize = sites.iter().map(|s| s.dim()).sum();
    let mut precision = DMatrix::zeros(q, q);
    let mut shift = DVector::zeros(q);
    let mut off = 0;
    for s in sites {
        let d = s.dim();
        precision.view_mut((off, off), (d, d)).copy_from(&s.precision);
        shift.rows_mut(off, d).copy_from(&s.shift);
        off += d;
    }
    Site { precision, shift }
}

/// Per-step energies of one forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub per_step: Vec<f64>,
    pub total: f64,
}

impl EnergyLedger {
    fn from_steps(per_step: Vec<f64>) -> Self {
        let total = per_step.iter().sum();
        EnergyLedger { per_step, total }
    }
}

/// Sites for every training row, indexed `[step][row]`; `None` until the
/// first successful update.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteStore {
    sites: Vec<Vec<Option<Site>>>,
    initialised: bool,
}

impl SiteStore {
    pub fn new(grid: &TimeGrid) -> Self {
        SiteStore {
            sites: grid.steps().iter().map(|s| vec![None; s.obs.len()]).collect(),
            initialised: false,
        }
    }

    pub fn is_initialised(&self) -> bool {
        self.initialised
    }

    pub fn get(&self, step: usize, row: usize) -> Option<&Site> {
        self.sites[step][row].as_ref()
    }

    pub fn set(&mut self, step: usize, row: usize, site: Site) {
        self.sites[step][row] = Some(site);
    }

    pub fn num_steps(&self) -> usize {
        self.sites.len()
    }

    /// Site-wise `(1 - ρ) · self + ρ · new`; sites missing from `self` are
    /// taken from `new`.
    pub fn blend(&self, new: &SiteStore, damping: f64) -> SiteStore {
        let mut out = new.clone();
        for (k, r, s) in self.iter() {
            if let Some(n) = new.get(k, r) {
                out.set(k, r, s.blend(n, damping));
            }
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &Site)> {
        self.sites
            .iter()
            .enumerate()
            .flat_map(|(k, row)| row.iter().enumerate().filter_map(move |(r, s)| s.as_ref().map(|s| (k, r, s))))
    }
}

/// Non-fatal events counted during inference.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub cavity_not_psd: usize,
    pub skipped_updates: usize,
}

impl Diagnostics {
    fn record(&mut self, f: &SiteFailure) {
        match f {
            SiteFailure::CavityNotPsd => self.cavity_not_psd += 1,
            SiteFailure::Skipped(reason) => {
                log::debug!("site update skipped: {reason}");
                self.skipped_updates += 1
            }
        }
    }
}

/// Output of one filtering sweep.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub predicted: Vec<GaussianMoments>,
    pub filtered: Vec<GaussianMoments>,
    pub energy: EnergyLedger,
}

/// A model, data set and update rule prepared for repeated passes.
pub struct Engine<'a> {
    model: &'a StateModel,
    grid: &'a TimeGrid,
    rule: RuleConfig,
    cubature: Option<CubatureRule>,
    hs: Vec<Vec<DMatrix<f64>>>,
}

enum SiteAccess<'s> {
    Fixed(&'s SiteStore),
    Initialise(&'s mut SiteStore, &'s mut Diagnostics),
}

impl<'a> Engine<'a> {
    pub fn new(model: &'a StateModel, grid: &'a TimeGrid, rule: &RuleConfig) -> Result<Self> {
        rule.validate()?;
        let cubature = match rule.cubature {
            Some(c) => Some(c.build(model.latent_dim())?),
            None => None,
        };
        let mut hs = Vec::with_capacity(grid.len());
        for (k, step) in grid.steps().iter().enumerate() {
            let mut row = Vec::with_capacity(step.obs.len());
            for o in &step.obs {
                if o.train {
                    model.likelihood.check_observation(&[o.y]).map_err(|e| e.context(format!("step {k}")))?;
                }
                row.push(model.measurement(o).map_err(|e| e.context(format!("step {k}")))?);
            }
            hs.push(row);
        }
        Ok(Engine {
            model,
            grid,
            rule: rule.clone(),
            cubature,
            hs,
        })
    }

    pub fn rule(&self) -> &RuleConfig {
        &self.rule
    }

    pub fn measurement(&self, step: usize, row: usize) -> &DMatrix<f64> {
        &self.hs[step][row]
    }

    fn lik(&self) -> &Likelihood {
        &self.model.likelihood
    }

    /// New site for one row given its cavity (or posterior, for CVI).
    fn local_update(&self, cav: &GaussianMoments, y: f64, alpha: f64, previous: Option<&Site>) -> std::result::Result<Site, SiteFailure> {
        let yv = DVector::from_element(1, y);
        let lik = self.lik();
        if lik.is_gaussian() {
            return Ok(conjugate_site(&yv, lik));
        }
        let cub = self.cubature.as_ref();
        let new = match self.rule.rule {
            Rule::Pep => pep_update(cav, &yv, lik, alpha, cub.expect("validated")),
            Rule::Eep => eep_update(cav, &yv, lik, alpha),
            Rule::Slep => slep_update(cav, &yv, lik, alpha, cub.expect("validated")),
            Rule::Cvi => return cvi_update(cav, &yv, lik, cub.expect("validated"), previous, self.rule.damping),
        }?;
        let new = new.clip_precision(&cav.mean);
        Ok(match previous {
            Some(p) if self.rule.damping < 1.0 => p.blend(&new, self.rule.damping),
            _ => new,
        })
    }

    fn run_forward(&self, mut access: SiteAccess<'_>, store: bool) -> Result<ForwardPass> {
        let n = self.grid.len();
        let s = self.model.state_dim();
        let mut belief = GaussianMoments::new(DVector::zeros(s), self.model.pinf.clone());
        let mut predicted = Vec::with_capacity(if store { n } else { 0 });
        let mut filtered = Vec::with_capacity(if store { n } else { 0 });
        let mut energies = vec![0.0; n];
        let empty = Site::empty(self.model.latent_dim());
        for (k, step) in self.grid.steps().iter().enumerate() {
            let trans = self.model.transition(self.grid.dt(k));
            let pred = predict(&belief, &trans);
            if let SiteAccess::Initialise(sites, diag) = &mut access {
                // first pass: cavity = prediction updated by the earlier rows
                // of the same step, α = 1
                let mut inner = pred.clone();
                let train: Vec<usize> = (0..step.obs.len()).filter(|&r| step.obs[r].train).collect();
                for (i, &r) in train.iter().enumerate() {
                    let h = &self.hs[k][r];
                    let marg = inner.project(h);
                    match self.local_update(&marg, step.obs[r].y, 1.0, None) {
                        Ok(site) => {
                            if i + 1 < train.len() {
                                inner = site_update_step(&inner, h, &site, k)?;
                            }
                            sites.set(k, r, site);
                        }
                        Err(f) => diag.record(&f),
                    }
                }
            }
            let sites: &SiteStore = match &access {
                SiteAccess::Fixed(s) => s,
                SiteAccess::Initialise(s, _) => s,
            };
            let mut rows = Vec::new();
            for (r, o) in step.obs.iter().enumerate() {
                if o.train {
                    rows.push((&self.hs[k][r], o.y, sites.get(k, r).unwrap_or(&empty)));
                }
            }
            energies[k] = energy_step(&pred, &rows, self.lik(), self.rule.rule, self.cubature.as_ref(), k)
                .map_err(|e| e.context(format!("forward pass, step {k}")))?;
            let filt = if rows.is_empty() {
                pred.clone()
            } else if rows.len() == 1 {
                site_update_step(&pred, rows[0].0, rows[0].2, k)?
            } else {
                let hs: Vec<&DMatrix<f64>> = rows.iter().map(|r| r.0).collect();
                let ss: Vec<&Site> = rows.iter().map(|r| r.2).collect();
                site_update_step(&pred, &stack_rows(&hs), &stack_sites(&ss), k)?
            };
            if store {
                predicted.push(pred);
                filtered.push(filt.clone());
            }
            belief = filt;
        }
        if let SiteAccess::Initialise(sites, _) = access {
            sites.initialised = true;
        }
        Ok(ForwardPass {
            predicted,
            filtered,
            energy: EnergyLedger::from_steps(energies),
        })
    }

    /// Filter with the stored sites.
    pub fn forward(&self, sites: &SiteStore) -> Result<ForwardPass> {
        self.run_forward(SiteAccess::Fixed(sites), true)
    }

    /// Filter while initialising every site from its predictive marginal
    /// with `α = 1`.
    pub fn forward_initialise(&self, sites: &mut SiteStore, diag: &mut Diagnostics) -> Result<ForwardPass> {
        self.run_forward(SiteAccess::Initialise(sites, diag), true)
    }

    /// Total energy only, sites fixed.
    pub fn energy(&self, sites: &SiteStore) -> Result<f64> {
        Ok(self.run_forward(SiteAccess::Fixed(sites), false)?.energy.total)
    }

    /// Re-fit the sites of step `k` against the smoothed belief; returns the
    /// largest natural-parameter change.
    fn refresh_step(&self, k: usize, post: &GaussianMoments, sites: &mut SiteStore, diag: &mut Diagnostics) -> f64 {
        let alpha = self.rule.cavity_alpha();
        let empty = Site::empty(self.model.latent_dim());
        let mut change: f64 = 0.0;
        for (r, o) in self.grid.steps()[k].obs.iter().enumerate() {
            if !o.train {
                continue;
            }
            let marg = post.project(&self.hs[k][r]);
            let old = sites.get(k, r).cloned();
            let cav = match compute_cavity(&marg, old.as_ref().unwrap_or(&empty), alpha) {
                Ok(c) => c,
                Err(f) => {
                    diag.record(&f);
                    continue;
                }
            };
            match self.local_update(&cav, o.y, self.rule.alpha, old.as_ref()) {
                Ok(new) => {
                    change = change.max(match &old {
                        Some(o) => o.max_abs_diff(&new),
                        None => f64::INFINITY,
                    });
                    sites.set(k, r, new);
                }
                Err(f) => diag.record(&f),
            }
        }
        change
    }

    /// RTS sweep over a stored forward pass. With `refresh`, sites of every
    /// step are re-fitted from the smoothed marginals as the sweep proceeds.
    /// Returns the smoothed beliefs and the largest site change.
    pub fn backward(
        &self,
        fwd: &ForwardPass,
        sites: &mut SiteStore,
        refresh: bool,
        diag: &mut Diagnostics,
    ) -> Result<(Vec<GaussianMoments>, f64)> {
        let n = fwd.filtered.len();
        let mut post = vec![fwd.filtered[n - 1].clone(); n];
        let mut change: f64 = 0.0;
        if refresh {
            change = change.max(self.refresh_step(n - 1, &post[n - 1], sites, diag));
        }
        for k in (0..n - 1).rev() {
            let trans = self.model.transition(self.grid.dt(k + 1));
            post[k] = rts_with_prediction(&fwd.filtered[k], &post[k + 1], &fwd.predicted[k + 1], &trans, k)
                .map_err(|e| e.context(format!("backward pass, step {k}")))?;
            if refresh {
                change = change.max(self.refresh_step(k, &post[k], sites, diag));
            }
        }
        Ok((post, change))
    }

    /// Marginals of `f` at every row (training and held-out).
    pub fn marginals(&self, post: &[GaussianMoments]) -> Vec<Vec<GaussianMoments>> {
        post.iter()
            .enumerate()
            .map(|(k, p)| self.hs[k].iter().map(|h| p.project(h)).collect())
            .collect()
    }
}

/// Result of [`run_inference`].
#[derive(Clone, Debug)]
pub struct InferenceResult {
    /// Smoothed state beliefs per step.
    pub posterior: Vec<GaussianMoments>,
    /// Smoothed latent marginals `N(H m, H P H^T)` per step and row.
    pub marginals: Vec<Vec<GaussianMoments>>,
    pub sites: SiteStore,
    /// Energy of the last forward pass.
    pub energy: EnergyLedger,
    pub energy_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub diagnostics: Diagnostics,
}

/// Alternate filtering and smoothing passes with site refreshes until the
/// sites stop changing or `num_iters` passes are done.
pub fn run_inference(model: &StateModel, grid: &TimeGrid, rule: &RuleConfig, num_iters: usize) -> Result<InferenceResult> {
    let engine = Engine::new(model, grid, rule)?;
    let sites = SiteStore::new(grid);
    continue_inference(&engine, sites, num_iters)
}

/// [`run_inference`] starting from existing sites.
pub fn continue_inference(engine: &Engine<'_>, mut sites: SiteStore, num_iters: usize) -> Result<InferenceResult> {
    let num_iters = num_iters.max(1);
    let mut diag = Diagnostics::default();
    let mut history = Vec::with_capacity(num_iters);
    let mut converged = false;
    let mut last = None;
    let mut iterations = 0;
    for i in 0..num_iters {
        let fwd = if sites.is_initialised() {
            engine.forward(&sites)
        } else {
            engine.forward_initialise(&mut sites, &mut diag)
        }
        .map_err(|e| e.context(format!("iteration {i}")))?;
        history.push(fwd.energy.total);
        let (post, change) = engine
            .backward(&fwd, &mut sites, true, &mut diag)
            .map_err(|e| e.context(format!("iteration {i}")))?;
        iterations = i + 1;
        last = Some((post, fwd.energy));
        if i > 0 && change < SITE_TOLERANCE {
            converged = true;
            break;
        }
    }
    let (posterior, energy) = last.expect("at least one iteration");
    Ok(InferenceResult {
        marginals: engine.marginals(&posterior),
        posterior,
        sites,
        energy,
        energy_history: history,
        iterations,
        converged,
        diagnostics: diag,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    /// Plain gradient descent on the energy.
    Sgd,
}

fn default_step() -> f64 {
    0.1
}
fn default_iters() -> usize {
    250
}
fn default_fd() -> f64 {
    1e-5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_optimizer")]
    pub name: OptimizerKind,
    #[serde(default = "default_step")]
    pub step_size: f64,
    #[serde(default = "default_iters")]
    pub iterations: usize,
    /// Accept only moves that do not raise the energy: site refreshes are
    /// damped or dropped, parameter steps are halved until they pass.
    #[serde(default)]
    pub monotone: bool,
    /// Central-difference step in the unconstrained parameters.
    #[serde(default = "default_fd")]
    pub fd_step: f64,
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            name: OptimizerKind::Adam,
            step_size: 0.1,
            iterations: 250,
            monotone: false,
            fd_step: 1e-5,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step size must be non-negative, got {}", self.step_size)));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::Config("finite-difference step must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Update the moment estimates and return the unscaled step direction.
    fn direction(&mut self, g: &[f64]) -> Vec<f64> {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        g.iter()
            .enumerate()
            .map(|(i, &gi)| {
                self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * gi;
                self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * gi * gi;
                (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS)
            })
            .collect()
    }
}

/// Central finite-difference gradient of the energy with respect to the
/// unconstrained hyperparameters, holding the sites fixed.
pub fn energy_gradient(
    model: &GpModel,
    grid: &TimeGrid,
    rule: &RuleConfig,
    sites: &SiteStore,
    step: f64,
) -> Result<Vec<f64>> {
    let theta = model.params();
    let probes: Vec<(usize, f64)> = (0..theta.len()).flat_map(|j| [(j, step), (j, -step)]).collect();
    let values = probes
        .par_iter()
        .map(|&(j, h)| {
            let mut p = theta.clone();
            p[j] += h;
            let sm = model.with_params(&p)?.build()?;
            Engine::new(&sm, grid, rule)?.energy(sites)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((0..theta.len())
        .map(|j| (values[2 * j] - values[2 * j + 1]) / (2.0 * step))
        .collect())
}

/// Result of [`fit_hyperparameters`].
#[derive(Clone, Debug)]
pub struct TrainingResult {
    pub model: GpModel,
    /// Energy at every accepted iteration.
    pub energy_history: Vec<f64>,
    pub param_history: Vec<Vec<f64>>,
    pub rejected_steps: usize,
    /// Set when training stopped early on a non-finite gradient or energy.
    pub aborted: Option<String>,
    /// Smoothing result at the final parameters.
    pub inference: InferenceResult,
}

const MAX_BACKTRACKS: usize = 12;
/// Largest energy rise accepted per move in monotone mode. Each iteration
/// makes two moves (sites, then θ).
const MONOTONE_TOL: f64 = 5e-7;

/// Monotone mode: keep a site refresh only if it does not raise the energy at
/// the current θ, trying damped versions before falling back to the old sites.
fn accept_refresh(engine: &Engine<'_>, before: &SiteStore, after: &SiteStore, e: f64) -> (SiteStore, f64) {
    let mut rho = 1.0;
    for _ in 0..3 {
        let cand = if rho == 1.0 { after.clone() } else { before.blend(after, rho) };
        if let Ok(ec) = engine.energy(&cand) {
            if ec <= e + MONOTONE_TOL {
                return (cand, ec);
            }
        }
        rho *= 0.25;
    }
    (before.clone(), e)
}

/// Learn hyperparameters by descending the energy. Each iteration runs a
/// forward pass, forms the gradient with the sites fixed, smooths and refreshes
/// the sites, then takes one optimiser step.
pub fn fit_hyperparameters(
    model: &GpModel,
    grid: &TimeGrid,
    rule: &RuleConfig,
    opt: &OptimizerConfig,
) -> Result<TrainingResult> {
    opt.validate()?;
    rule.validate()?;
    let mut theta = model.params();
    let mut sites = SiteStore::new(grid);
    let mut diag = Diagnostics::default();
    let mut adam = Adam::new(theta.len());
    let mut history = Vec::new();
    let mut param_history = Vec::new();
    let mut rejected = 0;
    let mut aborted = None;
    // (θ, refreshed sites, step direction, energy) of the last accepted iterate
    let mut anchor: Option<(Vec<f64>, SiteStore, Vec<f64>, f64)> = None;
    let mut scale = 1.0;
    let mut backtracks = 0;

    let mut i = 0;
    while i < opt.iterations {
        let current = model.with_params(&theta)?;
        let sm = current.build()?;
        let engine = Engine::new(&sm, grid, rule)?;
        let fwd = if sites.is_initialised() {
            engine.forward(&sites)
        } else {
            engine.forward_initialise(&mut sites, &mut diag)
        };
        let fwd = match fwd {
            Ok(f) => f,
            Err(e) => {
                aborted = Some(format!("iteration {i}: {e}"));
                break;
            }
        };
        let e = fwd.energy.total;
        if opt.monotone {
            if let Some((th0, s0, dir, e0)) = &anchor {
                if e > e0 + MONOTONE_TOL {
                    rejected += 1;
                    backtracks += 1;
                    scale *= 0.5;
                    sites = s0.clone();
                    theta = if backtracks < MAX_BACKTRACKS {
                        th0.iter().zip(dir).map(|(t, d)| t - opt.step_size * scale * d).collect()
                    } else {
                        // no acceptable step along this direction: stay put
                        th0.clone()
                    };
                    continue;
                }
            }
        }
        backtracks = 0;
        scale = 1.0;
        history.push(e);
        param_history.push(theta.clone());
        let grad = match energy_gradient(&current, grid, rule, &sites, opt.fd_step) {
            Ok(g) if g.iter().all(|v| v.is_finite()) => g,
            Ok(_) => {
                aborted = Some(Error::NonFiniteGradient { iteration: i }.to_string());
                break;
            }
            Err(err) => {
                aborted = Some(format!("iteration {i}: {err}"));
                break;
            }
        };
        let before = opt.monotone.then(|| sites.clone());
        if let Err(err) = engine.backward(&fwd, &mut sites, true, &mut diag) {
            aborted = Some(format!("iteration {i}: {err}"));
            break;
        }
        let mut e_sites = e;
        if let Some(before) = before {
            (sites, e_sites) = accept_refresh(&engine, &before, &sites, e);
        }
        let dir = match opt.name {
            OptimizerKind::Adam => adam.direction(&grad),
            OptimizerKind::Sgd => grad,
        };
        if opt.monotone {
            anchor = Some((theta.clone(), sites.clone(), dir.clone(), e_sites));
        }
        theta = theta.iter().zip(&dir).map(|(t, d)| t - opt.step_size * d).collect();
        i += 1;
    }
    // the final step may have been rejected; fall back to the last accepted iterate
    if let (true, Some((th0, s0, _, _))) = (opt.monotone && backtracks > 0, &anchor) {
        theta = th0.clone();
        sites = s0.clone();
    }
    let trained = model.with_params(&theta)?;
    let sm = trained.build()?;
    let engine = Engine::new(&sm, grid, rule)?;
    let mut inference = continue_inference(&engine, sites, 1)?;
    inference.diagnostics.cavity_not_psd += diag.cavity_not_psd;
    inference.diagnostics.skipped_updates += diag.skipped_updates;
    Ok(TrainingResult {
        model: trained,
        energy_history: history,
        param_history,
        rejected_steps: rejected,
        aborted,
        inference,
    })
}
