//! Separable space-time priors: `m` coupled temporal processes attached to
//! spatial inducing locations, with the measurement matrix
//! `H_k = [K_fu K_uu⁻¹] ⊗ H_t`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::cholesky_jitter;
use crate::prior::{ContinuousSsm, KernelSpec};

/// Relative jitter added to the diagonal of `K_uu`.
pub const KUU_JITTER: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialMode {
    /// Observations anywhere; projected through `K_fu K_uu⁻¹`.
    InducingPoints,
    /// Observations only at the listed locations; `H = I ⊗ H_t` rows.
    FixedGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialConfig {
    /// Matérn kernel over the spatial input(s).
    pub kernel: KernelSpec,
    /// Inducing (or grid) locations; each entry is one spatial point.
    pub inducing: Vec<Vec<f64>>,
    pub mode: SpatialMode,
}

impl SpatialConfig {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if !matches!(
            self.kernel,
            KernelSpec::Matern12 { .. } | KernelSpec::Matern32 { .. } | KernelSpec::Matern52 { .. } | KernelSpec::Matern72 { .. }
        ) {
            return Err(Error::InvalidKernel(format!("spatial kernel must be Matérn, got {}", self.kernel.name())));
        }
        if self.inducing.is_empty() {
            return Err(Error::Config("at least one inducing location is required".into()));
        }
        let d = self.inducing[0].len();
        if d == 0 || self.inducing.iter().any(|p| p.len() != d || p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Config("inducing locations must share a non-zero dimension and be finite".into()));
        }
        for i in 0..self.inducing.len() {
            for j in 0..i {
                if self.inducing[i] == self.inducing[j] {
                    return Err(Error::Config(format!("duplicate inducing location {:?}", self.inducing[i])));
                }
            }
        }
        Ok(())
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.len()
    }

    /// Only the spatial lengthscale is trainable; the spatial variance is
    /// fixed and the temporal kernel carries the signal variance.
    pub fn params(&self) -> Vec<f64> {
        vec![self.kernel.params()[1]]
    }

    pub fn with_params(&self, p: &[f64]) -> Result<Self> {
        if p.len() != 1 {
            return Err(Error::Dimension(format!("spatial config expects 1 parameter, got {}", p.len())));
        }
        let mut kp = self.kernel.params();
        kp[1] = p[0];
        Ok(SpatialConfig {
            kernel: self.kernel.with_params(&kp)?,
            inducing: self.inducing.clone(),
            mode: self.mode,
        })
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Precomputed spatial Gram quantities for one hyperparameter setting.
#[derive(Clone, Debug)]
pub struct SpatialFactor {
    pub config: SpatialConfig,
    pub kuu: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl SpatialFactor {
    pub fn new(config: &SpatialConfig) -> Result<Self> {
        config.validate()?;
        let m = config.num_inducing();
        let mut kuu = DMatrix::from_fn(m, m, |i, j| config.kernel.covariance(distance(&config.inducing[i], &config.inducing[j])));
        let jitter = KUU_JITTER * kuu.trace() / m as f64;
        for i in 0..m {
            kuu[(i, i)] += jitter;
        }
        let chol = cholesky_jitter(&kuu).map_err(|e| e.context("spatial Gram matrix"))?;
        Ok(SpatialFactor {
            config: config.clone(),
            kuu,
            chol,
        })
    }

    pub fn num_inducing(&self) -> usize {
        self.kuu.nrows()
    }

    /// `k(r, r_u) K_uu⁻¹` as a row vector.
    pub fn weights(&self, r: &[f64]) -> DVector<f64> {
        let kfu = DVector::from_iterator(
            self.num_inducing(),
            self.config.inducing.iter().map(|u| self.config.kernel.covariance(distance(r, u))),
        );
        self.chol.solve(&kfu)
    }

    /// `H_k = [K_fu K_uu⁻¹] ⊗ H_t`. At an inducing location the weights are
    /// exactly `e_j`; the jittered solve would only approximate that.
    pub fn measurement_matrix(&self, r: &[f64], h_t: &DMatrix<f64>) -> DMatrix<f64> {
        if let Some(j) = self.grid_index(r) {
            return self.grid_measurement_matrix(j, h_t);
        }
        let w = self.weights(r).transpose();
        w.kronecker(h_t)
    }

    /// `e_j ⊗ H_t`, for grid data observed exactly at location `j`.
    pub fn grid_measurement_matrix(&self, j: usize, h_t: &DMatrix<f64>) -> DMatrix<f64> {
        let mut e = DMatrix::zeros(1, self.num_inducing());
        e[(0, j)] = 1.0;
        e.kronecker(h_t)
    }

    /// Index of the inducing location equal to `r`, if any.
    pub fn grid_index(&self, r: &[f64]) -> Option<usize> {
        self.config.inducing.iter().position(|u| u.as_slice() == r)
    }

    /// Stationary covariance `K_uu ⊗ Pinf_t`.
    pub fn stationary_cov(&self, temporal: &ContinuousSsm) -> DMatrix<f64> {
        self.kuu.kronecker(&temporal.pinf)
    }
}

/// `m` quantiles of `values` at probabilities `(i + 0.5) / m`, deduplicated.
pub fn quantile_locations(values: &[f64], m: usize) -> Vec<f64> {
    assert!(m >= 1 && !values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    let mut out: Vec<f64> = (0..m)
        .map(|i| {
            let p = (i as f64 + 0.5) / m as f64;
            let pos = p * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = pos - lo as f64;
            v[lo] * (1.0 - frac) + v[hi] * frac
        })
        .collect();
    out.dedup();
    out
}

/// One spatio-temporal observation.
#[derive(Clone, Debug, PartialEq)]
pub struct SpaceTimePoint {
    pub r: Vec<f64>,
    pub t: f64,
    pub y: f64,
}

/// Points sharing a sequential coordinate, with their original indices.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGroup {
    pub t: f64,
    pub members: Vec<usize>,
}

/// Sort by `t` and group equal timestamps into one step. Order within a group
/// follows the input order.
pub fn order_by_time(points: &[SpaceTimePoint]) -> Vec<TimeGroup> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| points[a].t.partial_cmp(&points[b].t).unwrap().then(a.cmp(&b)));
    let mut groups: Vec<TimeGroup> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some(g) if g.t == points[i].t => g.members.push(i),
            _ => groups.push(TimeGroup {
                t: points[i].t,
                members: vec![i],
            }),
        }
    }
    groups
}
