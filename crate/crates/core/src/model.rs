//! Model definition (kernels, likelihood, optional spatial structure) and the
//! time-ordered observation layout consumed by the engine.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::Likelihood;
use crate::prior::{ContinuousSsm, DiscreteTransition, KernelSpec, TransitionCache};
use crate::spatial::{SpatialConfig, SpatialFactor, SpatialMode};

/// One scalar observation at a time step.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// Spatial input; `None` for purely temporal models.
    pub location: Option<Vec<f64>>,
    pub y: f64,
    /// Held-out rows are carried through the filter without a site.
    pub train: bool,
}

impl Observation {
    pub fn temporal(y: f64) -> Self {
        Observation {
            location: None,
            y,
            train: true,
        }
    }

    pub fn spatial(r: Vec<f64>, y: f64) -> Self {
        Observation {
            location: Some(r),
            y,
            train: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeStep {
    pub t: f64,
    pub obs: Vec<Observation>,
}

impl TimeStep {
    /// Whether any training row is present (the observation mask).
    pub fn observed(&self) -> bool {
        self.obs.iter().any(|o| o.train)
    }
}

/// Strictly increasing sequence of time steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    steps: Vec<TimeStep>,
}

impl TimeGrid {
    pub fn new(steps: Vec<TimeStep>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Config("time grid has no steps".into()));
        }
        for (k, s) in steps.iter().enumerate() {
            if !s.t.is_finite() {
                return Err(Error::Config(format!("non-finite timestamp at step {k}")));
            }
            if k > 0 && s.t <= steps[k - 1].t {
                return Err(Error::Config(format!(
                    "timestamps must be strictly increasing (step {k}: {} after {})",
                    s.t,
                    steps[k - 1].t
                )));
            }
        }
        Ok(TimeGrid { steps })
    }

    /// One temporal observation per timestamp.
    pub fn from_series(t: &[f64], y: &[f64]) -> Result<Self> {
        if t.len() != y.len() {
            return Err(Error::Dimension(format!("{} timestamps but {} observations", t.len(), y.len())));
        }
        TimeGrid::new(
            t.iter()
                .zip(y)
                .map(|(&t, &y)| TimeStep {
                    t,
                    obs: vec![Observation::temporal(y)],
                })
                .collect(),
        )
    }

    pub fn steps(&self) -> &[TimeStep] {
        &self.steps
    }

    pub fn steps_mut(&mut self) -> &mut [TimeStep] {
        &mut self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.t).collect()
    }

    /// `t_k - t_{k-1}`; zero for the first step, which starts from the prior.
    pub fn dt(&self, k: usize) -> f64 {
        if k == 0 {
            0.0
        } else {
            self.steps[k].t - self.steps[k - 1].t
        }
    }

    pub fn mask(&self) -> Vec<bool> {
        self.steps.iter().map(TimeStep::observed).collect()
    }

    pub fn num_train(&self) -> usize {
        self.steps.iter().map(|s| s.obs.iter().filter(|o| o.train).count()).sum()
    }
}

/// A GP prior with one kernel per latent function, a likelihood and an
/// optional separable spatial component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpModel {
    pub kernels: Vec<KernelSpec>,
    pub likelihood: Likelihood,
    #[serde(default)]
    pub spatial: Option<SpatialConfig>,
}

impl GpModel {
    pub fn new(kernel: KernelSpec, likelihood: Likelihood) -> Self {
        GpModel {
            kernels: vec![kernel],
            likelihood,
            spatial: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.likelihood.validate()?;
        if self.kernels.len() != self.likelihood.latent_dim() {
            return Err(Error::Config(format!(
                "{} likelihood needs {} kernels, got {}",
                self.likelihood.name(),
                self.likelihood.latent_dim(),
                self.kernels.len()
            )));
        }
        for k in &self.kernels {
            k.validate()?;
        }
        if let Some(s) = &self.spatial {
            s.validate()?;
        }
        Ok(())
    }

    /// Unconstrained (log) hyperparameters: kernels, then likelihood, then
    /// the spatial lengthscale.
    pub fn params(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.kernels.iter().flat_map(|k| k.params()).collect();
        p.extend(self.likelihood.params());
        if let Some(s) = &self.spatial {
            p.extend(s.params());
        }
        p
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, k) in self.kernels.iter().enumerate() {
            for j in 0..k.num_params() {
                names.push(format!("kernel{i}.{}.p{j}", k.name()));
            }
        }
        for j in 0..self.likelihood.params().len() {
            names.push(format!("likelihood.p{j}"));
        }
        if self.spatial.is_some() {
            names.push("spatial.lengthscale".into());
        }
        names
    }

    pub fn with_params(&self, p: &[f64]) -> Result<Self> {
        if p.len() != self.params().len() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                self.params().len(),
                p.len()
            )));
        }
        let mut off = 0;
        let mut kernels = Vec::with_capacity(self.kernels.len());
        for k in &self.kernels {
            let n = k.num_params();
            kernels.push(k.with_params(&p[off..off + n])?);
            off += n;
        }
        let nl = self.likelihood.params().len();
        let likelihood = self.likelihood.with_params(&p[off..off + nl])?;
        off += nl;
        let spatial = match &self.spatial {
            Some(s) => Some(s.with_params(&p[off..off + 1])?),
            None => None,
        };
        Ok(GpModel {
            kernels,
            likelihood,
            spatial,
        })
    }

    pub fn build(&self) -> Result<StateModel> {
        self.validate()?;
        let parts = self
            .kernels
            .iter()
            .map(KernelSpec::to_state_space)
            .collect::<Result<Vec<_>>>()?;
        let temporal = if parts.len() == 1 {
            parts.into_iter().next().unwrap()
        } else {
            ContinuousSsm::stack_independent(&parts)
        };
        let spatial = match &self.spatial {
            Some(s) => Some(SpatialFactor::new(s)?),
            None => None,
        };
        let pinf = match &spatial {
            Some(sf) => sf.stationary_cov(&temporal),
            None => temporal.pinf.clone(),
        };
        Ok(StateModel {
            h_t: temporal.h.clone(),
            temporal,
            spatial,
            likelihood: self.likelihood.clone(),
            pinf,
            cache: TransitionCache::new(),
        })
    }
}

/// A model with its state-space matrices materialised for one parameter
/// setting.
#[derive(Debug)]
pub struct StateModel {
    pub temporal: ContinuousSsm,
    /// Temporal measurement matrix (`latent_dim × s_t`).
    pub h_t: DMatrix<f64>,
    pub spatial: Option<SpatialFactor>,
    pub likelihood: Likelihood,
    /// Stationary covariance of the full state.
    pub pinf: DMatrix<f64>,
    cache: TransitionCache,
}

impl StateModel {
    pub fn state_dim(&self) -> usize {
        self.pinf.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.h_t.nrows()
    }

    /// `A = I ⊗ A_t`, `Q = K_uu ⊗ Q_t` for spatial models; cached by `dt`.
    pub fn transition(&self, dt: f64) -> Arc<DiscreteTransition> {
        match &self.spatial {
            None => self.cache.get_or_insert(&self.temporal, dt),
            Some(sf) => self.cache.get_or_insert_with(dt, || {
                let tt = self.temporal.discretize(dt);
                let m = sf.num_inducing();
                let id = DMatrix::<f64>::identity(m, m);
                DiscreteTransition {
                    a: id.kronecker(&tt.a),
                    q: crate::linalg::symmetrized(sf.kuu.kronecker(&tt.q)),
                    dt,
                    blocks: (0..m).flat_map(|_| tt.blocks.iter().copied()).collect(),
                }
            }),
        }
    }

    /// Measurement matrix mapping the state to the latent function(s) at one
    /// observation.
    pub fn measurement(&self, obs: &Observation) -> Result<DMatrix<f64>> {
        match (&self.spatial, &obs.location) {
            (None, None) => Ok(self.h_t.clone()),
            (None, Some(_)) => Err(Error::Dimension("spatial input given to a temporal model".into())),
            (Some(_), None) => Err(Error::Dimension("spatial model needs a location per observation".into())),
            (Some(sf), Some(r)) => {
                if r.len() != sf.config.inducing[0].len() {
                    return Err(Error::Dimension(format!(
                        "location has dimension {}, inducing points have {}",
                        r.len(),
                        sf.config.inducing[0].len()
                    )));
                }
                match sf.config.mode {
                    SpatialMode::InducingPoints => Ok(sf.measurement_matrix(r, &self.h_t)),
                    SpatialMode::FixedGrid => {
                        let j = sf
                            .grid_index(r)
                            .ok_or_else(|| Error::Dimension(format!("location {r:?} is not on the grid")))?;
                        Ok(sf.grid_measurement_matrix(j, &self.h_t))
                    }
                }
            }
        }
    }
}
