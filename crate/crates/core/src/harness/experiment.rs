//! Cross-validated experiments: data preparation, fold runs, NLPD and the
//! persisted result record.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::{bin_events, bin_events_2d, load_dataset, GeneratorOptions, RawData};
use crate::cubature::{CubatureRule, CubatureSpec};
use crate::engine::fit_hyperparameters;
use crate::error::{Error, Result};
use crate::likelihood::Likelihood;
use crate::model::{GpModel, Observation, TimeGrid, TimeStep};
use crate::sites::{gaussian_log_evidence, log_expected_density, GaussianMoments};
use crate::spatial::{quantile_locations, SpatialConfig, SpatialMode};

/// Environment variable capping the number of folds run in parallel.
pub const THREADS_ENV: &str = "MARKOVGP_THREADS";

/// One observation after binning and preprocessing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    pub t: f64,
    #[serde(default)]
    pub r: Option<Vec<f64>>,
    pub y: f64,
}

/// Observations plus the model they are fitted with.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub points: Vec<DataPoint>,
    pub model: GpModel,
}

/// Load, bin and standardise the data of `cfg` and assemble the model.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let raw = load_dataset(
        &cfg.dataset,
        GeneratorOptions {
            n: cfg.num_points,
            seed: cfg.seed,
        },
    )?;
    let mut spatial = None;
    let mut points: Vec<DataPoint> = match raw {
        RawData::Events(ev) => {
            let b = cfg
                .binning
                .as_ref()
                .ok_or_else(|| Error::Config("event data needs a binning spec".into()))?;
            let (c, n) = bin_events(&ev, b.bins);
            c.into_iter().zip(n).map(|(t, y)| DataPoint { t, r: None, y }).collect()
        }
        RawData::Events2d(ev) => {
            let b = cfg
                .binning
                .as_ref()
                .ok_or_else(|| Error::Config("event data needs a binning spec".into()))?;
            let g = bin_events_2d(&ev, b.bins, b.bins_space.unwrap_or(b.bins));
            let s = cfg
                .spatial
                .as_ref()
                .ok_or_else(|| Error::Config("2D event data needs a spatial spec".into()))?;
            spatial = Some(SpatialConfig {
                kernel: s.kernel.clone(),
                inducing: g.r_centres.iter().map(|&r| vec![r]).collect(),
                mode: SpatialMode::FixedGrid,
            });
            let mut pts = Vec::new();
            for (i, &t) in g.t_centres.iter().enumerate() {
                for (j, &r) in g.r_centres.iter().enumerate() {
                    pts.push(DataPoint {
                        t,
                        r: Some(vec![r]),
                        y: g.counts[i][j],
                    });
                }
            }
            pts
        }
        RawData::Series { t, y } => t.into_iter().zip(y).map(|(t, y)| DataPoint { t, r: None, y }).collect(),
        RawData::Spatial(p) => {
            let s = cfg
                .spatial
                .as_ref()
                .ok_or_else(|| Error::Config("spatial data needs a spatial spec".into()))?;
            let m = s.num_inducing.unwrap_or(15);
            let rs: Vec<f64> = p.iter().map(|q| q.r[0]).collect();
            spatial = Some(SpatialConfig {
                kernel: s.kernel.clone(),
                inducing: quantile_locations(&rs, m).into_iter().map(|r| vec![r]).collect(),
                mode: SpatialMode::InducingPoints,
            });
            p.into_iter()
                .map(|q| DataPoint {
                    t: q.t,
                    r: Some(q.r),
                    y: q.y,
                })
                .collect()
        }
    };
    if points.is_empty() {
        return Err(Error::Config(format!("dataset {} is empty", cfg.dataset)));
    }
    if matches!(cfg.likelihood, Likelihood::BernoulliLogit | Likelihood::BernoulliProbit)
        && points.iter().any(|p| p.y == -1.0)
    {
        // ±1 labels
        for p in &mut points {
            p.y = if p.y > 0.0 { 1.0 } else { 0.0 };
        }
    }
    if cfg.standardize {
        let n = points.len() as f64;
        let mean = points.iter().map(|p| p.y).sum::<f64>() / n;
        let sd = (points.iter().map(|p| (p.y - mean).powi(2)).sum::<f64>() / n).sqrt();
        if sd > 0.0 {
            for p in &mut points {
                p.y = (p.y - mean) / sd;
            }
        }
    }
    let model = GpModel {
        kernels: cfg.kernels.clone(),
        likelihood: cfg.likelihood.clone(),
        spatial,
    };
    model.validate()?;
    Ok(Prepared { points, model })
}

/// Group points by `t` into a time grid. Points with `train[i] == false` are
/// carried as held-out rows. Returns the grid and each point's `(step, row)`.
pub fn build_grid(points: &[DataPoint], train: &[bool]) -> Result<(TimeGrid, Vec<(usize, usize)>)> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| points[a].t.partial_cmp(&points[b].t).expect("finite t").then(a.cmp(&b)));
    let mut steps: Vec<TimeStep> = Vec::new();
    let mut loc = vec![(0, 0); points.len()];
    for i in idx {
        let p = &points[i];
        let obs = Observation {
            location: p.r.clone(),
            y: p.y,
            train: train[i],
        };
        let k = steps.len();
        match steps.last_mut() {
            Some(s) if s.t == p.t => {
                loc[i] = (k - 1, s.obs.len());
                s.obs.push(obs);
            }
            _ => {
                loc[i] = (k, 0);
                steps.push(TimeStep { t: p.t, obs: vec![obs] });
            }
        }
    }
    Ok((TimeGrid::new(steps)?, loc))
}

/// Seeded K-fold partition: a shuffled permutation dealt round-robin.
pub fn cv_folds(n: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perm.shuffle(&mut rng);
    let mut out = vec![Vec::new(); folds];
    for (j, &i) in perm.iter().enumerate() {
        out[j % folds].push(i);
    }
    for f in &mut out {
        f.sort_unstable();
    }
    out
}

/// Cubature used for predictive densities: GH(20) up to three latents, UT5
/// beyond.
pub fn nlpd_cubature(latent_dim: usize) -> Result<CubatureRule> {
    if latent_dim <= 3 {
        CubatureSpec::GaussHermite(20).build(latent_dim)
    } else {
        CubatureSpec::Ut5.build(latent_dim)
    }
}

/// `-log p(y | data)` under the latent marginal; exact for the Gaussian
/// likelihood.
pub fn predictive_nlpd(lik: &Likelihood, y: f64, marginal: &GaussianMoments, rule: &CubatureRule) -> Result<f64> {
    if lik.is_gaussian() {
        return Ok(-gaussian_log_evidence(lik, y, marginal));
    }
    let lp = log_expected_density(lik, y, marginal, rule)?;
    if lp.is_finite() {
        return Ok(-lp);
    }
    // signed UT5 weights can leave a non-positive density estimate; the GH(3)
    // tensor rule has the same polynomial degree and positive weights
    let fallback = CubatureSpec::GaussHermite(3).build(marginal.dim())?;
    Ok(-log_expected_density(lik, y, marginal, &fallback)?)
}

/// Smoothed latent marginal at one point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorRow {
    pub t: f64,
    #[serde(default)]
    pub r: Option<Vec<f64>>,
    pub y: f64,
    pub train: bool,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub nlpd: Option<f64>,
    pub error: Option<String>,
    pub energy_trace: Vec<f64>,
    pub rejected_steps: usize,
    pub trained: Option<GpModel>,
    pub cavity_not_psd: usize,
    pub skipped_updates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub method: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    /// Initial hyperparameters, before any training.
    pub initial_model: GpModel,
    pub folds: Vec<FoldResult>,
    pub fold_nlpd: Vec<Option<f64>>,
    pub mean_nlpd: Option<f64>,
    pub std_nlpd: Option<f64>,
    pub wall_clock_secs: f64,
    /// Smoothed marginals from the first fold, in data order.
    pub posterior: Vec<PosteriorRow>,
}

impl ResultRecord {
    pub fn file_stem(&self) -> String {
        let name = self.config.dataset.replace(['/', '\\', '.'], "_");
        format!("{name}-{}", &self.config_hash[..12])
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.json", self.file_stem()));
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

struct FoldOutput {
    result: FoldResult,
    posterior: Vec<PosteriorRow>,
}

fn run_fold(cfg: &ExperimentConfig, prep: &Prepared, fold: usize, test: &[usize]) -> FoldOutput {
    let mut train = vec![true; prep.points.len()];
    for &i in test {
        train[i] = false;
    }
    let mut result = FoldResult {
        fold,
        nlpd: None,
        error: None,
        energy_trace: Vec::new(),
        rejected_steps: 0,
        trained: None,
        cavity_not_psd: 0,
        skipped_updates: 0,
    };
    let mut posterior = Vec::new();
    let outcome = (|| -> Result<()> {
        let (grid, loc) = build_grid(&prep.points, &train)?;
        let fit = fit_hyperparameters(&prep.model, &grid, &cfg.rule, &cfg.optimizer)?;
        result.energy_trace = fit.energy_history.clone();
        result.rejected_steps = fit.rejected_steps;
        result.trained = Some(fit.model.clone());
        result.cavity_not_psd = fit.inference.diagnostics.cavity_not_psd;
        result.skipped_updates = fit.inference.diagnostics.skipped_updates;
        if let Some(msg) = &fit.aborted {
            log::warn!("fold {fold}: training stopped early: {msg}");
        }
        let rule = nlpd_cubature(prep.model.likelihood.latent_dim())?;
        let mut total = 0.0;
        for &i in test {
            let (k, r) = loc[i];
            total += predictive_nlpd(&fit.model.likelihood, prep.points[i].y, &fit.inference.marginals[k][r], &rule)?;
        }
        let nlpd = total / test.len().max(1) as f64;
        if !nlpd.is_finite() {
            return Err(Error::Config(format!("fold {fold}: non-finite NLPD")));
        }
        result.nlpd = Some(nlpd);
        posterior = prep
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let m = &fit.inference.marginals[loc[i].0][loc[i].1];
                PosteriorRow {
                    t: p.t,
                    r: p.r.clone(),
                    y: p.y,
                    train: train[i],
                    mean: m.mean.iter().copied().collect(),
                    var: m.cov.diagonal().iter().copied().collect(),
                }
            })
            .collect();
        Ok(())
    })();
    if let Err(e) = outcome {
        result.error = Some(format!("fold {fold}: {e}"));
    }
    FoldOutput { result, posterior }
}

fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0)
}

/// Cross-validate the configured method. Fold failures are recorded, not
/// fatal.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let prep = prepare(cfg)?;
    let folds = cv_folds(prep.points.len(), cfg.folds, cfg.seed);
    let work = || -> Vec<FoldOutput> {
        folds
            .par_iter()
            .enumerate()
            .map(|(f, test)| run_fold(cfg, &prep, f, test))
            .collect()
    };
    let outputs = match thread_cap() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };
    let fold_nlpd: Vec<Option<f64>> = outputs.iter().map(|o| o.result.nlpd).collect();
    let ok: Vec<f64> = fold_nlpd.iter().flatten().copied().collect();
    let (mean, std) = if ok.is_empty() {
        (None, None)
    } else {
        let m = ok.iter().sum::<f64>() / ok.len() as f64;
        let v = ok.iter().map(|x| (x - m).powi(2)).sum::<f64>() / ok.len() as f64;
        (Some(m), Some(v.sqrt()))
    };
    let posterior = outputs.first().map(|o| o.posterior.clone()).unwrap_or_default();
    Ok(ResultRecord {
        method: cfg.rule.label(),
        config: cfg.clone(),
        config_hash: cfg.hash(),
        initial_model: prep.model.clone(),
        folds: outputs.into_iter().map(|o| o.result).collect(),
        fold_nlpd,
        mean_nlpd: mean,
        std_nlpd: std,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        posterior,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_partition_the_data() {
        for n in [10, 11, 133, 333] {
            let f = cv_folds(n, 10, 3);
            let mut all: Vec<usize> = f.iter().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            let sizes: Vec<usize> = f.iter().map(Vec::len).collect();
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
        assert_eq!(cv_folds(50, 5, 1), cv_folds(50, 5, 1));
        assert_ne!(cv_folds(50, 5, 1), cv_folds(50, 5, 2));
    }

    #[test]
    fn grid_groups_equal_times() {
        let pts = vec![
            DataPoint { t: 2.0, r: None, y: 1.0 },
            DataPoint { t: 1.0, r: None, y: 2.0 },
            DataPoint { t: 2.0, r: None, y: 3.0 },
        ];
        let (g, loc) = build_grid(&pts, &[true, false, true]).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(loc, vec![(1, 0), (0, 0), (1, 1)]);
        assert!(!g.steps()[0].obs[0].train);
    }

    #[test]
    fn motorcycle_is_standardised() {
        let cfg = ExperimentConfig::preset("motorcycle").unwrap();
        let p = prepare(&cfg).unwrap();
        let n = p.points.len() as f64;
        let m = p.points.iter().map(|q| q.y).sum::<f64>() / n;
        let v = p.points.iter().map(|q| (q.y - m).powi(2)).sum::<f64>() / n;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn binary_labels_are_mapped() {
        let cfg = ExperimentConfig::preset("binary-synthetic").unwrap();
        let p = prepare(&cfg).unwrap();
        assert!(p.points.iter().all(|q| q.y == 0.0 || q.y == 1.0));
    }
}
