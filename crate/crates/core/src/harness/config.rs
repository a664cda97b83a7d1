//! Experiment configuration and the per-benchmark presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cubature::CubatureSpec;
use crate::engine::OptimizerConfig;
use crate::error::{Error, Result};
use crate::likelihood::Likelihood;
use crate::prior::KernelSpec;
use crate::sites::RuleConfig;

/// How space enters a spatio-temporal model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialSpec {
    /// Matérn kernel over space; its variance is held fixed.
    pub kernel: KernelSpec,
    /// Inducing points at quantiles of the spatial inputs. Ignored for
    /// gridded data, where every grid column is a state process.
    #[serde(default)]
    pub num_inducing: Option<usize>,
}

/// Equal-width binning for point-process data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinningSpec {
    pub bins: usize,
    /// Second axis for 2D events.
    #[serde(default)]
    pub bins_space: Option<usize>,
}

fn default_folds() -> usize {
    10
}
fn default_out() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Built-in dataset id or CSV path.
    pub dataset: String,
    /// One kernel per latent function.
    pub kernels: Vec<KernelSpec>,
    pub likelihood: Likelihood,
    #[serde(default)]
    pub spatial: Option<SpatialSpec>,
    pub rule: RuleConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub binning: Option<BinningSpec>,
    /// Size of synthetic datasets.
    #[serde(default)]
    pub num_points: Option<usize>,
    /// Scale observations to zero mean and unit variance before fitting.
    #[serde(default)]
    pub standardize: bool,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config(format!("cross-validation needs at least 2 folds, got {}", self.folds)));
        }
        self.rule.validate()?;
        self.optimizer.validate()?;
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
        if let Some(b) = &self.binning {
            if b.bins == 0 || b.bins_space == Some(0) {
                return Err(Error::Config("bin counts must be positive".into()));
            }
        }
        if let Some(s) = &self.spatial {
            s.kernel.validate()?;
            if s.num_inducing == Some(0) {
                return Err(Error::Config("num_inducing must be positive".into()));
            }
        }
        Ok(())
    }

    /// Default setup for a built-in benchmark.
    pub fn preset(dataset: &str) -> Result<Self> {
        let base = |kernels: Vec<KernelSpec>, likelihood: Likelihood| ExperimentConfig {
            dataset: dataset.to_string(),
            kernels,
            likelihood,
            spatial: None,
            rule: RuleConfig::pep(1.0, CubatureSpec::GaussHermite(20)),
            optimizer: OptimizerConfig::default(),
            folds: 10,
            seed: 0,
            binning: None,
            num_points: None,
            standardize: false,
            output_dir: default_out(),
        };
        let cfg = match dataset {
            "coal" => ExperimentConfig {
                binning: Some(BinningSpec {
                    bins: 333,
                    bins_space: None,
                }),
                ..base(
                    vec![KernelSpec::Matern52 {
                        variance: 1.0,
                        lengthscale: 10.0,
                    }],
                    Likelihood::Poisson,
                )
            },
            "motorcycle" => ExperimentConfig {
                standardize: true,
                // undamped small-power EP oscillates on the near noise-free start of the series
                rule: RuleConfig::pep(1.0, CubatureSpec::GaussHermite(20)).with_damping(0.5),
                ..base(
                    vec![
                        KernelSpec::Matern32 {
                            variance: 1.0,
                            lengthscale: 5.0,
                        },
                        KernelSpec::Matern32 {
                            variance: 1.0,
                            lengthscale: 5.0,
                        },
                    ],
                    Likelihood::Heteroscedastic { shift: 0.0 },
                )
            },
            "banana" => ExperimentConfig {
                spatial: Some(SpatialSpec {
                    kernel: KernelSpec::Matern52 {
                        variance: 1.0,
                        lengthscale: 1.0,
                    },
                    num_inducing: Some(15),
                }),
                ..base(
                    vec![KernelSpec::Matern52 {
                        variance: 1.0,
                        lengthscale: 1.0,
                    }],
                    Likelihood::BernoulliLogit,
                )
            },
            "binary-synthetic" => ExperimentConfig {
                num_points: Some(1000),
                ..base(
                    vec![KernelSpec::Matern72 {
                        variance: 1.0,
                        lengthscale: 0.1,
                    }],
                    Likelihood::BernoulliLogit,
                )
            },
            "cox2d-synthetic" => ExperimentConfig {
                binning: Some(BinningSpec {
                    bins: 50,
                    bins_space: Some(25),
                }),
                spatial: Some(SpatialSpec {
                    kernel: KernelSpec::Matern32 {
                        variance: 1.0,
                        lengthscale: 0.3,
                    },
                    num_inducing: None,
                }),
                rule: RuleConfig::eep(1.0),
                ..base(
                    vec![KernelSpec::Matern32 {
                        variance: 1.0,
                        lengthscale: 0.3,
                    }],
                    Likelihood::Poisson,
                )
            },
            "audio-synthetic" => {
                let sub = |f: f64| KernelSpec::QuasiPeriodic {
                    variance: 0.5,
                    lengthscale: 0.05,
                    frequency: 2.0 * std::f64::consts::PI * f,
                };
                let amp = KernelSpec::Matern52 {
                    variance: 1.0,
                    lengthscale: 0.05,
                };
                ExperimentConfig {
                    num_points: Some(2000),
                    rule: RuleConfig::eep(1.0),
                    // a full Adam step on the log-frequencies detunes the sub-bands
                    optimizer: OptimizerConfig {
                        step_size: 0.01,
                        monotone: true,
                        ..OptimizerConfig::default()
                    },
                    ..base(
                        vec![sub(150.0), sub(420.0), sub(900.0), amp.clone(), amp.clone(), amp],
                        Likelihood::ProductAudio {
                            components: 3,
                            variance: 0.01,
                            shift: 0.0,
                        },
                    )
                }
            }
            other => return Err(Error::UnknownDataset(other.to_string())),
        };
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Deterministic SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for id in super::super::data::DATASET_IDS {
            ExperimentConfig::preset(id).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = serde_json::to_value(ExperimentConfig::preset("coal").unwrap()).unwrap();
        assert!(serde_json::from_value::<ExperimentConfig>(v.clone()).is_ok());
        v["surprise"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
    }

    #[test]
    fn hash_is_stable() {
        let a = ExperimentConfig::preset("coal").unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn preset_json_round_trips() {
        for id in super::super::data::DATASET_IDS {
            let cfg = ExperimentConfig::preset(id).unwrap();
            let back: ExperimentConfig = serde_json::from_str(&cfg.to_json_pretty()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn folds_checked() {
        let mut c = ExperimentConfig::preset("coal").unwrap();
        c.folds = 1;
        assert!(c.validate().is_err());
    }
}
