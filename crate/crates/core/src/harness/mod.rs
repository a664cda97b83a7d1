//! Experiment runner: datasets, cross-validation, metrics and outputs.

pub mod config;
pub mod data;
pub mod experiment;
pub mod plot;

pub use config::{BinningSpec, ExperimentConfig, SpatialSpec};
pub use data::{bin_events, bin_events_2d, load_dataset, GeneratorOptions, RawData};
pub use experiment::{cv_folds, prepare, run_experiment, DataPoint, FoldResult, PosteriorRow, ResultRecord};
pub use plot::emit_plot_data;
