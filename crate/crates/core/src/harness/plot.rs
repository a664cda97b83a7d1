//! Plot-ready CSV output (no rendering).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::experiment::{build_grid, nlpd_cubature, prepare, DataPoint, ResultRecord};
use crate::engine::run_inference;
use crate::error::{Error, Result};
use crate::likelihood::Likelihood;
use crate::sites::log_expected_density;

/// Lattice resolution for 2D classification maps.
pub const LATTICE: usize = 100;

/// Write posterior CSVs for `record` into `dir`; returns the files written.
///
/// Temporal runs give `t,mean,lower95,upper95` with one row per time step.
/// Spatial runs give `t,r,mean,lower95,upper95` per point, and binary
/// classification additionally a `t,r,prob` map on a 100×100 lattice.
pub fn emit_plot_data(record: &ResultRecord, dir: &Path) -> Result<Vec<PathBuf>> {
    if record.posterior.is_empty() {
        return Err(Error::EmptyPosterior);
    }
    std::fs::create_dir_all(dir)?;
    let stem = record.file_stem();
    let mut written = Vec::new();
    let spatial = record.posterior[0].r.is_some();
    let mut out = String::new();
    if spatial {
        out.push_str("t,r,mean,lower95,upper95\n");
        for row in &record.posterior {
            let sd = row.var[0].max(0.0).sqrt();
            let r = row.r.as_ref().map(|r| r[0]).unwrap_or(f64::NAN);
            writeln!(out, "{},{},{},{},{}", row.t, r, row.mean[0], row.mean[0] - 1.96 * sd, row.mean[0] + 1.96 * sd).unwrap();
        }
    } else {
        out.push_str("t,mean,lower95,upper95\n");
        let mut rows: Vec<_> = record.posterior.iter().collect();
        rows.sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap());
        rows.dedup_by(|a, b| a.t == b.t);
        for row in rows {
            let sd = row.var[0].max(0.0).sqrt();
            writeln!(out, "{},{},{},{}", row.t, row.mean[0], row.mean[0] - 1.96 * sd, row.mean[0] + 1.96 * sd).unwrap();
        }
    }
    let path = dir.join(format!("{stem}-posterior.csv"));
    std::fs::write(&path, out)?;
    written.push(path);

    let binary = matches!(record.config.likelihood, Likelihood::BernoulliLogit | Likelihood::BernoulliProbit);
    if spatial && binary {
        let path = dir.join(format!("{stem}-lattice.csv"));
        std::fs::write(&path, class_probability_lattice(record)?)?;
        written.push(path);
    }
    Ok(written)
}

/// Predictive class probabilities on a lattice spanning the data, using the
/// first fold's trained model refitted to all points.
fn class_probability_lattice(record: &ResultRecord) -> Result<String> {
    let prep = prepare(&record.config)?;
    let model = record
        .folds
        .iter()
        .find_map(|f| f.trained.clone())
        .unwrap_or_else(|| record.initial_model.clone());
    let span = |f: &dyn Fn(&DataPoint) -> f64| {
        let lo = prep.points.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = prep.points.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    let (t0, t1) = span(&|p| p.t);
    let (r0, r1) = span(&|p| p.r.as_ref().map(|r| r[0]).unwrap_or(0.0));
    let lin = |a: f64, b: f64, i: usize| a + (b - a) * i as f64 / (LATTICE - 1) as f64;
    let mut points = prep.points.clone();
    let n_data = points.len();
    for i in 0..LATTICE {
        for j in 0..LATTICE {
            points.push(DataPoint {
                t: lin(t0, t1, i),
                r: Some(vec![lin(r0, r1, j)]),
                y: 0.0,
            });
        }
    }
    let train: Vec<bool> = (0..points.len()).map(|i| i < n_data).collect();
    let (grid, loc) = build_grid(&points, &train)?;
    let sm = model.build()?;
    let res = run_inference(&sm, &grid, &record.config.rule, 10)?;
    let rule = nlpd_cubature(1)?;
    let mut out = String::from("t,r,prob\n");
    for (i, p) in points.iter().enumerate().skip(n_data) {
        let m = &res.marginals[loc[i].0][loc[i].1];
        let prob = log_expected_density(&model.likelihood, 1.0, m, &rule)?.exp();
        writeln!(out, "{},{},{}", p.t, p.r.as_ref().unwrap()[0], prob).unwrap();
    }
    Ok(out)
}
