//! Quick oracle and equivalence checks runnable from the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cubature::{gauss_hermite, ut5, CubatureSpec};
use crate::engine::{run_inference, Diagnostics, Engine, SiteStore};
use crate::error::Result;
use crate::likelihood::Likelihood;
use crate::model::{GpModel, TimeGrid};
use crate::oracle::{dense_gp_posterior, ekf_filter, pep_site_oracle, sigma_point_filter};
use crate::prior::KernelSpec;
use crate::sites::{pep_update, GaussianMoments, RuleConfig};

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, err: f64, tol: f64) -> Check {
    Check {
        name,
        passed: err.is_finite() && err < tol,
        detail: format!("max error {err:.3e} (tolerance {tol:.0e})"),
    }
}

fn times(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut t = 0.0;
    (0..n)
        .map(|_| {
            t += rng.random_range(0.02..0.3);
            t
        })
        .collect()
}

fn max_state_diff(a: &[GaussianMoments], b: &[GaussianMoments]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (&x.mean - &y.mean).amax().max((&x.cov - &y.cov).amax()))
        .fold(0.0, f64::max)
}

fn first_pass(model: &GpModel, grid: &TimeGrid, rule: &RuleConfig) -> Result<Vec<GaussianMoments>> {
    let sm = model.build()?;
    let eng = Engine::new(&sm, grid, rule)?;
    let mut sites = SiteStore::new(grid);
    Ok(eng.forward_initialise(&mut sites, &mut Diagnostics::default())?.filtered)
}

/// Run every check; errors inside a check count as failures.
pub fn run_selftest() -> Vec<Check> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    // conjugate exactness against dense GP regression
    let t = times(120, &mut rng);
    let y: Vec<f64> = t.iter().map(|x| x.sin() + 0.2 * rng.random_range(-1.0..1.0)).collect();
    let kernel = KernelSpec::Matern52 { variance: 1.3, lengthscale: 0.9 };
    let res = (|| -> Result<f64> {
        let model = GpModel::new(kernel.clone(), Likelihood::Gaussian { variance: 0.05 });
        let grid = TimeGrid::from_series(&t, &y)?;
        let r = run_inference(&model.build()?, &grid, &RuleConfig::eep(1.0), 1)?;
        let (m, v) = dense_gp_posterior(&kernel, &t, &y, 0.05)?;
        Ok((0..t.len())
            .map(|k| (r.marginals[k][0].mean[0] - m[k]).abs().max((r.marginals[k][0].cov[(0, 0)] - v[k]).abs()))
            .fold(0.0, f64::max))
    })();
    out.push(check("gaussian smoother vs dense GP", res.unwrap_or(f64::NAN), 1e-7));

    // EEP first pass vs EKF, SLEP first pass vs UKF
    let counts: Vec<f64> = t.iter().map(|x| ((1.0 + x.sin()) * 1.5).round()).collect();
    let model = GpModel::new(KernelSpec::Matern32 { variance: 1.0, lengthscale: 1.0 }, Likelihood::Poisson);
    let res = (|| -> Result<f64> {
        let grid = TimeGrid::from_series(&t, &counts)?;
        let ours = first_pass(&model, &grid, &RuleConfig::eep(1.0))?;
        let reference = ekf_filter(&model.build()?.temporal, &model.likelihood, &t, &counts);
        Ok(max_state_diff(&ours, &reference))
    })();
    out.push(check("EEP first pass vs EKF", res.unwrap_or(f64::NAN), 1e-10));
    let res = (|| -> Result<f64> {
        let grid = TimeGrid::from_series(&t, &counts)?;
        let ours = first_pass(&model, &grid, &RuleConfig::slep(1.0, CubatureSpec::Ut5))?;
        let reference = sigma_point_filter(&model.build()?.temporal, &model.likelihood, &t, &counts, &ut5(1))?;
        Ok(max_state_diff(&ours, &reference))
    })();
    out.push(check("SLEP(UT5) first pass vs UKF", res.unwrap_or(f64::NAN), 1e-8));

    // PEP site vs dense quadrature
    let gh = gauss_hermite(1, 20).expect("small rule");
    let lik = Likelihood::BernoulliLogit;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let (m, v, a) = (rng.random_range(-1.5..1.5), rng.random_range(0.2..2.0), rng.random_range(0.1..1.0));
        let yv = if rng.random::<bool>() { 1.0 } else { 0.0 };
        let cav = GaussianMoments::scalar(m, v);
        match pep_update(&cav, &nalgebra::DVector::from_element(1, yv), &lik, a, &gh) {
            Ok(site) => {
                let (p, s) = pep_site_oracle(&lik, yv, m, v, a);
                worst = worst.max((site.precision[(0, 0)] - p).abs()).max((site.shift[0] - s).abs());
            }
            Err(_) => worst = f64::NAN,
        }
    }
    out.push(check("PEP site vs dense quadrature", worst, 1e-5));

    // cubature exactness spot check
    let u = ut5(4);
    let m4: f64 = (0..u.len()).map(|j| u.weights[j] * u.points[(0, j)].powi(4)).sum();
    out.push(check("UT5 fourth moment", (m4 - 3.0).abs(), 1e-10));
    out
}

#[cfg(test)]
mod tests {
    #[test]
    fn selftest_passes() {
        for c in super::run_selftest() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
