//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use markovgp::cubature::{gauss_hermite, gauss_hermite_1d, ut5, CubatureSpec};
use markovgp::engine::{energy_gradient, run_inference, Diagnostics, Engine, SiteStore};
use markovgp::harness::experiment::{build_grid, prepare, DataPoint};
use markovgp::harness::{run_experiment, ExperimentConfig, ResultRecord};
use markovgp::oracle::{
    cvi_site_oracle, dense_gp_posterior, ekf_filter, pep_site_oracle, sigma_point_filter, slep_site_oracle,
};
use markovgp::sites::{cvi_update, pep_update, slep_update};
use markovgp::{
    fit_hyperparameters, GaussianMoments, GpModel, KernelSpec, Likelihood, OptimizerConfig, RuleConfig, TimeGrid,
};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome {
            passed,
            detail: detail.into(),
        }
    }
}

fn random_times(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 0.0;
    (0..n)
        .map(|_| {
            t += rng.random_range(0.01..0.3);
            t
        })
        .collect()
}

fn poisson_draws(t: &[f64], seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    t.iter()
        .map(|x| {
            let rate = (0.8 * (1.3 * x).sin()).exp();
            let (mut k, mut p) = (0.0, (-rate).exp());
            let mut c = p;
            let u: f64 = rng.random();
            while u > c {
                k += 1.0;
                p *= rate / k;
                c += p;
            }
            k
        })
        .collect()
}

fn max_state_diff(a: &[GaussianMoments], b: &[GaussianMoments]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (&x.mean - &y.mean).amax().max((&x.cov - &y.cov).amax()))
        .fold(0.0, f64::max)
}

fn first_pass(model: &GpModel, grid: &TimeGrid, rule: &RuleConfig) -> Vec<GaussianMoments> {
    let sm = model.build().unwrap();
    let eng = Engine::new(&sm, grid, rule).unwrap();
    let mut sites = SiteStore::new(grid);
    eng.forward_initialise(&mut sites, &mut Diagnostics::default()).unwrap().filtered
}

fn nonconjugate_models(t: &[f64]) -> Vec<(GpModel, Vec<f64>)> {
    let k = KernelSpec::Matern32 { variance: 1.0, lengthscale: 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let labels = t
        .iter()
        .map(|x| if (2.0 * x).sin() + rng.random_range(-0.5..0.5) > 0.0 { 1.0 } else { 0.0 })
        .collect();
    let hetero = t.iter().map(|x| x.sin() + 0.3 * rng.random_range(-1.0..1.0)).collect();
    vec![
        (GpModel::new(k.clone(), Likelihood::Poisson), poisson_draws(t, 5)),
        (GpModel::new(k.clone(), Likelihood::BernoulliLogit), labels),
        (
            GpModel {
                kernels: vec![k, KernelSpec::Matern12 { variance: 1.0, lengthscale: 2.0 }],
                likelihood: Likelihood::Heteroscedastic { shift: 0.5 },
                spatial: None,
            },
            hetero,
        ),
    ]
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let t = random_times(200, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let y: Vec<f64> = t.iter().map(|x| (2.0 * x).sin() + rng.random_range(-0.3..0.3)).collect();
    let noise = 0.09;
    let kernels = vec![
        KernelSpec::Matern12 { variance: 1.2, lengthscale: 0.8 },
        KernelSpec::Matern32 { variance: 0.9, lengthscale: 1.1 },
        KernelSpec::Matern52 { variance: 1.5, lengthscale: 0.7 },
        KernelSpec::Matern72 { variance: 0.6, lengthscale: 1.4 },
        KernelSpec::Sum {
            kernels: vec![
                KernelSpec::Matern32 { variance: 0.7, lengthscale: 2.0 },
                KernelSpec::Matern12 { variance: 0.3, lengthscale: 0.4 },
            ],
        },
        KernelSpec::QuasiPeriodic { variance: 1.0, lengthscale: 3.0, frequency: 2.5 },
    ];
    let (mut em, mut ev) = (0.0f64, 0.0f64);
    for kernel in kernels {
        let model = GpModel::new(kernel.clone(), Likelihood::Gaussian { variance: noise });
        let grid = TimeGrid::from_series(&t, &y).unwrap();
        let res = run_inference(&model.build().unwrap(), &grid, &RuleConfig::eep(1.0), 1).unwrap();
        let (mean, var) = dense_gp_posterior(&kernel, &t, &y, noise).unwrap();
        for k in 0..t.len() {
            em = em.max((res.marginals[k][0].mean[0] - mean[k]).abs());
            ev = ev.max((res.marginals[k][0].cov[(0, 0)] - var[k]).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        em < 1e-8 && ev < 1e-7 && secs < 5.0,
        format!("max mean err {em:.2e} (<1e-8), max var err {ev:.2e} (<1e-7), {secs:.2}s (<5s)"),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let t = random_times(500, 7);
    let mut worst = 0.0f64;
    for (model, y) in nonconjugate_models(&t) {
        let grid = TimeGrid::from_series(&t, &y).unwrap();
        let ours = first_pass(&model, &grid, &RuleConfig::eep(1.0));
        let ssm = model.build().unwrap().temporal.clone();
        worst = worst.max(max_state_diff(&ours, &ekf_filter(&ssm, &model.likelihood, &t, &y)));
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        worst < 1e-10 && secs < 2.0,
        format!("Poisson/logit/heteroscedastic, max diff {worst:.2e} (<1e-10), {secs:.2}s (<2s)"),
    )
}

fn criterion_3() -> Outcome {
    let t = random_times(500, 8);
    let mut worst = 0.0f64;
    for (model, y) in nonconjugate_models(&t) {
        let grid = TimeGrid::from_series(&t, &y).unwrap();
        let ssm = model.build().unwrap().temporal.clone();
        for spec in [CubatureSpec::Ut5, CubatureSpec::GaussHermite(20)] {
            let ours = first_pass(&model, &grid, &RuleConfig::slep(1.0, spec));
            let rule = spec.build(model.likelihood.latent_dim()).unwrap();
            let reference = sigma_point_filter(&ssm, &model.likelihood, &t, &y, &rule).unwrap();
            worst = worst.max(max_state_diff(&ours, &reference));
        }
    }
    Outcome::new(worst < 1e-8, format!("UT5 and GH20 filters, max diff {worst:.2e} (<1e-8)"))
}

fn run(cfg: &ExperimentConfig) -> (ResultRecord, f64) {
    let record = run_experiment(cfg).unwrap();
    for f in &record.folds {
        if let Some(e) = &f.error {
            eprintln!("    fold {} failed: {e}", f.fold);
        }
    }
    let nlpd = record.mean_nlpd.unwrap_or(f64::NAN);
    (record, nlpd)
}

fn reproduce(dataset: &str, methods: &[(RuleConfig, f64, f64)], budget_secs: f64) -> Outcome {
    let start = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for (rule, lo, hi) in methods {
        let mut cfg = ExperimentConfig::preset(dataset).unwrap();
        cfg.rule = RuleConfig {
            damping: cfg.rule.damping,
            ..rule.clone()
        };
        let (record, nlpd) = run(&cfg);
        let pass = nlpd >= *lo && nlpd <= *hi;
        ok &= pass;
        parts.push(format!(
            "{} {nlpd:.4}±{:.3} [{lo:.3}, {hi:.3}]{}",
            record.method,
            record.std_nlpd.unwrap_or(f64::NAN),
            if pass { "" } else { " out of range" }
        ));
        eprintln!("    {dataset}: {} ({:.0}s)", parts.last().unwrap(), record.wall_clock_secs);
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < budget_secs;
    Outcome::new(ok, format!("{}; {secs:.0}s (<{budget_secs:.0}s)", parts.join("; ")))
}

fn criterion_4() -> Outcome {
    let (lo, hi) = (0.922 - 0.03, 0.922 + 0.03);
    let gh = CubatureSpec::GaussHermite(20);
    reproduce(
        "coal",
        &[
            (RuleConfig::pep(1.0, gh), lo, hi),
            (RuleConfig::eep(0.0), lo, hi),
            (RuleConfig::eep(0.5), lo, hi),
            (RuleConfig::eep(1.0), lo, hi),
            (RuleConfig::slep(1.0, CubatureSpec::Ut5), lo, hi),
            (RuleConfig::cvi(gh), lo, hi),
        ],
        600.0,
    )
}

fn criterion_5() -> Outcome {
    reproduce(
        "banana",
        &[
            (RuleConfig::eep(1.0), 0.228 - 0.03, 0.228 + 0.03),
            (RuleConfig::pep(1.0, CubatureSpec::GaussHermite(20)), 0.217 - 0.03, 0.217 + 0.03),
        ],
        900.0,
    )
}

fn criterion_6() -> Outcome {
    reproduce(
        "motorcycle",
        &[
            (RuleConfig::pep(0.01, CubatureSpec::GaussHermite(20)), f64::NEG_INFINITY, 0.55),
            (RuleConfig::eep(1.0), 0.75, f64::INFINITY),
        ],
        300.0,
    )
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    // the oracles integrate on a dense grid; a high-order rule isolates the update algebra
    // from the quadrature error of GH20, which is reported alongside
    let gh = gauss_hermite(1, 200).unwrap();
    let gh20 = gauss_hermite(1, 20).unwrap();
    let mut gh20_pep = 0.0f64;
    let liks = [Likelihood::Poisson, Likelihood::BernoulliLogit, Likelihood::BernoulliProbit];
    // |ours - oracle| <= 1e-5 · max(1, |oracle|)
    let err = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
    let (mut pep, mut slep, mut cvi) = (0.0f64, 0.0f64, 0.0f64);
    let mut failures = 0;
    for lik in &liks {
        for _ in 0..50 {
            let m = rng.random_range(-2.0..2.0);
            let v = rng.random_range(0.05..2.0);
            let alpha = rng.random_range(0.05..=1.0);
            let y = match lik {
                Likelihood::Poisson => rng.random_range(0..8) as f64,
                _ => f64::from(rng.random::<bool>()),
            };
            let cav = GaussianMoments::scalar(m, v);
            let yv = DVector::from_element(1, y);
            match pep_update(&cav, &yv, lik, alpha, &gh) {
                Ok(s) => {
                    let (p, h) = pep_site_oracle(lik, y, m, v, alpha);
                    pep = pep.max(err(s.precision[(0, 0)], p)).max(err(s.shift[0], h));
                    if let Ok(s) = pep_update(&cav, &yv, lik, alpha, &gh20) {
                        gh20_pep = gh20_pep.max(err(s.precision[(0, 0)], p)).max(err(s.shift[0], h));
                    }
                }
                Err(_) => failures += 1,
            }
            match slep_update(&cav, &yv, lik, alpha, &gh) {
                Ok(s) => {
                    let (p, h) = slep_site_oracle(lik, y, m, v, alpha);
                    slep = slep.max(err(s.precision[(0, 0)], p)).max(err(s.shift[0], h));
                }
                Err(_) => failures += 1,
            }
            match cvi_update(&cav, &yv, lik, &gh, None, 1.0) {
                Ok(s) => {
                    let (p, h) = cvi_site_oracle(lik, y, m, v);
                    cvi = cvi.max(err(s.precision[(0, 0)], p)).max(err(s.shift[0], h));
                }
                Err(_) => failures += 1,
            }
        }
    }
    Outcome::new(
        pep < 1e-5 && slep < 1e-5 && cvi < 1e-5 && failures == 0,
        format!(
            "150 cases per rule over Poisson/logit/probit with GH200: PEP {pep:.2e}, SLEP {slep:.2e}, CVI {cvi:.2e} (<1e-5), {failures} failed updates; PEP with GH20 {gh20_pep:.2e}"
        ),
    )
}

fn double_factorial_moment(k: u32) -> f64 {
    if k % 2 == 1 {
        return 0.0;
    }
    (1..k).step_by(2).map(f64::from).product()
}

fn multi_indices(dim: usize, max_degree: u32) -> Vec<Vec<u32>> {
    let mut out = vec![vec![]];
    for _ in 0..dim {
        let mut next = Vec::new();
        for idx in &out {
            let used: u32 = idx.iter().sum();
            for d in 0..=(max_degree - used) {
                let mut v = idx.clone();
                v.push(d);
                next.push(v);
            }
        }
        out = next;
    }
    out
}

fn criterion_8() -> Outcome {
    let mut ut_err = 0.0f64;
    for dim in 1..=6 {
        let rule = ut5(dim);
        for idx in multi_indices(dim, 5) {
            let exact: f64 = idx.iter().map(|&k| double_factorial_moment(k)).product();
            let approx: f64 = (0..rule.len())
                .map(|j| rule.weights[j] * idx.iter().enumerate().map(|(i, &k)| rule.points[(i, j)].powi(k as i32)).product::<f64>())
                .sum();
            ut_err = ut_err.max((approx - exact).abs());
        }
    }
    // error relative to the magnitude of the integrand, Σ w |x|^k
    let (x, w) = gauss_hermite_1d(20);
    let mut gh_err = 0.0f64;
    for k in 0..=38u32 {
        let approx: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(k as i32)).sum();
        let scale: f64 = x.iter().zip(&w).map(|(x, w)| w * x.abs().powi(k as i32)).sum();
        gh_err = gh_err.max((approx - double_factorial_moment(k)).abs() / scale);
    }
    Outcome::new(
        ut_err < 1e-10 && gh_err < 1e-8,
        format!("UT5 dims 1-6 degree<=5 max abs err {ut_err:.2e} (<1e-10); GH20 degree<=38 max rel err {gh_err:.2e} (<1e-8)"),
    )
}

fn pass_time(n: usize) -> f64 {
    let t = random_times(n, 21);
    let y = poisson_draws(&t, 22);
    let model = GpModel::new(KernelSpec::Matern52 { variance: 1.0, lengthscale: 1.0 }, Likelihood::Poisson);
    let grid = TimeGrid::from_series(&t, &y).unwrap();
    let rule = RuleConfig::eep(1.0);
    let sm = model.build().unwrap();
    let eng = Engine::new(&sm, &grid, &rule).unwrap();
    let mut best = f64::INFINITY;
    // the first pass fills the transition cache; later passes time the recursions
    for _ in 0..11 {
        let mut sites = SiteStore::new(&grid);
        let start = Instant::now();
        let fwd = eng.forward_initialise(&mut sites, &mut Diagnostics::default()).unwrap();
        eng.backward(&fwd, &mut sites, true, &mut Diagnostics::default()).unwrap();
        best = best.min(start.elapsed().as_secs_f64());
    }
    best
}

fn criterion_9() -> Outcome {
    let sizes = [1000, 2000, 4000, 8000];
    let times: Vec<f64> = sizes.iter().map(|&n| pass_time(n)).collect();
    let ratios: Vec<f64> = times.windows(2).map(|w| w[1] / w[0]).collect();
    let ok = ratios.iter().all(|r| (1.6..=2.6).contains(r));
    Outcome::new(
        ok,
        format!(
            "forward+backward ms {:?}, doubling ratios {:?} (in [1.6, 2.6])",
            times.iter().map(|t| (t * 1e4).round() / 10.0).collect::<Vec<_>>(),
            ratios.iter().map(|r| (r * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    )
}

fn criterion_10() -> Outcome {
    let cfg = ExperimentConfig::preset("coal").unwrap();
    let prep = prepare(&cfg).unwrap();
    let train = vec![true; prep.points.len()];
    let (grid, _) = build_grid(&prep.points, &train).unwrap();
    let mut fd_err = 0.0f64;
    for rule in [RuleConfig::eep(1.0), RuleConfig::cvi(CubatureSpec::GaussHermite(20))] {
        let inf = run_inference(&prep.model.build().unwrap(), &grid, &rule, 3).unwrap();
        let g4 = energy_gradient(&prep.model, &grid, &rule, &inf.sites, 1e-4).unwrap();
        let g5 = energy_gradient(&prep.model, &grid, &rule, &inf.sites, 1e-5).unwrap();
        for (a, b) in g4.iter().zip(&g5) {
            fd_err = fd_err.max((a - b).abs() / a.abs().max(b.abs()));
        }
    }
    let mut parts = vec![format!("FD 1e-4 vs 1e-5 max rel diff {fd_err:.2e} (<1e-3)")];
    let mut ok = fd_err < 1e-3;
    for rule in [RuleConfig::cvi(CubatureSpec::GaussHermite(20)), RuleConfig::eep(1.0)] {
        let opt = OptimizerConfig {
            monotone: true,
            ..cfg.optimizer.clone()
        };
        let fit = fit_hyperparameters(&prep.model, &grid, &rule, &opt).unwrap();
        let h = &fit.energy_history;
        let worst_rise = h.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
        let monotone = worst_rise <= 1e-6 && h.len() == opt.iterations && fit.aborted.is_none();
        let decreased = h.last().unwrap() < h.first().unwrap();
        ok &= monotone && decreased;
        parts.push(format!(
            "{}: energy {:.3} -> {:.3} over {} accepted steps, largest rise {worst_rise:.1e}, {} rejected{}",
            rule.label(),
            h.first().unwrap(),
            h.last().unwrap(),
            h.len(),
            fit.rejected_steps,
            fit.aborted.as_ref().map(|a| format!(", stopped: {a}")).unwrap_or_default()
        ));
    }
    Outcome::new(ok, parts.join("; "))
}

/// Engine invariants on a prepared data set: covariances symmetric and PSD,
/// smoothed ⪯ filtered, and held-out rows transparent. Returns the worst
/// violation of each.
fn engine_invariants(cfg: &ExperimentConfig) -> (f64, f64, f64) {
    let prep = prepare(cfg).unwrap();
    let sm = prep.model.build().unwrap();
    let n = prep.points.len();
    let train: Vec<bool> = (0..n).map(|i| i % 5 != 0).collect();
    let (grid, loc) = build_grid(&prep.points, &train).unwrap();

    let eng = Engine::new(&sm, &grid, &cfg.rule).unwrap();
    let mut sites = SiteStore::new(&grid);
    let mut diag = Diagnostics::default();
    let fwd = eng.forward_initialise(&mut sites, &mut diag).unwrap();
    eng.backward(&fwd, &mut sites, true, &mut diag).unwrap();
    let fwd = eng.forward(&sites).unwrap();
    let (post, _) = eng.backward(&fwd, &mut sites.clone(), false, &mut diag).unwrap();
    let (mut psd, mut order) = (0.0f64, 0.0f64);
    for (f, s) in fwd.filtered.iter().zip(&post) {
        let scale = f.cov.amax().max(1.0);
        for p in [&f.cov, &s.cov] {
            psd = psd.max((p - p.transpose()).amax() / scale);
            psd = psd.max(-p.clone().symmetric_eigenvalues().min() / scale);
        }
        order = order.max(-(&f.cov - &s.cov).symmetric_eigenvalues().min() / scale);
    }

    let kept: Vec<DataPoint> = prep.points.iter().zip(&train).filter(|(_, t)| **t).map(|(p, _)| p.clone()).collect();
    let (small, loc_small) = build_grid(&kept, &vec![true; kept.len()]).unwrap();
    let a = run_inference(&sm, &grid, &cfg.rule, 3).unwrap();
    let b = run_inference(&sm, &small, &cfg.rule, 3).unwrap();
    let mut transparency = 0.0f64;
    let mut j = 0;
    for i in 0..n {
        if train[i] {
            let (x, y) = (&a.marginals[loc[i].0][loc[i].1], &b.marginals[loc_small[j].0][loc_small[j].1]);
            transparency = transparency.max((&x.mean - &y.mean).amax()).max((&x.cov - &y.cov).amax());
            j += 1;
        }
    }
    (psd, order, transparency)
}

fn synthetic_analogues() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for id in ["audio-synthetic", "cox2d-synthetic"] {
        // reduced budget: these are run-to-completion and invariant checks
        let mut cfg = ExperimentConfig::preset(id).unwrap();
        cfg.folds = 3;
        cfg.optimizer.iterations = 10;
        let (record, nlpd) = run(&cfg);
        let (psd, order, transparency) = engine_invariants(&cfg);
        let pass = nlpd.is_finite() && psd < 1e-10 && order < 1e-10 && transparency < 1e-10;
        ok &= pass;
        parts.push(format!(
            "{id}: NLPD {nlpd:.4} ({} folds, {} iterations, {:.0}s), PSD {psd:.1e}, ordering {order:.1e}, held-out transparency {transparency:.1e} (<1e-10)",
            cfg.folds, cfg.optimizer.iterations, record.wall_clock_secs
        ));
    }
    Outcome::new(ok, parts.join("; "))
}

fn main() -> ExitCode {
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: Vec<(&str, &str, fn() -> Outcome)> = vec![
        ("1", "conjugate exactness", criterion_1),
        ("2", "EEP first pass equals EKF", criterion_2),
        ("3", "SLEP first pass equals UKF/GHKF", criterion_3),
        ("4", "Coal reproduction", criterion_4),
        ("5", "Banana reproduction", criterion_5),
        ("6", "Motorcycle directional result", criterion_6),
        ("7", "site updates match quadrature oracles", criterion_7),
        ("8", "cubature exactness", criterion_8),
        ("9", "linear-time scaling", criterion_9),
        ("10", "gradient sanity and monotone training", criterion_10),
        ("synthetic", "audio and cox2d analogues run", synthetic_analogues),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !only.is_empty() && !only.iter().any(|o| o == id) {
            continue;
        }
        let out = f();
        println!("criterion {id} ({name}): {} - {}", if out.passed { "PASS" } else { "FAIL" }, out.detail);
        failed += usize::from(!out.passed);
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
