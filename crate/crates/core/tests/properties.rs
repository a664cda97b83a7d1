use markovgp::cubature::CubatureSpec;
use markovgp::engine::{continue_inference, Diagnostics, Engine, SiteStore};
use markovgp::harness::cv_folds;
use markovgp::harness::experiment::predictive_nlpd;
use markovgp::sites::{compute_cavity, log_expected_density};
use markovgp::{
    GaussianMoments, GpModel, KernelSpec, Likelihood, Observation, RuleConfig, Site, SpatialConfig, SpatialMode,
    TimeGrid, TimeStep,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn min_eig(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigenvalues().min()
}

fn temporal_kernel() -> impl Strategy<Value = KernelSpec> {
    (0.3f64..2.0, 0.3f64..3.0, 0usize..3).prop_map(|(variance, lengthscale, which)| match which {
        0 => KernelSpec::Matern32 { variance, lengthscale },
        1 => KernelSpec::Matern52 { variance, lengthscale },
        _ => KernelSpec::QuasiPeriodic {
            variance,
            lengthscale,
            frequency: 1.5,
        },
    })
}

fn rule() -> impl Strategy<Value = RuleConfig> {
    prop_oneof![
        (0.1f64..=1.0).prop_map(|a| RuleConfig::pep(a, CubatureSpec::GaussHermite(20))),
        (0.0f64..=1.0).prop_map(RuleConfig::eep),
        Just(RuleConfig::slep(1.0, CubatureSpec::Ut5)),
        Just(RuleConfig::cvi(CubatureSpec::GaussHermite(20))),
    ]
}

/// Irregular times with Poisson or binary observations; some rows held out.
fn dataset() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>, bool)> {
    (10usize..40, any::<bool>()).prop_flat_map(|(n, binary)| {
        (
            prop::collection::vec(0.05f64..0.8, n),
            prop::collection::vec(0u32..6, n),
            prop::collection::vec(prop::bool::weighted(0.85), n),
            Just(binary),
        )
            .prop_map(|(dts, counts, train, binary)| {
                let t = dts
                    .iter()
                    .scan(0.0, |acc, d| {
                        *acc += d;
                        Some(*acc)
                    })
                    .collect();
                let y = counts
                    .iter()
                    .map(|&c| if binary { f64::from(c % 2) } else { f64::from(c) })
                    .collect();
                (t, y, train, binary)
            })
    })
}

fn grid_with_mask(t: &[f64], y: &[f64], train: &[bool]) -> TimeGrid {
    let mut grid = TimeGrid::from_series(t, y).unwrap();
    for (s, &tr) in grid.steps_mut().iter_mut().zip(train) {
        s.obs[0].train = tr;
    }
    grid
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn covariances_psd_and_smoothing_shrinks((t, y, train, binary) in dataset(), kernel in temporal_kernel(), rule in rule()) {
        let lik = if binary { Likelihood::BernoulliLogit } else { Likelihood::Poisson };
        let model = GpModel::new(kernel, lik).build().unwrap();
        let grid = grid_with_mask(&t, &y, &train);
        let eng = Engine::new(&model, &grid, &rule).unwrap();
        let mut sites = SiteStore::new(&grid);
        let mut diag = Diagnostics::default();
        let fwd = eng.forward_initialise(&mut sites, &mut diag).unwrap();
        eng.backward(&fwd, &mut sites, true, &mut diag).unwrap();
        let fwd = eng.forward(&sites).unwrap();
        let (post, _) = eng.backward(&fwd, &mut sites.clone(), false, &mut diag).unwrap();
        for (f, s) in fwd.filtered.iter().zip(&post) {
            let scale = f.cov.amax().max(1.0);
            for p in [&f.cov, &s.cov] {
                prop_assert!((p - p.transpose()).amax() <= 1e-12 * scale);
                prop_assert!(min_eig(p) >= -1e-9 * scale);
            }
            prop_assert!(min_eig(&(&f.cov - &s.cov)) >= -1e-10 * scale);
        }
    }

    #[test]
    fn energy_is_sum_of_step_terms((t, y, train, binary) in dataset(), kernel in temporal_kernel(), rule in rule()) {
        let lik = if binary { Likelihood::BernoulliProbit } else { Likelihood::Poisson };
        let model = GpModel::new(kernel, lik).build().unwrap();
        let grid = grid_with_mask(&t, &y, &train);
        let eng = Engine::new(&model, &grid, &rule).unwrap();
        let mut sites = SiteStore::new(&grid);
        eng.forward_initialise(&mut sites, &mut Diagnostics::default()).unwrap();
        let fwd = eng.forward(&sites).unwrap();
        let sum: f64 = fwd.energy.per_step.iter().sum();
        prop_assert_eq!(fwd.energy.per_step.len(), grid.len());
        prop_assert!((sum - fwd.energy.total).abs() <= 1e-9 * sum.abs().max(1.0));
        prop_assert!((eng.energy(&sites).unwrap() - fwd.energy.total).abs() <= 1e-12 * sum.abs().max(1.0));
        for (k, e) in fwd.energy.per_step.iter().enumerate() {
            if !grid.steps()[k].observed() {
                prop_assert_eq!(*e, 0.0);
            }
        }
    }

    #[test]
    fn converged_sites_are_a_fixed_point((t, y, _, binary) in dataset(), kernel in temporal_kernel()) {
        let lik = if binary { Likelihood::BernoulliLogit } else { Likelihood::Poisson };
        let model = GpModel::new(kernel, lik).build().unwrap();
        let grid = TimeGrid::from_series(&t, &y).unwrap();
        let rule = RuleConfig::pep(1.0, CubatureSpec::GaussHermite(20)).with_damping(0.5);
        let eng = Engine::new(&model, &grid, &rule).unwrap();
        let first = continue_inference(&eng, SiteStore::new(&grid), 400).unwrap();
        prop_assume!(first.converged);
        let again = continue_inference(&eng, first.sites.clone(), 1).unwrap();
        for (a, b) in first.marginals.iter().flatten().zip(again.marginals.iter().flatten()) {
            prop_assert!((&a.mean - &b.mean).amax() < 1e-5);
            prop_assert!((&a.cov - &b.cov).amax() < 1e-5);
        }
    }

    #[test]
    fn folds_partition_and_are_deterministic(n in 1usize..300, k in 1usize..12, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let folds = cv_folds(n, k, seed);
        prop_assert_eq!(&folds, &cv_folds(n, k, seed));
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn cavity_then_reinclusion_is_identity(
        m in prop::collection::vec(-3.0f64..3.0, 1..4),
        v in prop::collection::vec(0.1f64..3.0, 3),
        lam in prop::collection::vec(0.0f64..2.0, 3),
        eta in prop::collection::vec(-2.0f64..2.0, 3),
        alpha in 0.01f64..=1.0,
    ) {
        let d = m.len();
        let post = GaussianMoments::new(DVector::from_column_slice(&m), DMatrix::from_fn(d, d, |i, j| if i == j { v[i] } else { 0.0 }));
        let site = Site {
            precision: DMatrix::from_fn(d, d, |i, j| if i == j { lam[i] } else { 0.0 }),
            shift: DVector::from_column_slice(&eta[..d]),
        };
        // cavity must stay proper: the posterior already contains the site
        prop_assume!((0..d).all(|i| 1.0 / v[i] - alpha * lam[i] > 1e-3));
        let cav = compute_cavity(&post, &site, alpha).unwrap();
        for i in 0..d {
            let prec = 1.0 / cav.cov[(i, i)] + alpha * site.precision[(i, i)];
            let shift = cav.mean[i] / cav.cov[(i, i)] + alpha * site.shift[i];
            prop_assert!((prec * v[i] - 1.0).abs() < 1e-10);
            prop_assert!((shift / prec - m[i]).abs() < 1e-10 * m[i].abs().max(1.0) * prec.max(1.0));
        }
    }

    #[test]
    fn discretisation_is_a_semigroup(kernel in temporal_kernel(), s in 0.0f64..2.0, u in 0.0f64..2.0) {
        let ssm = kernel.to_state_space().unwrap();
        let (ds, du, dsu) = (ssm.discretize(s), ssm.discretize(u), ssm.discretize(s + u));
        let scale = ssm.pinf.amax();
        prop_assert!((&dsu.a - &du.a * &ds.a).amax() < 1e-9);
        let q = &du.a * &ds.q * du.a.transpose() + &du.q;
        prop_assert!((&dsu.q - q).amax() < 1e-9 * scale);
    }

    #[test]
    fn gaussian_nlpd_has_closed_form(y in -3.0f64..3.0, m in -3.0f64..3.0, noise in 0.05f64..2.0, ratio in 0.01f64..1.0) {
        let lik = Likelihood::Gaussian { variance: noise };
        let v = ratio * noise;
        let marg = GaussianMoments::scalar(m, v);
        let s = v + noise;
        let exact = 0.5 * (2.0 * std::f64::consts::PI * s).ln() + (y - m).powi(2) / (2.0 * s);
        let rule = CubatureSpec::GaussHermite(20).build(1).unwrap();
        prop_assert!((predictive_nlpd(&lik, y, &marg, &rule).unwrap() - exact).abs() < 1e-12 * exact.abs().max(1.0));
        // the cubature path agrees away from the far tail, where GH(20) cannot resolve the peak
        if (y - m).abs() <= 3.0 * s.sqrt() {
            prop_assert!((-log_expected_density(&lik, y, &marg, &rule).unwrap() - exact).abs() < 1e-6);
        }
    }
}

const SPACE_KERNEL: KernelSpec = KernelSpec::Matern32 {
    variance: 1.0,
    lengthscale: 0.7,
};
const TIME_KERNEL: KernelSpec = KernelSpec::Matern52 {
    variance: 1.3,
    lengthscale: 1.1,
};
const NOISE: f64 = 0.2;

fn spatial_model(inducing: Vec<Vec<f64>>, mode: SpatialMode) -> GpModel {
    GpModel {
        kernels: vec![TIME_KERNEL],
        likelihood: Likelihood::Gaussian { variance: NOISE },
        spatial: Some(SpatialConfig {
            kernel: SPACE_KERNEL,
            inducing,
            mode,
        }),
    }
}

fn space_time_grid(times: &[f64], locations: &[Vec<f64>], y: &[f64]) -> TimeGrid {
    let nl = locations.len();
    TimeGrid::new(
        times
            .iter()
            .enumerate()
            .map(|(k, &t)| TimeStep {
                t,
                obs: locations
                    .iter()
                    .enumerate()
                    .map(|(j, r)| Observation::spatial(r.clone(), y[k * nl + j]))
                    .collect(),
            })
            .collect(),
    )
    .unwrap()
}

fn smoothed(model: &GpModel, grid: &TimeGrid) -> Vec<GaussianMoments> {
    let sm = model.build().unwrap();
    markovgp::run_inference(&sm, grid, &RuleConfig::eep(1.0), 1)
        .unwrap()
        .marginals
        .into_iter()
        .flatten()
        .collect()
}

fn space_time_data() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>, Vec<f64>)> {
    (3usize..8, 2usize..5).prop_flat_map(|(nt, ns)| {
        (
            prop::collection::vec(0.1f64..0.9, nt),
            prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), ns),
            prop::collection::vec(-2.0f64..2.0, nt * ns),
        )
            .prop_map(|(dts, locs, y)| {
                let t = dts
                    .iter()
                    .scan(0.0, |a, d| {
                        *a += d;
                        Some(*a)
                    })
                    .collect();
                (t, locs.into_iter().map(|(a, b)| vec![a, b]).collect(), y)
            })
    })
}

fn distinct(locs: &[Vec<f64>]) -> bool {
    (0..locs.len()).all(|i| (0..i).all(|j| {
        let d: f64 = locs[i].iter().zip(&locs[j]).map(|(a, b)| (a - b).powi(2)).sum();
        d.sqrt() > 0.3
    }))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fixed_grid_matches_dense_space_time_gp((t, locs, y) in space_time_data()) {
        prop_assume!(distinct(&locs));
        let grid = space_time_grid(&t, &locs, &y);
        let ours = smoothed(&spatial_model(locs.clone(), SpatialMode::FixedGrid), &grid);
        let pts: Vec<(f64, &Vec<f64>)> = t.iter().flat_map(|&ti| locs.iter().map(move |r| (ti, r))).collect();
        let n = pts.len();
        let k = DMatrix::from_fn(n, n, |i, j| {
            let d: f64 = pts[i].1.iter().zip(pts[j].1).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            TIME_KERNEL.covariance((pts[i].0 - pts[j].0).abs()) * SPACE_KERNEL.covariance(d)
        });
        let ky = &k + DMatrix::identity(n, n) * NOISE;
        let chol = ky.cholesky().unwrap();
        let mean = &k * chol.solve(&DVector::from_column_slice(&y));
        let cov = &k - &k * chol.solve(&k);
        for i in 0..n {
            prop_assert!((ours[i].mean[0] - mean[i]).abs() < 1e-6);
            prop_assert!((ours[i].cov[(0, 0)] - cov[(i, i)]).abs() < 1e-6);
        }
    }

    #[test]
    fn inducing_labels_are_exchangeable((t, locs, y) in space_time_data(), seed in any::<u64>()) {
        prop_assume!(distinct(&locs));
        let inducing: Vec<Vec<f64>> = locs.iter().map(|r| vec![r[0] + 0.11, r[1] - 0.07]).collect();
        let mut perm = inducing.clone();
        use rand::{seq::SliceRandom, SeedableRng};
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let grid = space_time_grid(&t, &locs, &y);
        let a = smoothed(&spatial_model(inducing, SpatialMode::InducingPoints), &grid);
        let b = smoothed(&spatial_model(perm, SpatialMode::InducingPoints), &grid);
        for (a, b) in a.iter().zip(&b) {
            prop_assert!((a.mean[0] - b.mean[0]).abs() < 1e-10);
            prop_assert!((a.cov[(0, 0)] - b.cov[(0, 0)]).abs() < 1e-10);
        }
    }

    #[test]
    fn fixed_grid_equals_inducing_points_at_data_locations((t, locs, y) in space_time_data()) {
        prop_assume!(distinct(&locs));
        let grid = space_time_grid(&t, &locs, &y);
        let a = smoothed(&spatial_model(locs.clone(), SpatialMode::FixedGrid), &grid);
        let b = smoothed(&spatial_model(locs, SpatialMode::InducingPoints), &grid);
        for (a, b) in a.iter().zip(&b) {
            prop_assert!((a.mean[0] - b.mean[0]).abs() < 1e-8);
            prop_assert!((a.cov[(0, 0)] - b.cov[(0, 0)]).abs() < 1e-8);
        }
    }
}
