mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ssep_core::environment::{sample_environment, ConductanceField, EnvironmentKind, EnvironmentSpec};
use ssep_core::exclusion::Configuration;
use ssep_core::hydro::*;
use ssep_core::lattice::{TestFunction, Torus};
use ssep_core::stats::Moments;
use std::f64::consts::PI;

fn unit_static(dim: usize, side: usize, horizon: f64) -> EnvironmentSpec {
    EnvironmentSpec::new(dim, side, 1.0, horizon, 0, EnvironmentKind::Static { levels: vec![1.0] })
}

fn constant_field(dim: usize, n: usize, t_macro: f64) -> ConductanceField {
    ConductanceField::constant(Torus::new(dim, n).unwrap(), 1.0, t_macro * (n * n) as f64).unwrap()
}

/// `int rho0 * (S_t G)` by a midpoint rule, exact for trigonometric polynomials of low degree.
fn midpoint_pairing(rho0: impl Fn(f64, f64) -> f64, g_t: impl Fn(f64, f64) -> f64) -> f64 {
    let m = 64;
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..m {
            let (u, v) = ((i as f64 + 0.5) / m as f64, (j as f64 + 0.5) / m as f64);
            total += rho0(u, v) * g_t(u, v);
        }
    }
    total / (m * m) as f64
}

#[test]
fn heat_reference_against_quadrature_with_anisotropic_sigma() {
    let sigma = CovarianceMatrix::new(vec![vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
    let rho0 = DensityProfile::cosine(&[1, 1], 0.5, 0.3).unwrap();
    let g = TestFunction::cos(&[1, 1]);
    let t = 0.01;
    let w = [2.0 * PI, 2.0 * PI];
    let quad = w[0] * w[0] * 2.0 + 2.0 * w[0] * w[1] * 0.5 + w[1] * w[1] * 1.0;
    let decay = (-0.5 * t * quad).exp();
    let expect = midpoint_pairing(
        |u, v| 0.5 + 0.3 * (2.0 * PI * (u + v)).cos(),
        |u, v| decay * (2.0 * PI * (u + v)).cos(),
    );
    let got = heat_reference(&rho0, &sigma, &g, t, 4).unwrap();
    assert!((got.value - expect).abs() < 1e-12, "{} vs {expect}", got.value);
    assert!(got.truncation < 1e-15);
}

#[test]
fn heat_reference_is_permutation_symmetric() {
    let sigma = CovarianceMatrix::new(vec![vec![3.0, 0.4], vec![0.4, 1.0]]).unwrap();
    let swapped = sigma.permuted(&[1, 0]);
    assert_eq!(swapped.get(0, 0), 1.0);
    for t in [0.0, 0.003, 0.02] {
        let a = heat_reference(&DensityProfile::cosine(&[1, 2], 0.5, 0.2).unwrap(), &sigma, &TestFunction::cos(&[1, 2]), t, 3).unwrap();
        let b = heat_reference(&DensityProfile::cosine(&[2, 1], 0.5, 0.2).unwrap(), &swapped, &TestFunction::cos(&[2, 1]), t, 3).unwrap();
        assert!((a.value - b.value).abs() < 1e-15);
    }
}

#[test]
fn weak_form_residual_for_a_wrapped_gaussian() {
    let rho0 = DensityProfile::cosine(&[1], 0.5, 0.4).unwrap();
    let g = TestFunction::WrappedGaussian { center: vec![0.3], width: 0.1, amplitude: 1.0 };
    let sigma = CovarianceMatrix::isotropic(1, 2.0).unwrap();
    let coarse: Vec<f64> = (0..=20).map(|i| i as f64 * 0.005).collect();
    let fine: Vec<f64> = (0..=80).map(|i| i as f64 * 0.00125).collect();
    let rc = weak_form_residual(&rho0, &g, &sigma, &coarse, 20).unwrap();
    let rf = weak_form_residual(&rho0, &g, &sigma, &fine, 20).unwrap();
    // trapezoid rule: second order in the grid step
    assert!(rf < rc / 8.0 && rf < 1e-5, "{rc} {rf}");
}

#[test]
fn sigma_for_unit_static_conductances_is_twice_the_identity() {
    for dim in [1, 2] {
        let est = estimate_sigma(&unit_static(dim, 16, 1.0), 16, 0.05, 20_000, 3).unwrap();
        assert!(!est.degenerate);
        for i in 0..dim {
            assert!((est.estimate[i][i] - 2.0).abs() < 4.5 * est.stderr[i][i] + 0.02, "{est:?}");
            for j in 0..i {
                assert!(est.estimate[i][j].abs() < 4.5 * est.stderr[i][j] + 0.02);
            }
        }
        assert!(est.covariance().is_ok());
    }
}

#[test]
fn sigma_scales_with_a_homogeneous_level() {
    let spec = EnvironmentSpec::new(1, 16, 3.0, 1.0, 0, EnvironmentKind::Static { levels: vec![3.0] });
    let est = estimate_sigma(&spec, 16, 0.05, 20_000, 8).unwrap();
    assert!((est.estimate[0][0] - 6.0).abs() < 4.5 * est.stderr[0][0] + 0.05, "{est:?}");
}

#[test]
fn walkers_from_different_starts_share_a_law() {
    let n = 16;
    let field = constant_field(1, n, 0.05);
    let sigma = CovarianceMatrix::isotropic(1, 2.0).unwrap();
    let t_grid = [0.01, 0.05];
    let a = arbitrary_start_check(&field, n, &[0.0], &t_grid, 4000, &sigma, 1).unwrap();
    let b = arbitrary_start_check(&field, n, &[0.4], &t_grid, 4000, &sigma, 2).unwrap();
    assert_ne!(a.start_site, b.start_site);
    assert!(a.elliptic);
    for (_, _, d, p) in compare_starts(&a, &b) {
        assert!(p > 1e-3, "D = {d}, p = {p}");
    }
    for row in a.rows.iter().chain(&b.rows) {
        // lattice effects at N = 16 keep the distance away from zero
        assert!(row.ks_distance < 0.1, "{row:?}");
    }
}

#[test]
fn semigroup_error_shrinks_with_scale() {
    let g = TestFunction::cos(&[1]);
    let sigma = CovarianceMatrix::isotropic(1, 2.0).unwrap();
    let errs: Vec<f64> = [8, 16, 32]
        .iter()
        .map(|&n| semigroup_errors(&constant_field(1, n, 0.05), n, &g, &sigma, 0.0, 0.05).unwrap().sup)
        .collect();
    assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    // the lattice mode decays as exp(-2 t N^2 (1 - cos(2 pi / N))), an O(N^-2) discrepancy
    let exact = |n: f64| ((-2.0 * 0.05 * n * n * (1.0 - (2.0 * PI / n).cos())).exp() - (-0.05 * 4.0 * PI * PI).exp()).abs();
    for (e, n) in errs.iter().zip([8.0, 16.0, 32.0]) {
        assert!((e - exact(n)).abs() < 1e-10, "{e} vs {}", exact(n));
    }
}

#[test]
fn mean_field_identity_and_variance_bound() {
    let n = 12;
    let spec = EnvironmentSpec::new(1, n, 2.0, 0.02 * 144.0, 5, EnvironmentKind::MarkovFlip { low: 1.0, high: 2.0, gamma: 1.0 });
    let field = sample_environment(&spec.with_ellipticity(1.0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let eta0 = Configuration::bernoulli(n, |x| if x < n / 2 { 0.9 } else { 0.1 }, &mut rng);
    let g = TestFunction::cos(&[1]);
    let replicas = 4000;
    let xs = field_samples(&field, n, &g, &eta0, 0.02, replicas, 7).unwrap();
    let m = Moments::from_slice(&xs);
    let predicted = mean_field_prediction(&field, n, &g, &eta0, 0.02).unwrap();
    assert!((m.mean - predicted).abs() < 4.5 * m.std_error(), "{} vs {predicted}", m.mean);
    let check = noise_variance_check(&field, n, &g, &eta0, 0.02, replicas, 7).unwrap();
    assert!(check.passed, "{check:?}");
    assert!((check.mean - m.mean).abs() < 1e-15);
}

#[test]
fn flat_profile_experiment() {
    let config = HydroConfig {
        environment: unit_static(1, 8, 1.0),
        scales: vec![8, 16],
        profile: DensityProfile::flat(1, 0.5).unwrap(),
        functions: vec![("cos".into(), TestFunction::cos(&[1])), ("one".into(), TestFunction::constant(1, 1.0))],
        t_grid: vec![0.0, 0.01, 0.02],
        replicas: 200,
        deltas: vec![0.05, 10.0],
        sigma: None,
        seed: 4,
    };
    let report = hydro_experiment(&config).unwrap();
    assert_eq!(report.sigma, CovarianceMatrix::isotropic(1, 2.0).unwrap());
    for n in [8, 16] {
        let s = report.summary(n, "cos").unwrap();
        assert_eq!(s.exceedance[1], (10.0, 0.0));
        // sup over three times of |X(G)| for iid Bernoulli(1/2): a few standard deviations of 1/(2 sqrt(2N))
        assert!(s.mean_sup_error < 3.0 / (2.0 * (2.0 * n as f64).sqrt()), "{s:?}");
        // the particle number is conserved, so the error against G = 1 is constant in time
        for t in report.trajectories.iter().filter(|t| t.n == n && t.function == "one") {
            assert!(t.values.iter().all(|v| (v - t.values[0]).abs() < 1e-15));
        }
    }
    assert_eq!(report.trajectories.len(), 2 * 2 * 200);
    let mut buf = Vec::new();
    report.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("N,G,t,stat,value,stderr"));
    assert!(text.contains("exceedance_10"));
}

#[test]
fn dynamic_experiments_need_a_covariance() {
    let mut config = HydroConfig {
        environment: EnvironmentSpec::new(1, 8, 2.0, 1.0, 0, EnvironmentKind::MarkovFlip { low: 1.0, high: 2.0, gamma: 1.0 }),
        scales: vec![8],
        profile: DensityProfile::flat(1, 0.5).unwrap(),
        functions: vec![("cos".into(), TestFunction::cos(&[1]))],
        t_grid: vec![0.0, 0.01],
        replicas: 4,
        deltas: vec![],
        sigma: None,
        seed: 0,
    };
    assert!(matches!(hydro_experiment(&config), Err(ssep_core::Error::Pipeline(_))));
    config.sigma = Some(CovarianceMatrix::isotropic(1, 2.5).unwrap());
    assert!(hydro_experiment(&config).is_ok());
}

#[test]
fn kernel_spread_doubles_when_time_quadruples() {
    let n = 32;
    let field = constant_field(1, n, 0.01);
    let short = kernel_decay_fit(&field, n, 0.0, 0.001).unwrap();
    let long = kernel_decay_fit(&field, n, 0.0, 0.004).unwrap();
    let ratio = long.length_scale / short.length_scale;
    assert!((ratio - 2.0).abs() < 0.1, "{ratio}");
    assert!((short.length_scale - (2.0f64 * 0.001).sqrt()).abs() < 0.005);
    assert!(short.slope.unwrap() < 0.0 && !short.saturated);
}

#[test]
fn continuity_exponent_is_positive() {
    let n = 16;
    let field = constant_field(1, n, 0.1);
    let g = TestFunction::sin(&[1]);
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|x| [(x, x), (x, (x + 1) % n), (x, (x + 3) % n)]).collect();
    let fit = hoelder_diagnostic(&field, n, &g, 0.0, 0.02, &[0.0, 0.001, 0.004, 0.016], &pairs).unwrap();
    assert!(fit.gamma.unwrap() > 0.0, "{fit:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn semigroup_error_is_monotone_in_time(t1 in 0.001f64..0.012, dt in 0.001f64..0.012) {
        // for a single mode both semigroups act diagonally, so the gap of the two decays is unimodal;
        // before its peak near t = 0.025 it grows
        let n = 16;
        let field = constant_field(1, n, 0.2);
        let g = TestFunction::cos(&[1]);
        let sigma = CovarianceMatrix::isotropic(1, 2.0).unwrap();
        let a = semigroup_errors(&field, n, &g, &sigma, 0.0, t1).unwrap();
        let b = semigroup_errors(&field, n, &g, &sigma, 0.0, t1 + dt).unwrap();
        prop_assert!(b.sup >= a.sup - 1e-12);
        prop_assert!(a.mean <= a.sup + 1e-15);
    }

    #[test]
    fn empirical_field_is_bounded(seed in 0u64..1000, k in 1i64..4) {
        let torus = Torus::new(2, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eta = Configuration::bernoulli(36, |_| 0.5, &mut rng);
        let g = TestFunction::cos(&[k, 1]);
        let x = empirical_field(&torus, &eta, &g, 6).unwrap();
        prop_assert!(x.abs() <= field_bound(&torus, &g) + 1e-15);
    }
}
