mod common;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssep_core::environment::{sample_environment, ConductanceField};
use ssep_core::graphical::build_graphical;
use ssep_core::lattice::{TestFunction, Torus};
use ssep_core::walks::*;

#[test]
fn forward_matches_naive_scan_on_ten_thousand_queries() {
    let field = sample_environment(&flip_spec(2, 6, 5.0, 3, 0.8)).unwrap();
    let real = build_graphical(&field, 17);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10_000 {
        let x = rng.random_range(0..36);
        let a: f64 = rng.random_range(0.0..5.0);
        let b: f64 = rng.random_range(0.0..5.0);
        let (s, t) = if a <= b { (a, b) } else { (b, a) };
        assert_eq!(forward_position(&real, x, s, t).unwrap(), naive_forward(&real, x, s, t));
    }
}

#[test]
fn inversion_on_exhaustive_grids() {
    for (name, field) in all_kinds(1, 8, 3.0, 5).into_iter().chain(all_kinds(2, 4, 3.0, 6)) {
        for seed in 0..5 {
            let real = build_graphical(&field, seed);
            let grid: Vec<f64> = (0..=12).map(|i| i as f64 * 0.25).collect();
            for (i, &s) in grid.iter().enumerate() {
                for &t in &grid[i..] {
                    for y in 0..field.torus().num_sites() {
                        let x = backward_position(&real, y, s, t).unwrap();
                        assert_eq!(forward_position(&real, x, s, t).unwrap(), y, "{name} seed {seed} ({s}, {t}]");
                    }
                }
            }
        }
    }
}

#[test]
fn forward_positions_compose() {
    let field = sample_environment(&piecewise_spec(1, 8, 4.0, 2)).unwrap();
    let real = build_graphical(&field, 8);
    for x in 0..8 {
        for &(s, r, t) in &[(0.0, 1.0, 4.0), (0.5, 0.5, 3.0), (1.2, 2.7, 2.7)] {
            let mid = forward_position(&real, x, s, r).unwrap();
            assert_eq!(forward_position(&real, mid, r, t).unwrap(), forward_position(&real, x, s, t).unwrap());
        }
    }
}

#[test]
fn kernels_agree_with_dense_exponential_products() {
    for (name, field) in all_kinds(1, 8, 4.0, 11) {
        for &(s, t) in &[(0.0, 0.3), (0.7, 3.1), (0.0, 4.0)] {
            let k = kernel_forward(&field, s, t, DEFAULT_TOL).unwrap();
            let dense = dense_kernel(&field, s, t);
            assert!(max_abs_diff(&k.matrix, &dense) < 1e-10, "{name} ({s}, {t})");
        }
    }
}

#[test]
fn chapman_kolmogorov_at_breakpoints() {
    let field = sample_environment(&piecewise_spec(1, 10, 5.0, 4)).unwrap();
    let bps = field.breakpoints();
    for &r in &bps[1..bps.len() - 1] {
        let full = kernel_forward(&field, 0.0, 5.0, DEFAULT_TOL).unwrap();
        let a = kernel_forward(&field, 0.0, r, DEFAULT_TOL).unwrap();
        let b = kernel_forward(&field, r, 5.0, DEFAULT_TOL).unwrap();
        assert!(max_abs_diff(&full.matrix, &a.matrix.dot(&b.matrix)) < 1e-10);
    }
}

#[test]
fn backward_kernel_is_the_transpose_and_pairs() {
    let field = sample_environment(&flip_spec(2, 4, 3.0, 9, 1.5)).unwrap();
    let fwd = kernel_forward(&field, 0.4, 2.9, DEFAULT_TOL).unwrap();
    let bwd = kernel_backward(&field, 0.4, 2.9, DEFAULT_TOL).unwrap();
    for x in 0..16 {
        for y in 0..16 {
            assert_eq!(fwd.get(x, y), bwd.get(y, x));
        }
    }
    assert!(bwd.max_row_sum_deviation() < 1e-10);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let sf = semigroup_apply(&field, 0.4, 2.9, &f, DEFAULT_TOL).unwrap();
    let sg = backward_semigroup_apply(&field, 0.4, 2.9, &g, DEFAULT_TOL).unwrap();
    let lhs: f64 = sf.iter().zip(&g).map(|(a, b)| a * b).sum();
    let rhs: f64 = f.iter().zip(&sg).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10);
    // the vector semigroups agree with the matrices
    let kf = fwd.apply(&f);
    assert!(kf.iter().zip(&sf).all(|(a, b)| (a - b).abs() < 1e-10));
    let kg = bwd.apply(&g);
    assert!(kg.iter().zip(&sg).all(|(a, b)| (a - b).abs() < 1e-10));
}

#[test]
fn semigroup_contracts_the_dictionary() {
    let field = sample_environment(&flip_spec(2, 8, 2.0, 1, 1.0)).unwrap();
    for (name, g) in TestFunction::dictionary(2, 2) {
        let vals = g.sample_on(field.torus());
        let out = semigroup_apply(&field, 0.0, 2.0, &vals, DEFAULT_TOL).unwrap();
        let norm = |v: &[f64]| v.iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(norm(&out) <= norm(&vals) + 1e-12, "{name}");
    }
}

#[test]
fn strong_continuity_trend() {
    let field = sample_environment(&piecewise_spec(1, 16, 1.0, 3)).unwrap();
    let f = TestFunction::cos(&[2]).sample_on(field.torus());
    let errs: Vec<f64> = [0.1, 0.01, 0.001]
        .iter()
        .map(|&h| {
            let out = semigroup_apply(&field, 0.2, 0.2 + h, &f, DEFAULT_TOL).unwrap();
            out.iter().zip(&f).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        })
        .collect();
    assert!(errs[0] > errs[1] && errs[1] > errs[2] && errs[2] < 1e-2, "{errs:?}");
}

#[test]
fn generator_is_the_first_order_derivative() {
    let field = sample_environment(&static_spec(1, 12, 1.0, 2)).unwrap();
    let f = TestFunction::sin(&[1]).sample_on(field.torus());
    let af = generator_apply(&field, 0.3, &f, Side::RightLimit).unwrap();
    let mut errs = Vec::new();
    for h in [1e-2, 1e-3, 1e-4] {
        let out = semigroup_apply(&field, 0.3, 0.3 + h, &f, DEFAULT_TOL).unwrap();
        let err = out.iter().zip(&f).zip(&af).map(|((o, v), a)| ((o - v) / h - a).abs()).fold(0.0, f64::max);
        errs.push(err);
    }
    // first order: each tenfold reduction of h shrinks the error about tenfold
    assert!(errs[1] < errs[0] / 5.0 && errs[2] < errs[1] / 5.0, "{errs:?}");
}

#[test]
fn two_site_kernel_from_monte_carlo() {
    let field = ConductanceField::constant(Torus::new(1, 2).unwrap(), 1.0, 1.0).unwrap();
    let samples = 100_000;
    let freq = empirical_kernel(&field, 0.0, 0.5, samples, 21).unwrap();
    let p = 0.5 * (1.0 + (-1.0f64).exp());
    let se = (p * (1.0 - p) / samples as f64).sqrt();
    assert!((freq[[0, 0]] - p).abs() < 3.0 * se, "{}", freq[[0, 0]]);
    assert!((freq[[0, 0]] - 0.6839).abs() < 0.005);
}

#[test]
fn empirical_kernel_on_a_random_piecewise_field() {
    let field = sample_environment(&piecewise_spec(1, 8, 1.5, 12)).unwrap();
    let samples = 100_000;
    let freq = empirical_kernel(&field, 0.2, 1.5, samples, 5).unwrap();
    let k = kernel_forward(&field, 0.2, 1.5, DEFAULT_TOL).unwrap();
    let mut worst = 0.0f64;
    for x in 0..8 {
        for y in 0..8 {
            let p = k.get(x, y);
            let diff = (freq[[x, y]] - p).abs();
            worst = worst.max(diff);
            // 4.5 sigma per cell keeps the 64-cell family-wise false alarm rate negligible
            assert!(diff <= 4.5 * (p * (1.0 - p) / samples as f64).sqrt() + 1e-12, "cell ({x}, {y})");
        }
    }
    assert!(worst < 0.01);
}

#[test]
fn kernel_csv_has_one_line_per_site() {
    let field = ConductanceField::constant(Torus::new(1, 3).unwrap(), 1.0, 1.0).unwrap();
    let k = kernel_forward(&field, 0.0, 1.0, DEFAULT_TOL).unwrap();
    let mut buf = Vec::new();
    k.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().all(|l| l.split(',').count() == 3));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_triples_satisfy_kernel_identities(seed in 0u64..1000, a in 0.0f64..3.0, b in 0.0f64..3.0, c in 0.0f64..3.0) {
        let mut v = [a, b, c];
        v.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let [s, r, t] = v;
        let field = sample_environment(&flip_spec(1, 10, 3.0, seed, 1.0)).unwrap();
        let st = kernel_forward(&field, s, t, DEFAULT_TOL).unwrap();
        let sr = kernel_forward(&field, s, r, DEFAULT_TOL).unwrap();
        let rt = kernel_forward(&field, r, t, DEFAULT_TOL).unwrap();
        prop_assert!(max_abs_diff(&st.matrix, &sr.matrix.dot(&rt.matrix)) < 1e-10);
        prop_assert!(st.max_row_sum_deviation() < 1e-10);
        prop_assert!(st.max_column_sum_deviation() < 1e-10);
        prop_assert!(st.min_entry() > -1e-15);
    }

    #[test]
    fn backward_walks_invert_forward_walks(seed in 0u64..10_000, s in 0.0f64..2.0, len in 0.0f64..2.0) {
        let field = sample_environment(&piecewise_spec(2, 4, 4.0, seed)).unwrap();
        let real = build_graphical(&field, seed);
        let t = s + len;
        let map = forward_map(&real, s, t).unwrap();
        for y in 0..16 {
            let x = backward_position(&real, y, s, t).unwrap();
            prop_assert_eq!(map[x], y);
        }
    }
}
