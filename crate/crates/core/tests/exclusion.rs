mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ssep_core::environment::{sample_environment, ConductanceField};
use ssep_core::exclusion::*;
use ssep_core::graphical::build_graphical;
use ssep_core::lattice::Torus;
use ssep_core::walks::backward_position;

fn random_config(n: usize, seed: u64) -> Configuration {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Configuration::bernoulli(n, |_| 0.5, &mut rng)
}

/// Stirring by applying every mark of the window in time order.
fn naive_stir(real: &ssep_core::graphical::GraphicalRealization, eta0: &Configuration, t: f64) -> Configuration {
    let torus = real.torus();
    let mut all: Vec<(f64, usize)> = Vec::new();
    for b in 0..torus.num_bonds() {
        all.extend(real.events(b).iter().filter(|&&s| s <= t).map(|&s| (s, b)));
    }
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut eta = eta0.clone();
    for (_, b) in all {
        let bond = torus.bond(b);
        eta.swap(bond.a, bond.b);
    }
    eta
}

#[test]
fn stirring_matches_a_naive_replay() {
    for (name, field) in all_kinds(2, 5, 3.0, 2) {
        let real = build_graphical(&field, 3);
        let eta0 = random_config(25, 1);
        for t in [0.0, 0.5, 1.7, 3.0] {
            assert_eq!(stir(&real, &eta0, t).unwrap(), naive_stir(&real, &eta0, t), "{name} t={t}");
        }
    }
}

#[test]
fn trajectory_snapshots_match_direct_stirring() {
    let field = sample_environment(&flip_spec(1, 12, 2.0, 5, 1.0)).unwrap();
    let real = build_graphical(&field, 9);
    let eta0 = random_config(12, 3);
    let times = [0.0, 0.25, 0.25, 1.0, 2.0];
    let traj = record_trajectory(&real, &eta0, &times).unwrap();
    for (t, snap) in times.iter().zip(&traj.snapshots) {
        assert_eq!(snap, &stir(&real, &eta0, *t).unwrap());
        assert_eq!(snap.particles(), eta0.particles());
    }
    let mut buf = Vec::new();
    traj.write_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 5 * 12);
}

#[test]
fn mild_identity_holds_pathwise() {
    for (name, field) in all_kinds(1, 6, 1.0, 4) {
        for seed in 0..3 {
            let real = build_graphical(&field, seed);
            let eta0 = random_config(6, seed + 10);
            for x in 0..6 {
                let d = mild_decomposition(&real, &field, &eta0, x, 1.0, 1e-10).unwrap();
                assert!(d.residual().abs() <= 1e-8, "{name} seed {seed} x {x}: {d:?}");
                assert!((d.noise - (d.jumps + d.compensator)).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn mild_identity_in_two_dimensions() {
    let field = sample_environment(&piecewise_spec(2, 3, 0.5, 7)).unwrap();
    let real = build_graphical(&field, 2);
    let eta0 = random_config(9, 2);
    for x in 0..9 {
        assert!(mild_residual(&real, &field, &eta0, x, 0.5, 1e-10).unwrap().abs() <= 1e-8);
    }
}

#[test]
fn noise_vanishes_for_constant_configurations() {
    let field = sample_environment(&flip_spec(1, 8, 1.0, 1, 1.0)).unwrap();
    let real = build_graphical(&field, 1);
    for eta0 in [Configuration::empty(8), Configuration::full(8)] {
        let d = mild_decomposition(&real, &field, &eta0, 3, 1.0, 1e-10).unwrap();
        assert_eq!(d.noise, 0.0);
        assert!((d.drift - eta0.get(0) as f64).abs() < 1e-12);
    }
}

#[test]
fn mean_occupation_against_monte_carlo() {
    let field = sample_environment(&piecewise_spec(1, 8, 1.0, 6)).unwrap();
    let eta0 = Configuration::new(vec![1, 1, 1, 0, 0, 0, 0, 0]).unwrap();
    let replicas = 20_000;
    let mut counts = vec![0usize; 8];
    for r in 0..replicas {
        let real = build_graphical(&field, 1000 + r as u64);
        let eta = stir(&real, &eta0, 1.0).unwrap();
        for (c, &b) in counts.iter_mut().zip(eta.bits()) {
            *c += b as usize;
        }
    }
    let mean = mean_profile(&field, &eta0, 1.0).unwrap();
    for x in 0..8 {
        let p = mean[x];
        let freq = counts[x] as f64 / replicas as f64;
        let se = (p * (1.0 - p) / replicas as f64).sqrt();
        assert!((freq - p).abs() <= 4.5 * se + 1e-9, "site {x}: {freq} vs {p}");
    }
    assert!((mean_occupation(&field, &eta0, 4, 1.0).unwrap() - mean[4]).abs() < 1e-15);
    assert!((mean.iter().sum::<f64>() - 3.0).abs() < 1e-10);
}

#[test]
fn configurations_round_trip_through_text() {
    let eta = random_config(40, 8);
    let mut buf = Vec::new();
    eta.write_to(&mut buf).unwrap();
    assert_eq!(Configuration::read_from(&buf[..]).unwrap(), eta);
    assert_eq!("01 10\n".parse::<Configuration>().unwrap().bits(), &[0, 1, 1, 0]);
    assert!("01x".parse::<Configuration>().is_err());
    assert!(Configuration::new(vec![0, 2]).is_err());
    assert!(eta.check_for(&Torus::new(1, 41).unwrap()).is_err());
}

#[test]
fn occupation_requires_time_inside_horizon() {
    let field = ConductanceField::constant(Torus::new(1, 4).unwrap(), 1.0, 1.0).unwrap();
    let real = build_graphical(&field, 0);
    assert!(stir(&real, &Configuration::empty(4), 1.5).is_err());
    assert!(stir(&real, &Configuration::empty(5), 0.5).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn duality_and_conservation(seed in 0u64..5000, t in 0.0f64..2.0) {
        let field = sample_environment(&flip_spec(2, 4, 2.0, seed, 1.0)).unwrap();
        let real = build_graphical(&field, seed);
        let eta0 = random_config(16, seed);
        let eta = stir(&real, &eta0, t).unwrap();
        prop_assert_eq!(eta.particles(), eta0.particles());
        for x in 0..16 {
            prop_assert_eq!(eta.get(x), occupation_via_duality(&real, &eta0, x, t).unwrap());
            prop_assert_eq!(eta.get(x), eta0.get(backward_position(&real, x, 0.0, t).unwrap()));
        }
    }

    #[test]
    fn mild_residual_is_small(seed in 0u64..5000, x in 0usize..5) {
        let field = sample_environment(&flip_spec(1, 5, 0.8, seed, 2.0)).unwrap();
        let real = build_graphical(&field, seed);
        let eta0 = random_config(5, seed ^ 77);
        let r = mild_residual(&real, &field, &eta0, x, 0.8, 1e-10).unwrap();
        prop_assert!(r.abs() <= 1e-8, "residual {}", r);
    }
}
