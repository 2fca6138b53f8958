#![allow(dead_code)]

use ndarray::Array2;
use ssep_core::environment::{sample_environment, ConductanceField, EnvironmentKind, EnvironmentSpec};
use ssep_core::graphical::GraphicalRealization;
use ssep_core::lattice::Torus;
use ssep_core::tightness::StepPath;

/// Dense generator matrix for the given bond rates.
pub fn generator_matrix(torus: &Torus, rates: &[f64]) -> Array2<f64> {
    let n = torus.num_sites();
    let mut a = Array2::<f64>::zeros((n, n));
    for (bond, &r) in torus.bonds().iter().zip(rates) {
        a[[bond.a, bond.b]] += r;
        a[[bond.b, bond.a]] += r;
        a[[bond.a, bond.a]] -= r;
        a[[bond.b, bond.b]] -= r;
    }
    a
}

/// `exp(m)` by scaling and squaring with a Taylor polynomial.
pub fn expm_dense(m: &Array2<f64>) -> Array2<f64> {
    let n = m.nrows();
    let norm = m.rows().into_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let mut squarings = 0;
    let mut scale = 1.0;
    while norm * scale > 0.5 {
        scale *= 0.5;
        squarings += 1;
    }
    let x = m * scale;
    let mut term = Array2::<f64>::eye(n);
    let mut sum = Array2::<f64>::eye(n);
    for k in 1..=30 {
        term = term.dot(&x) / k as f64;
        sum = sum + &term;
    }
    for _ in 0..squarings {
        sum = sum.dot(&sum);
    }
    sum
}

/// Kernel `p_{s,t}` as a dense product of per-piece exponentials.
pub fn dense_kernel(field: &ConductanceField, s: f64, t: f64) -> Array2<f64> {
    let torus = field.torus();
    let grid = field.piece_grid(s, t);
    let mut k = Array2::<f64>::eye(torus.num_sites());
    for w in grid.windows(2) {
        if w[1] > w[0] {
            let a = generator_matrix(torus, &field.rates_at(w[0])) * (w[1] - w[0]);
            k = k.dot(&expm_dense(&a));
        }
    }
    k
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().map(|v| v.abs()).fold(0.0, f64::max)
}

/// Forward position by scanning the per-bond event lists, no shared timeline.
pub fn naive_forward(real: &GraphicalRealization, x: usize, s: f64, t: f64) -> usize {
    let torus = real.torus();
    let mut all: Vec<(f64, usize)> = Vec::new();
    for b in 0..torus.num_bonds() {
        for &time in real.events(b) {
            if time > s && time <= t {
                all.push((time, b));
            }
        }
    }
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut pos = x;
    for (_, b) in all {
        let bond = torus.bond(b);
        if bond.a == pos {
            pos = bond.b;
        } else if bond.b == pos {
            pos = bond.a;
        }
    }
    pos
}

pub fn static_spec(dim: usize, side: usize, horizon: f64, seed: u64) -> EnvironmentSpec {
    EnvironmentSpec::new(dim, side, 2.0, horizon, seed, EnvironmentKind::Static { levels: vec![0.5, 1.0, 2.0] })
}

pub fn piecewise_spec(dim: usize, side: usize, horizon: f64, seed: u64) -> EnvironmentSpec {
    EnvironmentSpec::new(
        dim,
        side,
        3.0,
        horizon,
        seed,
        EnvironmentKind::PiecewiseDeterministic { switch_times: vec![], period: Some(horizon / 5.0), levels: vec![0.5, 1.5, 3.0], randomize: true },
    )
}

pub fn flip_spec(dim: usize, side: usize, horizon: f64, seed: u64, gamma: f64) -> EnvironmentSpec {
    EnvironmentSpec::new(dim, side, 2.0, horizon, seed, EnvironmentKind::MarkovFlip { low: 0.5, high: 2.0, gamma })
}

/// One environment of each kind on the given lattice.
pub fn all_kinds(dim: usize, side: usize, horizon: f64, seed: u64) -> Vec<(&'static str, ConductanceField)> {
    vec![
        ("static", sample_environment(&static_spec(dim, side, horizon, seed)).unwrap()),
        ("piecewise", sample_environment(&piecewise_spec(dim, side, horizon, seed)).unwrap()),
        ("markov_flip", sample_environment(&flip_spec(dim, side, horizon, seed, 1.0)).unwrap()),
    ]
}

/// w''' by exhaustive search over split and window endpoints placed at, just
/// before and just after every breakpoint and its delta-shifts. The left half
/// of a split is `[s, r)`, the right half `[r, t]`.
pub fn brute_force_w3(z: &StepPath, delta: f64) -> f64 {
    let t_end = z.horizon();
    let eta = 1e-9;
    let mut pts = vec![0.0, t_end, delta, t_end - delta];
    for &tau in z.times() {
        for base in [tau, tau - delta, tau + delta] {
            for off in [-eta, 0.0, eta] {
                pts.push(base + off);
            }
        }
    }
    for off in [-eta, 0.0] {
        pts.push(t_end + off);
        pts.push(t_end - delta + off);
    }
    pts.retain(|&p| (0.0..=t_end).contains(&p));
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    let val = |t: f64| z.value_at(t).unwrap();
    let osc = |vals: &[f64]| {
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        hi - lo
    };
    // oscillation over [a, b) and [a, b]
    let left = |a: f64, b: f64| {
        let mut v = vec![val(a)];
        v.extend(z.times().iter().filter(|&&x| x > a && x < b).map(|&x| val(x)));
        osc(&v)
    };
    let right = |a: f64, b: f64| {
        let mut v = vec![val(a), val(b)];
        v.extend(z.times().iter().filter(|&&x| x > a && x <= b).map(|&x| val(x)));
        osc(&v)
    };
    // one split candidate per open gap between consecutive points
    let mids: Vec<f64> = pts.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    let splits: Vec<f64> = {
        let mut v: Vec<f64> = pts.iter().chain(&mids).copied().collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    };
    let mut best = 0.0f64;
    for (i, &s) in pts.iter().enumerate() {
        for &t in &pts[i + 1..] {
            if t - s >= delta {
                break;
            }
            let mut inf = f64::INFINITY;
            // split in (s, t], never at the horizon itself
            for &r in splits.iter().filter(|&&r| r > s && r <= t && r < t_end) {
                inf = inf.min(left(s, r).max(right(r, t)));
            }
            if inf.is_finite() {
                best = best.max(inf);
            }
        }
    }
    let start = (val(delta) - val(0.0)).abs();
    let end = (z.left_limit_at_horizon() - val(t_end - delta)).abs();
    best.max(start).max(end)
}
