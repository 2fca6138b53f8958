//! Symmetric exclusion by stirring on the graphical realization, its pathwise
//! duality with the backward walks, and the mild-solution decomposition of the
//! occupation variables.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::Rng;

use crate::environment::ConductanceField;
use crate::error::{domain, Error, Result};
use crate::graphical::GraphicalRealization;
use crate::lattice::Torus;
use crate::walks::{backward_position, backward_semigroup_apply, expm_apply, generator_with_rates, DEFAULT_TOL};

/// Occupation numbers `eta(x)` in `{0, 1}`, indexed by site.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Configuration(Vec<u8>);

impl Configuration {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return domain(format!("occupation {b} is not 0 or 1"));
        }
        Ok(Self(bits))
    }

    pub fn empty(n: usize) -> Self {
        Self(vec![0; n])
    }

    pub fn full(n: usize) -> Self {
        Self(vec![1; n])
    }

    /// Independent occupations with `P(eta(x) = 1) = density(x)`.
    pub fn bernoulli<R: Rng>(n: usize, density: impl Fn(usize) -> f64, rng: &mut R) -> Self {
        Self((0..n).map(|x| u8::from(rng.random::<f64>() < density(x))).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, x: usize) -> u8 {
        self.0[x]
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn particles(&self) -> usize {
        self.0.iter().map(|&b| b as usize).sum()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| b as f64).collect()
    }

    pub fn swap(&mut self, x: usize, y: usize) {
        self.0.swap(x, y);
    }

    pub fn check_for(&self, torus: &Torus) -> Result<()> {
        if self.len() != torus.num_sites() {
            return domain(format!("configuration has {} sites, torus has {}", self.len(), torus.num_sites()));
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut s = String::new();
        r.read_to_string(&mut s)?;
        s.parse()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{self}")?;
        Ok(())
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b == 1 { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Bitstring of `0`/`1` characters in site order; whitespace is ignored.
impl FromStr for Configuration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(Error::Schema(format!("unexpected character {other:?} in configuration bitstring"))),
            })
            .collect::<Result<Vec<u8>>>()
            .map(Self)
    }
}

fn check_time(real: &GraphicalRealization, eta0: &Configuration, t: f64) -> Result<()> {
    real.check_window(0.0, t)?;
    eta0.check_for(real.torus())
}

/// Applies every swap of `(0, t]` in chronological order.
pub fn stir(real: &GraphicalRealization, eta0: &Configuration, t: f64) -> Result<Configuration> {
    check_time(real, eta0, t)?;
    let mut eta = eta0.clone();
    for ev in real.window(0.0, t) {
        let b = real.torus().bond(ev.bond as usize);
        eta.swap(b.a, b.b);
    }
    Ok(eta)
}

/// `eta0` evaluated at the backward walk from `(x, t)`.
pub fn occupation_via_duality(real: &GraphicalRealization, eta0: &Configuration, x: usize, t: f64) -> Result<u8> {
    check_time(real, eta0, t)?;
    Ok(eta0.get(backward_position(real, x, 0.0, t)?))
}

/// Snapshots of the stirring dynamics at increasing times.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleTrajectory {
    pub initial: Configuration,
    pub seed: u64,
    pub times: Vec<f64>,
    pub snapshots: Vec<Configuration>,
}

impl ParticleTrajectory {
    /// Long format: one `(time, site, occupancy)` row per site and snapshot.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["time", "site", "occupancy"])?;
        for (t, eta) in self.times.iter().zip(&self.snapshots) {
            for (x, b) in eta.bits().iter().enumerate() {
                out.write_record([t.to_string(), x.to_string(), b.to_string()])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Runs the stirring once through the timeline, recording at each of `times` (sorted).
pub fn record_trajectory(real: &GraphicalRealization, eta0: &Configuration, times: &[f64]) -> Result<ParticleTrajectory> {
    if times.windows(2).any(|w| w[1] < w[0]) {
        return domain("snapshot times must be sorted");
    }
    for &t in times {
        check_time(real, eta0, t)?;
    }
    let mut eta = eta0.clone();
    let mut snapshots = Vec::with_capacity(times.len());
    let timeline = real.timeline();
    let mut i = 0;
    for &t in times {
        while i < timeline.len() && timeline[i].time <= t {
            let b = real.torus().bond(timeline[i].bond as usize);
            eta.swap(b.a, b.b);
            i += 1;
        }
        snapshots.push(eta.clone());
    }
    Ok(ParticleTrajectory { initial: eta0.clone(), seed: real.seed(), times: times.to_vec(), snapshots })
}

// 8-point Gauss-Legendre rule on [-1, 1].
const GL_NODES: [f64; 4] = [0.183_434_642_495_649_8, 0.525_532_409_916_329_0, 0.796_666_477_413_626_7, 0.960_289_856_497_536_3];
const GL_WEIGHTS: [f64; 4] = [0.362_683_783_378_362_0, 0.313_706_645_877_887_3, 0.222_381_034_453_374_5, 0.101_228_536_290_376_3];
const MAX_DEPTH: u32 = 40;

fn gauss_legendre(a: f64, b: f64, f: &mut impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
    let mut sum = 0.0;
    for (x, w) in GL_NODES.iter().zip(GL_WEIGHTS) {
        sum += w * (f(mid - half * x)? + f(mid + half * x)?);
    }
    Ok(half * sum)
}

/// Adaptive halving: accept a cell once the two halves agree with the whole within `tol`.
fn adaptive(a: f64, b: f64, whole: f64, tol: f64, depth: u32, f: &mut impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let m = 0.5 * (a + b);
    let left = gauss_legendre(a, m, f)?;
    let right = gauss_legendre(m, b, f)?;
    let err = (left + right - whole).abs();
    if err <= tol {
        return Ok(left + right);
    }
    if depth >= MAX_DEPTH {
        return Err(Error::Numerical(format!(
            "compensator quadrature on [{a}, {b}] stalled at error {err:e} (target {tol:e}) after {depth} halvings"
        )));
    }
    Ok(adaptive(a, m, left, 0.5 * tol, depth + 1, f)? + adaptive(m, b, right, 0.5 * tol, depth + 1, f)?)
}

/// Parts of the mild-solution identity at one site and time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MildDecomposition {
    /// `Ŝ_{0,t} eta0 (x)`.
    pub drift: f64,
    /// Sum over marks of the jump increments of the stochastic convolution.
    pub jumps: f64,
    /// Minus the integrated compensator.
    pub compensator: f64,
    /// `jumps + compensator`.
    pub noise: f64,
    /// `drift + noise`.
    pub mild: f64,
    /// `eta_t(x)` from the stirring dynamics.
    pub occupation: u8,
}

impl MildDecomposition {
    pub fn residual(&self) -> f64 {
        self.mild - self.occupation as f64
    }
}

/// Evaluates `int_0^t sum_y p̂_{r,t}(x, y) dM_r(eta_{r-}, y)` for one realization.
///
/// The row `p̂_{r,t}(x, .)` is carried backward from `r = t`, the configuration
/// is un-stirred mark by mark, and the compensator is integrated on every
/// inter-mark, inter-breakpoint cell where both are frozen.
pub fn mild_decomposition(
    real: &GraphicalRealization,
    field: &ConductanceField,
    eta0: &Configuration,
    x: usize,
    t: f64,
    quad_tol: f64,
) -> Result<MildDecomposition> {
    check_time(real, eta0, t)?;
    field.check_time(t)?;
    real.torus().check_site(x)?;
    if real.torus() != field.torus() {
        return domain("realization and field live on different tori");
    }
    if !(quad_tol > 0.0) {
        return domain(format!("quadrature tolerance must be positive, got {quad_tol}"));
    }
    let torus = field.torus();
    let n = torus.num_sites();
    let kernel_tol = (quad_tol * 1e-3).min(DEFAULT_TOL);

    let eta_t = stir(real, eta0, t)?;
    let occupation = eta_t.get(x);
    let mut eta = eta_t.to_f64();
    let events = real.window(0.0, t);

    let mut grid = field.piece_grid(0.0, t);
    grid.extend(events.iter().map(|e| e.time));
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let mut v = vec![0.0; n];
    v[x] = 1.0;
    let (mut jumps, mut compensator) = (0.0, 0.0);
    let mut k = events.len();
    for cell in grid.windows(2).rev() {
        let (r0, r1) = (cell[0], cell[1]);
        while k > 0 && events[k - 1].time >= r1 {
            k -= 1;
            let b = torus.bond(events[k].bond as usize);
            eta.swap(b.a, b.b);
            jumps += (v[b.a] - v[b.b]) * (eta[b.b] - eta[b.a]);
        }
        let h = r1 - r0;
        if h <= 0.0 {
            continue;
        }
        let rates = field.rates_at(r0);
        let drive = generator_with_rates(torus, &rates, &eta);
        if drive.iter().any(|&g| g != 0.0) {
            // p̂_{r1-u,t}(x, .) = exp(uA) v, and exp(uA) is symmetric
            let mut integrand = |u: f64| -> Result<f64> {
                let mut w = v.clone();
                expm_apply(torus, &rates, u, kernel_tol, &mut w)?;
                Ok(w.iter().zip(&drive).map(|(a, b)| a * b).sum())
            };
            let cell_tol = quad_tol * h / t;
            let whole = gauss_legendre(0.0, h, &mut integrand)?;
            compensator -= adaptive(0.0, h, whole, cell_tol, 0, &mut integrand)?;
        }
        expm_apply(torus, &rates, h, kernel_tol, &mut v)?;
    }
    let drift: f64 = v.iter().zip(eta0.bits()).map(|(p, &b)| p * b as f64).sum();
    let noise = jumps + compensator;
    Ok(MildDecomposition { drift, jumps, compensator, noise, mild: drift + noise, occupation })
}

pub fn noise_integral(
    real: &GraphicalRealization,
    field: &ConductanceField,
    eta0: &Configuration,
    x: usize,
    t: f64,
    quad_tol: f64,
) -> Result<f64> {
    Ok(mild_decomposition(real, field, eta0, x, t, quad_tol)?.noise)
}

/// `zeta_t(x) - eta_t(x)`; zero up to quadrature and truncation error.
pub fn mild_residual(
    real: &GraphicalRealization,
    field: &ConductanceField,
    eta0: &Configuration,
    x: usize,
    t: f64,
    quad_tol: f64,
) -> Result<f64> {
    Ok(mild_decomposition(real, field, eta0, x, t, quad_tol)?.residual())
}

/// `E[eta_t(x)] = Ŝ_{0,t} eta0 (x)`.
pub fn mean_occupation(field: &ConductanceField, eta0: &Configuration, x: usize, t: f64) -> Result<f64> {
    field.torus().check_site(x)?;
    Ok(mean_profile(field, eta0, t)?[x])
}

/// `E[eta_t(x)]` for every site.
pub fn mean_profile(field: &ConductanceField, eta0: &Configuration, t: f64) -> Result<Vec<f64>> {
    eta0.check_for(field.torus())?;
    backward_semigroup_apply(field, 0.0, t, &eta0.to_f64(), DEFAULT_TOL)
}
