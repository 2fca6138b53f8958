//! Empirical density fields under diffusive scaling and the periodic heat
//! equation they converge to.
//!
//! Clocks: functions taking `n` work with macroscopic times and convert with
//! `micro = macro * n^2`; the field passed in must live on the torus of side `n`
//! with a horizon covering the converted times.

use std::f64::consts::PI;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::{sample_environment, ConductanceField, EnvironmentSpec};
use crate::error::{domain, validation, Error, Result};
use crate::exclusion::{record_trajectory, stir, Configuration};
use crate::graphical::build_graphical_until;
use crate::lattice::{TestFunction, Torus, TrigPoly, MAX_DIM};
use crate::rng::{self, Purpose};
use crate::stats::{jackknife_se, ks_distance, ks_two_sample, linear_fit, normal_cdf, LinearFit, Moments};
use crate::walks::{kernel_forward, sample_walker, semigroup_apply, DEFAULT_TOL};

/// Truncation target used when a test function has to be projected on modes.
pub const PROJECTION_TOL: f64 = 1e-12;

/// Symmetric positive-definite `d x d` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceMatrix {
    pub entries: Vec<Vec<f64>>,
}

impl CovarianceMatrix {
    pub fn new(entries: Vec<Vec<f64>>) -> Result<Self> {
        let m = Self { entries };
        m.validate()?;
        Ok(m)
    }

    pub fn isotropic(dim: usize, value: f64) -> Result<Self> {
        Self::new((0..dim).map(|i| (0..dim).map(|j| if i == j { value } else { 0.0 }).collect()).collect())
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i][j]
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if !(1..=MAX_DIM).contains(&d) || self.entries.iter().any(|r| r.len() != d) {
            return validation(format!("covariance must be square with dimension 1..=3, got {d} rows"));
        }
        for i in 0..d {
            for j in 0..i {
                let (a, b) = (self.entries[i][j], self.entries[j][i]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return validation(format!("covariance not symmetric at ({i}, {j}): {a} vs {b}"));
                }
            }
        }
        // Cholesky succeeds iff positive definite
        let mut l = vec![vec![0.0; d]; d];
        for i in 0..d {
            for j in 0..=i {
                let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
                if i == j {
                    let v = self.entries[i][i] - s;
                    if !(v > 0.0) || !v.is_finite() {
                        return validation("covariance is not positive definite");
                    }
                    l[i][i] = v.sqrt();
                } else {
                    l[i][j] = (self.entries[i][j] - s) / l[j][j];
                }
            }
        }
        Ok(())
    }

    /// `k^T Sigma k`.
    pub fn quadratic(&self, k: &[f64]) -> f64 {
        let d = self.dim();
        (0..d).map(|i| (0..d).map(|j| k[i] * self.entries[i][j] * k[j]).sum::<f64>()).sum()
    }

    /// `O Sigma O^T` for the axis permutation `i -> perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let d = self.dim();
        let mut e = vec![vec![0.0; d]; d];
        for i in 0..d {
            for j in 0..d {
                e[perm[i]][perm[j]] = self.entries[i][j];
            }
        }
        Self { entries: e }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { entries: self.entries.iter().map(|r| r.iter().map(|v| v * c).collect()).collect() }
    }
}

/// Initial density profile `rho: unit torus -> [0, 1]`, a trigonometric polynomial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TrigPoly", into = "TrigPoly")]
pub struct DensityProfile {
    poly: TrigPoly,
}

impl TryFrom<TrigPoly> for DensityProfile {
    type Error = Error;

    fn try_from(poly: TrigPoly) -> Result<Self> {
        Self::new(poly)
    }
}

impl From<DensityProfile> for TrigPoly {
    fn from(p: DensityProfile) -> Self {
        p.poly
    }
}

impl DensityProfile {
    pub fn new(poly: TrigPoly) -> Result<Self> {
        poly.validate()?;
        let mean = poly.mean();
        let spread = poly.coefficient_l1() - mean.abs();
        if !(mean - spread >= 0.0 && mean + spread <= 1.0) {
            // coefficient bound inconclusive: check on a grid fine enough for the highest mode
            let per_axis = (16 * poly.max_mode().max(1)) as usize;
            let grid = TestFunction::Trig(poly.clone());
            let d = poly.dim;
            let mut u = vec![0.0; d];
            for idx in 0..per_axis.pow(d as u32) {
                let mut rest = idx;
                for ui in u.iter_mut() {
                    *ui = (rest % per_axis) as f64 / per_axis as f64;
                    rest /= per_axis;
                }
                let v = grid.eval(&u);
                if !(-1e-12..=1.0 + 1e-12).contains(&v) {
                    return validation(format!("density profile takes value {v} outside [0, 1] at {u:?}"));
                }
            }
        }
        Ok(Self { poly })
    }

    pub fn flat(dim: usize, value: f64) -> Result<Self> {
        Self::new(TrigPoly::constant(dim, value))
    }

    /// `c0 + amplitude * cos(2 pi k.u)`.
    pub fn cosine(k: &[i64], c0: f64, amplitude: f64) -> Result<Self> {
        Self::new(TrigPoly::constant(k.len(), c0).plus(&TrigPoly::cos_mode(k, amplitude)))
    }

    pub fn poly(&self) -> &TrigPoly {
        &self.poly
    }

    pub fn dim(&self) -> usize {
        self.poly.dim
    }

    pub fn eval(&self, u: &[f64]) -> f64 {
        self.poly.eval(u).clamp(0.0, 1.0)
    }
}

fn check_scale(torus: &Torus, n: usize) -> Result<()> {
    if torus.side() != n {
        return domain(format!("torus side {} does not match scale N = {n}", torus.side()));
    }
    Ok(())
}

/// `X^N(G) = N^{-d} sum_x G(x/N) eta(x)`.
pub fn empirical_field(torus: &Torus, eta: &Configuration, g: &TestFunction, n: usize) -> Result<f64> {
    check_scale(torus, n)?;
    eta.check_for(torus)?;
    Ok(pair_with_samples(eta, &g.sample_on(torus)))
}

fn pair_with_samples(eta: &Configuration, gvals: &[f64]) -> f64 {
    let sum: f64 = eta.bits().iter().zip(gvals).filter(|(&b, _)| b == 1).map(|(_, g)| g).sum();
    sum / gvals.len() as f64
}

/// `C_G = N^{-d} sum_x |G(x/N)|`, a bound on `|X^N(G)|`.
pub fn field_bound(torus: &Torus, g: &TestFunction) -> f64 {
    let vals = g.sample_on(torus);
    vals.iter().map(|v| v.abs()).sum::<f64>() / vals.len() as f64
}

/// Decay of mode `k` under the periodic heat semigroup with covariance `sigma`.
pub fn mode_decay(sigma: &CovarianceMatrix, k: &[i64], t: f64) -> f64 {
    let w: Vec<f64> = k.iter().map(|&v| 2.0 * PI * v as f64).collect();
    (-0.5 * t * sigma.quadratic(&w)).exp()
}

/// Spectral heat semigroup applied to a trigonometric polynomial.
pub fn heat_semigroup(poly: &TrigPoly, sigma: &CovarianceMatrix, t: f64) -> TrigPoly {
    poly.scale_modes(|k| mode_decay(sigma, k, t))
}

/// `1/2 div(Sigma grad G)` of a trigonometric polynomial.
pub fn heat_generator(poly: &TrigPoly, sigma: &CovarianceMatrix) -> TrigPoly {
    poly.scale_modes(|k| {
        let w: Vec<f64> = k.iter().map(|&v| 2.0 * PI * v as f64).collect();
        -0.5 * sigma.quadratic(&w)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HeatPairing {
    pub value: f64,
    /// Bound on the error from projecting `G` onto the retained modes.
    pub truncation: f64,
}

fn check_sigma(sigma: &CovarianceMatrix, dim: usize) -> Result<()> {
    sigma.validate()?;
    if sigma.dim() != dim {
        return domain(format!("covariance of dimension {} used in dimension {dim}", sigma.dim()));
    }
    Ok(())
}

/// `<rho_t, G> = <rho_0, S_t G>` on the unit torus, keeping modes `|k_i| <= modes`.
pub fn heat_reference(rho0: &DensityProfile, sigma: &CovarianceMatrix, g: &TestFunction, t: f64, modes: i64) -> Result<HeatPairing> {
    check_sigma(sigma, rho0.dim())?;
    if g.dim() != rho0.dim() {
        return domain("test function and profile dimensions differ");
    }
    if !(t >= 0.0) {
        return domain(format!("negative time {t}"));
    }
    let needed = rho0.poly().max_mode().max(match g {
        TestFunction::Trig(p) => p.max_mode(),
        TestFunction::WrappedGaussian { .. } => 0,
    });
    if modes < needed {
        return domain(format!("mode cutoff {modes} below the highest input mode {needed}"));
    }
    let (gp, truncation) = g.to_trig(modes);
    let value = rho0.poly().pairing(&heat_semigroup(&gp, sigma, t));
    Ok(HeatPairing { value, truncation })
}

/// Largest residual of `<rho_t, G> - <rho_0, G> - int_0^t <rho_s, 1/2 div(Sigma grad G)> ds`
/// over `t_grid`, the time integral taken by the trapezoid rule on the grid.
pub fn weak_form_residual(rho0: &DensityProfile, g: &TestFunction, sigma: &CovarianceMatrix, t_grid: &[f64], modes: i64) -> Result<f64> {
    if t_grid.windows(2).any(|w| w[1] < w[0]) {
        return domain("time grid must be sorted");
    }
    let (gp, _) = g.to_trig(modes);
    let lg = TestFunction::Trig(heat_generator(&gp, sigma));
    let g_trig = TestFunction::Trig(gp);
    let at = |t: f64| -> Result<(f64, f64)> {
        Ok((heat_reference(rho0, sigma, &g_trig, t, modes)?.value, heat_reference(rho0, sigma, &lg, t, modes)?.value))
    };
    let Some(&t0) = t_grid.first() else { return Ok(0.0) };
    let (start, mut prev_rate) = at(t0)?;
    let (mut integral, mut worst, mut prev_t) = (0.0f64, 0.0f64, t0);
    let initial = heat_reference(rho0, sigma, &g_trig, 0.0, modes)?.value;
    // integral from 0 to the first grid time, if it is not 0
    if t0 > 0.0 {
        let (_, r0) = at(0.0)?;
        integral += 0.5 * t0 * (r0 + prev_rate);
    }
    worst = worst.max((start - initial - integral).abs());
    for &t in &t_grid[1..] {
        let (value, rate) = at(t)?;
        integral += 0.5 * (t - prev_t) * (rate + prev_rate);
        worst = worst.max((value - initial - integral).abs());
        prev_t = t;
        prev_rate = rate;
    }
    Ok(worst)
}

/// Sample covariance of rescaled walker displacements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaEstimate {
    pub estimate: Vec<Vec<f64>>,
    pub stderr: Vec<Vec<f64>>,
    pub degenerate: bool,
    pub n: usize,
    pub t_macro: f64,
    pub walkers: usize,
}

impl SigmaEstimate {
    pub fn covariance(&self) -> Result<CovarianceMatrix> {
        if self.degenerate {
            return validation("degenerate covariance estimate");
        }
        CovarianceMatrix::new(self.estimate.clone())
    }
}

const JACKKNIFE_GROUPS: usize = 20;

/// Runs `walkers` independent walkers from `start` over `[0, t_macro n^2]` on the
/// quenched field and returns their displacements divided by `n`.
pub fn rescaled_displacements(field: &ConductanceField, n: usize, start: usize, t_macro: f64, walkers: usize, seed: u64) -> Result<Vec<[f64; MAX_DIM]>> {
    check_scale(field.torus(), n)?;
    let t_micro = t_macro * (n * n) as f64;
    field.check_time(t_micro)?;
    (0..walkers as u64)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, Purpose::Walker, 0, i);
            let w = sample_walker(field, start, 0.0, t_micro, &mut r)?;
            let mut out = [0.0; MAX_DIM];
            for (o, d) in out.iter_mut().zip(w.displacement) {
                *o = d as f64 / n as f64;
            }
            Ok(out)
        })
        .collect()
}

fn covariance_of(samples: &[&[f64; MAX_DIM]], i: usize, j: usize) -> f64 {
    let n = samples.len() as f64;
    let (mi, mj) = (samples.iter().map(|s| s[i]).sum::<f64>() / n, samples.iter().map(|s| s[j]).sum::<f64>() / n);
    samples.iter().map(|s| (s[i] - mi) * (s[j] - mj)).sum::<f64>() / (n - 1.0)
}

/// Estimates `Sigma` from walkers started at the origin of one quenched
/// realization of `spec` on the torus of side `n` up to macro time `t_macro`.
pub fn estimate_sigma(spec: &EnvironmentSpec, n: usize, t_macro: f64, walkers: usize, seed: u64) -> Result<SigmaEstimate> {
    if walkers < 100 {
        return domain(format!("need at least 100 walkers, got {walkers}"));
    }
    if !(t_macro > 0.0) {
        return domain(format!("macro time must be positive, got {t_macro}"));
    }
    let field = sample_environment(&spec.rescaled(n, t_macro * (n * n) as f64))?;
    let disp = rescaled_displacements(&field, n, 0, t_macro, walkers, seed)?;
    let scaled: Vec<[f64; MAX_DIM]> = disp.iter().map(|d| d.map(|v| v / t_macro.sqrt())).collect();
    let refs: Vec<&[f64; MAX_DIM]> = scaled.iter().collect();
    let d = spec.dim;
    let mut estimate = vec![vec![0.0; d]; d];
    let mut stderr = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in i..d {
            let c = covariance_of(&refs, i, j);
            let se = jackknife_se(&scaled, JACKKNIFE_GROUPS, |sub| covariance_of(sub, i, j));
            estimate[i][j] = c;
            estimate[j][i] = c;
            stderr[i][j] = se;
            stderr[j][i] = se;
        }
    }
    let degenerate = CovarianceMatrix::new(estimate.clone()).is_err();
    if degenerate {
        log::warn!("degenerate covariance estimate {estimate:?}");
    }
    Ok(SigmaEstimate { estimate, stderr, degenerate, n, t_macro, walkers })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StartCheckRow {
    pub t: f64,
    pub coordinate: usize,
    pub ks_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArbitraryStartReport {
    pub start_site: usize,
    pub elliptic: bool,
    pub rows: Vec<StartCheckRow>,
    /// Rescaled displacement samples, one vector per time of the grid.
    pub samples: Vec<Vec<[f64; MAX_DIM]>>,
}

/// Kolmogorov-Smirnov distance, per time and coordinate, between the law of
/// `(X_{0, t n^2} - x_n) / n` from `x_n = round(n u)` and `N(0, t Sigma_ii)`.
pub fn arbitrary_start_check(
    field: &ConductanceField,
    n: usize,
    u: &[f64],
    t_grid: &[f64],
    walkers: usize,
    sigma: &CovarianceMatrix,
    seed: u64,
) -> Result<ArbitraryStartReport> {
    let torus = field.torus();
    check_sigma(sigma, torus.dim())?;
    let start_site = torus.site_near(u)?;
    let elliptic = field.is_elliptic();
    if !elliptic {
        log::warn!("arbitrary-start check on a field without declared ellipticity");
    }
    let mut rows = Vec::new();
    let mut samples = Vec::new();
    for (ti, &t) in t_grid.iter().enumerate() {
        let disp = rescaled_displacements(field, n, start_site, t, walkers, rng::derive_seed(seed, Purpose::Walker, ti as u64))?;
        for c in 0..torus.dim() {
            let xs: Vec<f64> = disp.iter().map(|d| d[c]).collect();
            let sd = (t * sigma.get(c, c)).sqrt();
            let ks = if sd > 0.0 {
                ks_distance(&xs, |x| normal_cdf(x, 0.0, sd))
            } else {
                ks_distance(&xs, |x| if x >= 0.0 { 1.0 } else { 0.0 })
            };
            rows.push(StartCheckRow { t, coordinate: c, ks_distance: ks });
        }
        samples.push(disp);
    }
    Ok(ArbitraryStartReport { start_site, elliptic, rows, samples })
}

/// Two-sample KS p-values, per time and coordinate, between two start-point reports.
pub fn compare_starts(a: &ArbitraryStartReport, b: &ArbitraryStartReport) -> Vec<(usize, usize, f64, f64)> {
    let mut out = Vec::new();
    for (ti, (sa, sb)) in a.samples.iter().zip(&b.samples).enumerate() {
        let dim = a.rows.iter().filter(|r| r.t == a.rows[0].t).count();
        for c in 0..dim {
            let xa: Vec<f64> = sa.iter().map(|d| d[c]).collect();
            let xb: Vec<f64> = sb.iter().map(|d| d[c]).collect();
            let (d, p) = ks_two_sample(&xa, &xb);
            out.push((ti, c, d, p));
        }
    }
    out
}

/// `G` sampled at the sites and its projection for the spectral semigroup.
fn trig_projection(g: &TestFunction) -> TrigPoly {
    g.to_trig(g.modes_for(PROJECTION_TOL)).0
}

/// Spectral semigroup `S^Sigma_t G` evaluated at `x / n`.
pub fn heat_on_sites(torus: &Torus, g: &TestFunction, sigma: &CovarianceMatrix, t: f64) -> Vec<f64> {
    TestFunction::Trig(heat_semigroup(&trig_projection(g), sigma, t)).sample_on(torus)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SemigroupErrors {
    pub sup: f64,
    pub mean: f64,
}

/// Sup and counting-measure mean of `|S^N_{s n^2, t n^2} G - S^Sigma_{t-s} G|` over the sites.
pub fn semigroup_errors(field: &ConductanceField, n: usize, g: &TestFunction, sigma: &CovarianceMatrix, s: f64, t: f64) -> Result<SemigroupErrors> {
    let torus = field.torus();
    check_scale(torus, n)?;
    check_sigma(sigma, torus.dim())?;
    let n2 = (n * n) as f64;
    let lattice = semigroup_apply(field, s * n2, t * n2, &g.sample_on(torus), DEFAULT_TOL)?;
    let reference = heat_on_sites(torus, g, sigma, t - s);
    let diffs: Vec<f64> = lattice.iter().zip(&reference).map(|(a, b)| (a - b).abs()).collect();
    Ok(SemigroupErrors {
        sup: diffs.iter().copied().fold(0.0, f64::max),
        mean: diffs.iter().sum::<f64>() / diffs.len() as f64,
    })
}

/// `N^{-d} sum_x (S^N_{0, t n^2} G)(x) eta0(x)`, the mean of `X_t^N(G)` from a fixed start.
pub fn mean_field_prediction(field: &ConductanceField, n: usize, g: &TestFunction, eta0: &Configuration, t: f64) -> Result<f64> {
    let torus = field.torus();
    check_scale(torus, n)?;
    eta0.check_for(torus)?;
    let sg = semigroup_apply(field, 0.0, t * (n * n) as f64, &g.sample_on(torus), DEFAULT_TOL)?;
    Ok(pair_with_samples(eta0, &sg))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceCheck {
    pub mean: f64,
    pub variance: f64,
    pub bound: f64,
    /// `bound * (1 + 4 / sqrt(replicas))`.
    pub threshold: f64,
    pub passed: bool,
}

/// Samples of `X_t^N(G)` over fresh clocks on the quenched field from a fixed start.
pub fn field_samples(field: &ConductanceField, n: usize, g: &TestFunction, eta0: &Configuration, t: f64, replicas: usize, seed: u64) -> Result<Vec<f64>> {
    let torus = field.torus();
    check_scale(torus, n)?;
    eta0.check_for(torus)?;
    let t_micro = t * (n * n) as f64;
    field.check_time(t_micro)?;
    let gvals = g.sample_on(torus);
    (0..replicas as u64)
        .into_par_iter()
        .map(|rep| {
            let real = build_graphical_until(field, rng::derive_seed(seed, Purpose::Graphical, rep), t_micro)?;
            Ok(pair_with_samples(&stir(&real, eta0, t_micro)?, &gvals))
        })
        .collect()
}

/// Empirical variance of `X_t^N(G)` against `(1 / 2N^d) (1 / N^d) sum_x G(x/N)^2`.
pub fn noise_variance_check(field: &ConductanceField, n: usize, g: &TestFunction, eta0: &Configuration, t: f64, replicas: usize, seed: u64) -> Result<VarianceCheck> {
    if replicas < 2 {
        return domain("need at least 2 replicas");
    }
    let xs = field_samples(field, n, g, eta0, t, replicas, seed)?;
    let m = Moments::from_slice(&xs);
    let gvals = g.sample_on(field.torus());
    let nd = gvals.len() as f64;
    let bound = gvals.iter().map(|v| v * v).sum::<f64>() / nd / (2.0 * nd);
    let threshold = bound * (1.0 + 4.0 / (replicas as f64).sqrt());
    let variance = m.variance();
    Ok(VarianceCheck { mean: m.mean, variance, bound, threshold, passed: variance <= threshold })
}

/// Inputs of a convergence run over several scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HydroConfig {
    /// Environment law; its side and horizon are replaced per scale.
    pub environment: EnvironmentSpec,
    pub scales: Vec<usize>,
    pub profile: DensityProfile,
    pub functions: Vec<(String, TestFunction)>,
    /// Macroscopic snapshot times.
    pub t_grid: Vec<f64>,
    pub replicas: usize,
    pub deltas: Vec<f64>,
    #[serde(default)]
    pub sigma: Option<CovarianceMatrix>,
    pub seed: u64,
}

/// `X_t^N(G)` along the time grid for one replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldTrajectory {
    pub n: usize,
    pub function: String,
    pub replica: usize,
    pub seed: u64,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HydroSummary {
    pub n: usize,
    pub function: String,
    pub mean_sup_error: f64,
    pub stderr: f64,
    /// `(delta, P(sup_t |X_t - <rho_t, G>| > delta))`.
    pub exceedance: Vec<(f64, f64)>,
}

/// Long-format result row: one per `(N, G, t, statistic)`; `t` is empty for time-uniform statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HydroRow {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "G")]
    pub function: String,
    pub t: Option<f64>,
    pub stat: String,
    pub value: f64,
    pub stderr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HydroReport {
    pub sigma: CovarianceMatrix,
    pub summaries: Vec<HydroSummary>,
    pub rows: Vec<HydroRow>,
    pub trajectories: Vec<FieldTrajectory>,
}

impl HydroReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.rows {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn summary(&self, n: usize, function: &str) -> Option<&HydroSummary> {
        self.summaries.iter().find(|s| s.n == n && s.function == function)
    }
}

/// The covariance a run will use: the supplied one, or `2c I` for a static
/// homogeneous environment of level `c`.
pub fn resolve_sigma(env: &EnvironmentSpec, sigma: Option<&CovarianceMatrix>) -> Result<CovarianceMatrix> {
    match (sigma, env.static_homogeneous_level()) {
        (Some(s), _) => {
            check_sigma(s, env.dim)?;
            Ok(s.clone())
        }
        (None, Some(c)) => CovarianceMatrix::isotropic(env.dim, 2.0 * c),
        (None, None) => Err(Error::Pipeline(
            "no covariance supplied for a non-homogeneous environment; run the sigma estimation stage first".into(),
        )),
    }
}

/// Convergence of the empirical field to the heat-equation reference over several scales.
pub fn hydro_experiment(config: &HydroConfig) -> Result<HydroReport> {
    let env = &config.environment;
    let sigma = resolve_sigma(env, config.sigma.as_ref())?;
    if config.t_grid.is_empty() || config.t_grid.windows(2).any(|w| w[1] < w[0]) || config.t_grid[0] < 0.0 {
        return domain("time grid must be non-empty, sorted and non-negative");
    }
    if config.replicas == 0 {
        return domain("replicas must be at least 1");
    }
    if config.profile.dim() != env.dim {
        return domain("profile dimension does not match the environment");
    }
    let t_max = *config.t_grid.last().expect("non-empty grid");
    let mut reference = Vec::new();
    for (_, g) in &config.functions {
        if g.dim() != env.dim {
            return domain("test function dimension does not match the environment");
        }
        let modes = g.modes_for(PROJECTION_TOL).max(config.profile.poly().max_mode());
        let r: Result<Vec<f64>> =
            config.t_grid.iter().map(|&t| heat_reference(&config.profile, &sigma, g, t, modes).map(|h| h.value)).collect();
        reference.push(r?);
    }

    let mut summaries = Vec::new();
    let mut rows = Vec::new();
    let mut trajectories = Vec::new();
    for &n in &config.scales {
        let n2 = (n * n) as f64;
        let micro_horizon = (t_max * n2).max(f64::MIN_POSITIVE);
        let field = sample_environment(&env.rescaled(n, micro_horizon))?;
        let torus = field.torus();
        let gvals: Vec<Vec<f64>> = config.functions.iter().map(|(_, g)| g.sample_on(torus)).collect();
        let micro_times: Vec<f64> = config.t_grid.iter().map(|t| (t * n2).min(micro_horizon)).collect();
        let scale_seed = rng::derive_seed(config.seed, Purpose::Graphical, n as u64);
        // per replica: values[function][time]
        let per_replica: Vec<(u64, Vec<Vec<f64>>)> = (0..config.replicas as u64)
            .into_par_iter()
            .map(|rep| {
                let mut r = rng::stream(config.seed, Purpose::InitialConfig, rep, n as u64);
                let eta0 = Configuration::bernoulli(torus.num_sites(), |x| config.profile.eval(&torus.macro_point(x)[..torus.dim()]), &mut r);
                let seed = rng::derive_seed(scale_seed, Purpose::Graphical, rep);
                let real = build_graphical_until(&field, seed, micro_horizon)?;
                let traj = record_trajectory(&real, &eta0, &micro_times)?;
                let values = gvals.iter().map(|gv| traj.snapshots.iter().map(|eta| pair_with_samples(eta, gv)).collect()).collect();
                Ok((seed, values))
            })
            .collect::<Result<_>>()?;

        for (gi, (name, _)) in config.functions.iter().enumerate() {
            let sups: Vec<f64> = per_replica
                .iter()
                .map(|(_, v)| v[gi].iter().zip(&reference[gi]).map(|(x, r)| (x - r).abs()).fold(0.0, f64::max))
                .collect();
            let m = Moments::from_slice(&sups);
            let exceedance: Vec<(f64, f64)> = config
                .deltas
                .iter()
                .map(|&d| (d, sups.iter().filter(|&&s| s > d).count() as f64 / sups.len() as f64))
                .collect();
            for (ti, &t) in config.t_grid.iter().enumerate() {
                let xs: Vec<f64> = per_replica.iter().map(|(_, v)| v[gi][ti]).collect();
                let mt = Moments::from_slice(&xs);
                let errs: Vec<f64> = xs.iter().map(|x| (x - reference[gi][ti]).abs()).collect();
                let me = Moments::from_slice(&errs);
                let row = |stat: &str, value: f64, stderr: Option<f64>| HydroRow {
                    n,
                    function: name.clone(),
                    t: Some(t),
                    stat: stat.to_string(),
                    value,
                    stderr,
                };
                rows.push(row("field_mean", mt.mean, Some(mt.std_error())));
                rows.push(row("reference", reference[gi][ti], None));
                rows.push(row("mean_abs_error", me.mean, Some(me.std_error())));
            }
            let urow = |stat: String, value: f64, stderr: Option<f64>| HydroRow { n, function: name.clone(), t: None, stat, value, stderr };
            rows.push(urow("mean_sup_error".into(), m.mean, Some(m.std_error())));
            for &(d, p) in &exceedance {
                let se = (p * (1.0 - p) / sups.len() as f64).sqrt();
                rows.push(urow(format!("exceedance_{d}"), p, Some(se)));
            }
            summaries.push(HydroSummary { n, function: name.clone(), mean_sup_error: m.mean, stderr: m.std_error(), exceedance });
            for (rep, (seed, v)) in per_replica.iter().enumerate() {
                trajectories.push(FieldTrajectory {
                    n,
                    function: name.clone(),
                    replica: rep,
                    seed: *seed,
                    times: config.t_grid.clone(),
                    values: v[gi].clone(),
                });
            }
        }
    }
    Ok(HydroReport { sigma, summaries, rows, trajectories })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayFit {
    /// `(r, max_{|x - y| = r} p(x, y))` for every torus distance `r`.
    pub profile: Vec<(usize, f64)>,
    /// Fit of `ln p_max` against `r / N / max(1/N, sqrt(t - s))`; `None` without two usable points.
    pub fit: Option<LinearFit>,
    pub slope: Option<f64>,
    pub amplitude: Option<f64>,
    /// Root mean square displacement in macroscopic units, averaged over starting sites.
    pub length_scale: f64,
    /// Kernel already close to uniform: relative spread of `p_max` below 10%.
    pub saturated: bool,
}

/// Smallest kernel value kept in the decay fit; below it truncation noise dominates.
const DECAY_FLOOR: f64 = 1e-10;

/// Exponential-tail fit of the kernel `p_{s n^2, t n^2}` (macroscopic `s < t`).
pub fn kernel_decay_fit(field: &ConductanceField, n: usize, s: f64, t: f64) -> Result<DecayFit> {
    let torus = field.torus();
    check_scale(torus, n)?;
    if !(s < t) {
        return domain(format!("need s < t, got [{s}, {t}]"));
    }
    if !field.is_elliptic() {
        log::warn!("kernel decay fit on a field without declared ellipticity");
    }
    let n2 = (n * n) as f64;
    let k = kernel_forward(field, s * n2, t * n2, DEFAULT_TOL)?;
    let sites = torus.num_sites();
    let max_r = torus.dim() * (n / 2);
    let mut pmax = vec![0.0f64; max_r + 1];
    let mut second = 0.0;
    for x in 0..sites {
        for y in 0..sites {
            let p = k.get(x, y);
            let r = torus.distance(x, y);
            pmax[r] = pmax[r].max(p);
            let dsp = torus.displacement(x, y);
            second += p * dsp.iter().map(|v| (v * v) as f64).sum::<f64>();
        }
    }
    let length_scale = (second / sites as f64).sqrt() / n as f64;
    let scale = (1.0 / n as f64).max((t - s).sqrt());
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (r, &p) in pmax.iter().enumerate() {
        if p > DECAY_FLOOR {
            xs.push(r as f64 / n as f64 / scale);
            ys.push(p.ln());
        }
    }
    let fit = linear_fit(&xs, &ys);
    let (hi, lo) = (pmax.iter().copied().fold(0.0, f64::max), pmax.iter().copied().fold(f64::INFINITY, f64::min));
    let saturated = hi > 0.0 && (hi - lo) / hi < 0.1;
    Ok(DecayFit {
        profile: pmax.into_iter().enumerate().collect(),
        slope: fit.map(|f| f.slope),
        amplitude: fit.map(|f| f.intercept.exp()),
        fit,
        length_scale,
        saturated,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HoelderFit {
    /// `(scale, difference)` pairs entering the regression.
    pub points: Vec<(f64, f64)>,
    pub fit: Option<LinearFit>,
    pub gamma: Option<f64>,
}

/// Log-log regression of `|S^N_{s,t+h} G(x) - S^N_{s,t} G(y)|` against
/// `max(sqrt h, |x - y| / N) / sqrt(t - s)` over `h_grid` and site pairs
/// (all times macroscopic).
pub fn hoelder_diagnostic(
    field: &ConductanceField,
    n: usize,
    g: &TestFunction,
    s: f64,
    t: f64,
    h_grid: &[f64],
    pairs: &[(usize, usize)],
) -> Result<HoelderFit> {
    let torus = field.torus();
    check_scale(torus, n)?;
    if !(s < t) {
        return domain(format!("need s < t, got [{s}, {t}]"));
    }
    for &(x, y) in pairs {
        torus.check_site(x)?;
        torus.check_site(y)?;
    }
    if !field.is_elliptic() {
        log::warn!("continuity diagnostic on a field without declared ellipticity");
    }
    let n2 = (n * n) as f64;
    let gvals = g.sample_on(torus);
    let base = semigroup_apply(field, s * n2, t * n2, &gvals, DEFAULT_TOL)?;
    let mut points = Vec::new();
    let mut all = Vec::new();
    for &h in h_grid {
        if !(h >= 0.0) {
            return domain(format!("negative time increment {h}"));
        }
        let shifted = semigroup_apply(field, s * n2, (t + h) * n2, &gvals, DEFAULT_TOL)?;
        for &(x, y) in pairs {
            let diff = (shifted[x] - base[y]).abs();
            let dist = torus.displacement(x, y).iter().map(|v| (v * v) as f64).sum::<f64>().sqrt() / n as f64;
            let scale = h.sqrt().max(dist) / (t - s).sqrt();
            all.push((scale, diff));
            if scale > 0.0 && diff > 1e-14 {
                points.push((scale, diff));
            }
        }
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let fit = linear_fit(&xs, &ys);
    Ok(HoelderFit { points: all, gamma: fit.map(|f| f.slope), fit })
}
