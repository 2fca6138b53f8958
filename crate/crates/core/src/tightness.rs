//! Path diagnostics for relative compactness in the Skorokhod space: the
//! modulus w''' of step paths, sup-over-time increment tails, and the
//! semigroup quantities bounding the increments of the empirical field.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::ConductanceField;
use crate::error::{domain, Error, Result};
use crate::hydro::{heat_semigroup, mode_decay, CovarianceMatrix, FieldTrajectory, PROJECTION_TOL};
use crate::lattice::{TestFunction, Torus, TrigPoly};
use crate::rng::{self, Purpose};
use crate::walks::{pieces, sample_walker_path, DEFAULT_TOL};

/// Right-continuous step path on `[0, horizon]`. `values[i]` holds on
/// `[times[i], times[i+1])`; `terminal` is `z_T`, which may differ from `z_{T-}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPath {
    times: Vec<f64>,
    values: Vec<f64>,
    horizon: f64,
    terminal: f64,
}

impl StepPath {
    pub fn new(times: Vec<f64>, values: Vec<f64>, horizon: f64, terminal: Option<f64>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return domain("a step path needs one value per breakpoint and at least one breakpoint");
        }
        if times[0] != 0.0 {
            return domain("the first breakpoint must be at time 0");
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return domain("breakpoint times must be strictly increasing");
        }
        if !(horizon > *times.last().expect("non-empty")) {
            return domain(format!("horizon {horizon} must exceed the last breakpoint"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return domain("path values must be finite");
        }
        let terminal = terminal.unwrap_or(*values.last().expect("non-empty"));
        Ok(Self { times, values, horizon, terminal })
    }

    pub fn constant(value: f64, horizon: f64) -> Result<Self> {
        Self::new(vec![0.0], vec![value], horizon, None)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn terminal(&self) -> f64 {
        self.terminal
    }

    pub fn left_limit_at_horizon(&self) -> f64 {
        *self.values.last().expect("non-empty")
    }

    pub fn value_at(&self, t: f64) -> Result<f64> {
        if !(0.0..=self.horizon).contains(&t) {
            return domain(format!("time {t} outside [0, {}]", self.horizon));
        }
        if t == self.horizon {
            return Ok(self.terminal);
        }
        let i = self.times.partition_point(|&x| x <= t) - 1;
        Ok(self.values[i])
    }

    /// Largest minus smallest value over the path.
    pub fn range(&self) -> f64 {
        let (lo, hi) = self.values.iter().chain(std::iter::once(&self.terminal)).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        hi - lo
    }

    /// Reads `time,value` rows. The last row is the horizon and carries `z_T`.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let headers = reader.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Schema(format!("missing column {name:?}")));
        let (ti, vi) = (col("time")?, col("value")?);
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                let field = rec.get(i).ok_or_else(|| Error::Schema("short row".into()))?;
                field.trim().parse().map_err(|_| Error::Schema(format!("not a number: {field:?}")))
            };
            rows.push((parse(ti)?, parse(vi)?));
        }
        if rows.len() < 2 {
            return Err(Error::Schema("a path file needs at least two rows".into()));
        }
        let (horizon, terminal) = rows.pop().expect("at least two rows");
        let (times, values) = rows.into_iter().unzip();
        Self::new(times, values, horizon, Some(terminal))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["time", "value"])?;
        for (t, v) in self.times.iter().zip(&self.values) {
            out.write_record([t.to_string(), v.to_string()])?;
        }
        out.write_record([self.horizon.to_string(), self.terminal.to_string()])?;
        out.flush()?;
        Ok(())
    }

    /// Segments `[start, value]`, with an extra degenerate segment `{T}` when `z_T != z_{T-}`.
    fn segments(&self) -> (Vec<f64>, Vec<f64>, bool) {
        let mut starts = self.times.clone();
        let mut vals = self.values.clone();
        let jump_at_end = self.terminal != self.left_limit_at_horizon();
        if jump_at_end {
            starts.push(self.horizon);
            vals.push(self.terminal);
        }
        (starts, vals, jump_at_end)
    }
}

/// Range max/min queries in O(1) after O(n log n) preprocessing.
struct SparseTable {
    max: Vec<Vec<f64>>,
    min: Vec<Vec<f64>>,
}

impl SparseTable {
    fn new(v: &[f64]) -> Self {
        let (mut max, mut min) = (vec![v.to_vec()], vec![v.to_vec()]);
        let mut w = 1;
        while 2 * w <= v.len() {
            let (pm, pn) = (max.last().expect("level"), min.last().expect("level"));
            let nm: Vec<f64> = (0..=v.len() - 2 * w).map(|i| pm[i].max(pm[i + w])).collect();
            let nn: Vec<f64> = (0..=v.len() - 2 * w).map(|i| pn[i].min(pn[i + w])).collect();
            max.push(nm);
            min.push(nn);
            w *= 2;
        }
        Self { max, min }
    }

    /// `max - min` over indices `i..=j`.
    fn osc(&self, i: usize, j: usize) -> f64 {
        let level = (usize::BITS - (j - i + 1).leading_zeros() - 1) as usize;
        let w = 1 << level;
        let hi = self.max[level][i].max(self.max[level][j + 1 - w]);
        let lo = self.min[level][i].min(self.min[level][j + 1 - w]);
        hi - lo
    }
}

/// The modulus w'''(delta): the largest over windows `[s, t]` with `t - s < delta`
/// of the best split `inf_r max(osc [s, r), osc [r, t])`, together with the
/// boundary terms `|z_delta - z_0|` and `|z_{T-} - z_{T-delta}|`.
///
/// The left half of a split is taken half-open, `[s, r)`, and the split may
/// sit anywhere in `(s, t]` except at `T`, so a split placed at a jump time
/// absorbs that jump and a jump exactly at `T` is never absorbed. Windows are enumerated by the pair of segments
/// containing their endpoints; for each first segment only the widest
/// admissible window matters, and the best split is found by bisection since
/// the left oscillation grows and the right one shrinks with the split index.
/// Cost: O(m log m) for m breakpoints.
pub fn modulus_w3(z: &StepPath, delta: f64) -> Result<f64> {
    let t_end = z.horizon();
    if !(delta > 0.0 && delta < t_end) {
        return domain(format!("delta must lie in (0, {t_end}), got {delta}"));
    }
    let (starts, vals, jump_at_end) = z.segments();
    let m = starts.len();
    // segment i covers [starts[i], next); the point {T} is segment m-1 when jump_at_end
    let table = SparseTable::new(&vals);
    // splits may sit at the start of any segment whose start lies strictly inside the window
    let last_split = if jump_at_end { m - 2 } else { m - 1 };
    let mut best = 0.0f64;
    let mut j = 0;
    for i in 0..m {
        // widest j with starts[j] - starts[i+1] < delta
        if j < i {
            j = i;
        }
        while j + 1 < m && i + 1 < m && starts[j + 1] - starts[i + 1] < delta {
            j += 1;
        }
        if j == i {
            continue;
        }
        let (lo, hi) = (i + 1, j.min(last_split));
        let split_value = |k: usize| table.osc(i, k - 1).max(table.osc(k, j));
        let mut value = f64::INFINITY;
        if lo <= hi {
            // osc(i, k-1) non-decreasing and osc(k, j) non-increasing in k
            let (mut a, mut b) = (lo, hi);
            while a < b {
                let mid = (a + b) / 2;
                if table.osc(i, mid - 1) >= table.osc(mid, j) {
                    b = mid;
                } else {
                    a = mid + 1;
                }
            }
            value = split_value(a);
            if a > lo {
                value = value.min(split_value(a - 1));
            }
        }
        // a split inside the interior of segment k shares that segment between both halves
        for k in [i, j.min(last_split)] {
            value = value.min(table.osc(i, k).max(table.osc(k, j)));
        }
        best = best.max(value);
    }
    let start_term = (z.value_at(delta)? - z.value_at(0.0)?).abs();
    let end_term = (z.left_limit_at_horizon() - z.value_at(t_end - delta)?).abs();
    Ok(best.max(start_term).max(end_term))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailEstimate {
    pub h: f64,
    /// Max over the time grid of the fraction of paths with `|Z_{t+h} - Z_t| > epsilon`.
    pub psi_hat: f64,
    /// Binomial standard error at the maximizing time.
    pub stderr: f64,
    /// Fewer than 100 paths: the confidence bands are wide.
    pub flagged: bool,
}

/// Sup-over-time proxy of the conditional increment tail, on `t_grid` (times with
/// `t + h` beyond the horizon are skipped).
pub fn conditional_tail_estimate(paths: &[StepPath], epsilon: f64, h_grid: &[f64], t_grid: &[f64]) -> Result<Vec<TailEstimate>> {
    if !(epsilon > 0.0) {
        return domain(format!("epsilon must be positive, got {epsilon}"));
    }
    let Some(first) = paths.first() else { return domain("no paths supplied") };
    let horizon = first.horizon();
    if paths.iter().any(|p| p.horizon() != horizon) {
        return domain("paths must share their horizon");
    }
    let flagged = paths.len() < 100;
    let n = paths.len() as f64;
    h_grid
        .iter()
        .map(|&h| {
            if !(h >= 0.0) {
                return domain(format!("negative increment {h}"));
            }
            let mut best = (0.0, 0.0);
            for &t in t_grid.iter().filter(|&&t| t >= 0.0 && t + h <= horizon) {
                let hits = paths
                    .par_iter()
                    .map(|p| Ok(u32::from((p.value_at(t + h)? - p.value_at(t)?).abs() > epsilon)))
                    .collect::<Result<Vec<u32>>>()?
                    .into_iter()
                    .sum::<u32>();
                let f = hits as f64 / n;
                if f > best.0 {
                    best = (f, (f * (1.0 - f) / n).sqrt());
                }
            }
            Ok(TailEstimate { h, psi_hat: best.0, stderr: best.1, flagged })
        })
        .collect()
}

/// First coordinate of `(X_{t n^2} - X_0) / n` for `count` independent walkers
/// from site 0, as step paths on `[0, t_macro]`.
pub fn rescaled_walk_paths(field: &ConductanceField, n: usize, t_macro: f64, count: usize, seed: u64) -> Result<Vec<StepPath>> {
    if field.torus().side() != n {
        return domain(format!("torus side {} does not match scale N = {n}", field.torus().side()));
    }
    let n2 = (n * n) as f64;
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, Purpose::Walker, 1, i);
            let (_, jumps) = sample_walker_path(field, 0, 0.0, t_macro * n2, &mut r)?;
            let mut times = vec![0.0];
            let mut values = vec![0.0];
            for (time, disp) in jumps {
                let tm = time / n2;
                if tm < t_macro && tm > *times.last().expect("non-empty") {
                    times.push(tm);
                    values.push(disp[0] as f64 / n as f64);
                } else if tm < t_macro {
                    *values.last_mut().expect("non-empty") = disp[0] as f64 / n as f64;
                }
            }
            StepPath::new(times, values, t_macro, None)
        })
        .collect()
}

/// Semigroup quantities bounding the increments of `X^N(G)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PsiQuantities {
    pub c_g: f64,
    /// `(h, psi^N_eps(h), psi_eps(h))` along the increment grid; both columns non-decreasing.
    pub curve: Vec<(f64, f64, f64)>,
    pub psi_eps_n: f64,
    pub psi_eps: f64,
    pub z_h_n: f64,
    pub phi_eps_n: f64,
    /// Number of environment breakpoints added to the time grid.
    pub breakpoints_used: usize,
}

/// Grid resolution for [`psi_field_quantities`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsiGrid {
    pub t_points: usize,
    pub h_points: usize,
    /// Cap on the environment breakpoints merged into the time grid (evenly thinned beyond it).
    pub max_breakpoints: usize,
}

impl Default for PsiGrid {
    fn default() -> Self {
        Self { t_points: 21, h_points: 10, max_breakpoints: 200 }
    }
}

/// `sup_{N'} N'^{-d} sum_x |G(x/N')|`, the sup taken over `N' <= max(n, 64)`.
pub fn field_constant(g: &TestFunction, n: usize) -> Result<f64> {
    let d = g.dim();
    // N' = 1 is the single site at the origin
    let mut best = g.eval(&vec![0.0; d]).abs();
    for side in 2..=n.max(64) {
        let torus = Torus::new(d, side)?;
        best = best.max(crate::hydro::field_bound(&torus, g));
    }
    Ok(best)
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `psi^N_eps(h) = 4 C_G / (eps^2 N^d) Z^N_h`, the limiting `psi_eps(h)` with the
/// same prefactor, and `phi^N_eps` from the sup discrepancy between the lattice
/// and the spectral semigroups. All times macroscopic. Pairs `(t, t + h')` with
/// `t <= t_macro` may end past `t_macro`, so the discrepancy in `phi` is taken
/// over every pair `s <= t <= t_macro + h` of the grid.
pub fn psi_field_quantities(
    field: &ConductanceField,
    n: usize,
    g: &TestFunction,
    sigma: &CovarianceMatrix,
    epsilon: f64,
    h: f64,
    t_macro: f64,
    grid: PsiGrid,
) -> Result<PsiQuantities> {
    let torus = field.torus();
    if torus.side() != n {
        return domain(format!("torus side {} does not match scale N = {n}", torus.side()));
    }
    if !(epsilon > 0.0) || !(h >= 0.0) || !(t_macro > 0.0) {
        return domain("need epsilon > 0, h >= 0 and a positive horizon");
    }
    sigma.validate()?;
    let n2 = (n * n) as f64;
    let end = t_macro + h;
    field.check_time(end * n2)?;

    // starting times: uniform grid plus thinned breakpoints inside [0, t_macro]
    let mut starts: Vec<f64> = (0..grid.t_points.max(2)).map(|i| t_macro * i as f64 / (grid.t_points.max(2) - 1) as f64).collect();
    let bps: Vec<f64> = field.breakpoints().into_iter().map(|b| b / n2).filter(|&b| b > 0.0 && b < t_macro).collect();
    let stride = bps.len().div_ceil(grid.max_breakpoints.max(1)).max(1);
    let used: Vec<f64> = bps.into_iter().step_by(stride).collect();
    let breakpoints_used = used.len();
    starts.extend(used);
    starts.sort_by(f64::total_cmp);
    starts.dedup();
    let increments: Vec<f64> = (0..=grid.h_points.max(1)).map(|j| h * j as f64 / grid.h_points.max(1) as f64).collect();

    // all grid times, every start and every start + increment
    let mut times: Vec<f64> = starts.iter().flat_map(|&s| increments.iter().map(move |&dh| s + dh)).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();

    let gvals = g.sample_on(torus);
    let gpoly = g.to_trig(g.modes_for(PROJECTION_TOL)).0;
    // site values of each mode of G, so the spectral semigroup is a weighted sum
    let canon = gpoly.canonical();
    let basis: Vec<(Vec<i64>, Vec<f64>)> = canon
        .terms
        .iter()
        .map(|term| {
            let single = TrigPoly { dim: canon.dim, terms: vec![term.clone()] };
            (term.k.clone(), TestFunction::Trig(single).sample_on(torus))
        })
        .collect();
    let heat_at = |dt: f64| -> Vec<f64> {
        let mut out = vec![0.0; torus.num_sites()];
        for (k, vals) in &basis {
            let f = mode_decay(sigma, k, dt);
            out.iter_mut().zip(vals).for_each(|(o, v)| *o += f * v);
        }
        out
    };

    // For every end time e, sweep the start backward: S_{s,e} G = S_{s,r} (S_{r,e} G).
    let per_end: Vec<(f64, Vec<(f64, f64)>)> = times
        .par_iter()
        .enumerate()
        .map(|(ei, &e)| -> Result<(f64, Vec<(f64, f64)>)> {
            let mut v = gvals.clone();
            let mut phi = 0.0f64;
            let mut z_pairs = Vec::new();
            let mut prev = e;
            for &s in times[..=ei].iter().rev() {
                if s < prev {
                    for (_, dh, rates) in pieces(field, s * n2, prev * n2).iter().rev() {
                        crate::walks::expm_apply(torus, rates, *dh, DEFAULT_TOL, &mut v)?;
                    }
                    prev = s;
                }
                let dt = e - s;
                phi = phi.max(sup_diff(&v, &heat_at(dt)));
                if dt <= h + 1e-15 && s <= t_macro && starts.iter().any(|&x| x == s) {
                    z_pairs.push((dt, sup_diff(&v, &gvals)));
                }
            }
            Ok((phi, z_pairs))
        })
        .collect::<Result<_>>()?;

    let phi_sup = per_end.iter().map(|p| p.0).fold(0.0, f64::max);
    let mut z_pairs: Vec<(f64, f64)> = per_end.into_iter().flat_map(|p| p.1).collect();
    z_pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    // sup over u of |G - S^Sigma_dt G|: sites plus a fine uniform grid
    let fine_side = (16 * gpoly.max_mode().max(1) as usize).max(n).min(if torus.dim() == 1 { 4096 } else { 64 });
    let fine = Torus::new(torus.dim(), fine_side)?;
    let gfine = TestFunction::Trig(gpoly.clone()).sample_on(&fine);
    let heat_sup = |dt: f64| -> f64 {
        let on_sites = sup_diff(&gvals, &heat_at(dt));
        let on_fine = sup_diff(&gfine, &TestFunction::Trig(heat_semigroup(&gpoly, sigma, dt)).sample_on(&fine));
        // trig projection error enters once on each side
        on_sites.max(on_fine)
    };

    let c_g = field_constant(g, n)?;
    let prefactor = 4.0 * c_g / (epsilon * epsilon * torus.num_sites() as f64);
    let mut curve = Vec::new();
    let (mut z_run, mut lim_run) = (0.0f64, 0.0f64);
    let mut k = 0;
    for &hh in &increments {
        while k < z_pairs.len() && z_pairs[k].0 <= hh + 1e-15 {
            z_run = z_run.max(z_pairs[k].1);
            lim_run = lim_run.max(heat_sup(z_pairs[k].0));
            k += 1;
        }
        curve.push((hh, prefactor * z_run, prefactor * lim_run));
    }
    let &(_, psi_eps_n, psi_eps) = curve.last().expect("non-empty increments");
    Ok(PsiQuantities {
        c_g,
        psi_eps_n,
        psi_eps,
        z_h_n: z_run,
        phi_eps_n: prefactor * phi_sup,
        curve,
        breakpoints_used,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct T1Row {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "G")]
    pub function: String,
    pub t: f64,
    pub m: f64,
    pub exceedance: f64,
    pub replicas: usize,
}

/// Empirical `P(|X_t^N(G)| > m)` per `(N, G, t, m)` from recorded trajectories.
pub fn t1_check(trajectories: &[FieldTrajectory], m_grid: &[f64]) -> Vec<T1Row> {
    let mut keys: Vec<(usize, String)> = trajectories.iter().map(|t| (t.n, t.function.clone())).collect();
    keys.sort();
    keys.dedup();
    let mut rows = Vec::new();
    for (n, function) in keys {
        let group: Vec<&FieldTrajectory> = trajectories.iter().filter(|t| t.n == n && t.function == function).collect();
        for (ti, &t) in group[0].times.iter().enumerate() {
            for &m in m_grid {
                let hits = group.iter().filter(|tr| tr.values[ti].abs() > m).count();
                rows.push(T1Row {
                    n,
                    function: function.clone(),
                    t,
                    m,
                    exceedance: hits as f64 / group.len() as f64,
                    replicas: group.len(),
                });
            }
        }
    }
    rows
}
