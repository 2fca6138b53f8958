//! Forward and backward random walks on a graphical realization, and the
//! exact transition kernels of the time-inhomogeneous walk.
//!
//! Kernels are products of matrix exponentials over the constant-rate pieces
//! of the field. Each exponential is applied through the uniformized series
//! `exp(hA) = sum_k e^{-qh} (qh)^k / k! P^k` with `P = I + A/q`, which only
//! needs sparse bond sweeps and never loses positivity.

use std::io::Write;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;

use crate::environment::ConductanceField;
use crate::error::{domain, Error, Result};
use crate::graphical::{build_graphical_until, GraphicalRealization};
use crate::lattice::{Torus, MAX_DIM};
use crate::rng::{self, Purpose};

pub const DEFAULT_TOL: f64 = 1e-12;

/// Largest `q h` handled by one uniformization sweep; longer pieces are chunked.
const MAX_CHUNK: f64 = 32.0;
const MAX_TERMS: usize = 100_000;

pub fn forward_position(real: &GraphicalRealization, x: usize, s: f64, t: f64) -> Result<usize> {
    real.check_window(s, t)?;
    real.torus().check_site(x)?;
    let torus = real.torus();
    let mut pos = x;
    for ev in real.window(s, t) {
        if let Some(y) = torus.bond(ev.bond as usize).other(pos) {
            pos = y;
        }
    }
    Ok(pos)
}

/// The unique `x` with `forward_position(x, s, t) = y`, found by running the
/// marks of `(s, t]` in reverse order.
pub fn backward_position(real: &GraphicalRealization, y: usize, s: f64, t: f64) -> Result<usize> {
    real.check_window(s, t)?;
    real.torus().check_site(y)?;
    let torus = real.torus();
    let mut pos = y;
    for ev in real.window(s, t).iter().rev() {
        if let Some(x) = torus.bond(ev.bond as usize).other(pos) {
            pos = x;
        }
    }
    Ok(pos)
}

/// Forward positions of every site at once: `result[x] = forward_position(x, s, t)`.
pub fn forward_map(real: &GraphicalRealization, s: f64, t: f64) -> Result<Vec<usize>> {
    real.check_window(s, t)?;
    let torus = real.torus();
    let n = torus.num_sites();
    // occupant[site] = starting site of the walker currently there
    let mut occupant: Vec<usize> = (0..n).collect();
    for ev in real.window(s, t) {
        let bond = torus.bond(ev.bond as usize);
        occupant.swap(bond.a, bond.b);
    }
    let mut pos = vec![0; n];
    for (site, &start) in occupant.iter().enumerate() {
        pos[start] = site;
    }
    Ok(pos)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

/// Step path of a walk. Forward paths list `(jump time, new site)` in
/// increasing time; backward paths list them in decreasing time, the site
/// being the one occupied just before the mark.
#[derive(Debug, Clone, PartialEq)]
pub struct WalkPath {
    pub start: usize,
    pub s: f64,
    pub t: f64,
    pub direction: Direction,
    pub jumps: Vec<(f64, usize)>,
}

impl WalkPath {
    /// Site at time `r` in `[s, t]`.
    pub fn position_at(&self, r: f64) -> Result<usize> {
        if !(self.s <= r && r <= self.t) {
            return domain(format!("time {r} outside [{}, {}]", self.s, self.t));
        }
        let pos = match self.direction {
            Direction::Forward => self.jumps.iter().take_while(|(tau, _)| *tau <= r).last(),
            Direction::Backward => self.jumps.iter().take_while(|(tau, _)| *tau > r).last(),
        };
        Ok(pos.map_or(self.start, |&(_, x)| x))
    }

    pub fn end(&self) -> usize {
        self.jumps.last().map_or(self.start, |&(_, x)| x)
    }

    /// `(time, site)` rows: the anchor first, then one row per jump.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["time", "site"])?;
        let anchor = match self.direction {
            Direction::Forward => self.s,
            Direction::Backward => self.t,
        };
        out.write_record([anchor.to_string(), self.start.to_string()])?;
        for (tau, x) in &self.jumps {
            out.write_record([tau.to_string(), x.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn forward_path(real: &GraphicalRealization, x: usize, s: f64, t: f64) -> Result<WalkPath> {
    real.check_window(s, t)?;
    real.torus().check_site(x)?;
    let torus = real.torus();
    let mut pos = x;
    let mut jumps = Vec::new();
    for ev in real.window(s, t) {
        if let Some(y) = torus.bond(ev.bond as usize).other(pos) {
            pos = y;
            jumps.push((ev.time, y));
        }
    }
    Ok(WalkPath { start: x, s, t, direction: Direction::Forward, jumps })
}

pub fn backward_path(real: &GraphicalRealization, y: usize, s: f64, t: f64) -> Result<WalkPath> {
    real.check_window(s, t)?;
    real.torus().check_site(y)?;
    let torus = real.torus();
    let mut pos = y;
    let mut jumps = Vec::new();
    for ev in real.window(s, t).iter().rev() {
        if let Some(x) = torus.bond(ev.bond as usize).other(pos) {
            pos = x;
            jumps.push((ev.time, x));
        }
    }
    Ok(WalkPath { start: y, s, t, direction: Direction::Backward, jumps })
}

/// Transition matrix `p_{s,t}(x, y)`, rows indexed by the starting site.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub torus: Torus,
    pub s: f64,
    pub t: f64,
    pub tol: f64,
    pub matrix: Array2<f64>,
}

impl Kernel {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.matrix[[x, y]]
    }

    pub fn transpose(&self) -> Kernel {
        Kernel { matrix: self.matrix.t().to_owned(), ..self.clone() }
    }

    /// `(K f)(x) = sum_y K(x, y) f(y)`.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        self.matrix.rows().into_iter().map(|row| row.iter().zip(f).map(|(p, v)| p * v).sum()).collect()
    }

    pub fn max_row_sum_deviation(&self) -> f64 {
        self.matrix.rows().into_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max)
    }

    pub fn max_column_sum_deviation(&self) -> f64 {
        self.matrix.columns().into_iter().map(|c| (c.sum() - 1.0).abs()).fold(0.0, f64::max)
    }

    pub fn min_entry(&self) -> f64 {
        self.matrix.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Plain CSV matrix, one line per row, no header.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        for row in self.matrix.rows() {
            out.write_record(row.iter().map(|v| format!("{v:e}")))?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Total jump rate of the busiest site under `rates`.
fn max_site_rate(torus: &Torus, rates: &[f64]) -> f64 {
    let mut out = vec![0.0; torus.num_sites()];
    for (bond, &r) in torus.bonds().iter().zip(rates) {
        out[bond.a] += r;
        out[bond.b] += r;
    }
    out.into_iter().fold(0.0, f64::max)
}

/// `v <- exp(h A) v` for the generator with bond rates `rates`. Since `A` is
/// symmetric this is also `v <- v exp(h A)` for a row vector.
pub(crate) fn expm_apply(torus: &Torus, rates: &[f64], h: f64, tol: f64, v: &mut [f64]) -> Result<()> {
    let q = max_site_rate(torus, rates);
    if q == 0.0 || h == 0.0 {
        return Ok(());
    }
    let chunks = (q * h / MAX_CHUNK).ceil().max(1.0);
    let qh = q * h / chunks;
    let tol_chunk = (tol / chunks).max(1e-300);
    let bonds = torus.bonds();
    let n = v.len();
    let mut x = vec![0.0; n];
    let mut acc = vec![0.0; n];
    let mut y = vec![0.0; n];
    for _ in 0..chunks as usize {
        x.copy_from_slice(v);
        let mut w = (-qh).exp();
        for (a, xi) in acc.iter_mut().zip(&x) {
            *a = w * xi;
        }
        let mut k = 0usize;
        loop {
            k += 1;
            if k > MAX_TERMS {
                return Err(Error::Numerical(format!("uniformization did not converge for q h = {qh}")));
            }
            // x <- P x
            y.copy_from_slice(&x);
            for (bond, &r) in bonds.iter().zip(rates) {
                if r != 0.0 {
                    let d = r / q * (x[bond.b] - x[bond.a]);
                    y[bond.a] += d;
                    y[bond.b] -= d;
                }
            }
            std::mem::swap(&mut x, &mut y);
            w *= qh / k as f64;
            for (a, xi) in acc.iter_mut().zip(&x) {
                *a += w * xi;
            }
            let kf = k as f64;
            if kf + 2.0 > qh {
                let tail = w * qh / (kf + 1.0) / (1.0 - qh / (kf + 2.0));
                if tail < tol_chunk {
                    break;
                }
            }
        }
        v.copy_from_slice(&acc);
    }
    Ok(())
}

/// Applies `exp(h A)` to every row of `m` in parallel.
fn expm_apply_rows(torus: &Torus, rates: &[f64], h: f64, tol: f64, m: &mut Array2<f64>) -> Result<()> {
    let mut rows: Vec<Vec<f64>> = m.rows().into_iter().map(|r| r.to_vec()).collect();
    rows.par_iter_mut().try_for_each(|row| expm_apply(torus, rates, h, tol, row))?;
    for (mut dst, src) in m.rows_mut().into_iter().zip(rows) {
        dst.iter_mut().zip(src).for_each(|(d, s)| *d = s);
    }
    Ok(())
}

fn check_interval(field: &ConductanceField, s: f64, t: f64, tol: f64) -> Result<()> {
    if s > t {
        return domain(format!("reversed interval [{s}, {t}]"));
    }
    field.check_time(s)?;
    field.check_time(t)?;
    if !(tol > 0.0) {
        return domain(format!("tolerance must be positive, got {tol}"));
    }
    Ok(())
}

/// Constant-rate pieces `(start, length, rates)` covering `[s, t]`.
pub(crate) fn pieces(field: &ConductanceField, s: f64, t: f64) -> Vec<(f64, f64, Vec<f64>)> {
    let grid = field.piece_grid(s, t);
    grid.windows(2).filter(|w| w[1] > w[0]).map(|w| (w[0], w[1] - w[0], field.rates_at(w[0]))).collect()
}

/// Per-piece tolerance so that the accumulated truncation stays below `tol`.
fn piece_tol(tol: f64, count: usize) -> f64 {
    (tol / count.max(1) as f64).max(1e-300)
}

pub fn kernel_forward(field: &ConductanceField, s: f64, t: f64, tol: f64) -> Result<Kernel> {
    check_interval(field, s, t, tol)?;
    let torus = field.torus();
    let n = torus.num_sites();
    let mut m = Array2::<f64>::eye(n);
    let ps = pieces(field, s, t);
    let tp = piece_tol(tol, ps.len());
    for (_, h, rates) in &ps {
        expm_apply_rows(torus, rates, *h, tp, &mut m)?;
    }
    let kernel = Kernel { torus: torus.clone(), s, t, tol, matrix: m };
    let dev = kernel.max_row_sum_deviation();
    if dev > 10.0 * tol {
        return Err(Error::Numerical(format!("kernel row sums deviate from 1 by {dev:e} (tolerance {tol:e})")));
    }
    Ok(kernel)
}

/// `p̂_{s,t}(y, x) = p_{s,t}(x, y)`.
pub fn kernel_backward(field: &ConductanceField, s: f64, t: f64, tol: f64) -> Result<Kernel> {
    Ok(kernel_forward(field, s, t, tol)?.transpose())
}

/// `S_{s,t} f(x) = sum_y p_{s,t}(x, y) f(y)` without forming the kernel.
pub fn semigroup_apply(field: &ConductanceField, s: f64, t: f64, f: &[f64], tol: f64) -> Result<Vec<f64>> {
    check_interval(field, s, t, tol)?;
    check_len(field.torus(), f)?;
    let ps = pieces(field, s, t);
    let tp = piece_tol(tol, ps.len());
    let mut v = f.to_vec();
    for (_, h, rates) in ps.iter().rev() {
        expm_apply(field.torus(), rates, *h, tp, &mut v)?;
    }
    Ok(v)
}

/// `Ŝ_{s,t} g(y) = sum_x p_{s,t}(x, y) g(x)`.
pub fn backward_semigroup_apply(field: &ConductanceField, s: f64, t: f64, g: &[f64], tol: f64) -> Result<Vec<f64>> {
    check_interval(field, s, t, tol)?;
    check_len(field.torus(), g)?;
    let ps = pieces(field, s, t);
    let tp = piece_tol(tol, ps.len());
    let mut v = g.to_vec();
    for (_, h, rates) in &ps {
        expm_apply(field.torus(), rates, *h, tp, &mut v)?;
    }
    Ok(v)
}

fn check_len(torus: &Torus, f: &[f64]) -> Result<()> {
    if f.len() != torus.num_sites() {
        return domain(format!("function has {} values for {} sites", f.len(), torus.num_sites()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    RightLimit,
    LeftLimit,
}

/// `(A_t f)(x) = sum_{y ~ x} lambda_t({x, y}) (f(y) - f(x))`.
pub fn generator_apply(field: &ConductanceField, t: f64, f: &[f64], side: Side) -> Result<Vec<f64>> {
    field.check_time(t)?;
    check_len(field.torus(), f)?;
    let rates = match side {
        Side::RightLimit => field.rates_at(t),
        Side::LeftLimit => field.rates_left(t),
    };
    Ok(generator_with_rates(field.torus(), &rates, f))
}

pub(crate) fn generator_with_rates(torus: &Torus, rates: &[f64], f: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; f.len()];
    for (bond, &r) in torus.bonds().iter().zip(rates) {
        let d = r * (f[bond.b] - f[bond.a]);
        out[bond.a] += d;
        out[bond.b] -= d;
    }
    out
}

/// Monte Carlo frequencies of `forward_position(x, s, t)` over independent realizations.
pub fn empirical_kernel(field: &ConductanceField, s: f64, t: f64, samples: usize, seed: u64) -> Result<Array2<f64>> {
    check_interval(field, s, t, 1.0)?;
    if samples == 0 {
        return domain("samples must be at least 1");
    }
    let n = field.torus().num_sites();
    let counts = (0..samples as u64)
        .into_par_iter()
        .map(|rep| -> Result<Vec<u32>> {
            let real = build_graphical_until(field, rng::derive_seed(seed, Purpose::Graphical, rep), t)?;
            let map = forward_map(&real, s, t)?;
            let mut c = vec![0u32; n * n];
            for (x, y) in map.into_iter().enumerate() {
                c[x * n + y] += 1;
            }
            Ok(c)
        })
        .try_reduce(
            || vec![0u32; n * n],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                Ok(a)
            },
        )?;
    let freq = counts.into_iter().map(|c| c as f64 / samples as f64).collect();
    Ok(Array2::from_shape_vec((n, n), freq).expect("square shape"))
}

/// Endpoint of a single walker together with its unwrapped lattice displacement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WalkerSample {
    pub site: usize,
    pub displacement: [i64; MAX_DIM],
}

/// Samples one forward walker on `[s, t]` by local thinning: candidate jumps
/// at rate `degree * alpha`, an incident bond picked uniformly, accepted with
/// probability `lambda / alpha`. Same law as [`forward_position`], but it does
/// not need the marks of the whole torus, which makes large lattices cheap.
pub fn sample_walker<R: Rng>(field: &ConductanceField, x: usize, s: f64, t: f64, rng: &mut R) -> Result<WalkerSample> {
    local_walk(field, x, s, t, rng, |_, _, _| {})
}

/// Like [`sample_walker`], also returning every jump as `(time, unwrapped displacement so far)`.
pub fn sample_walker_path<R: Rng>(
    field: &ConductanceField,
    x: usize,
    s: f64,
    t: f64,
    rng: &mut R,
) -> Result<(WalkerSample, Vec<(f64, [i64; MAX_DIM])>)> {
    let mut jumps = Vec::new();
    let end = local_walk(field, x, s, t, rng, |time, _, disp| jumps.push((time, *disp)))?;
    Ok((end, jumps))
}

fn local_walk<R: Rng>(
    field: &ConductanceField,
    x: usize,
    s: f64,
    t: f64,
    rng: &mut R,
    mut on_jump: impl FnMut(f64, usize, &[i64; MAX_DIM]),
) -> Result<WalkerSample> {
    check_interval(field, s, t, 1.0)?;
    let torus = field.torus();
    torus.check_site(x)?;
    let alpha = field.alpha();
    let mut disp = [0i64; MAX_DIM];
    let mut pos = x;
    if alpha <= 0.0 {
        return Ok(WalkerSample { site: pos, displacement: disp });
    }
    let deg = torus.incident(x).len();
    let rate = deg as f64 * alpha;
    let mut r = s;
    loop {
        r += rng::exponential(rng, rate);
        if r > t {
            break;
        }
        let inc = torus.incident(pos)[rng.random_range(0..deg)];
        let u: f64 = rng.random();
        if u * alpha < field.rate_unchecked(inc.bond, r) {
            pos = inc.neighbor;
            disp[inc.dir as usize] += inc.sign as i64;
            on_jump(r, pos, &disp);
        }
    }
    Ok(WalkerSample { site: pos, displacement: disp })
}
