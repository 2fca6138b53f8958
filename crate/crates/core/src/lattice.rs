//! Periodic lattice geometry and the test-function dictionary.
//!
//! Sites of the torus `(Z / LZ)^d` are indexed lexicographically with the
//! first coordinate varying fastest. Every site owns one bond per direction,
//! pointing to its `+e_i` neighbour, which gives `d * L^d` bonds when `L >= 3`.
//!
//! For `L = 2` the `+e_i` and `-e_i` neighbours coincide. We keep a single
//! bond per adjacent pair in that case (owned by the site whose `i`-th
//! coordinate is 0), so the two-site ring is one bond, each site has degree
//! `d`, and there are `d * L^d / 2` bonds.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{domain, validation, Result};

pub const MAX_DIM: usize = 3;

/// A nearest-neighbour bond. `b` is the `+e_dir` neighbour of `a`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub dir: usize,
}

impl Bond {
    /// The other endpoint, or `None` if `x` is not on the bond.
    pub fn other(&self, x: usize) -> Option<usize> {
        if x == self.a {
            Some(self.b)
        } else if x == self.b {
            Some(self.a)
        } else {
            None
        }
    }

    pub fn contains(&self, x: usize) -> bool {
        x == self.a || x == self.b
    }
}

/// An incident bond seen from one of its endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Incidence {
    pub bond: usize,
    pub neighbor: usize,
    /// +1 if `neighbor` is the `+e_dir` end, -1 otherwise.
    pub sign: i8,
    pub dir: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Torus {
    d: usize,
    l: usize,
    n_sites: usize,
    bonds: Vec<Bond>,
    offsets: Vec<usize>,
    incidences: Vec<Incidence>,
}

impl Torus {
    pub fn new(d: usize, l: usize) -> Result<Self> {
        if !(1..=MAX_DIM).contains(&d) {
            return validation(format!("dimension must be 1..=3, got {d}"));
        }
        if l < 2 {
            return validation(format!("side length must be at least 2, got {l}"));
        }
        let n_sites = l
            .checked_pow(d as u32)
            .filter(|&n| n <= u32::MAX as usize)
            .ok_or_else(|| crate::Error::Validation(format!("torus {l}^{d} too large")))?;

        let mut bonds = Vec::with_capacity(d * n_sites);
        for x in 0..n_sites {
            let mut s = 1;
            for dir in 0..d {
                let c = (x / s) % l;
                if !(l == 2 && c == 1) {
                    let y = if c + 1 == l { x + s - l * s } else { x + s };
                    bonds.push(Bond { a: x, b: y, dir });
                }
                s *= l;
            }
        }

        let mut degree = vec![0usize; n_sites];
        for bond in &bonds {
            degree[bond.a] += 1;
            degree[bond.b] += 1;
        }
        let mut offsets = vec![0usize; n_sites + 1];
        for x in 0..n_sites {
            offsets[x + 1] = offsets[x] + degree[x];
        }
        let mut fill = offsets.clone();
        let mut incidences = vec![
            Incidence {
                bond: 0,
                neighbor: 0,
                sign: 0,
                dir: 0
            };
            offsets[n_sites]
        ];
        for (i, bond) in bonds.iter().enumerate() {
            incidences[fill[bond.a]] = Incidence { bond: i, neighbor: bond.b, sign: 1, dir: bond.dir as u8 };
            fill[bond.a] += 1;
            incidences[fill[bond.b]] = Incidence { bond: i, neighbor: bond.a, sign: -1, dir: bond.dir as u8 };
            fill[bond.b] += 1;
        }

        Ok(Self { d, l, n_sites, bonds, offsets, incidences })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn side(&self) -> usize {
        self.l
    }

    pub fn num_sites(&self) -> usize {
        self.n_sites
    }

    pub fn num_bonds(&self) -> usize {
        self.bonds.len()
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn bond(&self, index: usize) -> Bond {
        self.bonds[index]
    }

    pub fn check_site(&self, x: usize) -> Result<()> {
        if x >= self.n_sites {
            return domain(format!("site {x} outside torus with {} sites", self.n_sites));
        }
        Ok(())
    }

    /// Bonds incident to `x`; panics on an invalid site.
    pub fn incident(&self, x: usize) -> &[Incidence] {
        &self.incidences[self.offsets[x]..self.offsets[x + 1]]
    }

    /// Nearest neighbours of `x`, one entry per incident bond (`2d` entries
    /// for `L >= 3`, `d` for `L = 2`).
    pub fn neighbors(&self, x: usize) -> Result<Vec<usize>> {
        self.check_site(x)?;
        Ok(self.incident(x).iter().map(|inc| inc.neighbor).collect())
    }

    /// Index of the bond joining `x` and `y`, in either orientation.
    pub fn bond_between(&self, x: usize, y: usize) -> Option<usize> {
        if x >= self.n_sites || y >= self.n_sites {
            return None;
        }
        self.incident(x).iter().find(|inc| inc.neighbor == y).map(|inc| inc.bond)
    }

    pub fn coords(&self, x: usize) -> [usize; MAX_DIM] {
        let mut c = [0; MAX_DIM];
        let mut rest = x;
        for ci in c.iter_mut().take(self.d) {
            *ci = rest % self.l;
            rest /= self.l;
        }
        c
    }

    pub fn site(&self, coords: &[usize]) -> Result<usize> {
        if coords.len() != self.d {
            return domain(format!("expected {} coordinates, got {}", self.d, coords.len()));
        }
        let mut x = 0;
        let mut s = 1;
        for &c in coords {
            if c >= self.l {
                return domain(format!("coordinate {c} outside 0..{}", self.l));
            }
            x += c * s;
            s *= self.l;
        }
        Ok(x)
    }

    /// Site nearest to the macroscopic point `u` (coordinates taken modulo 1).
    pub fn site_near(&self, u: &[f64]) -> Result<usize> {
        if u.len() != self.d {
            return domain(format!("expected a {}-dimensional point", self.d));
        }
        let coords: Vec<usize> = u
            .iter()
            .map(|&ui| ((ui * self.l as f64).round() as i64).rem_euclid(self.l as i64) as usize)
            .collect();
        self.site(&coords)
    }

    /// Minimum-image displacement `y - x`, per coordinate.
    pub fn displacement(&self, x: usize, y: usize) -> [i64; MAX_DIM] {
        let (cx, cy) = (self.coords(x), self.coords(y));
        let l = self.l as i64;
        let mut out = [0i64; MAX_DIM];
        for i in 0..self.d {
            let mut v = (cy[i] as i64 - cx[i] as i64).rem_euclid(l);
            if v > l / 2 {
                v -= l;
            }
            out[i] = v;
        }
        out
    }

    /// Wrapped L1 distance.
    pub fn distance(&self, x: usize, y: usize) -> usize {
        self.displacement(x, y).iter().map(|v| v.unsigned_abs() as usize).sum()
    }

    /// Macroscopic position `x / L` in the unit torus.
    pub fn macro_point(&self, x: usize) -> [f64; MAX_DIM] {
        let c = self.coords(x);
        let mut u = [0.0; MAX_DIM];
        for i in 0..self.d {
            u[i] = c[i] as f64 / self.l as f64;
        }
        u
    }
}

/// One term `cos_coef * cos(2 pi k.u) + sin_coef * sin(2 pi k.u)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrigTerm {
    pub k: Vec<i64>,
    #[serde(default)]
    pub cos: f64,
    #[serde(default)]
    pub sin: f64,
}

/// Real trigonometric polynomial on the unit torus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrigPoly {
    pub dim: usize,
    pub terms: Vec<TrigTerm>,
}

fn phase(k: &[i64], u: &[f64]) -> f64 {
    2.0 * PI * k.iter().zip(u).map(|(&ki, &ui)| ki as f64 * ui).sum::<f64>()
}

/// Orientation with the first nonzero component positive; returns whether `k` was flipped.
fn canonical_k(k: &[i64]) -> (Vec<i64>, bool) {
    match k.iter().find(|&&v| v != 0) {
        Some(&v) if v < 0 => (k.iter().map(|v| -v).collect(), true),
        _ => (k.to_vec(), false),
    }
}

impl TrigPoly {
    pub fn constant(dim: usize, value: f64) -> Self {
        Self { dim, terms: vec![TrigTerm { k: vec![0; dim], cos: value, sin: 0.0 }] }
    }

    pub fn cos_mode(k: &[i64], amplitude: f64) -> Self {
        Self { dim: k.len(), terms: vec![TrigTerm { k: k.to_vec(), cos: amplitude, sin: 0.0 }] }
    }

    pub fn sin_mode(k: &[i64], amplitude: f64) -> Self {
        Self { dim: k.len(), terms: vec![TrigTerm { k: k.to_vec(), cos: 0.0, sin: amplitude }] }
    }

    pub fn plus(mut self, other: &TrigPoly) -> Self {
        self.terms.extend(other.terms.iter().cloned());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_DIM).contains(&self.dim) {
            return validation(format!("trig polynomial dimension {} not in 1..=3", self.dim));
        }
        for t in &self.terms {
            if t.k.len() != self.dim {
                return validation(format!("mode {:?} does not match dimension {}", t.k, self.dim));
            }
            if !t.cos.is_finite() || !t.sin.is_finite() {
                return validation("non-finite trigonometric coefficient");
            }
        }
        Ok(())
    }

    pub fn eval(&self, u: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let th = phase(&t.k, u);
                t.cos * th.cos() + t.sin * th.sin()
            })
            .sum()
    }

    /// Largest |k_i| over all terms.
    pub fn max_mode(&self) -> i64 {
        self.terms.iter().flat_map(|t| t.k.iter().map(|v| v.abs())).max().unwrap_or(0)
    }

    /// Merges `k` and `-k`, combines duplicates and drops zero terms. The
    /// result is sorted by mode so pairings are order-independent.
    pub fn canonical(&self) -> Self {
        let mut merged: Vec<TrigTerm> = Vec::new();
        for t in &self.terms {
            let (k, flipped) = canonical_k(&t.k);
            let zero = k.iter().all(|&v| v == 0);
            let sin = if zero { 0.0 } else if flipped { -t.sin } else { t.sin };
            match merged.iter_mut().find(|m| m.k == k) {
                Some(m) => {
                    m.cos += t.cos;
                    m.sin += sin;
                }
                None => merged.push(TrigTerm { k, cos: t.cos, sin }),
            }
        }
        merged.retain(|t| t.cos != 0.0 || t.sin != 0.0);
        merged.sort_by(|a, b| a.k.cmp(&b.k));
        Self { dim: self.dim, terms: merged }
    }

    /// `\int_{[0,1)^d} f g du`, exact.
    pub fn pairing(&self, other: &TrigPoly) -> f64 {
        let (a, b) = (self.canonical(), other.canonical());
        let mut total = 0.0;
        for ta in &a.terms {
            if let Some(tb) = b.terms.iter().find(|t| t.k == ta.k) {
                if ta.k.iter().all(|&v| v == 0) {
                    total += ta.cos * tb.cos;
                } else {
                    total += 0.5 * (ta.cos * tb.cos + ta.sin * tb.sin);
                }
            }
        }
        total
    }

    /// Multiplies the coefficients of mode `k` by `factor(k)`.
    pub fn scale_modes(&self, factor: impl Fn(&[i64]) -> f64) -> Self {
        Self {
            dim: self.dim,
            terms: self
                .terms
                .iter()
                .map(|t| {
                    let f = factor(&t.k);
                    TrigTerm { k: t.k.clone(), cos: t.cos * f, sin: t.sin * f }
                })
                .collect(),
        }
    }

    /// Sum of absolute coefficients, an upper bound for the sup norm.
    pub fn coefficient_l1(&self) -> f64 {
        self.canonical().terms.iter().map(|t| t.cos.abs() + t.sin.abs()).sum()
    }

    /// Mean over the torus (the zero mode).
    pub fn mean(&self) -> f64 {
        self.terms.iter().filter(|t| t.k.iter().all(|&v| v == 0)).map(|t| t.cos).sum()
    }
}

/// Smooth periodic test function used to pair against empirical fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestFunction {
    Trig(TrigPoly),
    /// `amplitude * sum_m exp(-|u - center - m|^2 / (2 width^2))` over integer images `m`.
    WrappedGaussian { center: Vec<f64>, width: f64, amplitude: f64 },
}

fn gaussian_series_1d(width: f64, kmax: Option<i64>) -> f64 {
    let c = 2.0 * PI * PI * width * width;
    let mut total = 1.0;
    let mut j = 1i64;
    loop {
        if let Some(k) = kmax {
            if j > k {
                break;
            }
        }
        let term = (-c * (j * j) as f64).exp();
        total += 2.0 * term;
        if term < 1e-300 || (kmax.is_none() && term < 1e-18 * total) {
            break;
        }
        j += 1;
    }
    total
}

impl TestFunction {
    pub fn constant(dim: usize, value: f64) -> Self {
        TestFunction::Trig(TrigPoly::constant(dim, value))
    }

    pub fn cos(k: &[i64]) -> Self {
        TestFunction::Trig(TrigPoly::cos_mode(k, 1.0))
    }

    pub fn sin(k: &[i64]) -> Self {
        TestFunction::Trig(TrigPoly::sin_mode(k, 1.0))
    }

    pub fn dim(&self) -> usize {
        match self {
            TestFunction::Trig(p) => p.dim,
            TestFunction::WrappedGaussian { center, .. } => center.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TestFunction::Trig(p) => p.validate(),
            TestFunction::WrappedGaussian { center, width, amplitude } => {
                if !(1..=MAX_DIM).contains(&center.len()) {
                    return validation("wrapped Gaussian center must have 1..=3 coordinates");
                }
                if !(*width > 0.0 && width.is_finite()) || !amplitude.is_finite() {
                    return validation(format!("invalid wrapped Gaussian width {width}"));
                }
                Ok(())
            }
        }
    }

    pub fn eval(&self, u: &[f64]) -> f64 {
        match self {
            TestFunction::Trig(p) => p.eval(u),
            TestFunction::WrappedGaussian { center, width, amplitude } => {
                let d = center.len();
                let images = (8.0 * width).ceil() as i64 + 1;
                let span = (2 * images + 1) as usize;
                let total_images = span.pow(d as u32);
                let mut sum = 0.0;
                for idx in 0..total_images {
                    let mut r2 = 0.0;
                    let mut rest = idx;
                    for i in 0..d {
                        let m = (rest % span) as i64 - images;
                        rest /= span;
                        let diff = u[i] - center[i] - m as f64;
                        r2 += diff * diff;
                    }
                    sum += (-r2 / (2.0 * width * width)).exp();
                }
                amplitude * sum
            }
        }
    }

    /// Evaluates `G(x / L)` at every site of the torus.
    pub fn sample_on(&self, torus: &Torus) -> Vec<f64> {
        (0..torus.num_sites()).map(|x| self.eval(&torus.macro_point(x)[..torus.dim()])).collect()
    }

    /// Projection onto modes `|k_i| <= max_mode`, with a bound on the sup-norm
    /// truncation error (zero for trigonometric inputs within the box).
    pub fn to_trig(&self, max_mode: i64) -> (TrigPoly, f64) {
        match self {
            TestFunction::Trig(p) => {
                let kept = TrigPoly {
                    dim: p.dim,
                    terms: p.terms.iter().filter(|t| t.k.iter().all(|v| v.abs() <= max_mode)).cloned().collect(),
                };
                let dropped: f64 = p
                    .terms
                    .iter()
                    .filter(|t| t.k.iter().any(|v| v.abs() > max_mode))
                    .map(|t| t.cos.abs() + t.sin.abs())
                    .sum();
                (kept, dropped)
            }
            TestFunction::WrappedGaussian { center, width, amplitude } => {
                let d = center.len();
                let scale = amplitude * (2.0 * PI * width * width).powf(d as f64 / 2.0);
                let c = 2.0 * PI * PI * width * width;
                let span = (2 * max_mode + 1) as usize;
                let mut terms = Vec::new();
                for idx in 0..span.pow(d as u32) {
                    let mut rest = idx;
                    let k: Vec<i64> = (0..d)
                        .map(|_| {
                            let v = (rest % span) as i64 - max_mode;
                            rest /= span;
                            v
                        })
                        .collect();
                    let (ck, flipped) = canonical_k(&k);
                    if flipped {
                        continue;
                    }
                    let k2: i64 = ck.iter().map(|v| v * v).sum();
                    let a = scale * (-c * k2 as f64).exp();
                    if k2 == 0 {
                        terms.push(TrigTerm { k: ck, cos: a, sin: 0.0 });
                    } else {
                        let th = phase(&ck, center);
                        terms.push(TrigTerm { k: ck, cos: 2.0 * a * th.cos(), sin: 2.0 * a * th.sin() });
                    }
                }
                let full = gaussian_series_1d(*width, None).powi(d as i32);
                let boxed = gaussian_series_1d(*width, Some(max_mode)).powi(d as i32);
                let err = (scale * (full - boxed)).max(0.0);
                (TrigPoly { dim: d, terms }, err)
            }
        }
    }

    /// Smallest mode cutoff whose truncation error is below `tol`.
    pub fn modes_for(&self, tol: f64) -> i64 {
        match self {
            TestFunction::Trig(p) => p.max_mode(),
            TestFunction::WrappedGaussian { .. } => {
                let mut k = 1;
                while self.to_trig(k).1 > tol && k < 256 {
                    k += 1;
                }
                k
            }
        }
    }

    /// Standard dictionary: the constant plus `cos` and `sin` of every
    /// canonical mode with `|k_i| <= max_mode`.
    pub fn dictionary(dim: usize, max_mode: i64) -> Vec<(String, TestFunction)> {
        let mut out = vec![("const".to_string(), TestFunction::constant(dim, 1.0))];
        let span = (2 * max_mode + 1) as usize;
        for idx in 0..span.pow(dim as u32) {
            let mut rest = idx;
            let k: Vec<i64> = (0..dim)
                .map(|_| {
                    let v = (rest % span) as i64 - max_mode;
                    rest /= span;
                    v
                })
                .collect();
            let (_, flipped) = canonical_k(&k);
            if flipped || k.iter().all(|&v| v == 0) {
                continue;
            }
            let label: Vec<String> = k.iter().map(|v| v.to_string()).collect();
            let label = label.join("_");
            out.push((format!("cos_{label}"), TestFunction::cos(&k)));
            out.push((format!("sin_{label}"), TestFunction::sin(&k)));
        }
        out
    }

    /// Sup of |G| on a uniform grid of `per_axis^d` points (exact bound for
    /// trigonometric inputs is `coefficient_l1`).
    pub fn sup_norm(&self, per_axis: usize) -> f64 {
        let d = self.dim();
        let mut best: f64 = 0.0;
        let mut u = vec![0.0; d];
        for idx in 0..per_axis.pow(d as u32) {
            let mut rest = idx;
            for ui in u.iter_mut() {
                *ui = (rest % per_axis) as f64 / per_axis as f64;
                rest /= per_axis;
            }
            best = best.max(self.eval(&u).abs());
        }
        best
    }
}
