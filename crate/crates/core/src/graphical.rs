//! Harris graphical construction.
//!
//! Each bond receives a homogeneous Poisson stream of rate `alpha` (inverse
//! exponential inter-arrivals); a candidate at time `T` is kept with
//! probability `lambda_T(b) / alpha`. The kept marks drive every forward walk,
//! every backward walk and the stirring dynamics of the same realization.

use rand::Rng;
use rayon::prelude::*;

use crate::environment::ConductanceField;
use crate::error::{domain, Result};
use crate::lattice::Torus;
use crate::rng::{self, Purpose};
use crate::stats::{linear_fit, LinearFit};

/// A mark of the graphical construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub time: f64,
    pub bond: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphicalRealization {
    torus: Torus,
    horizon: f64,
    seed: u64,
    events: Vec<Vec<f64>>,
    timeline: Vec<Event>,
}

impl GraphicalRealization {
    /// Builds a realization from explicit per-bond event lists (sorted and
    /// checked). Mostly useful for hand-made test scenarios and replay files.
    pub fn from_events(torus: Torus, horizon: f64, seed: u64, events: Vec<Vec<f64>>) -> Result<Self> {
        if events.len() != torus.num_bonds() {
            return domain(format!("{} event lists for {} bonds", events.len(), torus.num_bonds()));
        }
        for (b, ev) in events.iter().enumerate() {
            if ev.windows(2).any(|w| !(w[1] > w[0])) {
                return domain(format!("bond {b}: event times must be strictly increasing"));
            }
            if ev.iter().any(|&t| !(t > 0.0 && t <= horizon)) {
                return domain(format!("bond {b}: event time outside (0, {horizon}]"));
            }
        }
        let timeline = merge_timeline(&events);
        Ok(Self { torus, horizon, seed, events, timeline })
    }

    pub fn torus(&self) -> &Torus {
        &self.torus
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn events(&self, bond: usize) -> &[f64] {
        &self.events[bond]
    }

    pub fn all_events(&self) -> &[Vec<f64>] {
        &self.events
    }

    /// All marks ordered by time, ties broken by bond index.
    pub fn timeline(&self) -> &[Event] {
        &self.timeline
    }

    /// Marks with time in `(s, t]`, in chronological order.
    pub fn window(&self, s: f64, t: f64) -> &[Event] {
        let lo = self.timeline.partition_point(|e| e.time <= s);
        let hi = self.timeline.partition_point(|e| e.time <= t);
        if hi <= lo {
            &[]
        } else {
            &self.timeline[lo..hi]
        }
    }

    /// Number of marks of `bond` in `(s, t]`.
    pub fn count(&self, bond: usize, s: f64, t: f64) -> usize {
        let ev = &self.events[bond];
        ev.partition_point(|&x| x <= t) - ev.partition_point(|&x| x <= s)
    }

    pub fn num_events(&self) -> usize {
        self.timeline.len()
    }

    pub(crate) fn check_window(&self, s: f64, t: f64) -> Result<()> {
        if !(0.0 <= s && s <= t && t <= self.horizon) {
            return domain(format!("window ({s}, {t}] not inside [0, {}]", self.horizon));
        }
        Ok(())
    }
}

fn merge_timeline(events: &[Vec<f64>]) -> Vec<Event> {
    let mut timeline: Vec<Event> = events
        .iter()
        .enumerate()
        .flat_map(|(b, ev)| ev.iter().map(move |&time| Event { time, bond: b as u32 }))
        .collect();
    timeline.sort_unstable_by(|x, y| x.time.total_cmp(&y.time).then(x.bond.cmp(&y.bond)));
    timeline
}

/// Dominating rate-`alpha` candidates and the thinned marks of one bond on `(0, until]`.
fn bond_stream(field: &ConductanceField, seed: u64, bond: usize, until: f64, keep_dominating: bool) -> (Vec<f64>, Vec<f64>) {
    let alpha = field.alpha();
    let mut kept = Vec::new();
    let mut dominating = Vec::new();
    if alpha <= 0.0 {
        return (kept, dominating);
    }
    let mut r = rng::stream(seed, Purpose::Graphical, 0, bond as u64);
    let schedule = field.schedule(bond);
    let mut j = 0;
    let mut t = 0.0;
    loop {
        let next = t + rng::exponential(&mut r, alpha);
        let u: f64 = r.random();
        if next > until {
            break;
        }
        if next <= t {
            // zero gap from a unit draw of exactly 1; the candidate is dropped
            continue;
        }
        t = next;
        while j + 1 < schedule.times.len() && schedule.times[j + 1] <= t {
            j += 1;
        }
        if keep_dominating {
            dominating.push(t);
        }
        if u * alpha < schedule.levels[j] {
            kept.push(t);
        }
    }
    (kept, dominating)
}

fn build(field: &ConductanceField, seed: u64, until: f64, keep_dominating: bool) -> (GraphicalRealization, Vec<Vec<f64>>) {
    let n = field.torus().num_bonds();
    let streams: Vec<(Vec<f64>, Vec<f64>)> =
        (0..n).into_par_iter().map(|b| bond_stream(field, seed, b, until, keep_dominating)).collect();
    let (events, dominating): (Vec<Vec<f64>>, Vec<Vec<f64>>) = streams.into_iter().unzip();
    let timeline = merge_timeline(&events);
    (GraphicalRealization { torus: field.torus().clone(), horizon: until, seed, events, timeline }, dominating)
}

/// Thinned Poisson marks on `(0, horizon]` for every bond. `alpha = 0` yields empty streams.
pub fn build_graphical(field: &ConductanceField, seed: u64) -> GraphicalRealization {
    build(field, seed, field.horizon(), false).0
}

/// Like [`build_graphical`] but stops at `until <= horizon`; the marks agree
/// with the full build on `(0, until]`.
pub fn build_graphical_until(field: &ConductanceField, seed: u64, until: f64) -> Result<GraphicalRealization> {
    field.check_time(until)?;
    Ok(build(field, seed, until, false).0)
}

/// Realization together with the dominating rate-`alpha` candidate streams it was thinned from.
pub fn build_graphical_with_dominating(field: &ConductanceField, seed: u64) -> (GraphicalRealization, Vec<Vec<f64>>) {
    build(field, seed, field.horizon(), true)
}

/// `\int_s^t lambda_r(b) dr`, the compensator increment of bond `b`.
pub fn compensator(field: &ConductanceField, bond: usize, s: f64, t: f64) -> Result<f64> {
    if s > t {
        return domain(format!("reversed interval [{s}, {t}]"));
    }
    field.check_time(s)?;
    field.check_time(t)?;
    if bond >= field.torus().num_bonds() {
        return domain(format!("bond {bond} out of range"));
    }
    Ok(field.integral(bond, s, t))
}

pub(crate) struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub(crate) fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), size: vec![1; n] }
    }

    pub(crate) fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub(crate) fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        let (big, small) = if self.size[ra] >= self.size[rb] { (ra, rb) } else { (rb, ra) };
        self.parent[small] = big;
        self.size[big] += self.size[small];
    }
}

/// Connected components of the sites under the bonds carrying a mark in `(s, t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IslandPartition {
    pub window: (f64, f64),
    /// Component label of each site: the smallest site of its component.
    pub labels: Vec<usize>,
}

impl IslandPartition {
    /// Components as sorted site lists, ordered by their smallest site.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut comps: Vec<Vec<usize>> = Vec::new();
        let mut slot = vec![usize::MAX; self.labels.len()];
        for (x, &lab) in self.labels.iter().enumerate() {
            if slot[lab] == usize::MAX {
                slot[lab] = comps.len();
                comps.push(Vec::new());
            }
            comps[slot[lab]].push(x);
        }
        comps
    }

    pub fn component_of(&self, x: usize) -> Vec<usize> {
        let lab = self.labels[x];
        self.labels.iter().enumerate().filter(|(_, &l)| l == lab).map(|(y, _)| y).collect()
    }
}

pub fn active_islands(real: &GraphicalRealization, s: f64, t: f64) -> Result<IslandPartition> {
    real.check_window(s, t)?;
    let torus = real.torus();
    let mut uf = UnionFind::new(torus.num_sites());
    for (b, bond) in torus.bonds().iter().enumerate() {
        if real.count(b, s, t) > 0 {
            uf.union(bond.a, bond.b);
        }
    }
    let n = torus.num_sites();
    let mut smallest = vec![usize::MAX; n];
    for x in 0..n {
        let r = uf.find(x);
        smallest[r] = smallest[r].min(x);
    }
    let labels = (0..n).map(|x| smallest[uf.find(x)]).collect();
    Ok(IslandPartition { window: (s, t), labels })
}

/// Largest wrapped L1 distance from `x` to a site of its island.
pub fn island_radius(torus: &Torus, islands: &IslandPartition, x: usize) -> usize {
    let lab = islands.labels[x];
    islands
        .labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == lab)
        .map(|(y, _)| torus.distance(x, y))
        .max()
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadiusSurvey {
    pub window: f64,
    pub replicas: usize,
    /// `tail[n]` = empirical P(radius >= n), `n = 0..=max radius observed + 1`.
    pub tail: Vec<f64>,
    /// Fit of `ln tail[n] = intercept - chi * n`; `None` when flagged or too few points.
    pub fit: Option<LinearFit>,
    pub chi: Option<f64>,
    /// Set when islands wrap around the torus in more than 1% of replicas.
    pub supercritical: bool,
}

/// Monte Carlo survey of the radius of the island containing site 0 in the window `(0, h]`.
pub fn island_radius_survey(field: &ConductanceField, h: f64, replicas: usize, seed: u64) -> Result<RadiusSurvey> {
    if !(h > 0.0) {
        return domain(format!("window length must be positive, got {h}"));
    }
    field.check_time(h)?;
    let torus = field.torus();
    let max_radius = torus.dim() * (torus.side() / 2);
    let radii: Vec<usize> = (0..replicas as u64)
        .into_par_iter()
        .map(|rep| {
            let real = build(field, rng::derive_seed(seed, Purpose::Survey, rep), h, false).0;
            let islands = active_islands(&real, 0.0, h).expect("window inside horizon");
            island_radius(torus, &islands, 0)
        })
        .collect();
    let observed_max = radii.iter().copied().max().unwrap_or(0);
    let mut counts = vec![0usize; observed_max + 2];
    for &r in &radii {
        counts[r] += 1;
    }
    let n = replicas.max(1) as f64;
    let mut tail = vec![0.0; counts.len()];
    let mut acc = 0usize;
    for k in (0..counts.len()).rev() {
        acc += counts[k];
        tail[k] = acc as f64 / n;
    }
    let wrapped = radii.iter().filter(|&&r| r >= max_radius).count();
    let supercritical = max_radius > 0 && wrapped as f64 > 0.01 * n;

    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let mut acc = replicas;
    for (k, &c) in counts.iter().enumerate() {
        // tail count at k is `acc`; keep points with enough mass for a stable log
        if k >= 1 && acc >= 5 {
            xs.push(k as f64);
            ys.push((acc as f64 / n).ln());
        }
        acc -= c;
    }
    let fit = if supercritical { None } else { linear_fit(&xs, &ys) };
    let chi = fit.map(|f| -f.slope);
    Ok(RadiusSurvey { window: h, replicas, tail, fit, chi, supercritical })
}
