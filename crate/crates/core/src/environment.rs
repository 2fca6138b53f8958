//! Dynamic bond conductances.
//!
//! A [`ConductanceField`] stores, for every bond, a right-continuous step
//! function of micro-time on `[0, horizon]`. The global breakpoint grid is the
//! merged set of per-bond change times; on each interval of that grid the
//! generator of the walk is constant.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, validation, Result};
use crate::lattice::Torus;
use crate::rng::{self, Purpose};

/// Step function of one bond: `levels[j]` holds on `[times[j], times[j+1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BondSchedule {
    pub times: Vec<f64>,
    pub levels: Vec<f64>,
}

impl BondSchedule {
    pub fn constant(level: f64) -> Self {
        Self { times: vec![0.0], levels: vec![level] }
    }

    fn index_right(&self, t: f64) -> usize {
        // last j with times[j] <= t
        self.times.partition_point(|&s| s <= t).saturating_sub(1)
    }

    fn value_right(&self, t: f64) -> f64 {
        self.levels[self.index_right(t)]
    }

    fn value_left(&self, t: f64) -> f64 {
        // last j with times[j] < t; at t = 0 fall back to the initial level
        let j = self.times.partition_point(|&s| s < t).saturating_sub(1);
        self.levels[j]
    }

    /// `\int_s^t level(r) dr`.
    fn integral(&self, s: f64, t: f64) -> f64 {
        let mut total = 0.0;
        let mut j = self.index_right(s);
        let mut a = s;
        while a < t {
            let end = self.times.get(j + 1).copied().unwrap_or(f64::INFINITY).min(t);
            total += self.levels[j] * (end - a);
            a = end;
            j += 1;
        }
        total
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConductanceField {
    torus: Torus,
    alpha: f64,
    beta: f64,
    elliptic: bool,
    horizon: f64,
    schedules: Vec<BondSchedule>,
}

/// On-disk layout of a quenched field; `f64` values survive a round trip bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldFile {
    pub dim: usize,
    pub side: usize,
    pub alpha: f64,
    pub beta: f64,
    pub elliptic: bool,
    pub horizon: f64,
    pub breakpoints: Vec<f64>,
    pub bonds: Vec<BondSchedule>,
}

impl ConductanceField {
    pub fn from_schedules(
        torus: Torus,
        alpha: f64,
        beta: f64,
        elliptic: bool,
        horizon: f64,
        schedules: Vec<BondSchedule>,
    ) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return validation(format!("alpha must be finite and >= 0, got {alpha}"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return validation(format!("horizon must be positive, got {horizon}"));
        }
        if elliptic && !(beta > 0.0 && beta <= alpha) {
            return validation(format!("elliptic field needs 0 < beta <= alpha, got beta={beta}, alpha={alpha}"));
        }
        if schedules.len() != torus.num_bonds() {
            return validation(format!("{} schedules for {} bonds", schedules.len(), torus.num_bonds()));
        }
        for (b, sch) in schedules.iter().enumerate() {
            if sch.times.is_empty() || sch.times.len() != sch.levels.len() || sch.times[0] != 0.0 {
                return validation(format!("bond {b}: schedule must start at time 0 with one level per time"));
            }
            if sch.times.windows(2).any(|w| !(w[1] > w[0])) {
                return validation(format!("bond {b}: change times must be strictly increasing"));
            }
            for &v in &sch.levels {
                if !(0.0..=alpha).contains(&v) {
                    return validation(format!("bond {b}: level {v} outside [0, alpha={alpha}]"));
                }
                if elliptic && v < beta {
                    return validation(format!("bond {b}: level {v} below beta={beta} in an elliptic field"));
                }
            }
        }
        Ok(Self { torus, alpha, beta, elliptic, horizon, schedules })
    }

    /// Every bond at `level` for all times; `alpha = level`.
    pub fn constant(torus: Torus, level: f64, horizon: f64) -> Result<Self> {
        let n = torus.num_bonds();
        let elliptic = level > 0.0;
        Self::from_schedules(torus, level, level, elliptic, horizon, vec![BondSchedule::constant(level); n])
    }

    pub fn torus(&self) -> &Torus {
        &self.torus
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn is_elliptic(&self) -> bool {
        self.elliptic
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn schedule(&self, bond: usize) -> &BondSchedule {
        &self.schedules[bond]
    }

    /// True when every bond carries one and the same level for all times.
    pub fn homogeneous_level(&self) -> Option<f64> {
        let first = self.schedules.first()?.levels[0];
        self.schedules
            .iter()
            .all(|s| s.levels.iter().all(|&v| v == first))
            .then_some(first)
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=self.horizon).contains(&t) {
            return domain(format!("time {t} outside [0, {}]", self.horizon));
        }
        Ok(())
    }

    fn check_bond(&self, b: usize) -> Result<()> {
        if b >= self.schedules.len() {
            return domain(format!("bond {b} outside 0..{}", self.schedules.len()));
        }
        Ok(())
    }

    /// Right-continuous conductance `lambda_t(b)`.
    pub fn rate_at(&self, b: usize, t: f64) -> Result<f64> {
        self.check_bond(b)?;
        self.check_time(t)?;
        Ok(self.schedules[b].value_right(t))
    }

    /// Left limit `lambda_{t-}(b)`; equals the initial level at `t = 0`.
    pub fn rate_left(&self, b: usize, t: f64) -> Result<f64> {
        self.check_bond(b)?;
        self.check_time(t)?;
        Ok(self.schedules[b].value_left(t))
    }

    /// Unchecked right-continuous lookup for hot loops.
    #[inline]
    pub(crate) fn rate_unchecked(&self, b: usize, t: f64) -> f64 {
        self.schedules[b].value_right(t)
    }

    /// Right limits of all bonds at `t`.
    pub fn rates_at(&self, t: f64) -> Vec<f64> {
        self.schedules.iter().map(|s| s.value_right(t)).collect()
    }

    /// Left limits of all bonds at `t`.
    pub fn rates_left(&self, t: f64) -> Vec<f64> {
        self.schedules.iter().map(|s| s.value_left(t)).collect()
    }

    /// `\int_s^t lambda_r(b) dr`, exact.
    pub fn integral(&self, b: usize, s: f64, t: f64) -> f64 {
        self.schedules[b].integral(s, t)
    }

    /// The merged breakpoint grid `0 = t_0 < ... < t_m = horizon`.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut all: Vec<f64> = self
            .schedules
            .iter()
            .flat_map(|s| s.times.iter().copied())
            .filter(|&t| t > 0.0 && t < self.horizon)
            .collect();
        all.push(0.0);
        all.push(self.horizon);
        all.sort_by(f64::total_cmp);
        all.dedup();
        all
    }

    /// Grid of constant-rate pieces covering `[s, t]`: `s`, every breakpoint strictly inside, `t`.
    pub fn piece_grid(&self, s: f64, t: f64) -> Vec<f64> {
        let mut all: Vec<f64> = self
            .schedules
            .iter()
            .flat_map(|sch| sch.times.iter().copied())
            .filter(|&r| r > s && r < t)
            .collect();
        all.push(s);
        all.push(t);
        all.sort_by(f64::total_cmp);
        all.dedup();
        all
    }

    pub fn to_file(&self) -> FieldFile {
        FieldFile {
            dim: self.torus.dim(),
            side: self.torus.side(),
            alpha: self.alpha,
            beta: self.beta,
            elliptic: self.elliptic,
            horizon: self.horizon,
            breakpoints: self.breakpoints(),
            bonds: self.schedules.clone(),
        }
    }

    pub fn from_file(file: FieldFile) -> Result<Self> {
        let torus = Torus::new(file.dim, file.side)?;
        Self::from_schedules(torus, file.alpha, file.beta, file.elliptic, file.horizon, file.bonds)
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer(w, &self.to_file())?;
        Ok(())
    }

    pub fn read_json<R: Read>(r: R) -> Result<Self> {
        Self::from_file(serde_json::from_reader(r)?)
    }
}

/// Family of environments that can be sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvironmentKind {
    /// Time-independent. One level: homogeneous; several: each bond picks one uniformly.
    Static { levels: Vec<f64> },
    /// Levels switch at fixed times (`switch_times`, or every `period`).
    /// Without `randomize` interval `j` uses `levels[j % len]` on every bond;
    /// with it every (bond, interval) pair draws a level uniformly.
    PiecewiseDeterministic {
        #[serde(default)]
        switch_times: Vec<f64>,
        #[serde(default)]
        period: Option<f64>,
        levels: Vec<f64>,
        #[serde(default)]
        randomize: bool,
    },
    /// Independent two-state chains on `{low, high}` flipping at rate `gamma`, started from the uniform law.
    MarkovFlip { low: f64, high: f64, gamma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub dim: usize,
    pub side: usize,
    pub alpha: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default)]
    pub elliptic: bool,
    pub horizon: f64,
    pub seed: u64,
    #[serde(flatten)]
    pub kind: EnvironmentKind,
}

impl EnvironmentSpec {
    pub fn new(dim: usize, side: usize, alpha: f64, horizon: f64, seed: u64, kind: EnvironmentKind) -> Self {
        Self { dim, side, alpha, beta: 0.0, elliptic: false, horizon, seed, kind }
    }

    pub fn with_ellipticity(mut self, beta: f64) -> Self {
        self.beta = beta;
        self.elliptic = true;
        self
    }

    /// Same environment law on a different lattice/horizon.
    pub fn rescaled(&self, side: usize, horizon: f64) -> Self {
        Self { side, horizon, ..self.clone() }
    }

    fn levels(&self) -> Vec<f64> {
        match &self.kind {
            EnvironmentKind::Static { levels } => levels.clone(),
            EnvironmentKind::PiecewiseDeterministic { levels, .. } => levels.clone(),
            EnvironmentKind::MarkovFlip { low, high, .. } => vec![*low, *high],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.levels();
        if levels.is_empty() {
            return validation("environment needs at least one level");
        }
        for &v in &levels {
            if !(0.0..=self.alpha).contains(&v) {
                return validation(format!("level {v} outside [0, alpha={}]", self.alpha));
            }
            if self.elliptic && v < self.beta {
                return validation(format!("level {v} below beta={} in an elliptic environment", self.beta));
            }
        }
        match &self.kind {
            EnvironmentKind::MarkovFlip { gamma, .. } if !(*gamma >= 0.0 && gamma.is_finite()) => {
                validation(format!("flip rate must be finite and >= 0, got {gamma}"))
            }
            EnvironmentKind::PiecewiseDeterministic { period: Some(p), .. } if !(*p > 0.0) => {
                validation(format!("switching period must be positive, got {p}"))
            }
            _ => Ok(()),
        }
    }

    /// True if the law forces every bond to one constant level.
    pub fn static_homogeneous_level(&self) -> Option<f64> {
        match &self.kind {
            EnvironmentKind::Static { levels } if levels.iter().all(|&v| v == levels[0]) => Some(levels[0]),
            _ => None,
        }
    }
}

fn compress(times: Vec<f64>, levels: Vec<f64>) -> BondSchedule {
    let mut out = BondSchedule { times: Vec::with_capacity(times.len()), levels: Vec::with_capacity(levels.len()) };
    for (t, v) in times.into_iter().zip(levels) {
        if out.levels.last() != Some(&v) {
            out.times.push(t);
            out.levels.push(v);
        }
    }
    out
}

/// Draws one quenched realization of the environment described by `spec`.
/// Bond `b` uses its own stream, so the result does not depend on thread count.
pub fn sample_environment(spec: &EnvironmentSpec) -> Result<ConductanceField> {
    spec.validate()?;
    let torus = Torus::new(spec.dim, spec.side)?;
    let n_bonds = torus.num_bonds();
    let horizon = spec.horizon;
    let schedules: Vec<BondSchedule> = match &spec.kind {
        EnvironmentKind::Static { levels } => (0..n_bonds)
            .map(|b| {
                if levels.len() == 1 {
                    BondSchedule::constant(levels[0])
                } else {
                    let mut r = rng::stream(spec.seed, Purpose::Environment, 0, b as u64);
                    BondSchedule::constant(levels[r.random_range(0..levels.len())])
                }
            })
            .collect(),
        EnvironmentKind::PiecewiseDeterministic { switch_times, period, levels, randomize } => {
            let mut grid: Vec<f64> = vec![0.0];
            match period {
                Some(p) => {
                    let mut k = 1.0;
                    while k * p < horizon {
                        grid.push(k * p);
                        k += 1.0;
                    }
                }
                None => grid.extend(switch_times.iter().copied().filter(|&t| t > 0.0 && t < horizon)),
            }
            grid.sort_by(f64::total_cmp);
            grid.dedup();
            (0..n_bonds)
                .map(|b| {
                    let mut r = rng::stream(spec.seed, Purpose::Environment, 0, b as u64);
                    let lv: Vec<f64> = (0..grid.len())
                        .map(|j| if *randomize { levels[r.random_range(0..levels.len())] } else { levels[j % levels.len()] })
                        .collect();
                    compress(grid.clone(), lv)
                })
                .collect()
        }
        EnvironmentKind::MarkovFlip { low, high, gamma } => (0..n_bonds)
            .map(|b| {
                let mut r = rng::stream(spec.seed, Purpose::Environment, 0, b as u64);
                let mut state = r.random_bool(0.5);
                let mut times = vec![0.0];
                let mut levels = vec![if state { *high } else { *low }];
                if *gamma > 0.0 {
                    let mut t = 0.0;
                    loop {
                        t += rng::exponential(&mut r, *gamma);
                        if t >= horizon {
                            break;
                        }
                        if t <= *times.last().unwrap() {
                            continue;
                        }
                        state = !state;
                        times.push(t);
                        levels.push(if state { *high } else { *low });
                    }
                }
                // low == high collapses the flips away
                compress(times, levels)
            })
            .collect(),
    };
    ConductanceField::from_schedules(torus, spec.alpha, spec.beta, spec.elliptic, horizon, schedules)
}

/// Flip times of a Markov-flip bond (the raw change times of its schedule).
pub fn flip_times(field: &ConductanceField, bond: usize) -> &[f64] {
    &field.schedule(bond).times[1..]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flip_spec(seed: u64, gamma: f64) -> EnvironmentSpec {
        EnvironmentSpec::new(1, 2, 2.0, 10.0, seed, EnvironmentKind::MarkovFlip { low: 1.0, high: 2.0, gamma })
    }

    #[test]
    fn static_field_is_one_interval() {
        let spec = EnvironmentSpec::new(2, 4, 1.0, 5.0, 0, EnvironmentKind::Static { levels: vec![1.0] });
        let f = sample_environment(&spec).unwrap();
        assert_eq!(f.breakpoints(), vec![0.0, 5.0]);
        for b in 0..f.torus().num_bonds() {
            assert_eq!(f.rate_at(b, 3.3).unwrap(), 1.0);
        }
        assert_eq!(f.homogeneous_level(), Some(1.0));
    }

    #[test]
    fn zero_flip_rate_keeps_initial_levels() {
        let f = sample_environment(&flip_spec(4, 0.0)).unwrap();
        let v0 = f.rate_at(0, 0.0).unwrap();
        for i in 0..100 {
            assert_eq!(f.rate_at(0, i as f64 * 0.1).unwrap(), v0);
        }
    }

    #[test]
    fn cadlag_lookup_at_breakpoint() {
        let torus = Torus::new(1, 3).unwrap();
        let mut schedules = vec![BondSchedule::constant(1.0); 3];
        schedules[1] = BondSchedule { times: vec![0.0, 2.0], levels: vec![1.0, 2.0] };
        let f = ConductanceField::from_schedules(torus, 2.0, 0.0, false, 4.0, schedules).unwrap();
        assert_eq!(f.rate_at(1, 2.0).unwrap(), 2.0);
        assert_eq!(f.rate_left(1, 2.0).unwrap(), 1.0);
        assert_eq!(f.rate_left(1, 0.0).unwrap(), 1.0);
        assert_eq!(f.rate_at(1, 1.999).unwrap(), 1.0);
        assert!(matches!(f.rate_at(1, 4.5), Err(crate::Error::Domain(_))));
        assert!(f.rate_at(1, -0.1).is_err());
    }

    #[test]
    fn levels_outside_bounds_are_rejected() {
        let spec = EnvironmentSpec::new(1, 4, 1.0, 1.0, 0, EnvironmentKind::Static { levels: vec![1.5] });
        assert!(matches!(sample_environment(&spec), Err(crate::Error::Validation(_))));
        let spec = EnvironmentSpec::new(1, 4, 2.0, 1.0, 0, EnvironmentKind::MarkovFlip { low: 0.5, high: 2.0, gamma: 1.0 })
            .with_ellipticity(1.0);
        assert!(sample_environment(&spec).is_err());
    }

    #[test]
    fn markov_flip_lookup_replays_flips() {
        let f = sample_environment(&flip_spec(9, 3.0)).unwrap();
        let flips = flip_times(&f, 0).to_vec();
        let mut level = f.rate_at(0, 0.0).unwrap();
        let mut prev = 0.0;
        for &tf in &flips {
            // constant strictly between flips, switches at the flip
            assert_eq!(f.rate_at(0, 0.5 * (prev + tf)).unwrap(), level);
            assert_eq!(f.rate_left(0, tf).unwrap(), level);
            level = if level == 1.0 { 2.0 } else { 1.0 };
            assert_eq!(f.rate_at(0, tf).unwrap(), level);
            prev = tf;
        }
    }

    #[test]
    fn flip_counts_match_poisson_statistics() {
        // gamma * T = 30
        let counts: Vec<f64> = (0..400u64).map(|s| flip_times(&sample_environment(&flip_spec(s, 3.0)).unwrap(), 0).len() as f64).collect();
        let n = counts.len() as f64;
        let mean = counts.iter().sum::<f64>() / n;
        let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean - 30.0).abs() < 3.0 * (30.0f64 / n).sqrt(), "mean {mean}");
        let var_se = ((30.0 + 2.0 * 900.0) / n).sqrt();
        assert!((var - 30.0).abs() < 3.0 * var_se, "var {var}");
    }

    #[test]
    fn sampling_is_deterministic_and_json_is_bit_exact() {
        let spec = EnvironmentSpec::new(2, 3, 2.0, 6.0, 77, EnvironmentKind::MarkovFlip { low: 0.5, high: 2.0, gamma: 0.7 });
        let a = sample_environment(&spec).unwrap();
        let b = sample_environment(&spec).unwrap();
        assert_eq!(a, b);
        let mut buf = Vec::new();
        a.write_json(&mut buf).unwrap();
        let c = ConductanceField::read_json(buf.as_slice()).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn piecewise_periodic_schedule() {
        let spec = EnvironmentSpec::new(
            1,
            4,
            3.0,
            3.5,
            0,
            EnvironmentKind::PiecewiseDeterministic { switch_times: vec![], period: Some(1.0), levels: vec![1.0, 3.0], randomize: false },
        );
        let f = sample_environment(&spec).unwrap();
        assert_eq!(f.breakpoints(), vec![0.0, 1.0, 2.0, 3.0, 3.5]);
        assert_eq!(f.rate_at(2, 0.5).unwrap(), 1.0);
        assert_eq!(f.rate_at(2, 1.5).unwrap(), 3.0);
        assert_eq!(f.rate_at(2, 2.0).unwrap(), 1.0);
        assert!((f.integral(0, 0.5, 1.5) - 2.0).abs() < 1e-15);
    }
}
