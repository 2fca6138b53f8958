//! One function per subcommand: run the experiment, write its tables, return violated thresholds.

use rayon::prelude::*;
use serde::Serialize;
use ssep_core::environment::sample_environment;
use ssep_core::exclusion::{mild_decomposition, record_trajectory, Configuration};
use ssep_core::graphical::{build_graphical, island_radius_survey};
use ssep_core::hydro::{
    arbitrary_start_check, compare_starts, estimate_sigma, hoelder_diagnostic, hydro_experiment, kernel_decay_fit, noise_variance_check,
    resolve_sigma, CovarianceMatrix, SigmaEstimate,
};
use ssep_core::rng::{self, Purpose};
use ssep_core::tightness::{conditional_tail_estimate, modulus_w3, psi_field_quantities, rescaled_walk_paths, StepPath};
use ssep_core::walks::{backward_position, kernel_backward, kernel_forward};

use crate::config::*;
use crate::manifest::Output;
use crate::CliError;

pub type Failures = Vec<String>;

fn bernoulli(n: usize, density: f64, seed: u64, replica: u64) -> Configuration {
    let mut r = rng::stream(seed, Purpose::InitialConfig, replica, 0);
    Configuration::bernoulli(n, |_| density, &mut r)
}

#[derive(Serialize)]
struct TailRow {
    n: usize,
    tail: f64,
}

pub fn env(l: &Loaded<EnvBlock>, out: &mut Output) -> Result<Failures, CliError> {
    let b = &l.block;
    let field = sample_environment(&b.environment)?;
    field.write_json(out.create("field.json")?)?;
    let summary = serde_json::json!({
        "sites": field.torus().num_sites(),
        "bonds": field.torus().num_bonds(),
        "breakpoints": field.breakpoints().len(),
        "alpha": field.alpha(),
        "elliptic": field.is_elliptic(),
        "homogeneous_level": field.homogeneous_level(),
    });
    if let Some(s) = &b.survey {
        let survey = island_radius_survey(&field, s.h, s.replicas, l.seed)?;
        let rows: Vec<TailRow> = survey.tail.iter().enumerate().map(|(n, &tail)| TailRow { n, tail }).collect();
        out.write_rows("radius_tail.csv", &["n", "tail"], &rows)?;
        println!("island radius survey: chi-hat {:?}, supercritical {}", survey.chi, survey.supercritical);
    }
    println!("environment: {} bonds, {} breakpoints", field.torus().num_bonds(), field.breakpoints().len());
    out.write_json("summary.json", &summary)?;
    Ok(Vec::new())
}

pub fn kernel(l: &Loaded<KernelBlock>, out: &mut Output) -> Result<Failures, CliError> {
    let b = &l.block;
    let field = sample_environment(&b.environment)?;
    let k = if b.backward { kernel_backward(&field, b.s, b.t, b.tol)? } else { kernel_forward(&field, b.s, b.t, b.tol)? };
    k.write_csv(out.create("kernel.csv")?)?;
    let (rows, cols) = (k.max_row_sum_deviation(), k.max_column_sum_deviation());
    let summary = serde_json::json!({
        "direction": if b.backward { "backward" } else { "forward" },
        "max_row_sum_deviation": rows,
        "max_column_sum_deviation": cols,
        "min_entry": k.min_entry(),
    });
    out.write_json("summary.json", &summary)?;
    println!("row-sum deviation {rows:.2e}, column-sum deviation {cols:.2e}");
    let mut failures = Vec::new();
    if rows.max(cols) > 1e-10 {
        failures.push(format!("stochasticity deviation {:.2e} > 1e-10", rows.max(cols)));
    }
    Ok(failures)
}

#[derive(Serialize)]
struct DualityRow {
    replica: usize,
    t: f64,
    violations: usize,
}

pub fn duality(l: &Loaded<DualityBlock>, out: &mut Output) -> Result<Failures, CliError> {
    let b = &l.block;
    let field = sample_environment(&b.environment)?;
    let sites = field.torus().num_sites();
    let mut times = b.times.clone();
    times.sort_by(f64::total_cmp);
    let rows: Vec<Vec<DualityRow>> = (0..b.realizations)
        .into_par_iter()
        .map(|rep| -> ssep_core::Result<Vec<DualityRow>> {
            let real = build_graphical(&field, rng::derive_seed(l.seed, Purpose::Graphical, rep as u64));
            let eta0 = bernoulli(sites, b.density, l.seed, rep as u64);
            let traj = record_trajectory(&real, &eta0, &times)?;
            times
                .iter()
                .zip(&traj.snapshots)
                .map(|(&t, eta)| {
                    let mut violations = 0;
                    for x in 0..sites {
                        if eta.get(x) != eta0.get(backward_position(&real, x, 0.0, t)?) {
                            violations += 1;
                        }
                    }
                    Ok(DualityRow { replica: rep, t, violations })
                })
                .collect()
        })
        .collect::<ssep_core::Result<_>>()?;
    let rows: Vec<DualityRow> = rows.into_iter().flatten().collect();
    let total: usize = rows.iter().map(|r| r.violations).sum();
    out.write_rows("duality.csv", &["replica", "t", "violations"], &rows)?;
    out.write_json("summary.json", &serde_json::json!({ "checks": rows.len() * sites, "violations": total }))?;
    println!("violations: {total}");
    Ok(if total > 0 { vec![format!("{total} duality violations")] } else { Vec::new() })
}

#[derive(Serialize)]
struct MildRow {
    replica: usize,
    t: f64,
    site: usize,
    drift: f64,
    jumps: f64,
    compensator: f64,
    mild: f64,
    occupation: u8,
    residual: f64,
}

pub fn mild(l: &Loaded<MildBlock>, out: &mut Output) -> Result<Failures, CliError> {
    let b = &l.block;
    let field = sample_environment(&b.environment)?;
    let sites = field.torus().num_sites();
    let rows: Vec<Vec<MildRow>> = (0..b.realizations)
        .into_par_iter()
        .map(|rep| -> ssep_core::Result<Vec<MildRow>> {
            let real = build_graphical(&field, rng::derive_seed(l.seed, Purpose::Graphical, rep as u64));
            let eta0 = bernoulli(sites, b.density, l.seed, rep as u64);
            let mut rows = Vec::new();
            for &t in &b.times {
                for x in 0..sites {
                    let d = mild_decomposition(&real, &field, &eta0, x, t, b.quad_tol)?;
                    rows.push(MildRow {
                        replica: rep,
                        t,
                        site: x,
                        drift: d.drift,
                        jumps: d.jumps,
                        compensator: d.compensator,
                        mild: d.mild,
                        occupation: d.occupation,
                        residual: d.residual(),
                    });
                }
            }
            Ok(rows)
        })
        .collect::<ssep_core::Result<_>>()?;
    let rows: Vec<MildRow> = rows.into_iter().flatten().collect();
    let worst = rows.iter().map(|r| r.residual.abs()).fold(0.0, f64::max);
    out.write_rows("mild.csv", &["replica", "t", "site", "drift", "jumps", "compensator", "mild", "occupation", "residual"], &rows)?;
    out.write_json("summary.json", &serde_json::json!({ "evaluations": rows.len(), "max_abs_residual": worst, "quad_tol": b.quad_tol }))?;
    println!("max |residual| = {worst:.3e} over {} evaluations", rows.len());
    Ok(if worst > b.residual_tol { vec![format!("max residual {worst:e} > {}", b.residual_tol)] } else { Vec::new() })
}

#[derive(Serialize)]
struct SigmaRow {
    env: String,
    entry_ij: String,
    estimate: f64,
    stderr: f64,
}

#[derive(Serialize)]
struct KsRow {
    u: String,
    t: f64,
    coordinate: usize,
    ks_distance: f64,
}

pub fn sigma(l: &Loaded<SigmaBlock>, out: &mut Output) -> Result<Failures, CliError> {
    let b = &l.block;
    let est = estimate_sigma(&b.environment, b.n, b.t_macro, b.walkers, l.seed)?;
    let label = b.label.clone().unwrap_or_else(|| "env".into());
    let d = est.estimate.len();
    let mut rows = Vec::new();
    for i in 0..d {
        for j in 0..d {
            rows.push(SigmaRow { env: label.clone(), entry_ij: format!("{}{}", i + 1, j + 1), estimate: est.estimate[i][j], stderr: est.stderr[i][j] });
        }
    }
    out.write_rows("sigma.csv", &["env", "entry_ij", "estimate", "stderr"], &rows)?;
    out.write_json("sigma.json", &est)?;
    for i in 0..d {
        println!("Sigma-hat[{i}][{i}] = {:.4} +- {:.4}", est.estimate[i][i], est.stderr[i][i]);
    }
    let mut failures = Vec::new();
    if est.degenerate {
        failures.push("degenerate covariance estimate".to_string());
    }
    if let Some(expect) = b.expect {
        for i in 0..d {
            let rel = (est.estimate[i][i] - expect).abs() / expect.abs();
            if rel > b.rel_tol {
                failures.push(format!("Sigma-hat[{i}][{i}] = {} is {rel:.3} away from {expect} (tolerance {})", est.estimate[i][i], b.rel_tol));
            }
        }
    }
    if let Some(c) = &b.start_check {
        if est.degenerate {
            return Err(ssep_core::Error::Numerical("start check needs a non-degenerate Sigma-hat".into()).into());
        }
        let cov = est.covariance()?;
        let t_max = c.t_grid.iter().copied().fold(0.0, f64::max);
        let field = sample_environment(&b.environment.rescaled(b.n, (t_max * (b.n * b.n) as f64).max(f64::MIN_POSITIVE)))?;
        let mut ks = Vec::new();
        let mut reports = Vec::new();
        for (i, u) in c.starts.iter().enumerate() {
            let report = arbitrary_start_check(&field, b.n, u, &c.t_grid, c.walkers, &cov, rng::derive_seed(l.seed, Purpose::Walker, 1000 + i as u64))?;
            let name = u.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
            ks.extend(report.rows.iter().map(|r| KsRow { u: name.clone(), t: r.t, coordinate: r.coordinate, ks_distance: r.ks_distance }));
            reports.push(report);
        }
        out.write_rows("ks.csv", &["u", "t", "coordinate", "ks_distance"], &ks)?;
        if reports.len() >= 2 {
            for (ti, coord, dist, p) in compare_starts(&reports[0], &reports[1]) {
                println!("two-sample KS at t index {ti}, coordinate {coord}: D = {dist:.4}, p = {p:.3}");
            }
        }
    }
    Ok(failures)
}

fn load_sigma_file(l: &Loaded<HydroBlock>) -> Result<Option<CovarianceMatrix>, CliError> {
    let Some(path) = &l.block.sigma_file else { return Ok(None) };
    let path = if path.is_relative() { l.base.join(path) } else { path.clone() };
    let text = std::fs::read_to_string(&path).map_err(|e| {
        ssep_core::Error::Pipeline(format!("Sigma-hat artifact {} unavailable ({e}); run the `sigma` stage first", path.display()))
    })?;
    let est: SigmaEstimate = serde_json::from_str(&text).map_err(ssep_core::Error::from)?;
    Ok(Some(est.covariance()?))
}

pub fn hydro(l: &Loaded<HydroBlock>, out: &mut Output) -> Result<Failures, CliError> {
    let mut config = l.block.config.clone();
    if config.sigma.is_none() {
        config.sigma = load_sigma_file(l)?;
    }
    // fail before any simulation when the sigma stage is missing
    resolve_sigma(&config.environment, config.sigma.as_ref())?;
    let report = hydro_experiment(&config)?;
    {
        let w = out.create("hydro.csv")?;
        report.write_csv(w)?;
    }
    out.write_rows("trajectories.csv", &["n", "function", "replica", "seed", "t", "value"], &flatten_trajectories(&report.trajectories))?;
    out.write_json("summary.json", &serde_json::json!({ "sigma": report.sigma, "summaries": report.summaries }))?;
    let mut failures = Vec::new();
    for (name, _) in &config.functions {
        let mut errs: Vec<(usize, f64)> = config.scales.iter().filter_map(|&n| report.summary(n, name).map(|s| (n, s.mean_sup_error))).collect();
        errs.sort_by_key(|e| e.0);
        let line = errs.iter().map(|(n, e)| format!("N={n}: {e:.4}")).collect::<Vec<_>>().join(", ");
        println!("{name}: mean sup error {line}");
        if errs.windows(2).any(|w| !(w[1].1 < w[0].1)) {
            failures.push(format!("{name}: mean sup error not strictly decreasing in N ({line})"));
        }
    }
    Ok(failures)
}

#[derive(Serialize)]
struct TrajectoryRow<'a> {
    n: usize,
    function: &'a str,
    replica: usize,
    seed: u64,
    t: f64,
    value: f64,
}

fn flatten_trajectories(trajs: &[ssep_core::hydro::FieldTrajectory]) -> Vec<TrajectoryRow<'_>> {
    trajs
        .iter()
        .flat_map(|tr| {
            tr.times.iter().zip(&tr.values).map(move |(&t, &value)| TrajectoryRow { n: tr.n, function: &tr.function, replica: tr.replica, seed: tr.seed, t, value })
        })
        .collect()
}

#[derive(Serialize)]
struct W3Row {
    path: String,
    delta: f64,
    w3: f64,
}

#[derive(Serialize)]
struct PsiRow {
    h: f64,
    psi_n: f64,
    psi: f64,
}

pub fn tightness(l: &Loaded<TightnessBlock>, out: &mut Output) -> Result<Failures, CliError> {
    let b = &l.block;
    let n2 = (b.n * b.n) as f64;
    let extra = b.psi.as_ref().map_or(0.0, |p| p.h);
    let field = sample_environment(&b.environment.rescaled(b.n, (b.t_macro + extra) * n2))?;
    let paths = rescaled_walk_paths(&field, b.n, b.t_macro, b.walkers, l.seed)?;
    let tail = conditional_tail_estimate(&paths, b.epsilon, &b.h_grid, &b.t_grid)?;
    out.write_rows("tail.csv", &["h", "psi_hat", "stderr", "flagged"], &tail)?;

    let mut w3 = Vec::new();
    for &delta in &b.deltas {
        for (i, p) in paths.iter().enumerate() {
            w3.push(W3Row { path: format!("walker{i}"), delta, w3: modulus_w3(p, delta)? });
        }
    }
    for file in &b.paths_csv {
        let path = if file.is_relative() { l.base.join(file) } else { file.clone() };
        let f = std::fs::File::open(&path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        let z = StepPath::read_csv(f)?;
        for &delta in &b.deltas {
            w3.push(W3Row { path: path.display().to_string(), delta, w3: modulus_w3(&z, delta)? });
        }
    }
    out.write_rows("w3.csv", &["path", "delta", "w3"], &w3)?;

    if let Some(p) = &b.psi {
        let q = psi_field_quantities(&field, b.n, &p.function, &p.sigma, b.epsilon, p.h, b.t_macro, p.grid)?;
        let rows: Vec<PsiRow> = q.curve.iter().map(|&(h, psi_n, psi)| PsiRow { h, psi_n, psi }).collect();
        out.write_rows("psi.csv", &["h", "psi_n", "psi"], &rows)?;
        println!("C_G = {:.4}, psi^N = {:.4e}, psi = {:.4e}, phi^N = {:.4e}", q.c_g, q.psi_eps_n, q.psi_eps, q.phi_eps_n);
        out.write_json("psi.json", &q)?;
    }
    let psi: Vec<f64> = tail.iter().map(|t| t.psi_hat).collect();
    println!("psi-hat over h-grid: {psi:?}");
    let mut failures = Vec::new();
    if psi.windows(2).any(|w| w[1] < w[0]) {
        failures.push(format!("psi-hat not non-decreasing in h: {psi:?}"));
    }
    Ok(failures)
}

#[derive(Serialize)]
struct DecayRow {
    r: usize,
    p_max: f64,
}

#[derive(Serialize)]
struct HoelderRow {
    scale: f64,
    difference: f64,
}

#[derive(Serialize)]
struct VarianceRow {
    #[serde(rename = "G")]
    g: String,
    t: f64,
    variance: f64,
    bound: f64,
    threshold: f64,
    passed: bool,
}

pub fn diagnose(l: &Loaded<DiagnoseBlock>, out: &mut Output) -> Result<Failures, CliError> {
    let b = &l.block;
    let n = b.n;
    let n2 = (n * n) as f64;
    let t_end = b.h_grid.iter().copied().fold(b.t, f64::max);
    let t_var = b.variance.as_ref().map_or(0.0, |v| v.t);
    let field = sample_environment(&b.environment.rescaled(n, (t_end + b.h_grid.iter().copied().fold(0.0, f64::max)).max(t_var) * n2))?;
    let mut failures = Vec::new();

    let decay = kernel_decay_fit(&field, n, b.s, b.t)?;
    let rows: Vec<DecayRow> = decay.profile.iter().map(|&(r, p_max)| DecayRow { r, p_max }).collect();
    out.write_rows("decay.csv", &["r", "p_max"], &rows)?;
    if let Some(slope) = decay.slope {
        if !(slope < 0.0) {
            failures.push(format!("kernel decay slope {slope} is not negative"));
        }
    }

    let pairs = b.pairs.clone().unwrap_or_else(|| {
        let torus = field.torus();
        (0..torus.num_sites()).flat_map(|x| torus.neighbors(x).unwrap_or_default().into_iter().map(move |y| (x, y)).chain([(x, x)])).collect()
    });
    let hoelder = hoelder_diagnostic(&field, n, &b.function, b.s, b.t, &b.h_grid, &pairs)?;
    let rows: Vec<HoelderRow> = hoelder.points.iter().map(|&(scale, difference)| HoelderRow { scale, difference }).collect();
    out.write_rows("hoelder.csv", &["scale", "difference"], &rows)?;
    match hoelder.gamma {
        Some(g) if g > 0.0 => {}
        other => failures.push(format!("Hoelder exponent {other:?} is not positive")),
    }

    let mut variance_rows = Vec::new();
    if let Some(v) = &b.variance {
        let eta0 = bernoulli(field.torus().num_sites(), v.density, l.seed, 0);
        let check = noise_variance_check(&field, n, &b.function, &eta0, v.t, v.replicas, l.seed)?;
        if !check.passed {
            failures.push(format!("variance {:e} above threshold {:e}", check.variance, check.threshold));
        }
        variance_rows.push(VarianceRow {
            g: b.label.clone().unwrap_or_else(|| "G".into()),
            t: v.t,
            variance: check.variance,
            bound: check.bound,
            threshold: check.threshold,
            passed: check.passed,
        });
    }
    out.write_rows("variance.csv", &["G", "t", "variance", "bound", "threshold", "passed"], &variance_rows)?;
    out.write_json(
        "summary.json",
        &serde_json::json!({
            "decay_slope": decay.slope,
            "decay_amplitude": decay.amplitude,
            "length_scale": decay.length_scale,
            "saturated": decay.saturated,
            "hoelder_gamma": hoelder.gamma,
        }),
    )?;
    println!("decay slope {:?}, length scale {:.4}, Hoelder exponent {:?}", decay.slope, decay.length_scale, hoelder.gamma);
    Ok(failures)
}
