//! Per-subcommand parameter blocks read from a TOML or JSON file.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{Map, Value};
use ssep_core::environment::EnvironmentSpec;
use ssep_core::hydro::{CovarianceMatrix, HydroConfig};
use ssep_core::lattice::TestFunction;
use ssep_core::rng::Purpose;
use ssep_core::tightness::PsiGrid;

use crate::CliError;

fn default_tol() -> f64 {
    ssep_core::walks::DEFAULT_TOL
}

fn default_quad_tol() -> f64 {
    1e-10
}

fn default_residual_tol() -> f64 {
    1e-8
}

fn default_density() -> f64 {
    0.5
}

fn default_rel_tol() -> f64 {
    0.05
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurveyBlock {
    pub h: f64,
    pub replicas: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvBlock {
    pub environment: EnvironmentSpec,
    #[serde(default)]
    pub survey: Option<SurveyBlock>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelBlock {
    pub environment: EnvironmentSpec,
    pub s: f64,
    pub t: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub backward: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualityBlock {
    pub environment: EnvironmentSpec,
    pub realizations: usize,
    pub times: Vec<f64>,
    #[serde(default = "default_density")]
    pub density: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MildBlock {
    pub environment: EnvironmentSpec,
    pub realizations: usize,
    pub times: Vec<f64>,
    #[serde(default = "default_quad_tol")]
    pub quad_tol: f64,
    #[serde(default = "default_residual_tol")]
    pub residual_tol: f64,
    #[serde(default = "default_density")]
    pub density: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartCheckBlock {
    /// Macroscopic start points, one per check.
    pub starts: Vec<Vec<f64>>,
    pub t_grid: Vec<f64>,
    pub walkers: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaBlock {
    /// Label used in the `env` column of the output table.
    #[serde(default)]
    pub label: Option<String>,
    pub environment: EnvironmentSpec,
    pub n: usize,
    pub t_macro: f64,
    pub walkers: usize,
    /// Expected diagonal entry, checked under `--assert`.
    #[serde(default)]
    pub expect: Option<f64>,
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    #[serde(default)]
    pub start_check: Option<StartCheckBlock>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct HydroBlock {
    #[serde(flatten)]
    pub config: HydroConfig,
    /// `sigma.json` written by the `sigma` stage.
    #[serde(default)]
    pub sigma_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsiBlock {
    pub function: TestFunction,
    pub sigma: CovarianceMatrix,
    pub h: f64,
    #[serde(default)]
    pub grid: PsiGrid,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TightnessBlock {
    pub environment: EnvironmentSpec,
    pub n: usize,
    pub t_macro: f64,
    pub walkers: usize,
    pub epsilon: f64,
    pub h_grid: Vec<f64>,
    pub t_grid: Vec<f64>,
    #[serde(default)]
    pub deltas: Vec<f64>,
    /// External step paths (`time,value` CSV) analysed alongside the walker paths.
    #[serde(default)]
    pub paths_csv: Vec<PathBuf>,
    #[serde(default)]
    pub psi: Option<PsiBlock>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarianceBlock {
    pub t: f64,
    pub replicas: usize,
    #[serde(default = "default_density")]
    pub density: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseBlock {
    /// Name of `function` in the `G` column.
    #[serde(default)]
    pub label: Option<String>,
    pub environment: EnvironmentSpec,
    pub n: usize,
    pub s: f64,
    pub t: f64,
    pub function: TestFunction,
    pub h_grid: Vec<f64>,
    #[serde(default)]
    pub pairs: Option<Vec<(usize, usize)>>,
    #[serde(default)]
    pub variance: Option<VarianceBlock>,
}

/// A subcommand block with the seed resolved, plus its canonical JSON form for hashing.
pub struct Loaded<T> {
    pub block: T,
    pub canonical: String,
    pub seed: u64,
    /// Directory of the config file; relative paths inside the block resolve against it.
    pub base: PathBuf,
}

fn read_document(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }
}

/// Fills `side` and `horizon` of the environment block when the run rescales them anyway.
fn fill_environment(block: &mut Map<String, Value>, side: Option<Value>) {
    if let Some(Value::Object(env)) = block.get_mut("environment") {
        if let Some(side) = side {
            env.entry("side").or_insert(side);
        }
        env.entry("horizon").or_insert(Value::from(1.0));
    }
}

/// Reads block `name` from the config, injecting the seed (`--seed` wins over the
/// block, which wins over a top-level `seed`).
pub fn load<T: DeserializeOwned>(path: &Path, name: &str, seed_flag: Option<u64>) -> Result<Loaded<T>, CliError> {
    let doc = read_document(path)?;
    let Value::Object(mut top) = doc else {
        return Err(CliError::Usage("config must be a table".into()));
    };
    let top_seed = top.get("seed").cloned();
    let Some(Value::Object(mut block)) = top.remove(name) else {
        return Err(CliError::Usage(format!("config has no [{name}] block")));
    };
    if let Some(s) = seed_flag {
        block.insert("seed".into(), Value::from(s));
    } else if !block.contains_key("seed") {
        match top_seed {
            Some(s) => {
                block.insert("seed".into(), s);
            }
            None => return Err(CliError::Usage(format!("no seed: set `seed` in [{name}] or at top level, or pass --seed"))),
        }
    }
    let seed = block
        .get("seed")
        .and_then(Value::as_u64)
        .ok_or_else(|| CliError::Usage("field `seed`: expected a non-negative integer".into()))?;
    if let Some(Value::Object(env)) = block.get_mut("environment") {
        env.entry("seed").or_insert(Value::from(ssep_core::rng::derive_seed(seed, Purpose::Environment, 0)));
    }
    match name {
        "sigma" | "tightness" | "diagnose" => {
            let side = block.get("n").cloned();
            fill_environment(&mut block, side);
        }
        "hydro" => {
            let side = block.get("scales").and_then(|s| s.get(0)).cloned();
            fill_environment(&mut block, side);
        }
        _ => {}
    }
    let canonical = serde_json::to_string(&block).expect("serializing a JSON value");
    if name != "hydro" {
        block.remove("seed");
    }
    let value = Value::Object(block);
    let block: T = serde_json::from_value(value).map_err(|e| CliError::Usage(format!("[{name}] {e}")))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { block, canonical, seed, base })
}

fn positive(field: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("field `{field}` must be positive, got {v}")))
    }
}

fn scale(field: &str, n: usize) -> Result<(), CliError> {
    if n >= 4 {
        Ok(())
    } else {
        Err(CliError::Usage(format!("field `{field}` must be at least 4, got {n}")))
    }
}

fn at_least_one(field: &str, v: usize) -> Result<(), CliError> {
    if v >= 1 {
        Ok(())
    } else {
        Err(CliError::Usage(format!("field `{field}` must be at least 1")))
    }
}

pub trait Validate {
    fn validate(&self) -> Result<(), CliError>;
}

impl Validate for EnvBlock {
    fn validate(&self) -> Result<(), CliError> {
        if let Some(s) = &self.survey {
            positive("survey.h", s.h)?;
            at_least_one("survey.replicas", s.replicas)?;
        }
        Ok(())
    }
}

impl Validate for KernelBlock {
    fn validate(&self) -> Result<(), CliError> {
        positive("tol", self.tol)
    }
}

impl Validate for DualityBlock {
    fn validate(&self) -> Result<(), CliError> {
        at_least_one("realizations", self.realizations)
    }
}

impl Validate for MildBlock {
    fn validate(&self) -> Result<(), CliError> {
        at_least_one("realizations", self.realizations)?;
        positive("quad_tol", self.quad_tol)?;
        positive("residual_tol", self.residual_tol)
    }
}

impl Validate for SigmaBlock {
    fn validate(&self) -> Result<(), CliError> {
        scale("n", self.n)?;
        positive("t_macro", self.t_macro)?;
        positive("rel_tol", self.rel_tol)?;
        if let Some(c) = &self.start_check {
            at_least_one("start_check.walkers", c.walkers)?;
        }
        Ok(())
    }
}

impl Validate for HydroBlock {
    fn validate(&self) -> Result<(), CliError> {
        if self.config.scales.is_empty() {
            return Err(CliError::Usage("field `scales` must not be empty".into()));
        }
        for &n in &self.config.scales {
            scale("scales", n)?;
        }
        at_least_one("replicas", self.config.replicas)?;
        for &d in &self.config.deltas {
            positive("deltas", d)?;
        }
        Ok(())
    }
}

impl Validate for TightnessBlock {
    fn validate(&self) -> Result<(), CliError> {
        scale("n", self.n)?;
        positive("t_macro", self.t_macro)?;
        positive("epsilon", self.epsilon)?;
        for &d in &self.deltas {
            positive("deltas", d)?;
        }
        if let Some(p) = &self.psi {
            positive("psi.h", p.h)?;
        }
        Ok(())
    }
}

impl Validate for DiagnoseBlock {
    fn validate(&self) -> Result<(), CliError> {
        scale("n", self.n)?;
        if let Some(v) = &self.variance {
            positive("variance.t", v.t)?;
            if v.replicas < 2 {
                return Err(CliError::Usage("field `variance.replicas` must be at least 2".into()));
            }
        }
        Ok(())
    }
}
