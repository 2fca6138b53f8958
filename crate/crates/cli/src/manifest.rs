use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub subcommand: String,
    pub version: String,
    /// SHA-256 of the subcommand name and the canonical JSON of its resolved block.
    pub config_hash: String,
    pub seed: u64,
    pub workers: usize,
    pub wall_clock_seconds: f64,
    pub files: Vec<String>,
    /// Violated thresholds (only checked under `--assert`).
    pub assertion_failures: Vec<String>,
}

pub fn config_hash(subcommand: &str, canonical: &str) -> String {
    let mut h = Sha256::new();
    h.update(subcommand.as_bytes());
    h.update([0u8]);
    h.update(canonical.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Output directory that records every file written into it.
pub struct Output {
    dir: PathBuf,
    files: Vec<String>,
    started: Instant,
}

impl Output {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create output directory {}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new(), started: Instant::now() })
    }

    pub fn create(&mut self, name: &str) -> Result<BufWriter<File>, CliError> {
        let f = File::create(self.dir.join(name)).map_err(ssep_core::Error::from)?;
        self.files.push(name.to_string());
        Ok(BufWriter::new(f))
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let w = self.create(name)?;
        serde_json::to_writer_pretty(w, value).map_err(ssep_core::Error::from)?;
        Ok(())
    }

    pub fn write_rows<T: Serialize>(&mut self, name: &str, header: &[&str], rows: &[T]) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(self.create(name)?);
        if rows.is_empty() {
            w.write_record(header).map_err(ssep_core::Error::from)?;
        }
        for r in rows {
            w.serialize(r).map_err(ssep_core::Error::from)?;
        }
        w.flush().map_err(ssep_core::Error::from)?;
        Ok(())
    }

    pub fn finish(mut self, subcommand: &str, hash: String, seed: u64, assertion_failures: Vec<String>) -> Result<RunManifest, CliError> {
        let manifest = RunManifest {
            schema_version: SCHEMA_VERSION,
            subcommand: subcommand.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: hash,
            seed,
            workers: rayon::current_num_threads(),
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            files: self.files.clone(),
            assertion_failures,
        };
        self.write_json("manifest.json", &manifest)?;
        Ok(manifest)
    }
}
