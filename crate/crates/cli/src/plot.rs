//! Tidy long-format tables per figure, assembled from result directories.

use std::path::{Path, PathBuf};

use ssep_core::Error;

use crate::CliError;

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

/// Reads `name` from every input directory that has it, keeping only `columns`.
fn gather(inputs: &[PathBuf], name: &str, columns: &[&str]) -> Result<Table, CliError> {
    let mut rows = Vec::new();
    for dir in inputs {
        let path = dir.join(name);
        if !path.exists() {
            continue;
        }
        let mut reader = csv::Reader::from_path(&path).map_err(Error::from)?;
        let header = reader.headers().map_err(Error::from)?.clone();
        let idx: Vec<usize> = columns
            .iter()
            .map(|c| {
                header
                    .iter()
                    .position(|h| h == *c)
                    .ok_or_else(|| CliError::Core(Error::Schema(format!("{} has no column `{c}`", path.display()))))
            })
            .collect::<Result<_, _>>()?;
        for rec in reader.records() {
            let rec = rec.map_err(Error::from)?;
            rows.push(idx.iter().map(|&i| rec.get(i).unwrap_or("").to_string()).collect());
        }
    }
    Ok(Table { header: columns.iter().map(|c| c.to_string()).collect(), rows })
}

fn write(out: &Path, name: &str, table: &Table) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(out.join(name)).map_err(Error::from)?;
    w.write_record(&table.header).map_err(Error::from)?;
    for r in &table.rows {
        w.write_record(r).map_err(Error::from)?;
    }
    w.flush().map_err(Error::from)?;
    Ok(())
}

/// Empirical exceedance `P(w''' >= level)` per delta, one row per observed level.
fn w3_tails(raw: Table) -> Result<Table, CliError> {
    let mut by_delta: Vec<(f64, Vec<f64>)> = Vec::new();
    for r in &raw.rows {
        let parse = |s: &str| s.parse::<f64>().map_err(|_| CliError::Core(Error::Schema(format!("non-numeric value `{s}` in w3.csv"))));
        let (delta, w) = (parse(&r[0])?, parse(&r[1])?);
        match by_delta.iter_mut().find(|(d, _)| *d == delta) {
            Some((_, v)) => v.push(w),
            None => by_delta.push((delta, vec![w])),
        }
    }
    by_delta.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rows = Vec::new();
    for (delta, mut ws) in by_delta {
        ws.sort_by(f64::total_cmp);
        ws.dedup();
        let total = raw.rows.iter().filter(|r| r[0].parse::<f64>().ok() == Some(delta)).count() as f64;
        for &level in &ws {
            let above = raw.rows.iter().filter(|r| r[0].parse::<f64>().ok() == Some(delta) && r[1].parse::<f64>().unwrap_or(f64::NAN) >= level).count();
            rows.push(vec![delta.to_string(), level.to_string(), (above as f64 / total).to_string()]);
        }
    }
    Ok(Table { header: vec!["delta".into(), "level".into(), "exceedance".into()], rows })
}

/// Writes one file per figure into `out`; missing sources give header-only files.
pub fn emit_plot_data(inputs: &[PathBuf], out: &Path) -> Result<Vec<String>, CliError> {
    std::fs::create_dir_all(out).map_err(Error::from)?;
    let figures: [(&str, Table); 5] = [
        ("convergence.csv", gather(inputs, "hydro.csv", &["N", "G", "t", "stat", "value", "stderr"])?),
        ("sigma.csv", gather(inputs, "sigma.csv", &["env", "entry_ij", "estimate", "stderr"])?),
        ("ks_distances.csv", gather(inputs, "ks.csv", &["u", "t", "coordinate", "ks_distance"])?),
        ("variance_vs_bound.csv", gather(inputs, "variance.csv", &["G", "t", "variance", "bound"])?),
        ("w3_tails.csv", w3_tails(gather(inputs, "w3.csv", &["delta", "w3"])?)?),
    ];
    let mut written = Vec::new();
    for (name, table) in &figures {
        write(out, name, table)?;
        written.push(name.to_string());
    }
    Ok(written)
}
