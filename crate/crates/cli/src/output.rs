//! Output files. Data files carry the config hash and seed; wall-clock time goes
//! only into the manifest.

use std::path::{Path, PathBuf};

use advquery::eval::{AttackReport, Metrics, Table};
use serde_json::{json, Value};

use crate::CliError;

pub const METRICS_COLUMNS: [&str; 7] = [
    "model",
    "a_nat",
    "a_adv",
    "a_nat_at",
    "a_adv_at",
    "stderr_bound",
    "n_samples",
];

pub struct Stamp<'a> {
    pub hash: &'a str,
    pub seed: u64,
}

pub fn runtime(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| runtime(dir, e))
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<PathBuf, CliError> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    std::fs::write(path, bytes).map_err(|e| runtime(path, e))?;
    Ok(path.to_path_buf())
}

pub fn write_json(path: &Path, v: &Value) -> Result<PathBuf, CliError> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| runtime(path, e))?;
    s.push('\n');
    write(path, s.as_bytes())
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("writing to memory");
    for r in rows {
        w.write_record(r).expect("writing to memory");
    }
    w.into_inner().expect("writing to memory")
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_json(name: &str, m: &Metrics) -> Value {
    json!({
        "model": name,
        "a_nat": m.a_nat,
        "a_adv": m.a_adv,
        "a_nat_at": m.a_nat_at,
        "a_adv_at": m.a_adv_at,
        "stderr_bound": m.stderr_bound,
        "n_samples": m.n_samples,
    })
}

/// `<stem>.csv` and `<stem>.json` with one metrics row per model.
pub fn write_metrics(
    dir: &Path,
    stem: &str,
    rows: &[(String, Metrics)],
    stamp: &Stamp,
) -> Result<Vec<PathBuf>, CliError> {
    let mut header = METRICS_COLUMNS.to_vec();
    header.extend(["config_hash", "seed"]);
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|(name, m)| {
            vec![
                name.clone(),
                m.a_nat.to_string(),
                m.a_adv.to_string(),
                opt(m.a_nat_at),
                opt(m.a_adv_at),
                m.stderr_bound.to_string(),
                m.n_samples.to_string(),
                stamp.hash.to_string(),
                stamp.seed.to_string(),
            ]
        })
        .collect();
    let csv = write(&dir.join(format!("{stem}.csv")), &csv_bytes(&header, &cells))?;
    let json = write_json(
        &dir.join(format!("{stem}.json")),
        &json!({
            "config_hash": stamp.hash,
            "seed": stamp.seed,
            "metrics": rows.iter().map(|(n, m)| metrics_json(n, m)).collect::<Vec<_>>(),
        }),
    )?;
    Ok(vec![csv, json])
}

/// `<stem>.csv` in the exact table layout, plus `<stem>.json` (stamped) and `<stem>.md`.
pub fn write_table(dir: &Path, stem: &str, table: &Table, stamp: &Stamp) -> Result<Vec<PathBuf>, CliError> {
    let header: Vec<&str> = table.columns.iter().map(String::as_str).collect();
    let csv = write(&dir.join(format!("{stem}.csv")), &csv_bytes(&header, &table.rows))?;
    let json = write_json(
        &dir.join(format!("{stem}.json")),
        &json!({
            "config_hash": stamp.hash,
            "seed": stamp.seed,
            "columns": table.columns,
            "rows": table.rows,
        }),
    )?;
    let md = write(&dir.join(format!("{stem}.md")), table.to_markdown().as_bytes())?;
    Ok(vec![csv, json, md])
}

pub fn attack_json(name: &str, r: &AttackReport) -> Value {
    json!({
        "model": name,
        "clean": r.clean,
        "pgd": r.pgd,
        "pgd_restarts": r.pgd_restarts,
        "mi_fgsm": r.mi_fgsm,
        "deepfool": r.deepfool,
        "transfer": r.transfer,
        "n_samples": r.n_samples,
    })
}

/// Run metadata, including the only wall-clock fields.
pub fn write_manifest(
    dir: &Path,
    command: &str,
    stamp: &Stamp,
    threads: Option<usize>,
    outputs: &[PathBuf],
    details: Value,
) -> Result<PathBuf, CliError> {
    let created = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let names: Vec<String> = outputs
        .iter()
        .map(|p| p.strip_prefix(dir).unwrap_or(p).display().to_string())
        .collect();
    write_json(
        &dir.join(format!("{command}_manifest.json")),
        &json!({
            "command": command,
            "config_hash": stamp.hash,
            "seed": stamp.seed,
            "versions": {
                "advquery": advquery::VERSION,
                "advquery-cli": env!("CARGO_PKG_VERSION"),
            },
            "threads": threads,
            "outputs": names,
            "details": details,
            "created_unix": created,
        }),
    )
}
