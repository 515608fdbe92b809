//! Subcommand implementations. Each writes its files into `out` and returns what
//! it computed so callers (and tests) can inspect results without re-reading files.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use advquery::eval::{
    attack_report, check_disjoint, evaluate, table_at, table_attacks, table_heads, table_natural,
    table_transfer_vs_meta, AttackReport, Candidate, Metrics, Table,
};
use advquery::metatrain::{adv_train_transfer, meta_train, Regime, TrainLog};
use advquery::nn::{encode_checkpoint, load_checkpoint, Architecture};
use advquery::tasks::encode_fsds;
use advquery::{Dataset, ParameterSet};
use serde_json::{json, Value};

use crate::experiment::{DataSource, ExperimentConfig, Setup, Side, TableKind};
use crate::output::{self, Stamp};
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "model.aqcp";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

pub struct TrainOutput {
    pub arch: Architecture,
    pub params: ParameterSet,
    pub log: TrainLog,
    pub checkpoint: PathBuf,
}

fn stamp(cfg: &ExperimentConfig) -> Stamp<'_> {
    Stamp {
        hash: &cfg.hash,
        seed: cfg.seed,
    }
}

fn split(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset), CliError> {
    let (train, test) = cfg.data.load_split(cfg.seed)?;
    check_disjoint(&train, &test)?;
    Ok((train, test))
}

fn architecture(setup: &Setup, ds: &Dataset) -> Architecture {
    setup.model.architecture(ds.feature_dim(), setup.train.episode.n_way)
}

fn regime_name(setup: &Setup) -> &'static str {
    if setup.transfer {
        return "transfer";
    }
    match setup.train.regime {
        Regime::Natural => "natural",
        Regime::Aq => "aq",
        Regime::AqSupport => "aq_support",
        Regime::Trades => "trades",
    }
}

fn train_setup(setup: &Setup, train: &Dataset) -> Result<(Architecture, ParameterSet, TrainLog), CliError> {
    let arch = architecture(setup, train);
    let (params, log) = if setup.transfer {
        adv_train_transfer(&setup.train, &arch, train)?
    } else {
        meta_train(&setup.train, &arch, train)?
    };
    Ok((arch, params, log))
}

fn save_params(path: &Path, params: &ParameterSet) -> Result<PathBuf, CliError> {
    let bytes = encode_checkpoint(params).map_err(|e| output::runtime(path, e))?;
    output::write(path, &bytes)
}

fn log_bytes(log: &TrainLog, stamp: &Stamp) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    log.write_csv(
        &mut buf,
        &[
            ("config_hash", stamp.hash.to_string()),
            ("seed", stamp.seed.to_string()),
        ],
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(buf)
}

fn log_details(log: &TrainLog) -> Value {
    json!({
        "epochs": log.records.len(),
        "attack_invocations": log.records.iter().map(|r| r.attack_invocations).collect::<Vec<_>>(),
        "lr": log.records.iter().map(|r| r.lr).collect::<Vec<_>>(),
        "max_perturbation": log.records.iter().map(|r| r.max_perturbation).collect::<Vec<_>>(),
    })
}

fn load_params(path: &Path) -> Result<ParameterSet, CliError> {
    load_checkpoint(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Trains the configured model; writes `model.aqcp`, `train_log.csv` and a manifest.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, threads: Option<usize>) -> Result<TrainOutput, CliError> {
    let (train, _) = split(cfg)?;
    let (arch, params, log) = train_setup(&cfg.setup, &train)?;
    let st = stamp(cfg);
    let checkpoint = save_params(&out.join(CHECKPOINT_FILE), &params)?;
    let log_path = output::write(&out.join(TRAIN_LOG_FILE), &log_bytes(&log, &st)?)?;
    let mut details = log_details(&log);
    details["regime"] = json!(regime_name(&cfg.setup));
    details["train_hash"] = json!(cfg.setup.train_hash);
    details["parameters"] = json!(params.numel());
    output::write_manifest(out, "train", &st, threads, &[checkpoint.clone(), log_path], details)?;
    Ok(TrainOutput {
        arch,
        params,
        log,
        checkpoint,
    })
}

/// Evaluates a checkpoint on the held-out classes; writes `metrics.csv/json`.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    name: &str,
    out: &Path,
    threads: Option<usize>,
) -> Result<Metrics, CliError> {
    let params = load_params(checkpoint)?;
    let (_, test) = split(cfg)?;
    let arch = architecture(&cfg.setup, &test);
    let m = evaluate(&arch, &params, &test, &cfg.setup.eval)?;
    let st = stamp(cfg);
    let files = output::write_metrics(out, "metrics", &[(name.to_string(), m.clone())], &st)?;
    output::write_manifest(
        out,
        "eval",
        &st,
        threads,
        &files,
        json!({ "checkpoint": checkpoint.display().to_string(), "counts": format!("{:?}", m.counts) }),
    )?;
    Ok(m)
}

pub struct CompareOutput {
    pub metrics: Vec<(String, Metrics)>,
    pub tables: Vec<(TableKind, Table)>,
    /// Per run: attack invocations per training epoch (empty when loaded from a checkpoint).
    pub attack_invocations: Vec<(String, Vec<usize>)>,
}

fn table_stem(kind: TableKind) -> &'static str {
    match kind {
        TableKind::Natural => "table_natural",
        TableKind::TransferVsMeta => "table_transfer_vs_meta",
        TableKind::At => "table_at",
        TableKind::Heads => "table_heads",
    }
}

/// Trains (or loads) every `[run]`, evaluates all of them on the same episodes and
/// attack seeds, and renders the configured tables.
pub fn cmd_compare(cfg: &ExperimentConfig, out: &Path, threads: Option<usize>) -> Result<CompareOutput, CliError> {
    if cfg.runs.len() < 2 {
        return Err(CliError::Input(format!(
            "compare needs at least 2 [run] sections, found {}",
            cfg.runs.len()
        )));
    }
    let (train, test) = split(cfg)?;
    let st = stamp(cfg);
    let mut files = Vec::new();
    let mut trained: HashMap<String, (ParameterSet, Vec<usize>)> = HashMap::new();
    let mut metrics = Vec::new();
    let mut invocations = Vec::new();
    let mut run_details = Vec::new();
    for run in &cfg.runs {
        let arch = architecture(&run.setup, &test);
        let (params, calls, source) = if let Some(path) = &run.checkpoint {
            (load_params(path)?, Vec::new(), path.display().to_string())
        } else if let Some((p, calls)) = trained.get(&run.setup.train_hash) {
            (p.clone(), calls.clone(), "shared".to_string())
        } else {
            let (_, p, log) = train_setup(&run.setup, &train)?;
            files.push(save_params(&out.join("runs").join(format!("{}.aqcp", run.name)), &p)?);
            files.push(output::write(
                &out.join("runs").join(format!("{}_log.csv", run.name)),
                &log_bytes(&log, &st)?,
            )?);
            let calls: Vec<usize> = log.records.iter().map(|r| r.attack_invocations).collect();
            trained.insert(run.setup.train_hash.clone(), (p.clone(), calls.clone()));
            (p, calls, "trained".to_string())
        };
        let m = evaluate(&arch, &params, &test, &run.setup.eval)?;
        run_details.push(json!({
            "name": run.name,
            "label": run.label,
            "regime": regime_name(&run.setup),
            "train_hash": run.setup.train_hash,
            "source": source,
            "attack_invocations": calls,
        }));
        invocations.push((run.name.clone(), calls));
        metrics.push((run.label.clone(), m));
    }
    files.extend(output::write_metrics(out, "compare", &metrics, &st)?);

    let mut tables = Vec::new();
    for &kind in &cfg.compare.tables {
        let table = match kind {
            TableKind::Natural => table_natural(&metrics),
            TableKind::Heads => table_heads(&metrics),
            TableKind::At => table_at(&cfg.compare.first_column, &metrics)
                .map_err(|e| CliError::Input(format!("table 'at': {e}; set eval.adv_finetune = true")))?,
            TableKind::TransferVsMeta => {
                let mut rows: Vec<(String, Option<Metrics>, Option<Metrics>)> = Vec::new();
                for (run, (_, m)) in cfg.runs.iter().zip(&metrics) {
                    let (row, side) = match (&run.row, run.side) {
                        (Some(row), Some(side)) => (row, side),
                        (None, None) => continue,
                        _ => {
                            return Err(CliError::Input(format!(
                                "run '{}' needs both 'row' and 'side' for the transfer_vs_meta table",
                                run.name
                            )))
                        }
                    };
                    let i = match rows.iter().position(|r| &r.0 == row) {
                        Some(i) => i,
                        None => {
                            rows.push((row.clone(), None, None));
                            rows.len() - 1
                        }
                    };
                    let slot = if side == Side::Transfer {
                        &mut rows[i].1
                    } else {
                        &mut rows[i].2
                    };
                    *slot = Some(m.clone());
                }
                let rows = rows
                    .into_iter()
                    .map(|(name, t, m)| match (t, m) {
                        (Some(t), Some(m)) => Ok((name, t, m)),
                        _ => Err(CliError::Input(format!(
                            "row '{name}' needs one transfer and one meta run"
                        ))),
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                table_transfer_vs_meta(&rows)
            }
        };
        files.extend(output::write_table(out, table_stem(kind), &table, &st)?);
        tables.push((kind, table));
    }
    output::write_manifest(out, "compare", &st, threads, &files, json!({ "runs": run_details }))?;
    Ok(CompareOutput {
        metrics,
        tables,
        attack_invocations: invocations,
    })
}

/// Attack report for one checkpoint; writes `attack.csv/json/md` and `attack_report.json`.
pub fn cmd_attack(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    source: Option<&Path>,
    out: &Path,
    threads: Option<usize>,
) -> Result<AttackReport, CliError> {
    let (_, test) = split(cfg)?;
    let arch = architecture(&cfg.setup, &test);
    let candidate = |path: &Path| -> Result<Candidate<f64>, CliError> {
        Ok(Candidate {
            name: path.display().to_string(),
            arch: arch.clone(),
            params: load_params(path)?,
            finetune: cfg.setup.eval.finetune.clone(),
        })
    };
    let target = candidate(checkpoint)?;
    let source = source.map(candidate).transpose()?;
    let report = attack_report(&target, source.as_ref(), &test, &cfg.setup.eval, &cfg.suite)?;
    let name = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let st = stamp(cfg);
    let mut files = output::write_table(out, "attack", &table_attacks(&[(name.clone(), report.clone())]), &st)?;
    let mut raw = output::attack_json(&name, &report);
    raw["config_hash"] = json!(st.hash);
    raw["seed"] = json!(st.seed);
    files.push(output::write_json(&out.join("attack_report.json"), &raw)?);
    output::write_manifest(
        out,
        "attack",
        &st,
        threads,
        &files,
        json!({
            "checkpoint": checkpoint.display().to_string(),
            "source": source.map(|s| s.name),
            "restarts": cfg.suite.restarts,
        }),
    )?;
    Ok(report)
}

/// Writes the configured synthetic dataset to `dataset.fsds`.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path, threads: Option<usize>) -> Result<Dataset, CliError> {
    if !matches!(cfg.data.source, DataSource::Synthetic(_)) {
        return Err(CliError::Input("gen-data needs [data] source = synthetic".into()));
    }
    let ds = cfg.data.load(cfg.seed)?;
    let st = stamp(cfg);
    let path = output::write(&out.join("dataset.fsds"), &encode_fsds(&ds))?;
    output::write_manifest(
        out,
        "gen-data",
        &st,
        threads,
        &[path],
        json!({ "classes": ds.n_classes(), "examples": ds.n_examples(), "normalized": cfg.data.normalize }),
    )?;
    Ok(ds)
}
