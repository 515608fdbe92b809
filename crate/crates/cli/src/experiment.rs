//! Typed experiment configuration built from a [`RawConfig`].

use std::path::{Path, PathBuf};

use advquery::attacks::{AttackConfig, Norm};
use advquery::eval::{AttackSuite, EvalConfig};
use advquery::finetune::{FineTuneKind, FineTuneScope, FineTuneSpec};
use advquery::metatrain::{EpisodeShape, MetaTrainConfig, OptimizerConfig, Regime, SupportAttackTarget};
use advquery::nn::{Activation, Architecture, LayerSpec};
use advquery::tasks::{gen_synthetic, load_csv, load_fsds, SyntheticSpec};
use advquery::Dataset;
use sha2::{Digest, Sha256};

use crate::config::{canonical, ConfigError, Origin, RawConfig, SectionReader, Sections};

const SECTIONS: &[&str] = &[
    "",
    "data",
    "model",
    "finetune",
    "eval_finetune",
    "episode",
    "train",
    "train_attack",
    "eval",
    "eval_attack",
    "finetune_attack",
    "suite",
    "compare",
];

/// Sections that determine a trained checkpoint.
const TRAIN_SECTIONS: &[&str] = &["data", "model", "finetune", "episode", "train", "train_attack"];

/// Sections a `[run]` may not override, so that runs stay paired.
const SHARED_SECTIONS: &[&str] = &["", "data", "episode", "eval_attack", "compare", "suite"];

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Fsds(PathBuf),
    Csv { path: PathBuf, label_column: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub normalize: bool,
    /// Classes (in dataset order) used for training; the rest are held out.
    pub train_classes: Option<usize>,
}

impl DataConfig {
    /// The whole dataset, normalized if configured.
    pub fn load(&self, seed: u64) -> advquery::Result<Dataset> {
        let ds: Dataset = match &self.source {
            DataSource::Synthetic(spec) => gen_synthetic(spec, seed)?,
            DataSource::Fsds(path) => load_fsds(path)?,
            DataSource::Csv { path, label_column } => load_csv(path, label_column)?,
        };
        Ok(if self.normalize { ds.normalize_min_max() } else { ds })
    }

    /// `(train classes, held-out classes)`.
    pub fn load_split(&self, seed: u64) -> advquery::Result<(Dataset, Dataset)> {
        let ds = self.load(seed)?;
        let n_train = self.train_classes.unwrap_or(ds.n_classes() * 2 / 3);
        Ok(ds.split_classes(n_train)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl ModelConfig {
    pub fn architecture(&self, input_dim: usize, n_way: usize) -> Architecture {
        Architecture {
            input_shape: vec![input_dim],
            layers: self
                .hidden
                .iter()
                .map(|&width| LayerSpec::Dense {
                    width,
                    activation: self.activation,
                })
                .collect(),
            n_way,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableKind {
    Natural,
    TransferVsMeta,
    At,
    Heads,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareConfig {
    pub tables: Vec<TableKind>,
    /// Header of the name column in the `at` table.
    pub first_column: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Transfer,
    Meta,
}

/// Training and evaluation settings that a `[run]` can override.
#[derive(Debug, Clone, PartialEq)]
pub struct Setup {
    pub model: ModelConfig,
    pub train: MetaTrainConfig,
    /// Train the transfer baseline instead of meta-training.
    pub transfer: bool,
    pub eval: EvalConfig,
    /// Hash of everything that determines the trained checkpoint.
    pub train_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub name: String,
    /// Row label in tables; defaults to the run name.
    pub label: String,
    pub checkpoint: Option<PathBuf>,
    /// Row of the transfer-vs-meta table this run belongs to.
    pub row: Option<String>,
    pub side: Option<Side>,
    pub setup: Setup,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub data: DataConfig,
    pub setup: Setup,
    pub suite: AttackSuite,
    /// Checkpoint that crafts transfer attacks in the attack report.
    pub attack_source: Option<PathBuf>,
    pub compare: CompareConfig,
    pub runs: Vec<RunConfig>,
    /// SHA-256 of the canonical configuration (output directory excluded).
    pub hash: String,
}

fn sha256_hex(s: &str) -> String {
    let digest = Sha256::digest(s.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn existing(r: &SectionReader, key: &str, base: &Path) -> Result<Option<PathBuf>, ConfigError> {
    match r.string(key) {
        None => Ok(None),
        Some(s) => {
            let p = resolve(base, &s);
            if p.exists() {
                Ok(Some(p))
            } else {
                Err(r.error(key, format!("no such file '{}'", p.display())))
            }
        }
    }
}

fn attack(sections: &Sections, name: &'static str, default: AttackConfig) -> Result<AttackConfig, ConfigError> {
    let r = SectionReader::new(sections, name);
    let clip = match r.string("clip").as_deref() {
        None => default.clip,
        Some("none") => None,
        Some(_) => {
            let v: Vec<f64> = r.list("clip", "'lo, hi' or none", vec![])?;
            if v.len() != 2 || v[0] > v[1] {
                return Err(r.error("clip", "expected 'lo, hi' with lo <= hi, or none"));
            }
            Some((v[0], v[1]))
        }
    };
    let cfg = AttackConfig {
        eps: r.f64("eps", default.eps)?,
        step: r.f64("step", default.step)?,
        steps: r.usize("steps", default.steps)?,
        restarts: r.usize("restarts", default.restarts)?,
        norm: r.choice("norm", &[("linf", Norm::Linf), ("l2", Norm::L2)], default.norm)?,
        random_start: r.bool("random_start", default.random_start)?,
        clip,
        early_stop: r.bool("early_stop", default.early_stop)?,
    };
    r.finish()?;
    cfg.validate()
        .map_err(|e| ConfigError::new(first_origin(sections, name), e.to_string()))?;
    Ok(cfg)
}

fn finetune(sections: &Sections, name: &'static str) -> Result<FineTuneSpec, ConfigError> {
    let mut r = SectionReader::new(sections, name);
    if name != "finetune" {
        r = r.with_fallback(sections, "finetune");
    }
    let kind = r.choice(
        "head",
        &[
            ("ridge", FineTuneKind::Ridge),
            ("proto", FineTuneKind::Proto),
            ("maml", FineTuneKind::MamlSgd),
        ],
        FineTuneKind::Ridge,
    )?;
    let base = match kind {
        FineTuneKind::Ridge => FineTuneSpec::ridge(1.0),
        FineTuneKind::Proto => FineTuneSpec::proto(),
        FineTuneKind::MamlSgd => FineTuneSpec::maml(),
    };
    let spec = FineTuneSpec {
        inner_steps: r.usize("inner_steps", base.inner_steps)?,
        inner_lr: r.f64("inner_lr", base.inner_lr)?,
        scope: r.choice(
            "scope",
            &[("all", FineTuneScope::All), ("last_layer", FineTuneScope::LastLayer)],
            base.scope,
        )?,
        ridge_lambda: r.f64("ridge_lambda", base.ridge_lambda)?,
        logit_scale: r.f64("logit_scale", base.logit_scale)?,
        ..base
    };
    r.finish()?;
    spec.validate()
        .map_err(|e| ConfigError::new(first_origin(sections, name), e.to_string()))?;
    Ok(spec)
}

fn first_origin(sections: &Sections, name: &str) -> Origin {
    sections
        .get(name)
        .and_then(|e| {
            e.values().map(|v| v.origin.clone()).min_by_key(|o| match o {
                Origin::Line(n) => *n,
                Origin::Flag => usize::MAX,
            })
        })
        .unwrap_or(Origin::Line(0))
}

fn milestones(r: &SectionReader, default: Vec<(usize, f64)>) -> Result<Vec<(usize, f64)>, ConfigError> {
    let items: Vec<String> = r.list("milestones", "'epoch:lr' pairs", vec![])?;
    if r.raw("milestones").is_none() {
        return Ok(default);
    }
    items
        .iter()
        .map(|item| {
            let (e, lr) = item
                .split_once(':')
                .ok_or_else(|| r.error("milestones", format!("expected 'epoch:lr', got '{item}'")))?;
            let e = e
                .trim()
                .parse()
                .map_err(|_| r.error("milestones", format!("bad epoch '{e}'")))?;
            let lr = lr
                .trim()
                .parse()
                .map_err(|_| r.error("milestones", format!("bad rate '{lr}'")))?;
            Ok((e, lr))
        })
        .collect()
}

fn parse_setup(sections: &Sections, seed: u64) -> Result<Setup, ConfigError> {
    let r = SectionReader::new(sections, "model");
    let model = ModelConfig {
        hidden: r.list("hidden", "comma-separated widths", vec![64, 64])?,
        activation: r.choice(
            "activation",
            &[("relu", Activation::Relu), ("identity", Activation::Identity)],
            Activation::Relu,
        )?,
    };
    if model.hidden.contains(&0) {
        return Err(r.error("hidden", "widths must be positive"));
    }
    r.finish()?;

    let r = SectionReader::new(sections, "episode");
    let d = EpisodeShape::default();
    let episode = EpisodeShape {
        n_way: r.usize("n_way", d.n_way)?,
        k_shot: r.usize("k_shot", d.k_shot)?,
        q_query: r.usize("q_query", d.q_query)?,
    };
    r.finish()?;

    let ft = finetune(sections, "finetune")?;
    let eval_ft = finetune(sections, "eval_finetune")?;

    let r = SectionReader::new(sections, "train");
    let d = MetaTrainConfig::default();
    let od = OptimizerConfig::default();
    let (regime, transfer) = r.choice(
        "regime",
        &[
            ("natural", (Regime::Natural, false)),
            ("aq", (Regime::Aq, false)),
            ("aq_support", (Regime::AqSupport, false)),
            ("trades", (Regime::Trades, false)),
            ("transfer", (Regime::Natural, true)),
        ],
        (Regime::Natural, false),
    )?;
    let optimizer = OptimizerConfig {
        lr: r.f64("lr", od.lr)?,
        momentum: r.f64("momentum", od.momentum)?,
        nesterov: r.bool("nesterov", od.nesterov)?,
        weight_decay: r.f64("weight_decay", od.weight_decay)?,
        milestones: milestones(&r, od.milestones.clone())?,
        reference_epochs: r.usize("reference_epochs", od.reference_epochs)?,
    };
    let train = MetaTrainConfig {
        finetune: ft,
        attack: attack(sections, "train_attack", AttackConfig::synthetic_train())?,
        regime,
        trades_inv_lambda: r.f64("trades_inv_lambda", d.trades_inv_lambda)?,
        meta_batch: r.usize("meta_batch", d.meta_batch)?,
        optimizer,
        epochs: r.usize("epochs", d.epochs)?,
        episodes_per_epoch: r.usize("episodes_per_epoch", d.episodes_per_epoch)?,
        episode,
        support_attack_target: r.choice(
            "support_attack_target",
            &[
                ("base", SupportAttackTarget::Base),
                ("adapted", SupportAttackTarget::Adapted),
            ],
            d.support_attack_target,
        )?,
        transfer_batch: r.usize("transfer_batch", d.transfer_batch)?,
        seed,
        log_wall_time: r.bool("log_wall_time", d.log_wall_time)?,
    };
    r.finish()?;
    train
        .validate()
        .map_err(|e| ConfigError::new(first_origin(sections, "train"), e.to_string()))?;

    let r = SectionReader::new(sections, "eval");
    let d = EvalConfig::default();
    let eval = EvalConfig {
        n_episodes: r.usize("n_episodes", d.n_episodes)?,
        finetune: eval_ft,
        attack: attack(sections, "eval_attack", AttackConfig::synthetic_eval())?,
        adv_finetune: r.bool("adv_finetune", d.adv_finetune)?,
        finetune_attack: attack(sections, "finetune_attack", AttackConfig::synthetic_train())?,
        episode,
        seed,
    };
    r.finish()?;
    eval.validate()
        .map_err(|e| ConfigError::new(first_origin(sections, "eval"), e.to_string()))?;

    let mut train_canon = format!("seed={seed}\n");
    train_canon.push_str(&canonical(sections, |s, _| TRAIN_SECTIONS.contains(&s)));
    Ok(Setup {
        model,
        train,
        transfer,
        eval,
        train_hash: sha256_hex(&train_canon),
    })
}

fn data(sections: &Sections, base: &Path) -> Result<DataConfig, ConfigError> {
    let r = SectionReader::new(sections, "data");
    let d = SyntheticSpec::default();
    let kind = r.choice("source", &[("synthetic", 0), ("fsds", 1), ("csv", 2)], 0)?;
    let source = match kind {
        0 => {
            let spec = SyntheticSpec {
                n_classes: r.usize("n_classes", d.n_classes)?,
                feature_dim: r.usize("feature_dim", d.feature_dim)?,
                radius: r.f64("radius", d.radius)?,
                sigma: r.f64("sigma", d.sigma)?,
                examples_per_class: r.usize("examples_per_class", d.examples_per_class)?,
            };
            spec.validate()
                .map_err(|e| ConfigError::new(first_origin(sections, "data"), e.to_string()))?;
            DataSource::Synthetic(spec)
        }
        _ => {
            let path = existing(&r, "path", base)?.ok_or_else(|| r.error("path", "required for file sources"))?;
            if kind == 1 {
                DataSource::Fsds(path)
            } else {
                DataSource::Csv {
                    path,
                    label_column: r.string("label_column").unwrap_or_else(|| "label".into()),
                }
            }
        }
    };
    let train_classes = match r.raw("train_classes") {
        None => None,
        Some(_) => Some(r.usize("train_classes", 0)?),
    };
    let cfg = DataConfig {
        source,
        normalize: r.bool("normalize", true)?,
        train_classes,
    };
    r.finish()?;
    Ok(cfg)
}

impl ExperimentConfig {
    /// Parses `text`, applies `--set` overrides, and resolves relative input paths
    /// against `base_dir`.
    pub fn from_text(text: &str, overrides: &[String], base_dir: &Path) -> Result<Self, ConfigError> {
        let mut raw = RawConfig::parse(text)?;
        for o in overrides {
            raw.set(o)?;
        }
        Self::from_raw(&raw, base_dir)
    }

    pub fn from_raw(raw: &RawConfig, base_dir: &Path) -> Result<Self, ConfigError> {
        for (name, entries) in &raw.sections {
            if !SECTIONS.contains(&name.as_str()) {
                let origin = entries
                    .values()
                    .next()
                    .map(|v| v.origin.clone())
                    .unwrap_or(Origin::Line(0));
                return Err(ConfigError::new(origin, format!("unknown section [{name}]")));
            }
        }
        let g = SectionReader::new(&raw.sections, "");
        let seed = g.u64("seed", 0)?;
        let output = PathBuf::from(g.string("output").unwrap_or_else(|| "out".into()));
        g.finish()?;

        let data = data(&raw.sections, base_dir)?;
        let setup = parse_setup(&raw.sections, seed)?;

        let r = SectionReader::new(&raw.sections, "suite");
        let d = AttackSuite::default();
        let suite = AttackSuite {
            attack: setup.eval.attack.clone(),
            restarts: r.usize("restarts", d.restarts)?,
            mi_mu: r.f64("mi_mu", d.mi_mu)?,
            deepfool_iters: r.usize("deepfool_iters", d.deepfool_iters)?,
            deepfool_overshoot: r.f64("deepfool_overshoot", d.deepfool_overshoot)?,
        };
        let attack_source = existing(&r, "source", base_dir)?;
        r.finish()?;

        let r = SectionReader::new(&raw.sections, "compare");
        let tables = r.list::<String>("tables", "table names", vec!["natural".into()])?;
        let tables = tables
            .iter()
            .map(|t| match t.as_str() {
                "natural" => Ok(TableKind::Natural),
                "transfer_vs_meta" => Ok(TableKind::TransferVsMeta),
                "at" => Ok(TableKind::At),
                "heads" => Ok(TableKind::Heads),
                _ => Err(r.error(
                    "tables",
                    format!("unknown table '{t}' (natural, transfer_vs_meta, at, heads)"),
                )),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let compare = CompareConfig {
            tables,
            first_column: r.string("first_column").unwrap_or_else(|| "Model".into()),
        };
        r.finish()?;

        let mut runs = Vec::new();
        for run in &raw.runs {
            for (path, v) in &run.entries {
                if let Some((s, _)) = path.split_once('.') {
                    if SHARED_SECTIONS.contains(&s) || !SECTIONS.contains(&s) {
                        return Err(ConfigError::new(
                            v.origin.clone(),
                            format!("run '{}' cannot set '{path}'", run.name),
                        ));
                    }
                }
            }
            let (sections, own) = raw.overlay(run);
            let own_sections: Sections = [(String::new(), own)].into_iter().collect();
            let o = SectionReader::new(&own_sections, "");
            let side = match o.string("side") {
                None => None,
                Some(_) => Some(o.choice(
                    "side",
                    &[("transfer", Side::Transfer), ("meta", Side::Meta)],
                    Side::Meta,
                )?),
            };
            runs.push(RunConfig {
                name: run.name.clone(),
                label: o.string("label").unwrap_or_else(|| run.name.clone()),
                checkpoint: existing(&o, "checkpoint", base_dir)?,
                row: o.string("row"),
                side,
                setup: parse_setup(&sections, seed)?,
            });
            o.finish()?;
        }

        let mut canon = canonical(&raw.sections, |s, k| !(s.is_empty() && k == "output"));
        for run in &raw.runs {
            canon.push_str(&format!("[run {}]\n", run.name));
            for (k, v) in &run.entries {
                canon.push_str(&format!("{k}={}\n", v.text));
            }
        }
        Ok(Self {
            seed,
            output,
            data,
            setup,
            suite,
            attack_source,
            compare,
            runs,
            hash: sha256_hex(&canon),
        })
    }
}
