//! Test-time protocol: adapt on hold-out support sets, score clean and attacked
//! queries, and lay results out as comparison tables.

mod report;

pub use report::{fmt_percent, table_at, table_attacks, table_heads, table_natural, table_transfer_vs_meta, Table};

use rayon::prelude::*;

use crate::attacks::{count_correct, deepfool_linf, mi_fgsm, pgd, AttackConfig};
use crate::autodiff::Graph;
use crate::finetune::{adapt, adapt_adversarial, FineTuneKind, FineTuneSpec, FrozenModel};
use crate::metatrain::EpisodeShape;
use crate::nn::{Architecture, ParameterSet};
use crate::rng::{derive_seed, stream};
use crate::tasks::{sample_episode, Dataset, Episode};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub n_episodes: usize,
    pub finetune: FineTuneSpec,
    /// Evaluation attack on the queries.
    pub attack: AttackConfig,
    /// Also report accuracy after adversarial fine-tuning on the support set.
    pub adv_finetune: bool,
    /// Attack used during adversarial fine-tuning.
    pub finetune_attack: AttackConfig,
    pub episode: EpisodeShape,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_episodes: 200,
            finetune: FineTuneSpec::ridge(1.0),
            attack: AttackConfig::synthetic_eval(),
            adv_finetune: false,
            finetune_attack: AttackConfig::synthetic_train(),
            episode: EpisodeShape::default(),
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_episodes == 0 {
            return Err(Error::InvalidConfig("n_episodes must be at least 1".into()));
        }
        let e = self.episode;
        if e.n_way == 0 || e.k_shot == 0 || e.q_query == 0 {
            return Err(Error::InvalidConfig(format!(
                "episode shape {}-way {}-shot {} queries must be positive",
                e.n_way, e.k_shot, e.q_query
            )));
        }
        self.finetune.validate()?;
        self.attack.validate()?;
        self.finetune_attack.validate()
    }

    /// Seed of the `index`-th evaluation episode; shared by every model evaluated
    /// under this config.
    pub fn episode_seed(&self, index: usize) -> u64 {
        derive_seed(self.seed, &[stream::EPISODE, index as u64])
    }

    fn attack_seed(&self, index: usize, which: u64) -> u64 {
        derive_seed(self.seed, &[stream::ATTACK, index as u64, which])
    }

    /// The `index`-th evaluation episode.
    pub fn episode<S: Scalar>(&self, dataset: &Dataset<S>, index: usize) -> Result<Episode<S>> {
        let s = self.episode;
        Ok(sample_episode(
            dataset,
            s.n_way,
            s.k_shot,
            s.q_query,
            self.episode_seed(index),
        )?)
    }
}

/// Correct-prediction counts; accuracies are exact ratios of these.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub nat: usize,
    pub adv: usize,
    pub nat_at: usize,
    pub adv_at: usize,
    pub samples: usize,
}

impl Counts {
    fn add(&mut self, o: &Counts) {
        self.nat += o.nat;
        self.adv += o.adv;
        self.nat_at += o.nat_at;
        self.adv_at += o.adv_at;
        self.samples += o.samples;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub a_nat: f64,
    pub a_adv: f64,
    /// Present when evaluated with adversarial fine-tuning.
    pub a_nat_at: Option<f64>,
    pub a_adv_at: Option<f64>,
    pub stderr_bound: f64,
    pub n_samples: usize,
    pub counts: Counts,
}

impl Metrics {
    fn from_counts(c: Counts, with_at: bool) -> Self {
        let n = c.samples as f64;
        Self {
            a_nat: c.nat as f64 / n,
            a_adv: c.adv as f64 / n,
            a_nat_at: with_at.then(|| c.nat_at as f64 / n),
            a_adv_at: with_at.then(|| c.adv_at as f64 / n),
            stderr_bound: stderr_bound(c.samples),
            n_samples: c.samples,
            counts: c,
        }
    }
}

/// Largest one-standard-error half width of a proportion estimated from
/// `n_samples` draws: `sqrt(0.25 / n)`.
pub fn stderr_bound(n_samples: usize) -> f64 {
    (0.25 / n_samples as f64).sqrt()
}

/// Fails when the two datasets share a class id.
pub fn check_disjoint<S: Scalar>(train: &Dataset<S>, test: &Dataset<S>) -> Result<()> {
    for c in &test.classes {
        if train.classes.iter().any(|t| t.id == c.id) {
            return Err(Error::InvalidConfig(format!(
                "class {} appears in both the training and the test data",
                c.id
            )));
        }
    }
    Ok(())
}

fn episode_counts<S: Scalar>(
    arch: &Architecture,
    params: &ParameterSet<S>,
    spec: &FineTuneSpec,
    e: &Episode<S>,
    cfg: &EvalConfig,
    index: usize,
) -> Result<Counts> {
    let g = Graph::new();
    let p = params.attach_const(&g);
    let model = adapt(spec, arch, &p, &e.support_x, &e.support_y, e.n_way)?.freeze();
    let score = |m: &FrozenModel<S>, seed: u64| -> Result<(usize, usize)> {
        let nat = count_correct(m, &e.query_x, &e.query_y)?;
        let adv = pgd(m, &e.query_x, &e.query_y, &cfg.attack, seed)?;
        Ok((nat, count_correct(m, &adv.x_adv, &e.query_y)?))
    };
    let (nat, adv) = score(&model, cfg.attack_seed(index, 0))?;
    let mut counts = Counts {
        nat,
        adv,
        samples: e.query_y.len(),
        ..Counts::default()
    };
    if cfg.adv_finetune {
        let robust = adapt_adversarial(
            spec,
            arch,
            &p,
            &e.support_x,
            &e.support_y,
            e.n_way,
            &cfg.finetune_attack,
            cfg.attack_seed(index, 1),
        )?
        .freeze();
        (counts.nat_at, counts.adv_at) = score(&robust, cfg.attack_seed(index, 2))?;
    }
    Ok(counts)
}

/// Evaluates with `cfg.finetune`.
pub fn evaluate<S: Scalar>(
    arch: &Architecture,
    params: &ParameterSet<S>,
    dataset: &Dataset<S>,
    cfg: &EvalConfig,
) -> Result<Metrics> {
    evaluate_with(arch, params, &cfg.finetune, dataset, cfg)
}

/// Evaluates under `spec`, using every other setting of `cfg`. Episodes run in
/// parallel and are reduced in index order.
pub fn evaluate_with<S: Scalar>(
    arch: &Architecture,
    params: &ParameterSet<S>,
    spec: &FineTuneSpec,
    dataset: &Dataset<S>,
    cfg: &EvalConfig,
) -> Result<Metrics> {
    cfg.validate()?;
    spec.validate()?;
    arch.check_params(params, spec.kind == FineTuneKind::MamlSgd)?;
    let per: Vec<Result<Counts>> = (0..cfg.n_episodes)
        .into_par_iter()
        .map(|i| {
            let e = cfg.episode(dataset, i)?;
            episode_counts(arch, params, spec, &e, cfg, i)
        })
        .collect();
    let mut total = Counts::default();
    for c in per {
        total.add(&c?);
    }
    Ok(Metrics::from_counts(total, cfg.adv_finetune))
}

/// A model entered into a comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate<S> {
    pub name: String,
    pub arch: Architecture,
    pub params: ParameterSet<S>,
    pub finetune: FineTuneSpec,
}

/// Evaluates every candidate on the same episode and attack seeds.
pub fn compare<S: Scalar>(
    candidates: &[Candidate<S>],
    dataset: &Dataset<S>,
    cfg: &EvalConfig,
) -> Result<Vec<(String, Metrics)>> {
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("compare needs at least one model".into()));
    }
    candidates
        .iter()
        .map(|c| {
            Ok((
                c.name.clone(),
                evaluate_with(&c.arch, &c.params, &c.finetune, dataset, cfg)?,
            ))
        })
        .collect()
}

/// Settings of the extra attacks in a robustness report.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackSuite {
    /// Bounded attack settings shared by PGD and MI-FGSM.
    pub attack: AttackConfig,
    pub restarts: usize,
    pub mi_mu: f64,
    pub deepfool_iters: usize,
    pub deepfool_overshoot: f64,
}

impl Default for AttackSuite {
    /// 20-step PGD with 20 restarts, MI-FGSM with decay 1, 2-iteration DeepFool.
    fn default() -> Self {
        Self {
            attack: AttackConfig::synthetic_eval(),
            restarts: 20,
            mi_mu: 1.0,
            deepfool_iters: 2,
            deepfool_overshoot: 0.02,
        }
    }
}

/// Accuracy under each attack of a robustness report.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackReport {
    pub clean: f64,
    pub pgd: f64,
    pub pgd_restarts: f64,
    pub mi_fgsm: f64,
    pub deepfool: f64,
    /// Perturbations crafted on the source model, scored on this one.
    pub transfer: Option<f64>,
    pub n_samples: usize,
}

/// Scores `target` against PGD, PGD with restarts, MI-FGSM and DeepFool, plus a
/// transfer attack crafted on `source` when given. Both models adapt on the same
/// episodes.
pub fn attack_report<S: Scalar>(
    target: &Candidate<S>,
    source: Option<&Candidate<S>>,
    dataset: &Dataset<S>,
    cfg: &EvalConfig,
    suite: &AttackSuite,
) -> Result<AttackReport> {
    cfg.validate()?;
    suite.attack.validate()?;
    for c in std::iter::once(target).chain(source) {
        c.arch
            .check_params(&c.params, c.finetune.kind == FineTuneKind::MamlSgd)?;
    }
    let per: Vec<Result<[usize; 7]>> = (0..cfg.n_episodes)
        .into_par_iter()
        .map(|i| {
            let e = cfg.episode(dataset, i)?;
            let g = Graph::new();
            let adapted = |c: &Candidate<S>| -> Result<FrozenModel<S>> {
                Ok(adapt(
                    &c.finetune,
                    &c.arch,
                    &c.params.attach_const(&g),
                    &e.support_x,
                    &e.support_y,
                    e.n_way,
                )?
                .freeze())
            };
            let m = adapted(target)?;
            let (x, y) = (&e.query_x, &e.query_y);
            let seed = |k: u64| cfg.attack_seed(i, k);
            let clean = count_correct(&m, x, y)?;
            let single = AttackConfig {
                restarts: 1,
                ..suite.attack.clone()
            };
            let many = AttackConfig {
                restarts: suite.restarts,
                ..suite.attack.clone()
            };
            let pgd1 = count_correct(&m, &pgd(&m, x, y, &single, seed(0))?.x_adv, y)?;
            // same seed: the first restart reproduces the single-start run
            let pgdn = count_correct(&m, &pgd(&m, x, y, &many, seed(0))?.x_adv, y)?;
            let mi = count_correct(&m, &mi_fgsm(&m, x, y, &single, suite.mi_mu, seed(2))?.x_adv, y)?;
            let df = deepfool_linf(
                &m,
                x,
                y,
                suite.deepfool_iters,
                suite.deepfool_overshoot,
                suite.attack.clip,
            )?;
            let df = count_correct(&m, &df.outcome.x_adv, y)?;
            let transfer = match source {
                Some(s) => {
                    let sm = adapted(s)?;
                    let adv = pgd(&sm, x, y, &single, seed(3))?.x_adv;
                    count_correct(&m, &adv, y)?
                }
                None => 0,
            };
            Ok([clean, pgd1, pgdn, mi, df, transfer, y.len()])
        })
        .collect();
    let mut t = [0usize; 7];
    for r in per {
        for (a, b) in t.iter_mut().zip(r?) {
            *a += b;
        }
    }
    let n = t[6] as f64;
    Ok(AttackReport {
        clean: t[0] as f64 / n,
        pgd: t[1] as f64 / n,
        pgd_restarts: t[2] as f64 / n,
        mi_fgsm: t[3] as f64 / n,
        deepfool: t[4] as f64 / n,
        transfer: source.map(|_| t[5] as f64 / n),
        n_samples: t[6],
    })
}

#[cfg(test)]
mod tests;
