//! Outer-loop training: natural meta-learning, adversarial querying, the
//! query-and-support variant, meta-TRADES, and plain adversarial training of a
//! transfer backbone.

mod log;
mod optim;

pub use log::{EpochRecord, TrainLog, TRAIN_LOG_COLUMNS};
pub use optim::{OptimizerConfig, Sgd};

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::attacks::{kl_pgd, pgd, predict, AttackConfig};
use crate::autodiff::{grad, Graph};
use crate::finetune::{adapt, FineTuneKind, FineTuneSpec, FrozenModel};
use crate::nn::{cross_entropy, kl_divergence, Architecture, ParameterSet, Scope};
use crate::rng::{derive_seed, rng_from, stream};
use crate::tasks::{sample_episode, Dataset, Episode};
use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Natural,
    /// Perturb queries against the adapted model.
    Aq,
    /// Perturb support data as well as queries.
    AqSupport,
    /// Clean cross-entropy plus a weighted KL term on perturbed queries.
    Trades,
}

/// Model the support perturbation in [`Regime::AqSupport`] is crafted against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SupportAttackTarget {
    /// The base parameters before adaptation. Closed-form heads have no
    /// un-adapted classifier, so for them this falls back to `Adapted`.
    Base,
    /// The model adapted on the clean support set.
    Adapted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeShape {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
}

impl Default for EpisodeShape {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 5,
            q_query: 15,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaTrainConfig {
    pub finetune: FineTuneSpec,
    /// Training attack.
    pub attack: AttackConfig,
    pub regime: Regime,
    pub trades_inv_lambda: f64,
    pub meta_batch: usize,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub episode: EpisodeShape,
    pub support_attack_target: SupportAttackTarget,
    /// Minibatch size of the transfer baseline.
    pub transfer_batch: usize,
    pub seed: u64,
    /// Record wall time per epoch. Off by default so logs are reproducible.
    pub log_wall_time: bool,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self {
            finetune: FineTuneSpec::ridge(1.0),
            attack: AttackConfig::synthetic_train(),
            regime: Regime::Natural,
            trades_inv_lambda: 1.0,
            meta_batch: 8,
            optimizer: OptimizerConfig::default(),
            epochs: 60,
            episodes_per_epoch: 64,
            episode: EpisodeShape::default(),
            support_attack_target: SupportAttackTarget::Base,
            transfer_batch: 64,
            seed: 0,
            log_wall_time: false,
        }
    }
}

impl MetaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.meta_batch == 0 {
            return bad("meta_batch must be at least 1".into());
        }
        if !(self.trades_inv_lambda >= 0.0 && self.trades_inv_lambda.is_finite()) {
            return bad(format!("trades_inv_lambda {} must be >= 0", self.trades_inv_lambda));
        }
        if self.episodes_per_epoch == 0 {
            return bad("episodes_per_epoch must be at least 1".into());
        }
        if self.transfer_batch == 0 {
            return bad("transfer_batch must be at least 1".into());
        }
        let e = self.episode;
        if e.n_way == 0 || e.k_shot == 0 || e.q_query == 0 {
            return bad(format!(
                "episode shape {}-way {}-shot {} queries must be positive",
                e.n_way, e.k_shot, e.q_query
            ));
        }
        self.finetune.validate()?;
        self.attack.validate()?;
        self.optimizer.validate()
    }
}

/// Outer-gradient contribution of one episode and what went into it.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStep<S> {
    /// `grad_theta L(F_theta_i, T_i^q)`, one tensor per parameter in set order.
    pub grads: Vec<Tensor<S>>,
    pub loss: f64,
    pub clean_correct: usize,
    pub n_query: usize,
    /// Queries classified correctly before the attack.
    pub attacked: usize,
    /// Of those, how many the attack flipped.
    pub flipped: usize,
    /// Batched attack calls made for this task.
    pub attack_invocations: usize,
    /// Largest l-inf perturbation applied to any input.
    pub max_perturbation: f64,
}

fn max_linf<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| (p.as_f64() - q.as_f64()).abs())
        .fold(0.0, f64::max)
}

fn support_attack<S: Scalar>(
    cfg: &MetaTrainConfig,
    arch: &Architecture,
    params: &ParameterSet<S>,
    episode: &Episode<S>,
    seed: u64,
) -> Result<Tensor<S>> {
    let base = cfg.support_attack_target == SupportAttackTarget::Base && cfg.finetune.kind == FineTuneKind::MamlSgd;
    let target = if base {
        FrozenModel::linear(arch, params)
    } else {
        let g = Graph::new();
        adapt(
            &cfg.finetune,
            arch,
            &params.attach_const(&g),
            &episode.support_x,
            &episode.support_y,
            episode.n_way,
        )?
        .freeze()
    };
    Ok(pgd(&target, &episode.support_x, &episode.support_y, &cfg.attack, seed)?.x_adv)
}

/// Adapts on one episode, builds the regime's query loss, and differentiates it
/// with respect to every base parameter. Attack outputs enter as constants.
pub fn task_step<S: Scalar>(
    cfg: &MetaTrainConfig,
    arch: &Architecture,
    params: &ParameterSet<S>,
    episode: &Episode<S>,
    attack_seed: u64,
) -> Result<TaskStep<S>> {
    let n_way = episode.n_way;
    let qy = &episode.query_y;
    let mut invocations = 0;
    let mut max_perturbation = 0.0f64;

    let support_x = if cfg.regime == Regime::AqSupport {
        invocations += 1;
        let xs = support_attack(cfg, arch, params, episode, derive_seed(attack_seed, &[0]))?;
        max_perturbation = max_perturbation.max(max_linf(&xs, &episode.support_x));
        xs
    } else {
        episode.support_x.clone()
    };

    let g = Graph::new();
    let p = params.attach(&g);
    let model = adapt(&cfg.finetune, arch, &p, &support_x, &episode.support_y, n_way)?;
    let clean_logits = model.predict(g.constant(episode.query_x.clone()))?;
    let clean_pred = clean_logits.value().argmax_rows();
    let correct: Vec<bool> = clean_pred.iter().zip(qy).map(|(a, b)| a == b).collect();
    let clean_correct = correct.iter().filter(|&&c| c).count();
    let (mut attacked, mut flipped) = (0, 0);
    let mut tally = |adv_pred: &[usize]| {
        for ((&c, a), y) in correct.iter().zip(adv_pred).zip(qy) {
            if c {
                attacked += 1;
                flipped += usize::from(a != y);
            }
        }
    };

    let loss = match cfg.regime {
        Regime::Natural => cross_entropy(&clean_logits, qy)?,
        Regime::Aq | Regime::AqSupport => {
            invocations += 1;
            let frozen = model.freeze();
            let out = pgd(
                &frozen,
                &episode.query_x,
                qy,
                &cfg.attack,
                derive_seed(attack_seed, &[1]),
            )?;
            max_perturbation = max_perturbation.max(out.linf_from(&episode.query_x));
            let adv_logits = model.predict(g.constant(out.x_adv))?;
            tally(&adv_logits.value().argmax_rows());
            cross_entropy(&adv_logits, qy)?
        }
        Regime::Trades => {
            let ce = cross_entropy(&clean_logits, qy)?;
            if cfg.trades_inv_lambda == 0.0 {
                ce
            } else {
                invocations += 1;
                let frozen = model.freeze();
                let x_hat = kl_pgd(&frozen, &episode.query_x, &cfg.attack, derive_seed(attack_seed, &[1]))?;
                max_perturbation = max_perturbation.max(max_linf(&x_hat, &episode.query_x));
                let adv_logits = model.predict(g.constant(x_hat))?;
                tally(&adv_logits.value().argmax_rows());
                let kl = kl_divergence(&adv_logits, &clean_logits)?;
                ce.add(&kl.scale(S::lit(cfg.trades_inv_lambda))?)?
            }
        }
    };
    let loss_value = loss.item().as_f64();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite {
            context: format!("query loss {loss_value} for episode classes {:?}", episode.classes),
        });
    }
    let grads: Vec<Tensor<S>> = grad(&loss, &p.vars())?.iter().map(|v| v.value()).collect();
    for ((name, _, _), gv) in p.iter().zip(&grads) {
        if !gv.all_finite() {
            return Err(Error::NonFinite {
                context: format!(
                    "outer gradient of '{name}' (query loss {loss_value}, episode classes {:?})",
                    episode.classes
                ),
            });
        }
    }
    Ok(TaskStep {
        grads,
        loss: loss_value,
        clean_correct,
        n_query: qy.len(),
        attacked,
        flipped,
        attack_invocations: invocations,
        max_perturbation,
    })
}

/// Running per-epoch totals.
#[derive(Default)]
struct Tally {
    loss: f64,
    tasks: usize,
    correct: usize,
    queries: usize,
    attacked: usize,
    flipped: usize,
    invocations: usize,
    max_perturbation: f64,
}

impl Tally {
    fn record(&self, epoch: usize, lr: f64, seconds: Option<f64>) -> EpochRecord {
        let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        EpochRecord {
            epoch,
            loss: if self.tasks == 0 {
                0.0
            } else {
                self.loss / self.tasks as f64
            },
            clean_acc: frac(self.correct, self.queries),
            attack_success: frac(self.flipped, self.attacked),
            seconds,
            lr,
            attack_invocations: self.invocations,
            max_perturbation: self.max_perturbation,
        }
    }
}

/// Elementwise mean of the task gradients, summed in task order.
pub fn mean_gradient<S: Scalar>(steps: &[TaskStep<S>]) -> Result<Vec<Tensor<S>>> {
    let Some((first, rest)) = steps.split_first() else {
        return Err(Error::InvalidConfig("empty meta-batch".into()));
    };
    let mut sum = first.grads.clone();
    for s in rest {
        for (acc, g) in sum.iter_mut().zip(&s.grads) {
            *acc = acc.zip_map(g, |a, b| a + b)?;
        }
    }
    let n = S::lit(steps.len() as f64);
    Ok(sum.into_iter().map(|t| t.map(|v| v / n)).collect())
}

fn check_regime(cfg: &MetaTrainConfig, want: Regime) -> Result<()> {
    if cfg.regime != want {
        return Err(Error::InvalidConfig(format!(
            "regime is {:?}, this entry point trains {want:?}",
            cfg.regime
        )));
    }
    Ok(())
}

fn check_finite_params<S: Scalar>(params: &ParameterSet<S>, epoch: usize) -> Result<()> {
    match params.iter().find(|(_, p)| !p.value.all_finite()) {
        Some((name, _)) => Err(Error::NonFinite {
            context: format!("parameter '{name}' after an outer step in epoch {epoch}"),
        }),
        None => Ok(()),
    }
}

/// Meta-trains from `arch.init_params(cfg.seed)` under `cfg.regime`.
pub fn meta_train<S: Scalar>(
    cfg: &MetaTrainConfig,
    arch: &Architecture,
    dataset: &Dataset<S>,
) -> Result<(ParameterSet<S>, TrainLog)> {
    meta_train_from(cfg, arch, arch.init_params(cfg.seed)?, dataset)
}

/// Meta-training loop: per meta-batch, sample `n` episodes, compute each task's
/// outer gradient (in parallel), average them in task order, and apply one
/// optimizer step.
pub fn meta_train_from<S: Scalar>(
    cfg: &MetaTrainConfig,
    arch: &Architecture,
    mut params: ParameterSet<S>,
    dataset: &Dataset<S>,
) -> Result<(ParameterSet<S>, TrainLog)> {
    cfg.validate()?;
    let maml = cfg.finetune.kind == FineTuneKind::MamlSgd;
    arch.check_params(&params, maml)?;
    if maml && arch.n_way != cfg.episode.n_way {
        return Err(Error::InvalidArchitecture(format!(
            "linear head has {} outputs, episodes are {}-way",
            arch.n_way, cfg.episode.n_way
        )));
    }
    let shape = cfg.episode;
    let mut opt = Sgd::new(cfg.optimizer.clone());
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cfg.optimizer.lr_at(epoch, cfg.epochs);
        let mut tally = Tally::default();
        let mut done = 0;
        while done < cfg.episodes_per_epoch {
            let size = cfg.meta_batch.min(cfg.episodes_per_epoch - done);
            let theta = &params;
            let steps: Vec<Result<TaskStep<S>>> = (done..done + size)
                .into_par_iter()
                .map(|idx| {
                    let path = [epoch as u64, idx as u64];
                    let seed = derive_seed(cfg.seed, &[stream::EPISODE, path[0], path[1]]);
                    let episode = sample_episode(dataset, shape.n_way, shape.k_shot, shape.q_query, seed)?;
                    let attack_seed = derive_seed(cfg.seed, &[stream::ATTACK, path[0], path[1]]);
                    task_step(cfg, arch, theta, &episode, attack_seed)
                })
                .collect();
            let steps = steps.into_iter().collect::<Result<Vec<_>>>()?;
            for s in &steps {
                tally.loss += s.loss;
                tally.tasks += 1;
                tally.correct += s.clean_correct;
                tally.queries += s.n_query;
                tally.attacked += s.attacked;
                tally.flipped += s.flipped;
                tally.invocations += s.attack_invocations;
                tally.max_perturbation = tally.max_perturbation.max(s.max_perturbation);
            }
            let mean = mean_gradient(&steps)?;
            opt.step(&mut params, &mean, lr)?;
            check_finite_params(&params, epoch)?;
            done += size;
        }
        let seconds = cfg.log_wall_time.then(|| start.elapsed().as_secs_f64());
        log.records.push(tally.record(epoch, lr, seconds));
    }
    Ok((params, log))
}

pub fn meta_train_natural<S: Scalar>(
    cfg: &MetaTrainConfig,
    arch: &Architecture,
    dataset: &Dataset<S>,
) -> Result<(ParameterSet<S>, TrainLog)> {
    check_regime(cfg, Regime::Natural)?;
    meta_train(cfg, arch, dataset)
}

pub fn meta_train_aq<S: Scalar>(
    cfg: &MetaTrainConfig,
    arch: &Architecture,
    dataset: &Dataset<S>,
) -> Result<(ParameterSet<S>, TrainLog)> {
    check_regime(cfg, Regime::Aq)?;
    meta_train(cfg, arch, dataset)
}

pub fn meta_train_aq_support<S: Scalar>(
    cfg: &MetaTrainConfig,
    arch: &Architecture,
    dataset: &Dataset<S>,
) -> Result<(ParameterSet<S>, TrainLog)> {
    check_regime(cfg, Regime::AqSupport)?;
    meta_train(cfg, arch, dataset)
}

pub fn meta_train_trades<S: Scalar>(
    cfg: &MetaTrainConfig,
    arch: &Architecture,
    dataset: &Dataset<S>,
) -> Result<(ParameterSet<S>, TrainLog)> {
    check_regime(cfg, Regime::Trades)?;
    meta_train(cfg, arch, dataset)
}

fn gather_rows<S: Scalar>(x: &Tensor<S>, rows: &[usize]) -> Result<Tensor<S>> {
    let width = x.row_len();
    let mut data = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        data.extend_from_slice(x.row(r));
    }
    let mut shape = x.shape().to_vec();
    shape[0] = rows.len();
    Ok(Tensor::new(shape, data)?)
}

/// Adversarial training of the backbone plus a linear head over every class of
/// `dataset` on shuffled minibatches, without episodes. Returns the backbone
/// entries only; a few-shot head is attached at evaluation.
///
/// Uses `cfg.attack` (skipped when null), `cfg.optimizer`, `cfg.epochs`,
/// `cfg.transfer_batch` and `cfg.seed`.
pub fn adv_train_transfer<S: Scalar>(
    cfg: &MetaTrainConfig,
    arch: &Architecture,
    dataset: &Dataset<S>,
) -> Result<(ParameterSet<S>, TrainLog)> {
    cfg.validate()?;
    let full = Architecture {
        n_way: dataset.n_classes(),
        ..arch.clone()
    };
    let mut params: ParameterSet<S> = full.init_params(cfg.seed)?;
    let (x_all, labels) = dataset.stacked();
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut opt = Sgd::new(cfg.optimizer.clone());
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cfg.optimizer.lr_at(epoch, cfg.epochs);
        let mut tally = Tally::default();
        order.shuffle(&mut rng_from(cfg.seed, &[stream::BATCH, epoch as u64]));
        for (b, rows) in order.chunks(cfg.transfer_batch).enumerate() {
            let xb = gather_rows(&x_all, rows)?;
            let yb: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
            let current = FrozenModel::linear(&full, &params);
            let clean_pred = predict(&current, &xb)?;
            let xa = if cfg.attack.is_null() {
                xb.clone()
            } else {
                tally.invocations += 1;
                let seed = derive_seed(cfg.seed, &[stream::ATTACK, epoch as u64, b as u64]);
                let out = pgd(&current, &xb, &yb, &cfg.attack, seed)?;
                for ((p, y), s) in clean_pred.iter().zip(&yb).zip(&out.success) {
                    if p == y {
                        tally.attacked += 1;
                        tally.flipped += usize::from(*s);
                    }
                }
                tally.max_perturbation = tally.max_perturbation.max(out.linf_from(&xb));
                out.x_adv
            };
            let g = Graph::new();
            let p = params.attach(&g);
            let loss = cross_entropy(&full.forward(&p, g.constant(xa))?, &yb)?;
            let value = loss.item().as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("transfer loss in epoch {epoch}, batch {b}"),
                });
            }
            let grads: Vec<Tensor<S>> = grad(&loss, &p.vars())?.iter().map(|v| v.value()).collect();
            opt.step(&mut params, &grads, lr)?;
            check_finite_params(&params, epoch)?;
            tally.loss += value;
            tally.tasks += 1;
            tally.correct += clean_pred.iter().zip(&yb).filter(|(p, y)| p == y).count();
            tally.queries += yb.len();
        }
        let seconds = cfg.log_wall_time.then(|| start.elapsed().as_secs_f64());
        log.records.push(tally.record(epoch, lr, seconds));
    }
    Ok((params.filter_scope(Scope::Backbone), log))
}
