use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::{rng_from, stream, Rng};
use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

use crate::autodiff::{grad, Graph};
use crate::nn::kl_divergence;

use super::{check_rows, loss_grad, predict_logits, AttackConfig, AttackOutcome, Classifier, Norm};

/// Clamps every coordinate of `delta` to `[-eps, eps]`.
pub fn project_linf<S: Scalar>(delta: &mut [S], eps: f64) {
    let e = S::lit(eps);
    for d in delta {
        *d = d.max(-e).min(e);
    }
}

/// Rescales `delta` onto the l2 sphere of radius `eps` when it lies outside.
pub fn project_l2<S: Scalar>(delta: &mut [S], eps: f64) {
    let norm = delta.iter().map(|d| d.as_f64().powi(2)).sum::<f64>().sqrt();
    if norm > eps {
        let f = S::lit(eps / norm);
        for d in delta {
            *d *= f;
        }
    }
}

fn project<S: Scalar>(delta: &mut [S], eps: f64, norm: Norm) {
    match norm {
        Norm::Linf => project_linf(delta, eps),
        Norm::L2 => project_l2(delta, eps),
    }
}

/// Moves `x + delta` into the clip range, widened so it always contains `x`.
fn clip_row<S: Scalar>(x: &[S], delta: &mut [S], clip: Option<(f64, f64)>) {
    let Some((lo, hi)) = clip else { return };
    let (lo, hi) = (S::lit(lo), S::lit(hi));
    for (d, &xi) in delta.iter_mut().zip(x) {
        let v = (xi + *d).max(lo.min(xi)).min(hi.max(xi));
        *d = v - xi;
    }
}

fn random_start<S: Scalar>(rng: &mut Rng, row: &mut [S], eps: f64, norm: Norm) {
    match norm {
        Norm::Linf => {
            for d in row.iter_mut() {
                *d = S::lit(rng.random_range(-eps..=eps));
            }
        }
        Norm::L2 => {
            let dir: Vec<f64> = (0..row.len()).map(|_| StandardNormal.sample(rng)).collect();
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let r = eps * rng.random::<f64>().powf(1.0 / row.len() as f64);
            for (d, v) in row.iter_mut().zip(dir) {
                *d = if n > 0.0 { S::lit(v / n * r) } else { S::zero() };
            }
        }
    }
}

/// Ascent direction for one row: the sign for l-inf, the unit vector for l2.
fn direction<S: Scalar>(g: &[S], norm: Norm) -> Vec<S> {
    match norm {
        Norm::Linf => g.iter().map(|v| v.sign()).collect(),
        Norm::L2 => {
            let n = g.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            if n > 0.0 {
                let inv = S::lit(1.0 / n);
                g.iter().map(|&v| v * inv).collect()
            } else {
                vec![S::zero(); g.len()]
            }
        }
    }
}

/// Per-row state carried across steps; used to add momentum to the raw gradient.
trait StepRule<S> {
    fn reset(&mut self, rows: usize, width: usize);
    fn ascent(&mut self, row: usize, grad: &[S]) -> Vec<S>;
}

struct Plain(Norm);

impl<S: Scalar> StepRule<S> for Plain {
    fn reset(&mut self, _: usize, _: usize) {}

    fn ascent(&mut self, _: usize, grad: &[S]) -> Vec<S> {
        direction(grad, self.0)
    }
}

struct Momentum<S> {
    mu: S,
    norm: Norm,
    acc: Vec<Vec<S>>,
}

impl<S: Scalar> StepRule<S> for Momentum<S> {
    fn reset(&mut self, rows: usize, width: usize) {
        self.acc = vec![vec![S::zero(); width]; rows];
    }

    fn ascent(&mut self, row: usize, grad: &[S]) -> Vec<S> {
        let l1 = grad.iter().map(|v| v.abs()).sum::<S>();
        let acc = &mut self.acc[row];
        for (a, &g) in acc.iter_mut().zip(grad) {
            let g = if l1 > S::zero() { g / l1 } else { g };
            *a = self.mu * *a + g;
        }
        direction(acc, self.norm)
    }
}

struct Restart<S> {
    delta: Tensor<S>,
    iterations: Vec<usize>,
    loss: Vec<f64>,
    success: Vec<bool>,
    aborted: Vec<bool>,
}

fn run_restart<S: Scalar, M: Classifier<S> + ?Sized>(
    model: &M,
    x: &Tensor<S>,
    y: &[usize],
    cfg: &AttackConfig,
    rule: &mut dyn StepRule<S>,
    rng: &mut Rng,
) -> Result<Restart<S>> {
    let n = y.len();
    let width = x.row_len();
    let xs = x.data();
    let mut delta = Tensor::zeros(x.shape().to_vec());
    if cfg.random_start && cfg.eps > 0.0 {
        for r in 0..n {
            let row = &mut delta.data_mut()[r * width..(r + 1) * width];
            random_start(rng, row, cfg.eps, cfg.norm);
            clip_row(&xs[r * width..(r + 1) * width], row, cfg.clip);
        }
    }
    rule.reset(n, width);
    let mut active = vec![true; n];
    let mut aborted = vec![false; n];
    let mut iterations = vec![0; n];
    let step = S::lit(cfg.step);
    let mut kept: Option<Restart<S>> = None;
    for i in 0..cfg.steps {
        let at = x.zip_map(&delta, |a, b| a + b)?;
        let lg = loss_grad(model, &at, y)?;
        if i > 0 {
            keep_best(&mut kept, &delta, &lg.loss, &lg.pred, y);
        }
        if cfg.early_stop && i > 0 {
            for r in 0..n {
                if lg.pred[r] != y[r] {
                    active[r] = false;
                }
            }
        }
        if !active.iter().any(|&a| a) {
            break;
        }
        for r in 0..n {
            if !active[r] {
                continue;
            }
            let g = &lg.grad.data()[r * width..(r + 1) * width];
            if g.iter().any(|v| !v.is_finite()) {
                active[r] = false;
                aborted[r] = true;
                continue;
            }
            let dir = rule.ascent(r, g);
            let row = &mut delta.data_mut()[r * width..(r + 1) * width];
            for (d, v) in row.iter_mut().zip(dir) {
                *d += step * v;
            }
            project(row, cfg.eps, cfg.norm);
            clip_row(&xs[r * width..(r + 1) * width], row, cfg.clip);
            iterations[r] += 1;
        }
    }
    let at = x.zip_map(&delta, |a, b| a + b)?;
    let last = loss_grad(model, &at, y)?;
    keep_best(&mut kept, &delta, &last.loss, &last.pred, y);
    let mut out = kept.expect("at least one iterate");
    out.iterations = iterations;
    out.aborted = aborted;
    Ok(out)
}

/// Per example, a misclassified point beats a correct one and a higher loss breaks ties.
fn better(success: (bool, f64), than: (bool, f64)) -> bool {
    success.0 && !than.0 || success.0 == than.0 && success.1 > than.1
}

/// Folds one iterate into the per-example best seen so far in this restart.
fn keep_best<S: Scalar>(kept: &mut Option<Restart<S>>, delta: &Tensor<S>, loss: &[S], pred: &[usize], y: &[usize]) {
    let loss: Vec<f64> = loss.iter().map(|v| v.as_f64()).collect();
    let success: Vec<bool> = pred.iter().zip(y).map(|(p, t)| p != t).collect();
    let Some(k) = kept.as_mut() else {
        *kept = Some(Restart {
            delta: delta.clone(),
            iterations: Vec::new(),
            loss,
            success,
            aborted: Vec::new(),
        });
        return;
    };
    let width = delta.row_len();
    for e in 0..y.len() {
        if better((success[e], loss[e]), (k.success[e], k.loss[e])) {
            let span = e * width..(e + 1) * width;
            k.delta.data_mut()[span.clone()].copy_from_slice(&delta.data()[span]);
            k.loss[e] = loss[e];
            k.success[e] = success[e];
        }
    }
}

/// Runs `cfg.restarts` restarts. Within a restart and across restarts, each example
/// keeps the iterate that flips the label if any does, breaking ties by the highest loss.
fn run<S: Scalar, M: Classifier<S> + ?Sized>(
    model: &M,
    x: &Tensor<S>,
    y: &[usize],
    cfg: &AttackConfig,
    rule: &mut dyn StepRule<S>,
    seed: u64,
) -> Result<AttackOutcome<S>> {
    cfg.validate()?;
    if x.rank() == 0 || x.shape()[0] != y.len() {
        return Err(Error::InvalidConfig(format!(
            "attack batch of shape {:?} with {} labels",
            x.shape(),
            y.len()
        )));
    }
    let width = x.row_len();
    let mut best: Option<Restart<S>> = None;
    let mut aborted_restarts = 0;
    for r in 0..cfg.restarts {
        let mut rng = rng_from(seed, &[stream::ATTACK, r as u64]);
        let cand = run_restart(model, x, y, cfg, rule, &mut rng)?;
        aborted_restarts += cand.aborted.iter().filter(|&&a| a).count();
        let Some(b) = best.as_mut() else {
            best = Some(cand);
            continue;
        };
        for e in 0..y.len() {
            let wins = match (cand.aborted[e], b.aborted[e]) {
                (false, true) => true,
                (true, false) => false,
                _ => better((cand.success[e], cand.loss[e]), (b.success[e], b.loss[e])),
            };
            if wins {
                let span = e * width..(e + 1) * width;
                b.delta.data_mut()[span.clone()].copy_from_slice(&cand.delta.data()[span]);
                b.iterations[e] = cand.iterations[e];
                b.loss[e] = cand.loss[e];
                b.success[e] = cand.success[e];
                b.aborted[e] = cand.aborted[e];
            }
        }
    }
    let best = best.expect("restarts >= 1");
    if let Some(e) = best.aborted.iter().position(|&a| a) {
        return Err(Error::NonFinite {
            context: format!("attack gradient for example {e} in every restart"),
        });
    }
    Ok(AttackOutcome {
        x_adv: x.zip_map(&best.delta, |a, b| a + b)?,
        success: best.success,
        iterations: best.iterations,
        loss: best.loss,
        aborted_restarts,
    })
}

/// Projected gradient ascent on the cross-entropy. The start point is never returned
/// unless `cfg.steps` is zero.
pub fn pgd<S: Scalar, M: Classifier<S> + ?Sized>(
    model: &M,
    x: &Tensor<S>,
    y: &[usize],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<AttackOutcome<S>> {
    run(model, x, y, cfg, &mut Plain(cfg.norm), seed)
}

/// One signed step of size `eps`.
pub fn fgsm<S: Scalar, M: Classifier<S> + ?Sized>(
    model: &M,
    x: &Tensor<S>,
    y: &[usize],
    eps: f64,
    clip: Option<(f64, f64)>,
) -> Result<AttackOutcome<S>> {
    let cfg = AttackConfig {
        eps,
        step: eps,
        steps: 1,
        restarts: 1,
        norm: Norm::Linf,
        random_start: false,
        clip,
        early_stop: false,
    };
    pgd(model, x, y, &cfg, 0)
}

/// Momentum iterative FGSM: `g <- mu g + grad / |grad|_1`, step along the sign of `g`.
pub fn mi_fgsm<S: Scalar, M: Classifier<S> + ?Sized>(
    model: &M,
    x: &Tensor<S>,
    y: &[usize],
    cfg: &AttackConfig,
    mu: f64,
    seed: u64,
) -> Result<AttackOutcome<S>> {
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(Error::InvalidConfig(format!("momentum decay {mu} must be >= 0")));
    }
    let mut rule = Momentum {
        mu: S::lit(mu),
        norm: cfg.norm,
        acc: Vec::new(),
    };
    run(model, x, y, cfg, &mut rule, seed)
}

/// Inner maximization of TRADES: ascent on `KL(softmax F(x + delta) || softmax F(x))`
/// within the budget. Labels play no part. Returns `x` itself when the attack is null.
pub fn kl_pgd<S: Scalar, M: Classifier<S> + ?Sized>(
    model: &M,
    x: &Tensor<S>,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Tensor<S>> {
    cfg.validate()?;
    if x.rank() == 0 {
        return Err(Error::InvalidConfig("attack batch must have a batch axis".into()));
    }
    if cfg.is_null() {
        return Ok(x.clone());
    }
    let n = x.shape()[0];
    let width = x.row_len();
    let xs = x.data();
    let clean = predict_logits(model, x)?;
    let mut rng = rng_from(seed, &[stream::ATTACK, 0]);
    let mut delta = Tensor::zeros(x.shape().to_vec());
    if cfg.random_start {
        for r in 0..n {
            let row = &mut delta.data_mut()[r * width..(r + 1) * width];
            random_start(&mut rng, row, cfg.eps, cfg.norm);
            clip_row(&xs[r * width..(r + 1) * width], row, cfg.clip);
        }
    }
    let step = S::lit(cfg.step);
    for _ in 0..cfg.steps {
        let g = Graph::new();
        let input = g.param(x.zip_map(&delta, |a, b| a + b)?);
        let logits = model.logits(&g, input)?;
        check_rows(&logits, n)?;
        let kl = kl_divergence(&logits, &g.constant(clean.clone()))?;
        let d = grad(&kl, &[input])?[0].value();
        if !d.all_finite() {
            return Err(Error::NonFinite {
                context: "KL attack gradient".into(),
            });
        }
        for r in 0..n {
            let dir = direction(&d.data()[r * width..(r + 1) * width], cfg.norm);
            let row = &mut delta.data_mut()[r * width..(r + 1) * width];
            for (v, s) in row.iter_mut().zip(dir) {
                *v += step * s;
            }
            project(row, cfg.eps, cfg.norm);
            clip_row(&xs[r * width..(r + 1) * width], row, cfg.clip);
        }
    }
    Ok(x.zip_map(&delta, |a, b| a + b)?)
}
