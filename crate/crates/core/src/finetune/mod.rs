//! Fine-tuning algorithms `A(theta, S)`: MAML-style SGD, closed-form ridge heads and
//! prototype heads. Each keeps its computation in the graph so an outer loss can be
//! differentiated through adaptation.

mod heads;

pub use heads::{proto_head, proto_logits, ridge_head, ridge_head_weighted, ridge_logits, with_bias_column};

use crate::attacks::{pgd, AttackConfig, Classifier};
use crate::autodiff::{grad, Graph, Var};
use crate::nn::{cross_entropy, one_hot, Architecture, ParamVars, ParameterSet, Scope, HEAD_WEIGHT};
use crate::rng::derive_seed;
use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FineTuneKind {
    MamlSgd,
    Ridge,
    Proto,
}

/// Which parameters the MAML inner loop updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FineTuneScope {
    All,
    LastLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneSpec {
    pub kind: FineTuneKind,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub scope: FineTuneScope,
    pub ridge_lambda: f64,
    /// Multiplier on ridge and prototype logits. Argmax is unaffected; the
    /// softmax temperature of the query loss is not.
    pub logit_scale: f64,
}

impl FineTuneSpec {
    /// 10 plain SGD steps at learning rate 0.01 over all parameters.
    pub fn maml() -> Self {
        Self {
            kind: FineTuneKind::MamlSgd,
            inner_steps: 10,
            inner_lr: 0.01,
            scope: FineTuneScope::All,
            ridge_lambda: 1.0,
            logit_scale: 1.0,
        }
    }

    pub fn ridge(lambda: f64) -> Self {
        Self {
            kind: FineTuneKind::Ridge,
            ridge_lambda: lambda,
            ..Self::maml()
        }
    }

    pub fn proto() -> Self {
        Self {
            kind: FineTuneKind::Proto,
            ..Self::maml()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr >= 0.0 && self.inner_lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("inner_lr {} must be >= 0", self.inner_lr)));
        }
        if !(self.ridge_lambda >= 0.0 && self.ridge_lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "ridge_lambda {} must be >= 0",
                self.ridge_lambda
            )));
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "logit_scale {} must be > 0",
                self.logit_scale
            )));
        }
        Ok(())
    }
}

/// Per-episode classifier produced by adaptation.
#[derive(Debug, Clone)]
pub enum AdaptedHead<'g, S: Scalar> {
    /// The `head.*` entries of the (possibly updated) parameters.
    Linear,
    /// Ridge weights `[embedding + 1, n_way]`.
    Ridge(Var<'g, S>),
    /// Class prototypes `[n_way, embedding]`.
    Proto(Var<'g, S>),
}

/// `theta_i = A(theta, S)` living in a graph, differentiable back to `theta`.
#[derive(Debug, Clone)]
pub struct AdaptedModel<'g, S: Scalar> {
    arch: Architecture,
    params: ParamVars<'g, S>,
    head: AdaptedHead<'g, S>,
    n_way: usize,
    logit_scale: f64,
}

impl<'g, S: Scalar> AdaptedModel<'g, S> {
    /// Adapted parameters (the base parameters for closed-form heads).
    pub fn params(&self) -> &ParamVars<'g, S> {
        &self.params
    }

    pub fn head(&self) -> &AdaptedHead<'g, S> {
        &self.head
    }

    pub fn n_way(&self) -> usize {
        self.n_way
    }

    /// Logits `[batch, n_way]` for a batch in the same graph.
    pub fn predict(&self, x: Var<'g, S>) -> Result<Var<'g, S>> {
        let logits = match &self.head {
            AdaptedHead::Linear => return self.arch.forward(&self.params, x),
            AdaptedHead::Ridge(w) => ridge_logits(&self.arch.forward_backbone(&self.params, x)?, w)?,
            AdaptedHead::Proto(p) => proto_logits(&self.arch.forward_backbone(&self.params, x)?, p)?,
        };
        scaled(logits, self.logit_scale)
    }

    /// Detached copy usable outside this graph, e.g. as an attack target.
    pub fn freeze(&self) -> FrozenModel<S> {
        FrozenModel {
            arch: self.arch.clone(),
            params: self.params.snapshot(),
            head: match &self.head {
                AdaptedHead::Linear => FrozenHead::Linear,
                AdaptedHead::Ridge(w) => FrozenHead::Ridge(w.value()),
                AdaptedHead::Proto(p) => FrozenHead::Proto(p.value()),
            },
            logit_scale: self.logit_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FrozenHead<S> {
    Linear,
    Ridge(Tensor<S>),
    Proto(Tensor<S>),
}

/// Detached classifier: backbone parameters plus a fixed head.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenModel<S> {
    pub arch: Architecture,
    pub params: ParameterSet<S>,
    pub head: FrozenHead<S>,
    pub logit_scale: f64,
}

impl<S: Scalar> FrozenModel<S> {
    /// Backbone followed by the stored linear head.
    pub fn linear(arch: &Architecture, params: &ParameterSet<S>) -> Self {
        Self {
            arch: arch.clone(),
            params: params.clone(),
            head: FrozenHead::Linear,
            logit_scale: 1.0,
        }
    }
}

impl<S: Scalar> Classifier<S> for FrozenModel<S> {
    fn logits<'g>(&self, g: &'g Graph<S>, x: Var<'g, S>) -> Result<Var<'g, S>> {
        let p = self.params.attach_const(g);
        let logits = match &self.head {
            FrozenHead::Linear => return self.arch.forward(&p, x),
            FrozenHead::Ridge(w) => ridge_logits(&self.arch.forward_backbone(&p, x)?, &g.constant(w.clone()))?,
            FrozenHead::Proto(q) => proto_logits(&self.arch.forward_backbone(&p, x)?, &g.constant(q.clone()))?,
        };
        scaled(logits, self.logit_scale)
    }
}

fn scaled<'g, S: Scalar>(logits: Var<'g, S>, scale: f64) -> Result<Var<'g, S>> {
    if scale == 1.0 {
        Ok(logits)
    } else {
        Ok(logits.scale(S::lit(scale))?)
    }
}

fn check_support<S: Scalar>(x: &Tensor<S>, y: &[usize], n_way: usize) -> Result<()> {
    if x.rank() == 0 || x.shape()[0] != y.len() {
        return Err(Error::InvalidConfig(format!(
            "support batch {:?} with {} labels",
            x.shape(),
            y.len()
        )));
    }
    if let Some(&label) = y.iter().find(|&&l| l >= n_way) {
        return Err(Error::LabelOutOfRange { label, classes: n_way });
    }
    Ok(())
}

fn finite<S: Scalar>(v: &Var<'_, S>, context: &str) -> Result<()> {
    if v.value().all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: context.into(),
        })
    }
}

/// Plain gradient descent on `loss`, updating the entries selected by `scope`.
///
/// `loss` receives the step index and the current parameters. Each update is a
/// graph node, so the result stays differentiable with respect to `params`.
pub fn inner_sgd<'g, S: Scalar>(
    params: &ParamVars<'g, S>,
    steps: usize,
    lr: f64,
    scope: FineTuneScope,
    mut loss: impl FnMut(usize, &ParamVars<'g, S>) -> Result<Var<'g, S>>,
) -> Result<ParamVars<'g, S>> {
    if lr == 0.0 || steps == 0 {
        return Ok(params.clone());
    }
    let in_scope = |s: Scope| scope == FineTuneScope::All || s == Scope::Head;
    // Constant entries (e.g. frozen evaluation weights) still need inner-loop gradients.
    let mut theta = params.map_vars(|_, s, v| {
        Ok(if in_scope(s) && !v.requires_grad() {
            v.graph().param(v.value())
        } else {
            v
        })
    })?;
    let lr = S::lit(lr);
    for step in 0..steps {
        let l = loss(step, &theta)?;
        finite(&l, "inner loss")?;
        let selected: Vec<(String, Var<'g, S>)> = theta
            .iter()
            .filter(|(_, s, _)| in_scope(*s))
            .map(|(n, _, v)| (n.to_string(), v))
            .collect();
        let vars: Vec<Var<'g, S>> = selected.iter().map(|(_, v)| *v).collect();
        let grads = grad(&l, &vars)?;
        theta = theta.map_vars(|name, _, v| match selected.iter().position(|(n, _)| n == name) {
            Some(i) => v.sub(&grads[i].scale(lr)?),
            None => Ok(v),
        })?;
    }
    Ok(theta)
}

/// `theta_i` after `inner_steps` plain gradient-descent steps on the support loss.
/// The update chain stays in the graph, so outer gradients are second order.
pub fn finetune_maml<'g, S: Scalar>(
    arch: &Architecture,
    params: &ParamVars<'g, S>,
    support_x: &Tensor<S>,
    support_y: &[usize],
    spec: &FineTuneSpec,
) -> Result<AdaptedModel<'g, S>> {
    maml_inner(arch, params, support_x, support_y, spec, None)
}

fn maml_inner<'g, S: Scalar>(
    arch: &Architecture,
    params: &ParamVars<'g, S>,
    support_x: &Tensor<S>,
    support_y: &[usize],
    spec: &FineTuneSpec,
    attack: Option<(&AttackConfig, u64)>,
) -> Result<AdaptedModel<'g, S>> {
    let n_way = params
        .get(HEAD_WEIGHT)
        .map(|w| w.shape()[0])
        .ok_or_else(|| Error::InvalidArchitecture(format!("missing parameter '{HEAD_WEIGHT}'")))?;
    check_support(support_x, support_y, n_way)?;
    let Some(g) = params.iter().next().map(|(_, _, v)| v.graph()) else {
        return Err(Error::InvalidArchitecture("empty parameter set".into()));
    };
    let theta = inner_sgd(params, spec.inner_steps, spec.inner_lr, spec.scope, |step, theta| {
        let xs = match attack {
            None => support_x.clone(),
            Some((cfg, seed)) => {
                let current = FrozenModel::linear(arch, &theta.snapshot());
                pgd(&current, support_x, support_y, cfg, derive_seed(seed, &[step as u64]))?.x_adv
            }
        };
        cross_entropy(&arch.forward(theta, g.constant(xs))?, support_y)
    })?;
    Ok(AdaptedModel {
        arch: arch.clone(),
        params: theta,
        head: AdaptedHead::Linear,
        n_way,
        logit_scale: 1.0,
    })
}

fn closed_form<'g, S: Scalar>(
    spec: &FineTuneSpec,
    arch: &Architecture,
    params: &ParamVars<'g, S>,
    support_x: &Tensor<S>,
    support_y: &[usize],
    n_way: usize,
) -> Result<AdaptedModel<'g, S>> {
    check_support(support_x, support_y, n_way)?;
    let Some(g) = params.iter().next().map(|(_, _, v)| v.graph()) else {
        return Err(Error::InvalidArchitecture("empty parameter set".into()));
    };
    let features = arch.forward_backbone(params, g.constant(support_x.clone()))?;
    let head = match spec.kind {
        FineTuneKind::Ridge => {
            let y = g.constant(one_hot(support_y, n_way)?);
            AdaptedHead::Ridge(ridge_head(&features, &y, spec.ridge_lambda)?)
        }
        FineTuneKind::Proto => AdaptedHead::Proto(proto_head(&features, support_y, n_way)?),
        FineTuneKind::MamlSgd => unreachable!("handled by maml_inner"),
    };
    Ok(AdaptedModel {
        arch: arch.clone(),
        params: params.clone(),
        head,
        n_way,
        logit_scale: spec.logit_scale,
    })
}

/// Dispatches to the configured fine-tuning algorithm. Ridge and proto heads
/// leave the backbone untouched and ignore the stored linear head.
pub fn adapt<'g, S: Scalar>(
    spec: &FineTuneSpec,
    arch: &Architecture,
    params: &ParamVars<'g, S>,
    support_x: &Tensor<S>,
    support_y: &[usize],
    n_way: usize,
) -> Result<AdaptedModel<'g, S>> {
    spec.validate()?;
    match spec.kind {
        FineTuneKind::MamlSgd => {
            let m = finetune_maml(arch, params, support_x, support_y, spec)?;
            if m.n_way != n_way {
                return Err(Error::InvalidArchitecture(format!(
                    "linear head has {} outputs, episode is {n_way}-way",
                    m.n_way
                )));
            }
            Ok(m)
        }
        _ => closed_form(spec, arch, params, support_x, support_y, n_way),
    }
}

/// Adaptation with adversarially perturbed support data. MAML attacks the support
/// set against the current parameters before every inner step; closed-form heads
/// attack it against the clean-adapted model and re-solve.
pub fn adapt_adversarial<'g, S: Scalar>(
    spec: &FineTuneSpec,
    arch: &Architecture,
    params: &ParamVars<'g, S>,
    support_x: &Tensor<S>,
    support_y: &[usize],
    n_way: usize,
    attack: &AttackConfig,
    seed: u64,
) -> Result<AdaptedModel<'g, S>> {
    spec.validate()?;
    match spec.kind {
        FineTuneKind::MamlSgd => {
            let m = maml_inner(arch, params, support_x, support_y, spec, Some((attack, seed)))?;
            if m.n_way != n_way {
                return Err(Error::InvalidArchitecture(format!(
                    "linear head has {} outputs, episode is {n_way}-way",
                    m.n_way
                )));
            }
            Ok(m)
        }
        _ => {
            let clean = closed_form(spec, arch, params, support_x, support_y, n_way)?.freeze();
            let xs = pgd(&clean, support_x, support_y, attack, seed)?.x_adv;
            closed_form(spec, arch, params, &xs, support_y, n_way)
        }
    }
}
