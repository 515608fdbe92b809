//! Norm-bounded evasion attacks against any [`Classifier`].
//!
//! Every attack works on a batch `[n, ..]` and keeps per-example bookkeeping, so
//! early stopping and restart selection are decided row by row.

mod deepfool;
mod iterative;
mod transfer;

use crate::autodiff::{grad, Graph, Var};
use crate::nn::cross_entropy_per_example;
use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

pub use deepfool::{deepfool_linf, DeepFoolOutcome};
pub use iterative::{fgsm, kl_pgd, mi_fgsm, pgd, project_l2, project_linf};
pub use transfer::{transfer_attack, TransferResult};

/// Anything mapping a batch of inputs to per-class logits inside a graph.
pub trait Classifier<S: Scalar>: Sync {
    fn logits<'g>(&self, g: &'g Graph<S>, x: Var<'g, S>) -> Result<Var<'g, S>>;
}

impl<S: Scalar, C: Classifier<S> + ?Sized> Classifier<S> for &C {
    fn logits<'g>(&self, g: &'g Graph<S>, x: Var<'g, S>) -> Result<Var<'g, S>> {
        (**self).logits(g, x)
    }
}

/// `x W^T + b` on flattened inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier<S> {
    /// `[classes, features]`
    pub weight: Tensor<S>,
    /// `[classes]`
    pub bias: Tensor<S>,
}

impl<S: Scalar> Classifier<S> for LinearClassifier<S> {
    fn logits<'g>(&self, g: &'g Graph<S>, x: Var<'g, S>) -> Result<Var<'g, S>> {
        let n = x.shape()[0];
        let flat = x.reshape(&[n, self.weight.shape()[1]])?;
        let w = g.constant(self.weight.clone());
        let b = g.constant(self.bias.clone());
        crate::nn::forward_linear_head(w, b, flat)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    L2,
    Linf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub eps: f64,
    pub step: f64,
    pub steps: usize,
    pub restarts: usize,
    pub norm: Norm,
    pub random_start: bool,
    /// Data range; coordinates already outside it are never pushed further out.
    pub clip: Option<(f64, f64)>,
    pub early_stop: bool,
}

impl Default for AttackConfig {
    /// 20-step l-inf PGD with eps 8/255 and step 2/255.
    fn default() -> Self {
        Self {
            eps: 8.0 / 255.0,
            step: 2.0 / 255.0,
            steps: 20,
            restarts: 1,
            norm: Norm::Linf,
            random_start: true,
            clip: Some((0.0, 1.0)),
            early_stop: true,
        }
    }
}

impl AttackConfig {
    /// 7-step training attack: same budget, no early stop.
    pub fn train_pgd7() -> Self {
        Self {
            steps: 7,
            early_stop: false,
            ..Self::default()
        }
    }

    /// Evaluation attack scaled to a `[0, 1]` synthetic range: eps 0.1, step 0.025, 20 steps.
    pub fn synthetic_eval() -> Self {
        Self {
            eps: 0.1,
            step: 0.025,
            ..Self::default()
        }
    }

    /// Training counterpart of [`AttackConfig::synthetic_eval`].
    pub fn synthetic_train() -> Self {
        Self {
            steps: 7,
            early_stop: false,
            ..Self::synthetic_eval()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("attack: {m}")));
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return bad("eps must be a finite non-negative number");
        }
        if !(self.step >= 0.0 && self.step.is_finite()) {
            return bad("step must be a finite non-negative number");
        }
        if self.restarts == 0 {
            return bad("restarts must be at least 1");
        }
        if let Some((lo, hi)) = self.clip {
            if !(lo <= hi) {
                return bad("clip range must satisfy lo <= hi");
            }
        }
        Ok(())
    }

    /// True when the attack cannot move any input.
    pub fn is_null(&self) -> bool {
        self.eps == 0.0 || self.steps == 0
    }
}

/// Per-example result of a batched attack.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome<S> {
    pub x_adv: Tensor<S>,
    /// Final prediction differs from the label.
    pub success: Vec<bool>,
    pub iterations: Vec<usize>,
    /// Cross-entropy at `x_adv`.
    pub loss: Vec<f64>,
    /// Restarts abandoned because of a non-finite gradient.
    pub aborted_restarts: usize,
}

impl<S: Scalar> AttackOutcome<S> {
    pub fn success_rate(&self) -> f64 {
        if self.success.is_empty() {
            return 0.0;
        }
        self.success.iter().filter(|&&s| s).count() as f64 / self.success.len() as f64
    }

    /// Largest `|x_adv - x|` over all coordinates.
    pub fn linf_from(&self, x: &Tensor<S>) -> f64 {
        linf_distance(&self.x_adv, x)
    }
}

pub(crate) fn linf_distance<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| (p.as_f64() - q.as_f64()).abs())
        .fold(0.0, f64::max)
}

/// Logits of a detached batch.
pub fn predict_logits<S: Scalar, M: Classifier<S> + ?Sized>(model: &M, x: &Tensor<S>) -> Result<Tensor<S>> {
    let g = Graph::new();
    let input = g.constant(x.clone());
    Ok(model.logits(&g, input)?.value())
}

/// Argmax class per row.
pub fn predict<S: Scalar, M: Classifier<S> + ?Sized>(model: &M, x: &Tensor<S>) -> Result<Vec<usize>> {
    Ok(predict_logits(model, x)?.argmax_rows())
}

/// Number of rows whose prediction equals the label.
pub fn count_correct<S: Scalar, M: Classifier<S> + ?Sized>(model: &M, x: &Tensor<S>, y: &[usize]) -> Result<usize> {
    Ok(predict(model, x)?.iter().zip(y).filter(|(p, t)| p == t).count())
}

/// Per-example cross-entropy, its input gradient, and predictions at `x`.
pub(crate) struct LossGrad<S> {
    pub loss: Vec<S>,
    pub grad: Tensor<S>,
    pub pred: Vec<usize>,
}

pub(crate) fn loss_grad<S: Scalar, M: Classifier<S> + ?Sized>(
    model: &M,
    x: &Tensor<S>,
    y: &[usize],
) -> Result<LossGrad<S>> {
    let g = Graph::new();
    let input = g.param(x.clone());
    let logits = model.logits(&g, input)?;
    check_rows(&logits, y.len())?;
    let per = cross_entropy_per_example(&logits, y)?;
    let total = per.sum()?;
    let d = grad(&total, &[input])?;
    Ok(LossGrad {
        loss: per.value().into_data(),
        grad: d[0].value(),
        pred: logits.value().argmax_rows(),
    })
}

pub(crate) fn check_rows<S: Scalar>(logits: &Var<'_, S>, n: usize) -> Result<()> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != n {
        return Err(Error::InvalidConfig(format!(
            "classifier returned logits of shape {s:?} for {n} labels"
        )));
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    pub fn linear(weight: &[f64], classes: usize, bias: &[f64]) -> LinearClassifier<f64> {
        LinearClassifier {
            weight: Tensor::new(vec![classes, weight.len() / classes], weight.to_vec()).unwrap(),
            bias: Tensor::vector(bias.to_vec()),
        }
    }

    /// Logits that ignore the input.
    pub struct Constant(pub Vec<f64>);

    impl Classifier<f64> for Constant {
        fn logits<'g>(&self, g: &'g Graph<f64>, x: Var<'g, f64>) -> Result<Var<'g, f64>> {
            let n = x.shape()[0];
            let zero = x
                .scale(0.0)?
                .reshape(&[n, x.shape()[1..].iter().product()])?
                .sum_axis(1)?;
            let c = g.constant(Tensor::new(vec![1, self.0.len()], self.0.clone()).unwrap());
            Ok(zero.add(&c)?)
        }
    }
}
