use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

use super::{count_correct, pgd, AttackConfig, Classifier};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferResult {
    pub correct: usize,
    pub n: usize,
}

impl TransferResult {
    pub fn accuracy(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.correct as f64 / self.n as f64
        }
    }
}

/// Crafts PGD perturbations on `source` and scores `target` on them.
///
/// The two models may order classes differently, so each gets its own labels.
pub fn transfer_attack<S: Scalar, A: Classifier<S> + ?Sized, B: Classifier<S> + ?Sized>(
    source: &A,
    target: &B,
    x: &Tensor<S>,
    source_labels: &[usize],
    target_labels: &[usize],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<TransferResult> {
    if source_labels.len() != target_labels.len() {
        return Err(Error::InvalidConfig(format!(
            "{} source labels but {} target labels",
            source_labels.len(),
            target_labels.len()
        )));
    }
    let adv = pgd(source, x, source_labels, cfg, seed)?;
    Ok(TransferResult {
        correct: count_correct(target, &adv.x_adv, target_labels)?,
        n: target_labels.len(),
    })
}
