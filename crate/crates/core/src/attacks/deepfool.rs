use crate::autodiff::{grad, Graph};
use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

use super::{check_rows, predict_logits, AttackOutcome, Classifier};

#[derive(Debug, Clone, PartialEq)]
pub struct DeepFoolOutcome<S> {
    pub outcome: AttackOutcome<S>,
    /// Class chosen by the last step taken for each example.
    pub targets: Vec<Option<usize>>,
    /// `|x_adv - x|_inf` per example.
    pub linf: Vec<f64>,
}

/// Logits and per-class input gradients, `grads[k]` shaped like `x`.
fn jacobian<S: Scalar, M: Classifier<S> + ?Sized>(
    model: &M,
    x: &Tensor<S>,
    n: usize,
) -> Result<(Tensor<S>, Vec<Tensor<S>>)> {
    let g = Graph::new();
    let input = g.param(x.clone());
    let logits = model.logits(&g, input)?;
    check_rows(&logits, n)?;
    let classes = logits.shape()[1];
    let mut grads = Vec::with_capacity(classes);
    for k in 0..classes {
        let col = logits.slice(1, k, 1)?.sum()?;
        grads.push(grad(&col, &[input])?[0].value());
    }
    Ok((logits.value(), grads))
}

/// l-inf DeepFool: linearize every wrong class, step to the nearest linearized
/// boundary in l-inf distance, and repeat until the label flips or `max_iter`.
///
/// The accumulated step is scaled by `1 + overshoot`. Not norm-bounded.
pub fn deepfool_linf<S: Scalar, M: Classifier<S> + ?Sized>(
    model: &M,
    x: &Tensor<S>,
    y: &[usize],
    max_iter: usize,
    overshoot: f64,
    clip: Option<(f64, f64)>,
) -> Result<DeepFoolOutcome<S>> {
    let n = y.len();
    if x.rank() == 0 || x.shape()[0] != n {
        return Err(Error::InvalidConfig(format!(
            "attack batch of shape {:?} with {n} labels",
            x.shape()
        )));
    }
    if !(overshoot >= 0.0 && overshoot.is_finite()) {
        return Err(Error::InvalidConfig(format!("overshoot {overshoot} must be >= 0")));
    }
    let width = x.row_len();
    let scale = 1.0 + overshoot;
    let mut total = vec![0f64; n * width];
    let mut x_adv = x.clone();
    let mut iterations = vec![0; n];
    let mut targets = vec![None; n];
    let mut active = vec![true; n];
    for _ in 0..max_iter {
        let (logits, grads) = jacobian(model, &x_adv, n)?;
        let pred = logits.argmax_rows();
        for r in 0..n {
            if pred[r] != y[r] {
                active[r] = false;
            }
        }
        if !active.iter().any(|&a| a) {
            break;
        }
        for r in 0..n {
            if !active[r] {
                continue;
            }
            let span = r * width..(r + 1) * width;
            let gy = &grads[y[r]].data()[span.clone()];
            let mut best: Option<(f64, usize, Vec<f64>)> = None;
            for (k, gk) in grads.iter().enumerate().filter(|&(k, _)| k != y[r]) {
                let w: Vec<f64> = gk.data()[span.clone()]
                    .iter()
                    .zip(gy)
                    .map(|(a, b)| (*a - *b).as_f64())
                    .collect();
                let l1: f64 = w.iter().map(|v| v.abs()).sum();
                if l1 == 0.0 || !l1.is_finite() {
                    continue;
                }
                let f = (logits.at2(r, k) - logits.at2(r, y[r])).as_f64();
                let ratio = f.abs() / l1;
                if best.as_ref().is_none_or(|b| ratio < b.0) {
                    best = Some((ratio, k, w));
                }
            }
            let Some((ratio, k, w)) = best else {
                active[r] = false;
                continue;
            };
            targets[r] = Some(k);
            iterations[r] += 1;
            for (t, wj) in total[span.clone()].iter_mut().zip(&w) {
                *t += ratio * Scalar::sign(*wj);
            }
            let xs = &x.data()[span.clone()];
            let row = &mut x_adv.data_mut()[span];
            for ((v, &xi), t) in row.iter_mut().zip(xs).zip(&total[r * width..(r + 1) * width]) {
                let mut z = xi.as_f64() + scale * t;
                if let Some((lo, hi)) = clip {
                    z = z.clamp(lo.min(xi.as_f64()), hi.max(xi.as_f64()));
                }
                *v = S::lit(z);
            }
        }
    }
    let logits = predict_logits(model, &x_adv)?;
    let pred = logits.argmax_rows();
    let linf = (0..n)
        .map(|r| {
            x_adv
                .row(r)
                .iter()
                .zip(x.row(r))
                .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    let g = Graph::new();
    let loss = crate::nn::cross_entropy_per_example(&g.constant(logits), y)?
        .value()
        .data()
        .iter()
        .map(|v| v.as_f64())
        .collect();
    Ok(DeepFoolOutcome {
        outcome: AttackOutcome {
            x_adv,
            success: pred.iter().zip(y).map(|(p, t)| p != t).collect(),
            iterations,
            loss,
            aborted_restarts: 0,
        },
        targets,
        linf,
    })
}

#[cfg(test)]
mod tests {
    use super::super::testing::linear;
    use super::*;

    #[test]
    fn misclassified_input_untouched() {
        let m = linear(&[1.0, 0.0, 0.0, 1.0], 2, &[0.0, 0.0]);
        let x = Tensor::matrix(1, 2, vec![0.9, 0.1]).unwrap();
        let out = deepfool_linf(&m, &x, &[1], 2, 0.02, None).unwrap();
        assert_eq!(out.outcome.iterations, vec![0]);
        assert_eq!(out.outcome.x_adv, x);
        assert!(out.outcome.success[0]);
    }

    #[test]
    fn linear_binary_flips_in_one_step() {
        let w = [0.8, -1.5, 0.3];
        let b = 0.2;
        // logit_1 - logit_0 = w.x + b
        let m = linear(&[0.0, 0.0, 0.0, w[0], w[1], w[2]], 2, &[0.0, b]);
        let x = Tensor::matrix(1, 3, vec![0.4, 0.1, 0.5]).unwrap();
        let margin: f64 = w.iter().zip(x.data()).map(|(a, b)| a * b).sum::<f64>() + b;
        assert!(margin > 0.0);
        let os = 0.02;
        let out = deepfool_linf(&m, &x, &[1], 2, os, None).unwrap();
        assert_eq!(out.outcome.iterations, vec![1]);
        assert!(out.outcome.success[0]);
        let l1: f64 = w.iter().map(|v| v.abs()).sum();
        assert!((out.linf[0] - margin.abs() / l1 * (1.0 + os)).abs() < 1e-8);
    }

    #[test]
    fn three_class_target_is_closest_boundary() {
        let wm = [1.0, 0.2, 0.3, 0.9, -0.4, 0.1, 0.5, -0.7, 0.6];
        let bias = [0.3, 0.0, -0.1];
        let m = linear(&wm, 3, &bias);
        for x in [[0.2, 0.5, 0.1], [0.9, 0.1, 0.4], [0.3, 0.3, 0.9]] {
            let xt = Tensor::matrix(1, 3, x.to_vec()).unwrap();
            let f: Vec<f64> = (0..3)
                .map(|k| (0..3).map(|j| wm[k * 3 + j] * x[j]).sum::<f64>() + bias[k])
                .collect();
            let y = (0..3).fold(0, |b, k| if f[k] > f[b] { k } else { b });
            let oracle = (0..3)
                .filter(|&k| k != y)
                .map(|k| {
                    let l1: f64 = (0..3).map(|j| (wm[k * 3 + j] - wm[y * 3 + j]).abs()).sum();
                    ((f[k] - f[y]).abs() / l1, k)
                })
                .fold((f64::MAX, 0), |a, b| if b.0 < a.0 { b } else { a })
                .1;
            let out = deepfool_linf(&m, &xt, &[y], 1, 0.02, None).unwrap();
            assert_eq!(out.targets[0], Some(oracle));
        }
    }
}
