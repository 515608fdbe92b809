use crate::autodiff::Var;
use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

/// One-hot rows for `labels` over `classes` columns.
pub fn one_hot<S: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<S>> {
    let mut t = Tensor::zeros(vec![labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        t.data_mut()[i * classes + y] = S::one();
    }
    Ok(t)
}

/// Per-example `-log softmax(logits)[label]`, shape `[batch]`.
pub fn cross_entropy_per_example<'g, S: Scalar>(logits: &Var<'g, S>, labels: &[usize]) -> Result<Var<'g, S>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::InvalidConfig(format!(
            "logits {:?} do not match {} labels",
            shape,
            labels.len()
        )));
    }
    let onehot = logits.graph().constant(one_hot(labels, shape[1])?);
    let picked = onehot.mul(logits)?.sum_axis(1)?;
    let nll = logits.logsumexp(1)?.sub(&picked)?;
    Ok(nll.reshape(&[labels.len()])?)
}

/// Mean cross-entropy over the batch, computed through logsumexp.
pub fn cross_entropy<'g, S: Scalar>(logits: &Var<'g, S>, labels: &[usize]) -> Result<Var<'g, S>> {
    Ok(cross_entropy_per_example(logits, labels)?.mean()?)
}

/// Batch-mean `KL(softmax(p) || softmax(q))` over rows.
pub fn kl_divergence<'g, S: Scalar>(p_logits: &Var<'g, S>, q_logits: &Var<'g, S>) -> Result<Var<'g, S>> {
    let (ps, qs) = (p_logits.shape(), q_logits.shape());
    if ps != qs || ps.len() != 2 {
        return Err(Error::InvalidConfig(format!(
            "KL operands have shapes {:?} and {:?}",
            ps, qs
        )));
    }
    let log_p = p_logits.log_softmax(1)?;
    let log_q = q_logits.log_softmax(1)?;
    let per_row = log_p.exp()?.mul(&log_p.sub(&log_q)?)?.sum()?;
    Ok(per_row.scale(S::one() / S::lit(ps[0] as f64))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_grad, grad, Graph};

    #[test]
    fn uniform_logits_give_log_c() {
        for c in 2..=10 {
            let g: Graph<f64> = Graph::new();
            let logits = g.param(Tensor::full(vec![3, c], 0.7));
            let l = cross_entropy(&logits, &[0, 1, c - 1]).unwrap().item();
            assert!((l - (c as f64).ln()).abs() < 1e-14, "C={c}: {l}");
        }
    }

    #[test]
    fn saturated_logit_gives_tiny_loss() {
        let g: Graph<f64> = Graph::new();
        let logits = g.param(Tensor::matrix(1, 5, vec![0.0, 0.0, 50.0, 0.0, 0.0]).unwrap());
        let l = cross_entropy(&logits, &[2]).unwrap().item();
        assert!((0.0..1e-20).contains(&l), "{l}");
    }

    #[test]
    fn matches_direct_softmax() {
        let g: Graph<f64> = Graph::new();
        let logits = g.param(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let l = cross_entropy(&logits, &[2]).unwrap().item();
        let z: f64 = [1f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        let oracle = -(3f64.exp() / z).ln();
        assert!((l - oracle).abs() < 1e-14);
        // 0.40760596444...
        assert!((l - 0.407_605_964_444_380_9).abs() < 1e-12);
    }

    #[test]
    fn gradient_is_softmax_minus_onehot() {
        let g: Graph<f64> = Graph::new();
        let logits = g.param(Tensor::matrix(2, 3, vec![0.2, -1.0, 0.5, 2.0, 0.1, -0.3]).unwrap());
        let labels = [2, 0];
        let d = grad(&cross_entropy(&logits, &labels).unwrap(), &[logits]).unwrap()[0].value();
        let v = logits.value();
        for i in 0..2 {
            let row = v.row(i);
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            for j in 0..3 {
                let expect = (row[j].exp() / z - if j == labels[i] { 1.0 } else { 0.0 }) / 2.0;
                assert!((d.at2(i, j) - expect).abs() < 1e-14);
            }
        }
        let report = check_grad(|_, x| cross_entropy(&x, &labels), &v, 1e-6).unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn out_of_range_label_rejected() {
        let g: Graph<f64> = Graph::new();
        let logits = g.param(Tensor::zeros(vec![1, 3]));
        assert!(matches!(
            cross_entropy(&logits, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn kl_is_zero_on_identical_inputs() {
        let g: Graph<f64> = Graph::new();
        let p = g.param(Tensor::matrix(2, 3, vec![0.2, -1.0, 0.5, 2.0, 0.1, -0.3]).unwrap());
        assert_eq!(kl_divergence(&p, &p).unwrap().item(), 0.0);
        let q = g.param(Tensor::zeros(vec![2, 3]));
        assert!(kl_divergence(&p, &q).unwrap().item() > 0.0);
    }
}
