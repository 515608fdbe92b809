use crate::autodiff::Var;
use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

/// Appends a column of ones: `[n, d] -> [n, d + 1]`.
pub fn with_bias_column<'g, S: Scalar>(features: &Var<'g, S>) -> Result<Var<'g, S>> {
    let n = features.shape()[0];
    let ones = features.graph().constant(Tensor::ones(vec![n, 1]));
    Ok(Var::concat(&[*features, ones], 1)?)
}

/// Closed-form ridge regression `W = (X^T X + lambda I)^-1 X^T Y` where `X` is the
/// features with a bias column appended. Returns `W` as `[d + 1, classes]`.
pub fn ridge_head<'g, S: Scalar>(features: &Var<'g, S>, onehot: &Var<'g, S>, lambda: f64) -> Result<Var<'g, S>> {
    ridge_head_weighted(features, onehot, lambda, None)
}

/// Ridge solve with a non-negative weight per support row.
pub fn ridge_head_weighted<'g, S: Scalar>(
    features: &Var<'g, S>,
    onehot: &Var<'g, S>,
    lambda: f64,
    row_weights: Option<&[f64]>,
) -> Result<Var<'g, S>> {
    let (fs, ys) = (features.shape(), onehot.shape());
    if fs.len() != 2 || ys.len() != 2 || fs[0] != ys[0] {
        return Err(Error::InvalidConfig(format!(
            "ridge head: features {fs:?} and targets {ys:?} disagree"
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidConfig(format!("ridge lambda {lambda} must be >= 0")));
    }
    let g = features.graph();
    let x = with_bias_column(features)?;
    let xt = x.t()?;
    let weighted_t = match row_weights {
        None => xt,
        Some(w) => {
            if w.len() != fs[0] {
                return Err(Error::InvalidConfig(format!(
                    "{} row weights for {} rows",
                    w.len(),
                    fs[0]
                )));
            }
            let wv = g.constant(Tensor::new(vec![1, w.len()], w.iter().map(|&v| S::lit(v)).collect())?);
            xt.mul(&wv)?
        }
    };
    let d = fs[1] + 1;
    let reg = g.constant(Tensor::eye(d).map(|v| v * S::lit(lambda)));
    let a = weighted_t.matmul(&x)?.add(&reg)?;
    let b = weighted_t.matmul(onehot)?;
    Ok(a.solve_spd(&b)?)
}

/// Logits of a ridge head: `[features, 1] W`.
pub fn ridge_logits<'g, S: Scalar>(features: &Var<'g, S>, w: &Var<'g, S>) -> Result<Var<'g, S>> {
    Ok(with_bias_column(features)?.matmul(w)?)
}

/// Class means of the support features, `[n_way, d]`.
pub fn proto_head<'g, S: Scalar>(features: &Var<'g, S>, labels: &[usize], n_way: usize) -> Result<Var<'g, S>> {
    let fs = features.shape();
    if fs.len() != 2 || fs[0] != labels.len() {
        return Err(Error::InvalidConfig(format!(
            "proto head: features {fs:?} with {} labels",
            labels.len()
        )));
    }
    let mut counts = vec![0usize; n_way];
    for &y in labels {
        if y >= n_way {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: n_way,
            });
        }
        counts[y] += 1;
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass { class });
    }
    let mut avg = Tensor::zeros(vec![n_way, labels.len()]);
    for (i, &y) in labels.iter().enumerate() {
        avg.data_mut()[y * labels.len() + i] = S::one() / S::lit(counts[y] as f64);
    }
    Ok(features.graph().constant(avg).matmul(features)?)
}

/// `-|f - p_c|^2` for every query row and prototype.
pub fn proto_logits<'g, S: Scalar>(features: &Var<'g, S>, prototypes: &Var<'g, S>) -> Result<Var<'g, S>> {
    let ff = features.square()?.sum_axis(1)?;
    let pp = prototypes.square()?.sum_axis(1)?.t()?;
    let cross = features.matmul(&prototypes.t()?)?.scale(S::lit(2.0))?;
    Ok(cross.sub(&ff)?.sub(&pp)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_grad, Graph};
    use crate::nn::one_hot;
    use crate::rng::rng_from;
    use rand::Rng as _;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut r = rng_from(seed, &[99]);
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Normal equations solved by Gauss-Jordan elimination with partial pivoting.
    fn normal_equations(x: &Tensor<f64>, y: &Tensor<f64>, lambda: f64) -> Vec<Vec<f64>> {
        let (n, d) = (x.shape()[0], x.shape()[1] + 1);
        let c = y.shape()[1];
        let xb = |i: usize, j: usize| if j + 1 == d { 1.0 } else { x.at2(i, j) };
        let mut m = vec![vec![0.0; d + c]; d];
        for a in 0..d {
            for b in 0..d {
                m[a][b] = (0..n).map(|i| xb(i, a) * xb(i, b)).sum::<f64>() + if a == b { lambda } else { 0.0 };
            }
            for k in 0..c {
                m[a][d + k] = (0..n).map(|i| xb(i, a) * y.at2(i, k)).sum();
            }
        }
        for col in 0..d {
            let p = (col..d)
                .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
                .unwrap();
            m.swap(col, p);
            let piv = m[col][col];
            for v in m[col].iter_mut() {
                *v /= piv;
            }
            for r in 0..d {
                if r != col {
                    let f = m[r][col];
                    let row = m[col].clone();
                    for (v, w) in m[r].iter_mut().zip(row) {
                        *v -= f * w;
                    }
                }
            }
        }
        m.into_iter().map(|r| r[d..].to_vec()).collect()
    }

    #[test]
    fn matches_normal_equations() {
        let x = random(10, 4, 1);
        let y: Tensor<f64> = one_hot(&[0, 1, 2, 0, 1, 2, 0, 1, 2, 0], 3).unwrap();
        let g = Graph::new();
        let w = ridge_head(&g.constant(x.clone()), &g.constant(y.clone()), 1.0)
            .unwrap()
            .value();
        let oracle = normal_equations(&x, &y, 1.0);
        for (i, row) in oracle.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                assert!((w.at2(i, k) - v).abs() < 1e-10);
            }
        }
        let report = check_grad(
            |g, xv| -> Result<_> { Ok(ridge_head(&xv, &g.constant(y.clone()), 1.0)?.sum()?) },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn shrinkage_and_interpolation_limits() {
        let x = random(6, 3, 2);
        let y: Tensor<f64> = one_hot(&[0, 1, 0, 1, 1, 0], 2).unwrap();
        let g = Graph::new();
        let w = ridge_head(&g.constant(x.clone()), &g.constant(y.clone()), 1e12)
            .unwrap()
            .value();
        assert!(w.max_abs() <= 1e-9);

        // four rows, three features plus bias: square and invertible
        let x = random(4, 3, 3);
        let y: Tensor<f64> = one_hot(&[0, 1, 2, 1], 3).unwrap();
        let xv = g.constant(x.clone());
        let w = ridge_head(&xv, &g.constant(y.clone()), 0.0).unwrap();
        let fit = ridge_logits(&xv, &w).unwrap().value();
        for (a, b) in fit.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn singular_system_is_an_error() {
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![3, 2]));
        let y = g.constant(one_hot::<f64>(&[0, 1, 0], 2).unwrap());
        assert!(matches!(
            ridge_head(&x, &y, 0.0),
            Err(Error::Autodiff(crate::autodiff::AutodiffError::Singular { .. }))
        ));
    }

    #[test]
    fn duplicate_rows_equal_doubled_weight() {
        let x = random(5, 3, 4);
        let labels = [0, 1, 1, 0, 1];
        let g = Graph::new();
        let mut dup = x.data().to_vec();
        dup.extend_from_slice(x.row(2));
        let xd = Tensor::matrix(6, 3, dup).unwrap();
        let mut ld = labels.to_vec();
        ld.push(labels[2]);
        let a = ridge_head(&g.constant(xd), &g.constant(one_hot(&ld, 2).unwrap()), 0.5)
            .unwrap()
            .value();
        let b = ridge_head_weighted(
            &g.constant(x),
            &g.constant(one_hot(&labels, 2).unwrap()),
            0.5,
            Some(&[1.0, 1.0, 2.0, 1.0, 1.0]),
        )
        .unwrap()
        .value();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn prototypes() {
        let g = Graph::new();
        let f = g.constant(Tensor::matrix(2, 2, vec![0.3, -0.7, 1.0, 2.0]).unwrap());
        assert_eq!(proto_head(&f, &[0, 1], 2).unwrap().value(), f.value());
        let sym = g.constant(Tensor::matrix(2, 2, vec![0.4, -1.5, -0.4, 1.5]).unwrap());
        assert_eq!(proto_head(&sym, &[0, 0], 1).unwrap().value().data(), &[0.0, 0.0]);
        assert!(matches!(
            proto_head(&f, &[0, 0], 2),
            Err(Error::EmptyClass { class: 1 })
        ));
    }

    #[test]
    fn proto_logits_are_negative_squared_distances() {
        let s = random(6, 3, 5);
        let labels = [0, 0, 0, 1, 1, 1];
        let q = random(4, 3, 6);
        let g = Graph::new();
        let p = proto_head(&g.constant(s.clone()), &labels, 2).unwrap();
        let logits = proto_logits(&g.constant(q.clone()), &p).unwrap().value();
        for c in 0..2 {
            let centre: Vec<f64> = (0..3)
                .map(|j| (0..3).map(|i| s.at2(c * 3 + i, j)).sum::<f64>() / 3.0)
                .collect();
            for r in 0..4 {
                let d: f64 = (0..3).map(|j| (q.at2(r, j) - centre[j]).powi(2)).sum();
                assert!((logits.at2(r, c) + d).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn proto_argmax_translation_invariant() {
        let s = random(6, 3, 7);
        let q = random(5, 3, 8);
        let shift = Tensor::matrix(1, 3, vec![3.0, -2.0, 0.5]).unwrap();
        let g = Graph::new();
        let sv = g.constant(shift);
        let labels = [0, 1, 2, 0, 1, 2];
        let base = proto_logits(
            &g.constant(q.clone()),
            &proto_head(&g.constant(s.clone()), &labels, 3).unwrap(),
        )
        .unwrap()
        .value();
        let moved = proto_logits(
            &g.constant(q).add(&sv).unwrap(),
            &proto_head(&g.constant(s).add(&sv).unwrap(), &labels, 3).unwrap(),
        )
        .unwrap()
        .value();
        assert_eq!(base.argmax_rows(), moved.argmax_rows());
    }
}
