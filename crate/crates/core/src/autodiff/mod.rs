//! Reverse-mode automatic differentiation over an eagerly evaluated operation graph.
//!
//! Gradients are returned as graph nodes, so `grad` can be applied to its own
//! output for second-order derivatives.

mod backward;
mod check;
mod graph;

pub use backward::grad;
pub use check::{check_grad, check_grad_many, relative_error, GradReport, FD_STEP};
pub use graph::{ForwardResult, FrozenGraph, Graph, NodeId, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape error at node #{node} ({op}): {detail}")]
    Shape {
        node: NodeId,
        op: &'static str,
        detail: String,
    },
    #[error("singular system at node #{node}: {detail}")]
    Singular { node: NodeId, detail: String },
    #[error("gradient output must be scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("variable belongs to a different graph")]
    ForeignVar,
    #[error("graph input '{name}' has no feed")]
    UnboundInput { name: String },
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;
    use crate::tensor::Tensor;

    fn vec1(v: &[f64]) -> Tensor<f64> {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn forward_examples() {
        let g = Graph::new();
        let x = g.input("x", vec1(&[1.0, 2.0, 3.0]));
        let s = x.sum().unwrap();
        g.name_output("s", s);
        let r = g
            .forward(&HashMap::from([("x".into(), vec1(&[1.0, 2.0, 3.0]))]))
            .unwrap();
        assert_eq!(r.outputs["s"].item(), Some(6.0));

        let g = Graph::new();
        let x = g.input("x", vec1(&[2.0]));
        g.name_output("sq", x.mul(&x).unwrap());
        let r = g.forward(&HashMap::from([("x".into(), vec1(&[2.0]))])).unwrap();
        assert_eq!(r.outputs["sq"].data(), &[4.0]);

        let g = Graph::new();
        let a = g.input("A", Tensor::eye(2));
        let b = g.input("b", vec1(&[3.0, 5.0]));
        g.name_output("y", a.matmul(&b).unwrap());
        let r = g
            .forward(&HashMap::from([
                ("A".into(), Tensor::eye(2)),
                ("b".into(), vec1(&[3.0, 5.0])),
            ]))
            .unwrap();
        assert_eq!(r.outputs["y"].data(), &[3.0, 5.0]);
    }

    #[test]
    fn forward_rebinds_inputs_and_flags_non_finite() {
        let g = Graph::new();
        let x = g.input("x", vec1(&[1.0, 2.0]));
        g.name_output("l", x.log().unwrap().sum().unwrap());
        let r = g.forward(&HashMap::from([("x".into(), vec1(&[1.0, 1.0]))])).unwrap();
        assert_eq!(r.outputs["l"].item(), Some(0.0));
        assert!(r.is_finite());
        let r = g.forward(&HashMap::from([("x".into(), vec1(&[0.0, 1.0]))])).unwrap();
        assert!(!r.is_finite());
        assert!(r.non_finite.iter().any(|(_, op)| *op == "log"));
    }

    #[test]
    fn forward_errors_name_the_node() {
        let g = Graph::new();
        let x = g.input("x", vec1(&[1.0, 2.0]));
        g.name_output("s", x.sum().unwrap());
        let err = g.forward(&HashMap::from([("x".into(), vec1(&[1.0]))])).unwrap_err();
        assert!(matches!(err, AutodiffError::Shape { node: 0, .. }));
        let err = g.forward(&HashMap::new()).unwrap_err();
        assert!(matches!(err, AutodiffError::UnboundInput { .. }));

        let a = g.param(Tensor::zeros(vec![2, 3]));
        let b = g.param(Tensor::zeros(vec![2, 3]));
        let err = a.matmul(&b).unwrap_err();
        assert!(matches!(err, AutodiffError::Shape { op: "matmul", .. }));
    }

    #[test]
    fn replay_is_bitwise_deterministic() {
        let g = Graph::new();
        let x = g.input("x", vec1(&[0.3, -1.2, 2.5]));
        let y = x
            .exp()
            .unwrap()
            .logsumexp(0)
            .unwrap()
            .mul(&x.square().unwrap())
            .unwrap();
        g.name_output("y", y.sum().unwrap());
        let feeds = HashMap::from([("x".into(), vec1(&[0.7, 0.1, -0.4]))]);
        let a = g.forward(&feeds).unwrap();
        let frozen = g.freeze();
        let b = frozen.forward(&feeds).unwrap();
        assert_eq!(
            a.outputs["y"].item().unwrap().to_bits(),
            b.outputs["y"].item().unwrap().to_bits()
        );
    }

    #[test]
    fn grad_examples() {
        let g = Graph::new();
        let x = g.param(vec1(&[1.0, -2.0, 4.0]));
        let d = grad(&x.sum().unwrap(), &[x]).unwrap();
        assert_eq!(d[0].value().data(), &[1.0, 1.0, 1.0]);

        let g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let d = grad(&x.mul(&x).unwrap(), &[x]).unwrap();
        assert_eq!(d[0].item(), 6.0);

        let g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let cube = x.mul(&x).unwrap().mul(&x).unwrap();
        let d1 = grad(&cube, &[x]).unwrap()[0];
        assert_eq!(d1.item(), 12.0);
        let d2 = grad(&d1, &[x]).unwrap()[0];
        assert_eq!(d2.item(), 12.0);
    }

    #[test]
    fn grad_errors() {
        let g = Graph::new();
        let x = g.param(vec1(&[1.0, 2.0]));
        assert!(matches!(
            grad(&x.square().unwrap(), &[x]),
            Err(AutodiffError::NotScalar { .. })
        ));
        let other = Graph::new();
        let y = other.param(Tensor::scalar(1.0));
        assert!(matches!(grad(&x.sum().unwrap(), &[y]), Err(AutodiffError::ForeignVar)));
    }

    #[test]
    fn detached_copies_receive_zero_gradient() {
        let g = Graph::new();
        let x = g.param(vec1(&[1.5, -0.5]));
        let d = x.detach().unwrap();
        let out = d.square().unwrap().sum().unwrap().add(&x.sum().unwrap()).unwrap();
        let gr = grad(&out, &[d, x]).unwrap();
        assert_eq!(gr[0].value().data(), &[0.0, 0.0]);
        assert_eq!(gr[1].value().data(), &[1.0, 1.0]);
        let c = g.constant(vec1(&[2.0, 3.0]));
        let gc = grad(&c.mul(&x).unwrap().sum().unwrap(), &[c]).unwrap();
        assert_eq!(gc[0].value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn solve_gradient_matches_finite_differences() {
        let m = Tensor::matrix(3, 3, vec![1.0, 0.2, -0.3, 0.1, 0.9, 0.4, -0.5, 0.3, 1.2]).unwrap();
        let b = Tensor::matrix(3, 2, vec![0.5, -1.0, 2.0, 0.3, -0.7, 1.1]).unwrap();
        let report = check_grad_many(
            |_, v| {
                let a = v[0].t()?.matmul(&v[0])?.add(&v[0].graph().constant(Tensor::eye(3)))?;
                a.solve_spd(&v[1])?.square()?.sum()
            },
            &[m, b],
            1e-6,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn singular_solve_is_reported() {
        let g: Graph<f64> = Graph::new();
        let a = g.param(Tensor::zeros(vec![2, 2]));
        let b = g.param(Tensor::ones(vec![2, 1]));
        assert!(matches!(a.solve_spd(&b), Err(AutodiffError::Singular { .. })));
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let g = Graph::new();
        let x = g.param(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let left = x.slice(1, 0, 1).unwrap();
        let right = x.slice(1, 1, 2).unwrap();
        assert_eq!(left.value().data(), &[1.0, 4.0]);
        assert_eq!(right.value().data(), &[2.0, 3.0, 5.0, 6.0]);
        let back = Var::concat(&[left, right], 1).unwrap();
        assert_eq!(back.value(), x.value());
        let rows = Var::concat(&[x, x], 0).unwrap();
        assert_eq!(rows.shape(), vec![4, 3]);
    }

    #[test]
    fn wrong_adjoint_fixture_fails_check() {
        // x * detach(x) evaluates x^2 but propagates only half the derivative.
        let point = vec1(&[0.4, -1.3, 2.2]);
        let bad = check_grad(|_, x| x.mul(&x.detach()?)?.sum(), &point, 1e-6).unwrap();
        assert!(!bad.pass);
        let good = check_grad(|_, x| x.mul(&x)?.sum(), &point, 1e-6).unwrap();
        assert!(good.pass, "{good:?}");
    }

    #[test]
    fn non_finite_gradient_fails_with_diagnostic() {
        let r = check_grad(|_, x| x.log()?.sum(), &vec1(&[0.0, 1.0]), 1e-5).unwrap();
        assert!(!r.pass);
        assert!(r.diagnostic.is_some());
    }
}
