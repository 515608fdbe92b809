//! Finite-difference gradient checking.

use crate::tensor::Tensor;

use super::graph::{Graph, Var};
use super::{grad, AutodiffError};

/// Central-difference step used by [`check_grad`].
pub const FD_STEP: f64 = 1e-5;

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// Largest relative error per checked tensor.
    pub per_parameter: Vec<f64>,
    pub tolerance: f64,
    pub pass: bool,
    /// Set when either side produced a non-finite value.
    pub diagnostic: Option<String>,
}

/// `|a - b| / max(1, |a|, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Checks the gradient of a scalar function of one tensor at `point`.
pub fn check_grad<F, E>(function: F, point: &Tensor<f64>, tol: f64) -> Result<GradReport, E>
where
    F: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>, E>,
    E: From<AutodiffError>,
{
    check_grad_many(|g, xs| function(g, xs[0]), std::slice::from_ref(point), tol)
}

/// Checks the gradient of a scalar function of several tensors.
pub fn check_grad_many<F, E>(function: F, points: &[Tensor<f64>], tol: f64) -> Result<GradReport, E>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>, E>,
    E: From<AutodiffError>,
{
    let eval = |pts: &[Tensor<f64>]| -> Result<f64, E> {
        let g = Graph::new();
        let vars: Vec<_> = pts.iter().map(|p| g.param(p.clone())).collect();
        Ok(function(&g, &vars)?.item())
    };

    let g = Graph::new();
    let vars: Vec<_> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = function(&g, &vars)?;
    let analytic: Vec<Tensor<f64>> = grad(&out, &vars)?.iter().map(|v| v.value()).collect();

    let mut per_parameter = Vec::with_capacity(points.len());
    let mut diagnostic = None;
    let mut work = points.to_vec();
    for (p, an) in analytic.iter().enumerate() {
        let mut worst = 0f64;
        for i in 0..points[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + FD_STEP;
            let up = eval(&work)?;
            work[p].data_mut()[i] = orig - FD_STEP;
            let down = eval(&work)?;
            work[p].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = an.data()[i];
            if !numeric.is_finite() || !a.is_finite() {
                diagnostic.get_or_insert_with(|| {
                    format!("non-finite gradient at tensor {p} element {i}: analytic {a}, numeric {numeric}")
                });
                worst = f64::INFINITY;
                continue;
            }
            worst = worst.max(relative_error(a, numeric));
        }
        per_parameter.push(worst);
    }
    let max_rel_error = per_parameter.iter().copied().fold(0f64, f64::max);
    Ok(GradReport {
        max_rel_error,
        per_parameter,
        tolerance: tol,
        pass: diagnostic.is_none() && max_rel_error <= tol,
        diagnostic,
    })
}
