use crate::tensor::Tensor;
use crate::Scalar;

use super::graph::{Graph, Op, Var};
use super::AutodiffError;

/// Gradient of the scalar `output` with respect to each of `wrt`.
///
/// Adjoints are built from the same primitives as the forward pass and appended to
/// the graph, so the returned vars can themselves be differentiated. A `wrt` entry
/// with no differentiable path to `output` receives an all-zero constant.
pub fn grad<'g, S: Scalar>(output: &Var<'g, S>, wrt: &[Var<'g, S>]) -> Result<Vec<Var<'g, S>>, AutodiffError> {
    let graph: &'g Graph<S> = output.graph();
    if !output.shape().is_empty() && output.shape().iter().product::<usize>() != 1 {
        return Err(AutodiffError::NotScalar { shape: output.shape() });
    }
    for w in wrt {
        if !std::ptr::eq(w.graph(), graph) {
            return Err(AutodiffError::ForeignVar);
        }
    }
    let end = output.id() + 1;

    // relevant[n]: n lies on a differentiable path from some wrt node.
    let mut relevant = vec![false; end];
    for w in wrt {
        if w.id() < end && w.requires_grad() {
            relevant[w.id()] = true;
        }
    }
    for id in 0..end {
        if relevant[id] {
            continue;
        }
        let (op, inputs, _, rg) = graph.node(id);
        if rg && !op.blocks_gradient() && inputs.iter().any(|&i| relevant[i]) {
            relevant[id] = true;
        }
    }

    let mut adjoint: Vec<Option<Var<'g, S>>> = vec![None; end];
    if relevant[output.id()] {
        adjoint[output.id()] = Some(graph.constant(Tensor::ones(output.shape())));
    }
    for id in (0..end).rev() {
        let Some(g) = adjoint[id] else { continue };
        let (op, inputs, _, _) = graph.node(id);
        if op.blocks_gradient() || inputs.is_empty() {
            continue;
        }
        let needs: Vec<bool> = inputs.iter().map(|&i| relevant[i]).collect();
        if !needs.iter().any(|&b| b) {
            continue;
        }
        let operands: Vec<Var<'g, S>> = inputs.iter().map(|&i| graph.var(i)).collect();
        let out = graph.var(id);
        let contributions = vjp(&op, &operands, &out, &g, &needs)?;
        for ((&input, contrib), need) in inputs.iter().zip(contributions).zip(needs) {
            if !need {
                continue;
            }
            if let Some(c) = contrib {
                adjoint[input] = Some(match adjoint[input] {
                    None => c,
                    Some(prev) => prev.add(&c)?,
                });
            }
        }
    }

    Ok(wrt
        .iter()
        .map(|w| {
            adjoint
                .get(w.id())
                .copied()
                .flatten()
                .unwrap_or_else(|| graph.constant(Tensor::zeros(w.shape())))
        })
        .collect())
}

/// Vector-Jacobian product of one primitive.
fn vjp<'g, S: Scalar>(
    op: &Op<S>,
    x: &[Var<'g, S>],
    out: &Var<'g, S>,
    g: &Var<'g, S>,
    needs: &[bool],
) -> Result<Vec<Option<Var<'g, S>>>, AutodiffError> {
    let two = S::lit(2.0);
    let half = S::lit(0.5);
    let r = match op {
        Op::Add => vec![Some(*g), Some(*g)],
        Op::Sub => vec![Some(*g), Some(g.neg()?)],
        Op::Mul => vec![
            needs[0].then(|| g.mul(&x[1])).transpose()?,
            needs[1].then(|| g.mul(&x[0])).transpose()?,
        ],
        Op::Div => vec![
            needs[0].then(|| g.div(&x[1])).transpose()?,
            needs[1].then(|| g.mul(out)?.div(&x[1])?.neg()).transpose()?,
        ],
        Op::Neg => vec![Some(g.neg()?)],
        Op::Scale(c) => vec![Some(g.scale(*c)?)],
        Op::Offset(_) => vec![Some(*g)],
        Op::Exp => vec![Some(g.mul(out)?)],
        Op::Log => vec![Some(g.div(&x[0])?)],
        Op::Sqrt => vec![Some(g.div(out)?.scale(half)?)],
        Op::Square => vec![Some(g.mul(&x[0])?.scale(two)?)],
        Op::Relu => vec![Some(g.mul(&x[0].step()?)?)],
        Op::MatMul => vec![
            needs[0].then(|| g.matmul(&x[1].t()?)).transpose()?,
            needs[1].then(|| x[0].t()?.matmul(g)).transpose()?,
        ],
        Op::Transpose => vec![Some(g.t()?)],
        Op::Reshape => vec![Some(g.reshape(&x[0].shape())?)],
        Op::SumAll => vec![Some(g.broadcast_to(&x[0].shape())?)],
        Op::SumTo => vec![Some(g.broadcast_to(&x[0].shape())?)],
        Op::BroadcastTo => vec![Some(g.sum_to(&x[0].shape())?)],
        Op::MaxAxis(axis) => {
            let mask = x[0].argmax_mask(*axis)?;
            vec![Some(mask.mul(g)?)]
        }
        Op::Gather(index) => vec![Some(g.scatter_add(index.clone(), &x[0].shape())?)],
        Op::ScatterAdd(index) => vec![Some(g.gather(index.clone(), &x[0].shape())?)],
        Op::SolveSpd => {
            // X = A^{-1} B with A symmetric: dB = A^{-1} G, dA = -sym(dB X^T).
            let g_rhs = x[0].solve_spd(g)?;
            let g_mat = if needs[0] {
                let m = g_rhs.matmul(&out.t()?)?;
                Some(m.add(&m.t()?)?.scale(-half)?)
            } else {
                None
            };
            vec![g_mat, Some(g_rhs)]
        }
        Op::Leaf(_) | Op::Step | Op::ArgmaxMask(_) | Op::Detach => vec![None; x.len()],
    };
    Ok(r)
}
