use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::tensor::{self, numel, SolveError, Tensor};
use crate::Scalar;

use super::AutodiffError;

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum LeafKind {
    /// Named, rebindable by `forward` feeds, differentiable.
    Input(String),
    /// Differentiable, fixed value.
    Param,
    /// Non-differentiable, fixed value.
    Constant,
}

#[derive(Debug, Clone)]
pub(crate) enum Op<S> {
    Leaf(LeafKind),
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(S),
    Offset(S),
    Exp,
    Log,
    Sqrt,
    Square,
    Relu,
    Step,
    MatMul,
    Transpose,
    Reshape,
    SumAll,
    SumTo,
    BroadcastTo,
    MaxAxis(usize),
    ArgmaxMask(usize),
    Detach,
    Gather(Arc<[usize]>),
    ScatterAdd(Arc<[usize]>),
    SolveSpd,
}

impl<S> Op<S> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf(LeafKind::Input(_)) => "input",
            Op::Leaf(LeafKind::Param) => "param",
            Op::Leaf(LeafKind::Constant) => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::Offset(_) => "offset",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Square => "square",
            Op::Relu => "relu",
            Op::Step => "step",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape => "reshape",
            Op::SumAll => "sum",
            Op::SumTo => "sum_to",
            Op::BroadcastTo => "broadcast",
            Op::MaxAxis(_) => "max",
            Op::ArgmaxMask(_) => "argmax_mask",
            Op::Detach => "detach",
            Op::Gather(_) => "gather",
            Op::ScatterAdd(_) => "scatter_add",
            Op::SolveSpd => "solve_spd",
        }
    }

    /// Ops whose output carries no derivative back to their operands.
    pub(crate) fn blocks_gradient(&self) -> bool {
        matches!(
            self,
            Op::Leaf(LeafKind::Constant) | Op::Step | Op::ArgmaxMask(_) | Op::Detach
        )
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Node<S> {
    pub(crate) op: Op<S>,
    pub(crate) inputs: Vec<NodeId>,
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Arc<Tensor<S>>,
    pub(crate) requires_grad: bool,
}

/// Executes one primitive on concrete operand values.
pub(crate) fn execute<S: Scalar>(op: &Op<S>, args: &[&Tensor<S>], shape: &[usize]) -> Result<Tensor<S>, String> {
    let same = |a: &Tensor<S>, b: &Tensor<S>, f: fn(S, S) -> S| a.zip_map(b, f).map_err(|e| e.to_string());
    let out = match op {
        Op::Leaf(_) => return Err("leaf nodes are not executed".into()),
        Op::Add => same(args[0], args[1], |a, b| a + b)?,
        Op::Sub => same(args[0], args[1], |a, b| a - b)?,
        Op::Mul => same(args[0], args[1], |a, b| a * b)?,
        Op::Div => same(args[0], args[1], |a, b| a / b)?,
        Op::Neg => args[0].map(|v| -v),
        Op::Scale(c) => {
            let c = *c;
            args[0].map(|v| v * c)
        }
        Op::Offset(c) => {
            let c = *c;
            args[0].map(|v| v + c)
        }
        Op::Exp => args[0].map(|v| v.exp()),
        Op::Log => args[0].map(|v| v.ln()),
        Op::Sqrt => args[0].map(|v| v.sqrt()),
        Op::Square => args[0].map(|v| v * v),
        Op::Relu => args[0].map(|v| if v > S::zero() { v } else { S::zero() }),
        Op::Step => args[0].map(|v| if v > S::zero() { S::one() } else { S::zero() }),
        Op::MatMul => tensor::matmul(args[0], args[1]).map_err(|e| e.to_string())?,
        Op::Transpose => tensor::transpose(args[0]).map_err(|e| e.to_string())?,
        Op::Reshape => args[0].reshape(shape.to_vec()).map_err(|e| e.to_string())?,
        Op::SumAll => Tensor::scalar(args[0].data().iter().copied().sum()),
        Op::SumTo => tensor::sum_to(args[0], shape).map_err(|e| e.to_string())?,
        Op::BroadcastTo => tensor::broadcast_to(args[0], shape).map_err(|e| e.to_string())?,
        Op::MaxAxis(axis) => tensor::max_axis(args[0], *axis).map_err(|e| e.to_string())?,
        Op::ArgmaxMask(axis) => tensor::argmax_mask(args[0], *axis).map_err(|e| e.to_string())?,
        Op::Detach => args[0].clone(),
        Op::Gather(index) => tensor::gather(args[0], index, shape).map_err(|e| e.to_string())?,
        Op::ScatterAdd(index) => tensor::scatter_add(args[0], index, shape).map_err(|e| e.to_string())?,
        Op::SolveSpd => tensor::solve_spd(args[0], args[1]).map_err(|e| match e {
            SolveError::NotPositiveDefinite { row, pivot } => {
                format!("singular system: non-positive pivot {pivot:e} at row {row}")
            }
            SolveError::Shape(s) => s.to_string(),
        })?,
    };
    if out.shape() != shape {
        return Err(format!("produced shape {:?}, recorded {:?}", out.shape(), shape));
    }
    Ok(out)
}

/// Append-only record of primitive operations; insertion order is topological order.
///
/// Values are computed eagerly as nodes are added. The recorded graph can also be
/// replayed with new bindings for its named inputs via [`Graph::forward`].
#[derive(Debug, Default)]
pub struct Graph<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
    outputs: RefCell<BTreeMap<String, NodeId>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, S: Scalar> {
    graph: &'g Graph<S>,
    id: NodeId,
}

impl<S: Scalar> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

/// Result of replaying a graph.
#[derive(Debug, Clone)]
pub struct ForwardResult<S> {
    pub outputs: BTreeMap<String, Tensor<S>>,
    /// Nodes that produced NaN or infinite values, with their op name.
    pub non_finite: Vec<(NodeId, &'static str)>,
}

impl<S> ForwardResult<S> {
    pub fn is_finite(&self) -> bool {
        self.non_finite.is_empty()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            outputs: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_leaf(&self, kind: LeafKind, value: Tensor<S>) -> Var<'_, S> {
        let requires_grad = kind != LeafKind::Constant;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Leaf(kind),
            inputs: Vec::new(),
            shape: value.shape().to_vec(),
            value: Arc::new(value),
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Named differentiable leaf that `forward` can rebind.
    pub fn input(&self, name: impl Into<String>, value: Tensor<S>) -> Var<'_, S> {
        self.push_leaf(LeafKind::Input(name.into()), value)
    }

    /// Differentiable leaf with a fixed value.
    pub fn param(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push_leaf(LeafKind::Param, value)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push_leaf(LeafKind::Constant, value)
    }

    pub fn scalar(&self, value: S) -> Var<'_, S> {
        self.constant(Tensor::scalar(value))
    }

    /// Registers `var` under `name` as an output reported by [`Graph::forward`].
    pub fn name_output(&self, name: impl Into<String>, var: Var<'_, S>) {
        self.outputs.borrow_mut().insert(name.into(), var.id);
    }

    pub(crate) fn push(&self, op: Op<S>, inputs: &[NodeId], shape: Vec<usize>) -> Result<Var<'_, S>, AutodiffError> {
        let next = self.len();
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let args: Vec<&Tensor<S>> = inputs.iter().map(|&i| nodes[i].value.as_ref()).collect();
            let value = execute(&op, &args, &shape).map_err(|detail| {
                if detail.starts_with("singular") {
                    AutodiffError::Singular { node: next, detail }
                } else {
                    AutodiffError::Shape {
                        node: next,
                        op: op.name(),
                        detail,
                    }
                }
            })?;
            let rg = !op.blocks_gradient() && inputs.iter().any(|&i| nodes[i].requires_grad);
            (value, rg)
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            shape,
            value: Arc::new(value),
            requires_grad,
        });
        Ok(Var {
            graph: self,
            id: nodes.len() - 1,
        })
    }

    pub(crate) fn node(&self, id: NodeId) -> (Op<S>, Vec<NodeId>, Vec<usize>, bool) {
        let nodes = self.nodes.borrow();
        let n = &nodes[id];
        (n.op.clone(), n.inputs.clone(), n.shape.clone(), n.requires_grad)
    }

    pub(crate) fn var(&self, id: NodeId) -> Var<'_, S> {
        Var { graph: self, id }
    }

    pub(crate) fn value_of(&self, id: NodeId) -> Arc<Tensor<S>> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Replays every node with `feeds` bound to the named inputs.
    ///
    /// Inputs missing from `feeds` are an error. Outputs are those registered with
    /// [`Graph::name_output`].
    pub fn forward(&self, feeds: &HashMap<String, Tensor<S>>) -> Result<ForwardResult<S>, AutodiffError> {
        let nodes = self.nodes.borrow();
        replay(&nodes, &self.outputs.borrow(), feeds)
    }

    /// Freezes the graph into a shareable, read-only form.
    pub fn freeze(self) -> FrozenGraph<S> {
        FrozenGraph {
            nodes: self.nodes.into_inner(),
            outputs: self.outputs.into_inner(),
        }
    }
}

/// A graph that is no longer extended; safe to evaluate from several threads.
#[derive(Debug, Clone)]
pub struct FrozenGraph<S> {
    nodes: Vec<Node<S>>,
    outputs: BTreeMap<String, NodeId>,
}

impl<S: Scalar> FrozenGraph<S> {
    pub fn forward(&self, feeds: &HashMap<String, Tensor<S>>) -> Result<ForwardResult<S>, AutodiffError> {
        replay(&self.nodes, &self.outputs, feeds)
    }
}

fn replay<S: Scalar>(
    nodes: &[Node<S>],
    outputs: &BTreeMap<String, NodeId>,
    feeds: &HashMap<String, Tensor<S>>,
) -> Result<ForwardResult<S>, AutodiffError> {
    let mut values: Vec<Arc<Tensor<S>>> = Vec::with_capacity(nodes.len());
    let mut non_finite = Vec::new();
    for (id, node) in nodes.iter().enumerate() {
        let value = match &node.op {
            Op::Leaf(LeafKind::Input(name)) => {
                let fed = feeds
                    .get(name)
                    .ok_or_else(|| AutodiffError::UnboundInput { name: name.clone() })?;
                if fed.shape() != node.shape.as_slice() {
                    return Err(AutodiffError::Shape {
                        node: id,
                        op: "input",
                        detail: format!(
                            "feed '{name}' has shape {:?}, graph expects {:?}",
                            fed.shape(),
                            node.shape
                        ),
                    });
                }
                Arc::new(fed.clone())
            }
            Op::Leaf(_) => node.value.clone(),
            op => {
                let args: Vec<&Tensor<S>> = node.inputs.iter().map(|&i| values[i].as_ref()).collect();
                let v = execute(op, &args, &node.shape).map_err(|detail| AutodiffError::Shape {
                    node: id,
                    op: op.name(),
                    detail,
                })?;
                Arc::new(v)
            }
        };
        if !value.all_finite() {
            non_finite.push((id, node.op.name()));
        }
        values.push(value);
    }
    let outputs = outputs
        .iter()
        .map(|(name, &id)| (name.clone(), values[id].as_ref().clone()))
        .collect();
    Ok(ForwardResult { outputs, non_finite })
}

// ---------------------------------------------------------------------------
// Var operations

impl<'g, S: Scalar> Var<'g, S> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<S> {
        self.graph
    }

    pub fn value(&self) -> Tensor<S> {
        self.graph.value_of(self.id).as_ref().clone()
    }

    /// Value of a single-element node.
    pub fn item(&self) -> S {
        self.graph.value_of(self.id).data()[0]
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].shape.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn same_graph(&self, other: &Var<'g, S>) -> Result<(), AutodiffError> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(AutodiffError::ForeignVar)
        }
    }

    fn unary(&self, op: Op<S>) -> Result<Var<'g, S>, AutodiffError> {
        self.graph.push(op, &[self.id], self.shape())
    }

    /// Broadcasts both operands to a common shape and applies `op` elementwise.
    fn binary(&self, other: &Var<'g, S>, op: Op<S>) -> Result<Var<'g, S>, AutodiffError> {
        self.same_graph(other)?;
        let (sa, sb) = (self.shape(), other.shape());
        let name = op.name();
        let shape = tensor::broadcast_shape(&sa, &sb).ok_or_else(|| AutodiffError::Shape {
            node: self.graph.len(),
            op: name,
            detail: format!("operands {:?} and {:?} do not broadcast", sa, sb),
        })?;
        let a = self.broadcast_to(&shape)?;
        let b = other.broadcast_to(&shape)?;
        self.graph.push(op, &[a.id, b.id], shape)
    }

    pub fn add(&self, other: &Var<'g, S>) -> Result<Var<'g, S>, AutodiffError> {
        self.binary(other, Op::Add)
    }

    pub fn sub(&self, other: &Var<'g, S>) -> Result<Var<'g, S>, AutodiffError> {
        self.binary(other, Op::Sub)
    }

    pub fn mul(&self, other: &Var<'g, S>) -> Result<Var<'g, S>, AutodiffError> {
        self.binary(other, Op::Mul)
    }

    pub fn div(&self, other: &Var<'g, S>) -> Result<Var<'g, S>, AutodiffError> {
        self.binary(other, Op::Div)
    }

    pub fn neg(&self) -> Result<Var<'g, S>, AutodiffError> {
        self.unary(Op::Neg)
    }

    pub fn scale(&self, c: S) -> Result<Var<'g, S>, AutodiffError> {
        self.unary(Op::Scale(c))
    }

    pub fn offset(&self, c: S) -> Result<Var<'g, S>, AutodiffError> {
        self.unary(Op::Offset(c))
    }

    pub fn exp(&self) -> Result<Var<'g, S>, AutodiffError> {
        self.unary(Op::Exp)
    }

    pub fn log(&self) -> Result<Var<'g, S>, AutodiffError> {
        self.unary(Op::Log)
    }

    pub fn sqrt(&self) -> Result<Var<'g, S>, AutodiffError> {
        self.unary(Op::Sqrt)
    }

    pub fn square(&self) -> Result<Var<'g, S>, AutodiffError> {
        self.unary(Op::Square)
    }

    pub fn relu(&self) -> Result<Var<'g, S>, AutodiffError> {
        self.unary(Op::Relu)
    }

    /// Heaviside step `x > 0`; carries no gradient.
    pub fn step(&self) -> Result<Var<'g, S>, AutodiffError> {
        self.unary(Op::Step)
    }

    /// Same value, cut from the gradient path.
    pub fn detach(&self) -> Result<Var<'g, S>, AutodiffError> {
        self.unary(Op::Detach)
    }

    /// Matrix product. A rank-1 right operand is treated as a column vector and the
    /// result is returned as rank 1.
    pub fn matmul(&self, other: &Var<'g, S>) -> Result<Var<'g, S>, AutodiffError> {
        self.same_graph(other)?;
        let (sa, sb) = (self.shape(), other.shape());
        if sb.len() == 1 {
            let col = other.reshape(&[sb[0], 1])?;
            let out = self.matmul(&col)?;
            let m = out.shape()[0];
            return out.reshape(&[m]);
        }
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::Shape {
                node: self.graph.len(),
                op: "matmul",
                detail: format!("cannot multiply {:?} by {:?}", sa, sb),
            });
        }
        self.graph.push(Op::MatMul, &[self.id, other.id], vec![sa[0], sb[1]])
    }

    pub fn t(&self) -> Result<Var<'g, S>, AutodiffError> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(AutodiffError::Shape {
                node: self.graph.len(),
                op: "transpose",
                detail: format!("transpose needs rank 2, got {:?}", s),
            });
        }
        self.graph.push(Op::Transpose, &[self.id], vec![s[1], s[0]])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, S>, AutodiffError> {
        let cur = self.shape();
        if cur == shape {
            return Ok(*self);
        }
        if numel(&cur) != numel(shape) {
            return Err(AutodiffError::Shape {
                node: self.graph.len(),
                op: "reshape",
                detail: format!("cannot reshape {:?} to {:?}", cur, shape),
            });
        }
        self.graph.push(Op::Reshape, &[self.id], shape.to_vec())
    }

    pub fn sum(&self) -> Result<Var<'g, S>, AutodiffError> {
        self.graph.push(Op::SumAll, &[self.id], Vec::new())
    }

    pub fn mean(&self) -> Result<Var<'g, S>, AutodiffError> {
        let n = numel(&self.shape());
        self.sum()?.scale(S::one() / S::lit(n as f64))
    }

    /// Reduces by summation to a shape that broadcasts up to this one.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Var<'g, S>, AutodiffError> {
        if self.shape() == shape {
            return Ok(*self);
        }
        self.graph.push(Op::SumTo, &[self.id], shape.to_vec())
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'g, S>, AutodiffError> {
        if self.shape() == shape {
            return Ok(*self);
        }
        self.graph.push(Op::BroadcastTo, &[self.id], shape.to_vec())
    }

    fn check_axis(&self, axis: usize, op: &'static str) -> Result<Vec<usize>, AutodiffError> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(AutodiffError::Shape {
                node: self.graph.len(),
                op,
                detail: format!("axis {axis} out of range for {:?}", s),
            });
        }
        Ok(s)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'g, S>, AutodiffError> {
        let s = self.check_axis(axis, "sum_to")?;
        self.sum_to(&tensor::keepdim_shape(&s, axis))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'g, S>, AutodiffError> {
        let s = self.check_axis(axis, "sum_to")?;
        self.sum_axis(axis)?.scale(S::one() / S::lit(s[axis] as f64))
    }

    /// Max along `axis` (kept with extent 1); the subgradient goes to the lowest
    /// index among ties.
    pub fn max_axis(&self, axis: usize) -> Result<Var<'g, S>, AutodiffError> {
        let s = self.check_axis(axis, "max")?;
        self.graph
            .push(Op::MaxAxis(axis), &[self.id], tensor::keepdim_shape(&s, axis))
    }

    /// One-hot indicator of the (lowest-index) maximum along `axis`; no gradient.
    pub fn argmax_mask(&self, axis: usize) -> Result<Var<'g, S>, AutodiffError> {
        let s = self.check_axis(axis, "argmax_mask")?;
        self.graph.push(Op::ArgmaxMask(axis), &[self.id], s)
    }

    /// `log(sum(exp(x)))` along `axis`, stabilised by the detached maximum.
    pub fn logsumexp(&self, axis: usize) -> Result<Var<'g, S>, AutodiffError> {
        let m = self.max_axis(axis)?.detach()?;
        self.sub(&m)?.exp()?.sum_axis(axis)?.log()?.add(&m)
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'g, S>, AutodiffError> {
        self.sub(&self.logsumexp(axis)?)
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'g, S>, AutodiffError> {
        self.log_softmax(axis)?.exp()
    }

    /// Flat-index gather: `out.flat[i] = self.flat[index[i]]`.
    pub fn gather(&self, index: Arc<[usize]>, shape: &[usize]) -> Result<Var<'g, S>, AutodiffError> {
        self.graph.push(Op::Gather(index), &[self.id], shape.to_vec())
    }

    /// Flat-index scatter with accumulation into a zero tensor of `shape`.
    pub fn scatter_add(&self, index: Arc<[usize]>, shape: &[usize]) -> Result<Var<'g, S>, AutodiffError> {
        self.graph.push(Op::ScatterAdd(index), &[self.id], shape.to_vec())
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g, S>, AutodiffError> {
        let s = self.check_axis(axis, "gather")?;
        if start + len > s[axis] {
            return Err(AutodiffError::Shape {
                node: self.graph.len(),
                op: "gather",
                detail: format!("slice {start}..{} exceeds axis extent {}", start + len, s[axis]),
            });
        }
        let mut out_shape = s.clone();
        out_shape[axis] = len;
        let index = axis_block_index(&s, axis, start, len);
        self.gather(index.into(), &out_shape)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'g, S>], axis: usize) -> Result<Var<'g, S>, AutodiffError> {
        let first = parts.first().ok_or(AutodiffError::Shape {
            node: 0,
            op: "scatter_add",
            detail: "concat of zero tensors".into(),
        })?;
        let base = first.check_axis(axis, "scatter_add")?;
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for p in parts {
            first.same_graph(p)?;
            let s = p.shape();
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(AutodiffError::Shape {
                    node: first.graph.len(),
                    op: "scatter_add",
                    detail: format!("concat shapes {:?} and {:?} on axis {axis}", base, s),
                });
            }
            out_shape[axis] += s[axis];
        }
        let mut acc: Option<Var<'g, S>> = None;
        let mut start = 0;
        for p in parts {
            let len = p.shape()[axis];
            let index = axis_block_index(&out_shape, axis, start, len);
            let placed = p.scatter_add(index.into(), &out_shape)?;
            acc = Some(match acc {
                None => placed,
                Some(a) => a.add(&placed)?,
            });
            start += len;
        }
        Ok(acc.expect("at least one part"))
    }

    /// Solves `sym(self) X = rhs` by Cholesky factorisation. `self` must be
    /// symmetric positive definite.
    pub fn solve_spd(&self, rhs: &Var<'g, S>) -> Result<Var<'g, S>, AutodiffError> {
        self.same_graph(rhs)?;
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sa[0] != sa[1] || sb.len() != 2 || sb[0] != sa[0] {
            return Err(AutodiffError::Shape {
                node: self.graph.len(),
                op: "solve_spd",
                detail: format!("solve needs [n,n] and [n,m], got {:?} and {:?}", sa, sb),
            });
        }
        self.graph.push(Op::SolveSpd, &[self.id, rhs.id], sb)
    }
}

/// Flat indices (into a tensor of `shape`) of the block `[start, start+len)` on `axis`,
/// in row-major order of the block.
fn axis_block_index(shape: &[usize], axis: usize, start: usize, len: usize) -> Vec<usize> {
    let outer = numel(&shape[..axis]);
    let extent = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    let mut index = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        for j in start..start + len {
            let base = (o * extent + j) * inner;
            index.extend(base..base + inner);
        }
    }
    index
}
