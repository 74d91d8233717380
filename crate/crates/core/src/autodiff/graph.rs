use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for operations defined outside this module.
pub trait Function {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, given the upstream gradient `grad`.
    /// `None` marks an input that receives no gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBroadcast { x: Var, b: Var, axis: usize },
    MulBroadcast { x: Var, b: Var, axis: usize },
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Conv1d { x: Var, w: Var, stride: usize },
    Sum(Var),
    Mean(Var),
    MeanAxis { x: Var, axis: usize },
    VarBiased(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    BatchNormalize { x: Var, rstd: Vec<f64> },
    AvgPool1d { x: Var, window: usize, stride: usize },
    Dropout { x: Var, mask: Vec<f64> },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Transpose { x: Var, a0: usize, a1: usize },
    Reshape(Var),
    Custom { inputs: Vec<Var>, f: Box<dyn Function> },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddBroadcast { .. } => "add_broadcast",
            Op::MulBroadcast { .. } => "mul_broadcast",
            Op::MatMul { .. } => "matmul",
            Op::Conv1d { .. } => "conv1d_valid",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanAxis { .. } => "mean_axis",
            Op::VarBiased(..) => "var_biased",
            Op::Gelu(..) => "gelu_exact",
            Op::Softmax(..) => "softmax_lastdim",
            Op::LogSoftmax(..) => "log_softmax_lastdim",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNormalize { .. } => "batch_normalize",
            Op::AvgPool1d { .. } => "avg_pool1d",
            Op::Dropout { .. } => "dropout",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Transpose { .. } => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Custom { f, .. } => f.name(),
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
    /// Accumulated gradient; only populated for leaves.
    pub(crate) grad: Option<Vec<f64>>,
}

/// Define-by-run computation graph. Nodes are appended in creation order,
/// which is a valid topological order.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, zeros if backward never reached it.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        let data = node
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; node.value.numel()]);
        Tensor::new(node.value.shape().to_vec(), data).expect("grad shape matches value")
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Appends a custom operation whose gradient is supplied by `f`.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, f: Box<dyn Function>) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                f,
            },
        )
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = self.parents(&op).iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn parents(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::VarBiased(a)
            | Op::Gelu(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Reshape(a) => vec![*a],
            Op::AddBroadcast { x, b, .. } | Op::MulBroadcast { x, b, .. } => vec![*x, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Conv1d { x, w, .. } => vec![*x, *w],
            Op::MeanAxis { x, .. }
            | Op::BatchNormalize { x, .. }
            | Op::AvgPool1d { x, .. }
            | Op::Dropout { x, .. }
            | Op::Slice { x, .. }
            | Op::Transpose { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    /// First node holding a non-finite value, if any.
    pub fn check_finite(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.value.is_finite() {
                return Err(Error::NonFinite {
                    node: i,
                    op: node.op.name(),
                });
            }
        }
        Ok(())
    }

    /// Propagates d`out`/d(leaf) into every trainable leaf. Repeated calls accumulate.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        let out_node = &self.nodes[out.0];
        if out_node.value.numel() != 1 {
            return Err(Error::NonScalarBackward(out_node.value.shape().to_vec()));
        }
        if !out_node.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(out.0 + 1);
        grads.resize_with(out.0 + 1, || None);
        grads[out.0] = Some(vec![1.0]);

        for id in (0..=out.0).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
                    None => node.grad = Some(grad),
                }
                continue;
            }
            self.backward_node(id, &grad, &mut grads);
        }
        Ok(())
    }

    /// Adds `contrib` into the pending gradient of `v`, allocating on first use.
    pub(crate) fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        f: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(buf);
    }
}
