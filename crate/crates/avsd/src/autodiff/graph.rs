//! Define-then-run computation graph.
//!
//! A graph is built once per utterance (or batch item) from builder calls,
//! then evaluated against named input bindings. Builder methods can only
//! reference already-created node ids, so graphs are acyclic by
//! construction. Evaluation does all shape checking; `gradient` runs a
//! reverse sweep from a scalar loss and never touches anything behind a
//! `stop_grad` node.

use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::Error;

pub type NodeId = usize;

#[derive(Clone, Debug)]
pub enum Op {
    /// [m,k] @ [k,n] -> [m,n]
    MatMul,
    /// Elementwise sum, identical shapes.
    Add,
    /// Elementwise difference, identical shapes.
    Sub,
    /// Elementwise product, identical shapes.
    Mul,
    /// Multiply by a compile-time constant.
    Scale(f64),
    /// [m,n] + [n] broadcast over rows.
    AddRowBroadcast,
    /// 2-D transpose.
    Transpose,
    /// [m,a] ++ [m,b] -> [m,a+b].
    ConcatCols,
    /// Columns [start, start+len) of a rank-2 tensor.
    SliceCols { start: usize, len: usize },
    /// Select rows by index (repeats allowed) -> [rows.len(), n].
    GatherRows { rows: Vec<usize> },
    /// Replace the listed rows of input 0 with the [n] vector input 1.
    RowReplace { rows: Vec<usize> },
    Relu,
    /// Tanh-approximation GELU.
    Gelu,
    /// Row-wise softmax of a rank-2 tensor.
    Softmax,
    /// Row-wise log-softmax of a rank-2 tensor.
    LogSoftmax,
    /// Row-wise affine normalization: inputs (x [m,n], gamma [n], beta [n]).
    LayerNorm { eps: f64 },
    /// Column-wise normalization over rows (per-channel over time), no affine.
    InstanceNorm { eps: f64 },
    /// Sum of all elements -> scalar.
    SumAll,
    /// Mean of all elements -> scalar.
    MeanAll,
    /// [g*t, c] -> [t, c], mean over each consecutive group of g rows.
    MeanPoolRows { group: usize },
    /// Same-padded 1-D patch extraction: [t, c] -> [t, k*c], k odd.
    Unfold1d { kernel: usize },
    /// Valid 2-D patch extraction on channel-last frames:
    /// [t, h*w*c] -> [t*oh*ow, k*k*c] with stride s.
    Unfold2d { h: usize, w: usize, c: usize, k: usize, stride: usize },
    /// [g*t, c] -> [t, g*c]; row-major layout makes this metadata-only.
    Regroup { factor: usize },
    /// One element per row of a rank-2 tensor -> [m].
    PickPerRow { cols: Vec<usize> },
    /// Identity forward, zero backward.
    StopGrad,
    /// CTC negative log-likelihood of a label sequence given per-frame
    /// posteriors [T, K]; scalar output. Checked feasible at build time.
    CtcLoss { labels: Vec<usize>, blank: usize },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddRowBroadcast => "add_row_broadcast",
            Op::Transpose => "transpose",
            Op::ConcatCols => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::RowReplace { .. } => "row_replace",
            Op::Relu => "relu",
            Op::Gelu => "gelu",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::SumAll => "sum_all",
            Op::MeanAll => "mean_all",
            Op::MeanPoolRows { .. } => "mean_pool_rows",
            Op::Unfold1d { .. } => "unfold1d",
            Op::Unfold2d { .. } => "unfold2d",
            Op::Regroup { .. } => "regroup",
            Op::PickPerRow { .. } => "pick_per_row",
            Op::StopGrad => "stop_grad",
            Op::CtcLoss { .. } => "ctc_loss",
        }
    }
}

#[derive(Clone, Debug)]
pub enum NodeKind {
    Input { name: String, trainable: bool },
    Const(Tensor),
    Op { op: Op, inputs: Vec<NodeId> },
}

#[derive(Clone, Debug)]
pub struct Node {
    pub kind: NodeKind,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs_by_name: HashMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Debug label for error messages: "n{id}:{op}".
    pub fn label(&self, id: NodeId) -> String {
        match &self.nodes[id].kind {
            NodeKind::Input { name, .. } => format!("n{id}:input({name})"),
            NodeKind::Const(_) => format!("n{id}:const"),
            NodeKind::Op { op, .. } => format!("n{id}:{}", op.name()),
        }
    }

    fn push(&mut self, kind: NodeKind) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { kind });
        id
    }

    /// Named input bound at evaluation time. Repeated calls with one name
    /// return the same node; the trainable flag must agree.
    pub fn input(&mut self, name: &str, trainable: bool) -> NodeId {
        if let Some(&id) = self.inputs_by_name.get(name) {
            if let NodeKind::Input { trainable: t, .. } = &self.nodes[id].kind {
                assert_eq!(*t, trainable, "input {name} redeclared with different trainability");
            }
            return id;
        }
        let id = self.push(NodeKind::Input {
            name: name.to_string(),
            trainable,
        });
        self.inputs_by_name.insert(name.to_string(), id);
        id
    }

    /// Trainable parameter input.
    pub fn param(&mut self, name: &str) -> NodeId {
        self.input(name, true)
    }

    /// Non-trainable data input.
    pub fn data_input(&mut self, name: &str) -> NodeId {
        self.input(name, false)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(NodeKind::Const(value))
    }

    pub fn scalar_const(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    fn op(&mut self, op: Op, inputs: &[NodeId]) -> NodeId {
        for &i in inputs {
            assert!(i < self.nodes.len(), "op {} references unknown node {i}", op.name());
        }
        self.push(NodeKind::Op {
            op,
            inputs: inputs.to_vec(),
        })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.op(Op::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.op(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.op(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.op(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        self.op(Op::Scale(s), &[x])
    }

    pub fn add_row_broadcast(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.op(Op::AddRowBroadcast, &[x, bias])
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        self.op(Op::Transpose, &[x])
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.op(Op::ConcatCols, &[a, b])
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        self.op(Op::SliceCols { start, len }, &[x])
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: Vec<usize>) -> NodeId {
        self.op(Op::GatherRows { rows }, &[x])
    }

    pub fn row_replace(&mut self, x: NodeId, fill: NodeId, rows: Vec<usize>) -> NodeId {
        self.op(Op::RowReplace { rows }, &[x, fill])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.op(Op::Relu, &[x])
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.op(Op::Gelu, &[x])
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.op(Op::Softmax, &[x])
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        self.op(Op::LogSoftmax, &[x])
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        self.op(Op::LayerNorm { eps }, &[x, gamma, beta])
    }

    pub fn instance_norm(&mut self, x: NodeId, eps: f64) -> NodeId {
        self.op(Op::InstanceNorm { eps }, &[x])
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        self.op(Op::SumAll, &[x])
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        self.op(Op::MeanAll, &[x])
    }

    pub fn mean_pool_rows(&mut self, x: NodeId, group: usize) -> NodeId {
        self.op(Op::MeanPoolRows { group }, &[x])
    }

    pub fn unfold1d(&mut self, x: NodeId, kernel: usize) -> NodeId {
        assert!(kernel % 2 == 1, "unfold1d kernel must be odd for same padding");
        self.op(Op::Unfold1d { kernel }, &[x])
    }

    pub fn unfold2d(&mut self, x: NodeId, h: usize, w: usize, c: usize, k: usize, stride: usize) -> NodeId {
        self.op(Op::Unfold2d { h, w, c, k, stride }, &[x])
    }

    pub fn regroup(&mut self, x: NodeId, factor: usize) -> NodeId {
        self.op(Op::Regroup { factor }, &[x])
    }

    pub fn pick_per_row(&mut self, x: NodeId, cols: Vec<usize>) -> NodeId {
        self.op(Op::PickPerRow { cols }, &[x])
    }

    pub fn stop_grad(&mut self, x: NodeId) -> NodeId {
        self.op(Op::StopGrad, &[x])
    }

    pub fn ctc_loss(&mut self, posteriors: NodeId, labels: Vec<usize>, blank: usize) -> NodeId {
        self.op(Op::CtcLoss { labels, blank }, &[posteriors])
    }

    /// Fully-connected layer: x @ W + b.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xw = self.matmul(x, w);
        self.add_row_broadcast(xw, b)
    }
}

/// Named tensors bound to graph inputs for one evaluation.
#[derive(Default, Clone)]
pub struct Bindings {
    map: HashMap<String, Tensor>,
}

impl Bindings {
    pub fn new() -> Self {
        Bindings::default()
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> &mut Self {
        self.map.insert(name.to_string(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }
}

/// Forward values for every node of one evaluation.
#[derive(Debug)]
pub struct Evaluation {
    pub(super) values: Vec<Tensor>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }
}

/// Reverse-sweep result: cotangent per node (None where no gradient
/// flowed) plus a by-name view for trainable inputs.
pub struct Gradients {
    pub(super) grads: Vec<Option<Tensor>>,
    pub(super) by_param: std::collections::BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient that reached a node, if any.
    pub fn node_grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradients for trainable inputs. Trainable inputs the loss never
    /// reached are present with all-zero gradients.
    pub fn params(&self) -> &std::collections::BTreeMap<String, Tensor> {
        &self.by_param
    }
}

pub(super) fn shape_err(graph: &Graph, id: NodeId, detail: impl Into<String>) -> Error {
    Error::Shape {
        node: graph.label(id),
        detail: detail.into(),
    }
}
