use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Operation kinds. Shapes are fixed at graph-build time; masks and other
/// structural attributes are baked into the node.
#[derive(Debug, Clone)]
enum Op {
    Leaf { name: String },
    Const(Tensor),
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    /// `[m,n] + [1,n]`, the only leading-dim broadcast the models need.
    AddRow,
    /// `[m,n] * [m,1]` column broadcast (masks, attention weights).
    MulCol,
    Scale(f64),
    Offset(f64),
    Neg,
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
    Sqrt,
    SoftmaxRows,
    /// Row softmax restricted to `mask == true` entries; masked outputs are
    /// exactly zero.
    MaskedSoftmaxRows { mask: Vec<bool> },
    /// Row-wise log-sum-exp, `[m,n] -> [m,1]`.
    LogSumExpRows,
    SumAll,
    MeanAll,
    SumCols,
    SumRows,
    ConcatCols,
    ConcatRows,
    SliceRows { start: usize, len: usize },
    SliceCols { start: usize, len: usize },
    /// Inverted dropout: scales kept activations by `1/keep` at train time,
    /// identity at eval time.
    Dropout { keep: f64 },
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf { .. } => "leaf",
        Op::Const(_) => "const",
        Op::MatMul => "matmul",
        Op::Add => "add",
        Op::Sub => "sub",
        Op::Mul => "mul",
        Op::Div => "div",
        Op::AddRow => "add_row",
        Op::MulCol => "mul_col",
        Op::Scale(_) => "scale",
        Op::Offset(_) => "offset",
        Op::Neg => "neg",
        Op::Sigmoid => "sigmoid",
        Op::Tanh => "tanh",
        Op::Relu => "relu",
        Op::Exp => "exp",
        Op::Log => "log",
        Op::Sqrt => "sqrt",
        Op::SoftmaxRows => "softmax_rows",
        Op::MaskedSoftmaxRows { .. } => "masked_softmax_rows",
        Op::LogSumExpRows => "logsumexp_rows",
        Op::SumAll => "sum_all",
        Op::MeanAll => "mean_all",
        Op::SumCols => "sum_cols",
        Op::SumRows => "sum_rows",
        Op::ConcatCols => "concat_cols",
        Op::ConcatRows => "concat_rows",
        Op::SliceRows { .. } => "slice_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::Dropout { .. } => "dropout",
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
}

/// Evaluation mode. Dropout draws a fresh deterministic mask per node from
/// `dropout_seed`; `Eval` makes dropout the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalMode {
    Train { dropout_seed: u64 },
    Eval,
}

/// Named tensors bound to graph leaves.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    map: BTreeMap<String, Tensor>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: impl Into<String>, value: Tensor) -> &mut Self {
        self.map.insert(name.into(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }
}

/// A computation graph: append-only nodes in topological order, named leaves
/// bound at evaluation time, named outputs read back after evaluation.
///
/// Single-writer: one graph instance is evaluated by one thread at a time.
/// Distinct graphs share nothing.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
    values: Vec<Tensor>,
    dropout_masks: HashMap<NodeId, Vec<f64>>,
    leaf_requires_grad: HashMap<NodeId, bool>,
    evaluated: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        self.evaluated = false;
        let id = self.nodes.len();
        self.nodes.push(Node { op, inputs, shape });
        id
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    fn dims2(&self, id: NodeId, ctx: &str) -> Result<(usize, usize)> {
        let s = self.shape_of(id);
        if s.len() != 2 {
            return Err(Error::Shape {
                node: id,
                op: ctx.to_string(),
                detail: format!("expected 2-D tensor, got shape {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    /// Declare a named input of fixed shape.
    pub fn leaf(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<NodeId> {
        let name = name.into();
        if self.leaves.contains_key(&name) {
            return Err(Error::Graph(format!("duplicate leaf name {name:?}")));
        }
        let id = self.push(Op::Leaf { name: name.clone() }, vec![], shape.to_vec());
        self.leaves.insert(name, id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const(value), vec![], shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                node: self.nodes.len(),
                op: "matmul".into(),
                detail: format!("inner dims differ: [{m},{k}] x [{k2},{n}]"),
            });
        }
        Ok(self.push(Op::MatMul, vec![a, b], vec![m, n]))
    }

    fn binary_same_shape(&mut self, op: Op, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(Error::Shape {
                node: self.nodes.len(),
                op: op_name(&op).into(),
                detail: format!(
                    "operand shapes differ: {:?} vs {:?}",
                    self.shape_of(a),
                    self.shape_of(b)
                ),
            });
        }
        let shape = self.shape_of(a).to_vec();
        Ok(self.push(op, vec![a, b], shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Div, a, b)
    }

    /// `[m,n] + [1,n]` with the row vector broadcast down the batch dim.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(a, "add_row")?;
        let (rm, rn) = self.dims2(row, "add_row")?;
        if rm != 1 || rn != n {
            return Err(Error::Shape {
                node: self.nodes.len(),
                op: "add_row".into(),
                detail: format!("expected row [1,{n}], got [{rm},{rn}]"),
            });
        }
        Ok(self.push(Op::AddRow, vec![a, row], vec![m, n]))
    }

    /// `[m,n] * [m,1]` with the column vector broadcast across columns.
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(a, "mul_col")?;
        let (cm, cn) = self.dims2(col, "mul_col")?;
        if cm != m || cn != 1 {
            return Err(Error::Shape {
                node: self.nodes.len(),
                op: "mul_col".into(),
                detail: format!("expected column [{m},1], got [{cm},{cn}]"),
            });
        }
        Ok(self.push(Op::MulCol, vec![a, col], vec![m, n]))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        self.push(Op::Scale(factor), vec![a], shape)
    }

    pub fn offset(&mut self, a: NodeId, delta: f64) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        self.push(Op::Offset(delta), vec![a], shape)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        self.push(Op::Neg, vec![a], shape)
    }

    fn unary(&mut self, op: Op, a: NodeId) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        self.push(op, vec![a], shape)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Tanh, a)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Relu, a)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp, a)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Log, a)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sqrt, a)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.dims2(a, "softmax_rows")?;
        Ok(self.unary(Op::SoftmaxRows, a))
    }

    /// Row softmax over entries where `mask` is true; other entries get
    /// exactly zero. `mask` is row-major with the same extent as the input.
    pub fn masked_softmax_rows(&mut self, a: NodeId, mask: Vec<bool>) -> Result<NodeId> {
        let (m, n) = self.dims2(a, "masked_softmax_rows")?;
        if mask.len() != m * n {
            return Err(Error::Shape {
                node: self.nodes.len(),
                op: "masked_softmax_rows".into(),
                detail: format!("mask has {} entries for [{m},{n}] input", mask.len()),
            });
        }
        for r in 0..m {
            if !mask[r * n..(r + 1) * n].iter().any(|&b| b) {
                return Err(Error::Graph(format!(
                    "masked_softmax_rows: row {r} has no unmasked entries"
                )));
            }
        }
        Ok(self.push(Op::MaskedSoftmaxRows { mask }, vec![a], vec![m, n]))
    }

    pub fn logsumexp_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, _) = self.dims2(a, "logsumexp_rows")?;
        Ok(self.push(Op::LogSumExpRows, vec![a], vec![m, 1]))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumAll, vec![a], vec![1, 1])
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        self.push(Op::MeanAll, vec![a], vec![1, 1])
    }

    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, _) = self.dims2(a, "sum_cols")?;
        Ok(self.push(Op::SumCols, vec![a], vec![m, 1]))
    }

    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (_, n) = self.dims2(a, "sum_rows")?;
        Ok(self.push(Op::SumRows, vec![a], vec![1, n]))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Graph("concat_cols of zero tensors".into()));
        }
        let (m, _) = self.dims2(parts[0], "concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_cols")?;
            if pm != m {
                return Err(Error::Shape {
                    node: self.nodes.len(),
                    op: "concat_cols".into(),
                    detail: format!("row counts differ: {m} vs {pm}"),
                });
            }
            total += pn;
        }
        Ok(self.push(Op::ConcatCols, parts.to_vec(), vec![m, total]))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Graph("concat_rows of zero tensors".into()));
        }
        let (_, n) = self.dims2(parts[0], "concat_rows")?;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_rows")?;
            if pn != n {
                return Err(Error::Shape {
                    node: self.nodes.len(),
                    op: "concat_rows".into(),
                    detail: format!("column counts differ: {n} vs {pn}"),
                });
            }
            total += pm;
        }
        Ok(self.push(Op::ConcatRows, parts.to_vec(), vec![total, n]))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.dims2(a, "slice_rows")?;
        if start + len > m || len == 0 {
            return Err(Error::Shape {
                node: self.nodes.len(),
                op: "slice_rows".into(),
                detail: format!("rows {start}..{} out of [{m},{n}]", start + len),
            });
        }
        Ok(self.push(Op::SliceRows { start, len }, vec![a], vec![len, n]))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if start + len > n || len == 0 {
            return Err(Error::Shape {
                node: self.nodes.len(),
                op: "slice_cols".into(),
                detail: format!("cols {start}..{} out of [{m},{n}]", start + len),
            });
        }
        Ok(self.push(Op::SliceCols { start, len }, vec![a], vec![m, len]))
    }

    pub fn dropout(&mut self, a: NodeId, keep: f64) -> Result<NodeId> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(Error::Graph(format!("dropout keep probability {keep} not in (0,1]")));
        }
        let shape = self.shape_of(a).to_vec();
        Ok(self.push(Op::Dropout { keep }, vec![a], shape))
    }

    /// Expose a node under a stable name in `evaluate`'s result map.
    pub fn mark_output(&mut self, name: impl Into<String>, id: NodeId) {
        self.outputs.insert(name.into(), id);
    }

    pub fn output_id(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    /// Value of a node after the last `evaluate`.
    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        if !self.evaluated {
            return Err(Error::Graph("graph has not been evaluated".into()));
        }
        Ok(&self.values[id])
    }

    /// Run the forward pass. All leaves must be bound with tensors of the
    /// declared shape. Returns every marked output.
    pub fn evaluate(
        &mut self,
        bindings: &Bindings,
        mode: EvalMode,
    ) -> Result<BTreeMap<String, Tensor>> {
        self.evaluated = false;
        self.values.clear();
        self.values.reserve(self.nodes.len());
        self.dropout_masks.clear();
        self.leaf_requires_grad.clear();

        for id in 0..self.nodes.len() {
            let value = self.compute(id, bindings, mode)?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    node: id,
                    op: op_name(&self.nodes[id].op).into(),
                });
            }
            self.values.push(value);
        }
        self.evaluated = true;

        let mut out = BTreeMap::new();
        for (name, &id) in &self.outputs {
            out.insert(name.clone(), self.values[id].clone());
        }
        Ok(out)
    }

    fn compute(&mut self, id: NodeId, bindings: &Bindings, mode: EvalMode) -> Result<Tensor> {
        let node = &self.nodes[id];
        let ins = node.inputs.clone();
        let val = |k: usize| -> &Tensor { &self.values[ins[k]] };

        let out = match &node.op {
            Op::Leaf { name } => {
                let bound = bindings.get(name).ok_or_else(|| {
                    Error::Graph(format!("leaf {name:?} not bound at evaluation"))
                })?;
                if bound.shape() != node.shape.as_slice() {
                    return Err(Error::Shape {
                        node: id,
                        op: "leaf".into(),
                        detail: format!(
                            "leaf {name:?} declared {:?}, bound {:?}",
                            node.shape,
                            bound.shape()
                        ),
                    });
                }
                self.leaf_requires_grad.insert(id, bound.requires_grad());
                bound.clone()
            }
            Op::Const(t) => t.clone(),
            Op::MatMul => {
                let a = val(0);
                let b = val(1);
                let (m, k) = (a.rows(), a.cols());
                let n = b.cols();
                let mut out = Tensor::zeros(&[m, n]);
                gemm(
                    m,
                    k,
                    n,
                    a.data(),
                    false,
                    b.data(),
                    false,
                    0.0,
                    out.data_mut(),
                );
                out
            }
            Op::Add => zip_elementwise(val(0), val(1), |x, y| x + y),
            Op::Sub => zip_elementwise(val(0), val(1), |x, y| x - y),
            Op::Mul => zip_elementwise(val(0), val(1), |x, y| x * y),
            Op::Div => zip_elementwise(val(0), val(1), |x, y| x / y),
            Op::AddRow => {
                let a = val(0);
                let row = val(1);
                let n = a.cols();
                let mut out = a.clone();
                for (i, v) in out.data_mut().iter_mut().enumerate() {
                    *v += row.data()[i % n];
                }
                out
            }
            Op::MulCol => {
                let a = val(0);
                let col = val(1);
                let n = a.cols();
                let mut out = a.clone();
                for (i, v) in out.data_mut().iter_mut().enumerate() {
                    *v *= col.data()[i / n];
                }
                out
            }
            Op::Scale(c) => map_elementwise(val(0), |x| x * c),
            Op::Offset(c) => map_elementwise(val(0), |x| x + c),
            Op::Neg => map_elementwise(val(0), |x| -x),
            Op::Sigmoid => map_elementwise(val(0), |x| sigmoid(x)),
            Op::Tanh => map_elementwise(val(0), |x| x.tanh()),
            Op::Relu => map_elementwise(val(0), |x| if x > 0.0 { x } else { 0.0 }),
            Op::Exp => map_elementwise(val(0), |x| x.exp()),
            Op::Log => map_elementwise(val(0), |x| x.ln()),
            Op::Sqrt => map_elementwise(val(0), |x| x.sqrt()),
            Op::SoftmaxRows => {
                let a = val(0);
                let mut out = a.clone();
                let n = a.cols();
                for row in out.data_mut().chunks_mut(n) {
                    softmax_in_place(row);
                }
                out
            }
            Op::MaskedSoftmaxRows { mask } => {
                let a = val(0);
                let mut out = a.clone();
                let n = a.cols();
                for (r, row) in out.data_mut().chunks_mut(n).enumerate() {
                    masked_softmax_in_place(row, &mask[r * n..(r + 1) * n]);
                }
                out
            }
            Op::LogSumExpRows => {
                let a = val(0);
                let n = a.cols();
                let data = a
                    .data()
                    .chunks(n)
                    .map(logsumexp)
                    .collect::<Vec<f64>>();
                Tensor::new(vec![a.rows(), 1], data)?
            }
            Op::SumAll => Tensor::scalar(val(0).data().iter().sum()),
            Op::MeanAll => {
                let a = val(0);
                Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64)
            }
            Op::SumCols => {
                let a = val(0);
                let n = a.cols();
                let data = a
                    .data()
                    .chunks(n)
                    .map(|row| row.iter().sum())
                    .collect::<Vec<f64>>();
                Tensor::new(vec![a.rows(), 1], data)?
            }
            Op::SumRows => {
                let a = val(0);
                let n = a.cols();
                let mut data = vec![0.0; n];
                for row in a.data().chunks(n) {
                    for (d, v) in data.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                Tensor::new(vec![1, n], data)?
            }
            Op::ConcatCols => {
                let m = val(0).rows();
                let total: usize = ins.iter().map(|&i| self.values[i].cols()).sum();
                let mut out = Tensor::zeros(&[m, total]);
                let mut offset = 0;
                for &i in &ins {
                    let part = &self.values[i];
                    let pn = part.cols();
                    for r in 0..m {
                        out.data_mut()[r * total + offset..r * total + offset + pn]
                            .copy_from_slice(&part.data()[r * pn..(r + 1) * pn]);
                    }
                    offset += pn;
                }
                out
            }
            Op::ConcatRows => {
                let n = val(0).cols();
                let total: usize = ins.iter().map(|&i| self.values[i].rows()).sum();
                let mut out = Tensor::zeros(&[total, n]);
                let mut offset = 0;
                for &i in &ins {
                    let part = &self.values[i];
                    let len = part.numel();
                    out.data_mut()[offset..offset + len].copy_from_slice(part.data());
                    offset += len;
                }
                out
            }
            Op::SliceRows { start, len } => {
                let a = val(0);
                let n = a.cols();
                Tensor::new(
                    vec![*len, n],
                    a.data()[start * n..(start + len) * n].to_vec(),
                )?
            }
            Op::SliceCols { start, len } => {
                let a = val(0);
                let n = a.cols();
                let mut data = Vec::with_capacity(a.rows() * len);
                for row in a.data().chunks(n) {
                    data.extend_from_slice(&row[*start..start + len]);
                }
                Tensor::new(vec![a.rows(), *len], data)?
            }
            Op::Dropout { keep } => {
                let a = val(0);
                match mode {
                    EvalMode::Eval => a.clone(),
                    EvalMode::Train { dropout_seed } => {
                        let mut rng = rng::stream(dropout_seed, "dropout", id as u64);
                        let inv = 1.0 / keep;
                        let mask: Vec<f64> = (0..a.numel())
                            .map(|_| if rng.gen::<f64>() < *keep { inv } else { 0.0 })
                            .collect();
                        let mut out = a.clone();
                        for (v, m) in out.data_mut().iter_mut().zip(&mask) {
                            *v *= m;
                        }
                        self.dropout_masks.insert(id, mask);
                        out
                    }
                }
            }
        };
        Ok(out)
    }

    /// Reverse pass from a scalar output. Returns gradients for every leaf
    /// whose bound tensor requires grad; leaves that do not influence the
    /// seed get zero gradients.
    pub fn backward(&mut self, seed_output: &str) -> Result<BTreeMap<String, Tensor>> {
        if !self.evaluated {
            return Err(Error::Graph(
                "backward called before forward evaluation".into(),
            ));
        }
        let seed_id = self
            .outputs
            .get(seed_output)
            .copied()
            .ok_or_else(|| Error::Graph(format!("unknown output {seed_output:?}")))?;
        if self.values[seed_id].numel() != 1 {
            return Err(Error::Graph(format!(
                "backward seed {seed_output:?} is not scalar (shape {:?})",
                self.values[seed_id].shape()
            )));
        }

        // Nodes that transitively depend on a grad-requiring leaf.
        let mut needs = vec![false; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            needs[id] = match &node.op {
                Op::Leaf { .. } => *self.leaf_requires_grad.get(&id).unwrap_or(&false),
                _ => node.inputs.iter().any(|&i| needs[i]),
            };
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[seed_id] = Some(vec![1.0]);

        for id in (0..self.nodes.len()).rev() {
            if !needs[id] || matches!(self.nodes[id].op, Op::Leaf { .. } | Op::Const(_)) {
                continue;
            }
            let grad = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &grad, &mut grads, &needs);
        }

        let mut out = BTreeMap::new();
        for (name, &id) in &self.leaves {
            if *self.leaf_requires_grad.get(&id).unwrap_or(&false) {
                let shape = self.nodes[id].shape.clone();
                let data = grads[id]
                    .take()
                    .unwrap_or_else(|| vec![0.0; shape.iter().product()]);
                out.insert(name.clone(), Tensor::new(shape, data)?);
            }
        }
        Ok(out)
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, delta: Vec<f64>) {
        match &mut grads[id] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&delta) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(
        &self,
        id: NodeId,
        grad: &[f64],
        grads: &mut Vec<Option<Vec<f64>>>,
        needs: &[bool],
    ) {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        let val = |k: usize| -> &Tensor { &self.values[ins[k]] };
        let out_val = &self.values[id];

        match &node.op {
            Op::Leaf { .. } | Op::Const(_) => {}
            Op::MatMul => {
                let a = val(0);
                let b = val(1);
                let (m, k) = (a.rows(), a.cols());
                let n = b.cols();
                if needs[ins[0]] {
                    // dA = dC . B^T
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, grad, false, b.data(), true, 0.0, &mut da);
                    Self::accumulate(grads, ins[0], da);
                }
                if needs[ins[1]] {
                    // dB = A^T . dC
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, a.data(), true, grad, false, 0.0, &mut db);
                    Self::accumulate(grads, ins[1], db);
                }
            }
            Op::Add => {
                for slot in 0..2 {
                    if needs[ins[slot]] {
                        Self::accumulate(grads, ins[slot], grad.to_vec());
                    }
                }
            }
            Op::Sub => {
                if needs[ins[0]] {
                    Self::accumulate(grads, ins[0], grad.to_vec());
                }
                if needs[ins[1]] {
                    Self::accumulate(grads, ins[1], grad.iter().map(|g| -g).collect());
                }
            }
            Op::Mul => {
                if needs[ins[0]] {
                    let d = grad
                        .iter()
                        .zip(val(1).data())
                        .map(|(g, y)| g * y)
                        .collect();
                    Self::accumulate(grads, ins[0], d);
                }
                if needs[ins[1]] {
                    let d = grad
                        .iter()
                        .zip(val(0).data())
                        .map(|(g, x)| g * x)
                        .collect();
                    Self::accumulate(grads, ins[1], d);
                }
            }
            Op::Div => {
                let a = val(0);
                let b = val(1);
                if needs[ins[0]] {
                    let d = grad.iter().zip(b.data()).map(|(g, y)| g / y).collect();
                    Self::accumulate(grads, ins[0], d);
                }
                if needs[ins[1]] {
                    let d = grad
                        .iter()
                        .zip(a.data().iter().zip(b.data()))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    Self::accumulate(grads, ins[1], d);
                }
            }
            Op::AddRow => {
                let n = out_val.cols();
                if needs[ins[0]] {
                    Self::accumulate(grads, ins[0], grad.to_vec());
                }
                if needs[ins[1]] {
                    let mut d = vec![0.0; n];
                    for (i, g) in grad.iter().enumerate() {
                        d[i % n] += g;
                    }
                    Self::accumulate(grads, ins[1], d);
                }
            }
            Op::MulCol => {
                let a = val(0);
                let col = val(1);
                let n = a.cols();
                if needs[ins[0]] {
                    let d = grad
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g * col.data()[i / n])
                        .collect();
                    Self::accumulate(grads, ins[0], d);
                }
                if needs[ins[1]] {
                    let mut d = vec![0.0; a.rows()];
                    for (i, g) in grad.iter().enumerate() {
                        d[i / n] += g * a.data()[i];
                    }
                    Self::accumulate(grads, ins[1], d);
                }
            }
            Op::Scale(c) => {
                if needs[ins[0]] {
                    Self::accumulate(grads, ins[0], grad.iter().map(|g| g * c).collect());
                }
            }
            Op::Offset(_) => {
                if needs[ins[0]] {
                    Self::accumulate(grads, ins[0], grad.to_vec());
                }
            }
            Op::Neg => {
                if needs[ins[0]] {
                    Self::accumulate(grads, ins[0], grad.iter().map(|g| -g).collect());
                }
            }
            Op::Sigmoid => {
                if needs[ins[0]] {
                    let d = grad
                        .iter()
                        .zip(out_val.data())
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect();
                    Self::accumulate(grads, ins[0], d);
                }
            }
            Op::Tanh => {
                if needs[ins[0]] {
                    let d = grad
                        .iter()
                        .zip(out_val.data())
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    Self::accumulate(grads, ins[0], d);
                }
            }
            Op::Relu => {
                if needs[ins[0]] {
                    let d = grad
                        .iter()
                        .zip(val(0).data())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    Self::accumulate(grads, ins[0], d);
                }
            }
            Op::Exp => {
                if needs[ins[0]] {
                    let d = grad
                        .iter()
                        .zip(out_val.data())
                        .map(|(g, y)| g * y)
                        .collect();
                    Self::accumulate(grads, ins[0], d);
                }
            }
            Op::Log => {
                if needs[ins[0]] {
                    let d = grad
                        .iter()
                        .zip(val(0).data())
                        .map(|(g, x)| g / x)
                        .collect();
                    Self::accumulate(grads, ins[0], d);
                }
            }
            Op::Sqrt => {
                if needs[ins[0]] {
                    let d = grad
                        .iter()
                        .zip(out_val.data())
                        .map(|(g, y)| g * 0.5 / y)
                        .collect();
                    Self::accumulate(grads, ins[0], d);
                }
            }
            Op::SoftmaxRows => {
                if needs[ins[0]] {
                    let n = out_val.cols();
                    let mut d = vec![0.0; out_val.numel()];
                    for r in 0..out_val.rows() {
                        let y = &out_val.data()[r * n..(r + 1) * n];
                        let g = &grad[r * n..(r + 1) * n];
                        let dot: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
                        for j in 0..n {
                            d[r * n + j] = y[j] * (g[j] - dot);
                        }
                    }
                    Self::accumulate(grads, ins[0], d);
                }
            }
            Op::MaskedSoftmaxRows { mask } => {
                if needs[ins[0]] {
                    let n = out_val.cols();
                    let mut d = vec![0.0; out_val.numel()];
                    for r in 0..out_val.rows() {
                        let y = &out_val.data()[r * n..(r + 1) * n];
                        let g = &grad[r * n..(r + 1) * n];
                        let m = &mask[r * n..(r + 1) * n];
                        let dot: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
                        for j in 0..n {
                            if m[j] {
                                d[r * n + j] = y[j] * (g[j] - dot);
                            }
                        }
                    }
                    Self::accumulate(grads, ins[0], d);
                }
            }
            Op::LogSumExpRows => {
                if needs[ins[0]] {
                    let x = val(0);
                    let n = x.cols();
                    let mut d = vec![0.0; x.numel()];
                    for r in 0..x.rows() {
                        let row = &x.data()[r * n..(r + 1) * n];
                        let lse = out_val.data()[r];
                        for j in 0..n {
                            d[r * n + j] = grad[r] * (row[j] - lse).exp();
                        }
                    }
                    Self::accumulate(grads, ins[0], d);
                }
            }
            Op::SumAll => {
                if needs[ins[0]] {
                    Self::accumulate(grads, ins[0], vec![grad[0]; val(0).numel()]);
                }
            }
            Op::MeanAll => {
                if needs[ins[0]] {
                    let scale = 1.0 / val(0).numel() as f64;
                    Self::accumulate(grads, ins[0], vec![grad[0] * scale; val(0).numel()]);
                }
            }
            Op::SumCols => {
                if needs[ins[0]] {
                    let a = val(0);
                    let n = a.cols();
                    let mut d = vec![0.0; a.numel()];
                    for (i, slot) in d.iter_mut().enumerate() {
                        *slot = grad[i / n];
                    }
                    Self::accumulate(grads, ins[0], d);
                }
            }
            Op::SumRows => {
                if needs[ins[0]] {
                    let a = val(0);
                    let n = a.cols();
                    let mut d = vec![0.0; a.numel()];
                    for (i, slot) in d.iter_mut().enumerate() {
                        *slot = grad[i % n];
                    }
                    Self::accumulate(grads, ins[0], d);
                }
            }
            Op::ConcatCols => {
                let total = out_val.cols();
                let m = out_val.rows();
                let mut offset = 0;
                for &i in ins {
                    let pn = self.values[i].cols();
                    if needs[i] {
                        let mut d = vec![0.0; m * pn];
                        for r in 0..m {
                            d[r * pn..(r + 1) * pn].copy_from_slice(
                                &grad[r * total + offset..r * total + offset + pn],
                            );
                        }
                        Self::accumulate(grads, i, d);
                    }
                    offset += pn;
                }
            }
            Op::ConcatRows => {
                let mut offset = 0;
                for &i in ins {
                    let len = self.values[i].numel();
                    if needs[i] {
                        Self::accumulate(grads, i, grad[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::SliceRows { start, len } => {
                if needs[ins[0]] {
                    let a = val(0);
                    let n = a.cols();
                    let mut d = vec![0.0; a.numel()];
                    d[start * n..(start + len) * n].copy_from_slice(grad);
                    Self::accumulate(grads, ins[0], d);
                }
            }
            Op::SliceCols { start, len } => {
                if needs[ins[0]] {
                    let a = val(0);
                    let n = a.cols();
                    let mut d = vec![0.0; a.numel()];
                    for r in 0..a.rows() {
                        d[r * n + start..r * n + start + len]
                            .copy_from_slice(&grad[r * len..(r + 1) * len]);
                    }
                    Self::accumulate(grads, ins[0], d);
                }
            }
            Op::Dropout { .. } => {
                if needs[ins[0]] {
                    let d = match self.dropout_masks.get(&id) {
                        Some(mask) => grad.iter().zip(mask).map(|(g, m)| g * m).collect(),
                        None => grad.to_vec(),
                    };
                    Self::accumulate(grads, ins[0], d);
                }
            }
        }
    }
}

fn zip_elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut out = a.clone();
    for (o, y) in out.data_mut().iter_mut().zip(b.data()) {
        *o = f(*o, *y);
    }
    out
}

fn map_elementwise(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let mut out = a.clone();
    for o in out.data_mut().iter_mut() {
        *o = f(*o);
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn masked_softmax_in_place(row: &mut [f64], mask: &[bool]) {
    let max = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (v, &m) in row.iter_mut().zip(mask) {
        if m {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    for (v, &m) in row.iter_mut().zip(mask) {
        if m {
            *v /= sum;
        }
    }
}

fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `C = alpha*op(A)*op(B) + beta*C` for row-major buffers, alpha fixed to 1.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if trans_a {
        (1isize, m as isize)
    } else {
        (k as isize, 1isize)
    };
    let (rsb, csb) = if trans_b {
        (1isize, k as isize)
    } else {
        (n as isize, 1isize)
    };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_scores_is_uniform() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[1, 2]).unwrap();
        let y = g.softmax_rows(x).unwrap();
        g.mark_output("y", y);
        let mut b = Bindings::new();
        b.bind("x", t(&[1, 2], &[0.0, 0.0]));
        let out = g.evaluate(&b, EvalMode::Eval).unwrap();
        assert_eq!(out["y"].data(), &[0.5, 0.5]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[1, 2]).unwrap();
        let y = g.relu(x);
        g.mark_output("y", y);
        let mut b = Bindings::new();
        b.bind("x", t(&[1, 2], &[-1.0, 2.0]));
        let out = g.evaluate(&b, EvalMode::Eval).unwrap();
        assert_eq!(out["y"].data(), &[0.0, 2.0]);
    }

    #[test]
    fn matmul_of_ones_gives_row_sums() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[2, 3], 1.0));
        let b = g.constant(Tensor::full(&[3, 1], 1.0));
        let c = g.matmul(a, b).unwrap();
        g.mark_output("c", c);
        let out = g.evaluate(&Bindings::new(), EvalMode::Eval).unwrap();
        assert_eq!(out["c"].shape(), &[2, 1]);
        assert_eq!(out["c"].data(), &[3.0, 3.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 1]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }), "got {err:?}");
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[2, 3]).unwrap();
        let s = g.sum_all(x);
        g.mark_output("s", s);
        let mut b = Bindings::new();
        b.bind("x", t(&[2, 3], &[0.3, -1.0, 2.0, 4.0, 5.0, -0.2]).with_grad());
        g.evaluate(&b, EvalMode::Eval).unwrap();
        let grads = g.backward("s").unwrap();
        assert_eq!(grads["x"].data(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_sigmoid_at_zero_is_quarter() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[1, 1]).unwrap();
        let y = g.sigmoid(x);
        let s = g.sum_all(y);
        g.mark_output("s", s);
        let mut b = Bindings::new();
        b.bind("x", Tensor::scalar(0.0).with_grad());
        g.evaluate(&b, EvalMode::Eval).unwrap();
        let grads = g.backward("s").unwrap();
        assert!((grads["x"].data()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_before_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[1, 1]).unwrap();
        g.mark_output("x", x);
        assert!(g.backward("x").is_err());
    }

    #[test]
    fn backward_rejects_non_scalar_seed() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[1, 2]).unwrap();
        g.mark_output("x", x);
        let mut b = Bindings::new();
        b.bind("x", t(&[1, 2], &[1.0, 2.0]).with_grad());
        g.evaluate(&b, EvalMode::Eval).unwrap();
        assert!(g.backward("x").is_err());
    }

    #[test]
    fn unbound_leaf_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[1, 1]).unwrap();
        g.mark_output("x", x);
        assert!(g.evaluate(&Bindings::new(), EvalMode::Eval).is_err());
    }

    #[test]
    fn non_finite_intermediate_names_node() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[1, 1]).unwrap();
        let y = g.log(x);
        g.mark_output("y", y);
        let mut b = Bindings::new();
        b.bind("x", Tensor::scalar(-1.0));
        let err = g.evaluate(&b, EvalMode::Eval).unwrap_err();
        match err {
            Error::NonFinite { node, op } => {
                assert_eq!(node, y);
                assert_eq!(op, "log");
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn uninfluential_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[1, 1]).unwrap();
        let z = g.leaf("z", &[2, 2]).unwrap();
        let _ = z;
        let s = g.sum_all(x);
        g.mark_output("s", s);
        let mut b = Bindings::new();
        b.bind("x", Tensor::scalar(3.0).with_grad());
        b.bind("z", Tensor::zeros(&[2, 2]).with_grad());
        g.evaluate(&b, EvalMode::Eval).unwrap();
        let grads = g.backward("s").unwrap();
        assert_eq!(grads["z"].data(), &[0.0; 4]);
    }

    #[test]
    fn dropout_disabled_is_bit_identical() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[3, 4]).unwrap();
        let y = g.dropout(x, 0.5).unwrap();
        g.mark_output("y", y);
        let input = Tensor::rand_uniform(&[3, 4], -2.0, 2.0, &mut crate::rng::stream(1, "t", 0));
        let mut b = Bindings::new();
        b.bind("x", input.clone());
        let out = g.evaluate(&b, EvalMode::Eval).unwrap();
        assert_eq!(out["y"].data(), input.data());
    }

    #[test]
    fn dropout_expectation_matches_identity() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[1, 8]).unwrap();
        let y = g.dropout(x, 0.7).unwrap();
        g.mark_output("y", y);
        let input = t(&[1, 8], &[1.0, -2.0, 3.0, 0.5, -0.25, 4.0, 1.5, -1.0]);
        let mut b = Bindings::new();
        b.bind("x", input.clone());
        let mut acc = vec![0.0; 8];
        let draws = 10_000;
        for s in 0..draws {
            let out = g
                .evaluate(&b, EvalMode::Train { dropout_seed: s })
                .unwrap();
            for (a, v) in acc.iter_mut().zip(out["y"].data()) {
                *a += v;
            }
        }
        for (a, v) in acc.iter().zip(input.data()) {
            let mean = a / draws as f64;
            assert!(
                (mean - v).abs() <= 0.02 * v.abs(),
                "dropout expectation {mean} vs {v}"
            );
        }
    }

    #[test]
    fn train_mode_is_deterministic_per_seed() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[2, 16]).unwrap();
        let y = g.dropout(x, 0.5).unwrap();
        g.mark_output("y", y);
        let input = Tensor::rand_uniform(&[2, 16], -1.0, 1.0, &mut crate::rng::stream(2, "t", 0));
        let mut b = Bindings::new();
        b.bind("x", input);
        let o1 = g
            .evaluate(&b, EvalMode::Train { dropout_seed: 99 })
            .unwrap();
        let o2 = g
            .evaluate(&b, EvalMode::Train { dropout_seed: 99 })
            .unwrap();
        assert_eq!(o1["y"].data(), o2["y"].data());
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[1, 4]).unwrap();
        let y = g
            .masked_softmax_rows(x, vec![true, true, false, true])
            .unwrap();
        g.mark_output("y", y);
        let mut b = Bindings::new();
        b.bind("x", t(&[1, 4], &[0.2, -0.4, 100.0, 1.3]));
        let out = g.evaluate(&b, EvalMode::Eval).unwrap();
        let y = out["y"].data();
        assert_eq!(y[2], 0.0);
        assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
