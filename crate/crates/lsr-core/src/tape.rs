//! Tape-based reverse-mode differentiation over matrix operations.
//!
//! A [`Tape`] records every primitive applied during a forward pass as a
//! node holding the cached output value. [`Tape::backward`] replays the
//! recording in reverse, accumulating vector-Jacobian products into the
//! trainable leaves and returning them as a [`GradientMap`] keyed by
//! parameter name.
//!
//! A tape is owned by exactly one training context; disjoint tapes may run
//! concurrently. Gradient propagation is pruned: an op backpropagates into
//! an input only when some trainable leaf is reachable below it, so frozen
//! subgraphs cost nothing in the backward pass.

use std::collections::{BTreeMap, HashMap};

use crate::linalg::{self, Matrix, Precision};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Named parameter with its freeze flag.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Matrix,
    pub trainable: bool,
}

/// Named dense parameters with per-parameter trainable flags.
///
/// Iteration order is the sorted name order, so anything derived from a walk
/// over the store (initialization, checkpointing, optimizer state) is
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    params: BTreeMap<String, Param>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix, trainable: bool) {
        self.params.insert(name.into(), Param { value, trainable });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn value(&self, name: &str) -> Result<&Matrix> {
        Ok(&self.get(name)?.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.params
            .get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.params.remove(name)
    }

    /// Marks every parameter with the same flag.
    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in self.params.values_mut() {
            p.trainable = trainable;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn total_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Scalar count across trainable parameters.
    pub fn trainable_scalars(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }
}

/// Gradients keyed by parameter name; shapes match the parameters exactly.
///
/// Leaves the loss never touched are absent.
#[derive(Debug, Clone, Default)]
pub struct GradientMap {
    grads: BTreeMap<String, Matrix>,
}

impl GradientMap {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.grads.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.grads.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Debug)]
enum Op {
    Leaf {
        name: Option<String>,
        trainable: bool,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    /// `a * b^T`
    MatMulTransB {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    MulElem {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        c: f64,
    },
    AddRowBroadcast {
        a: NodeId,
        bias: NodeId,
    },
    Transpose {
        a: NodeId,
    },
    SoftmaxRows {
        a: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    Gelu {
        a: NodeId,
    },
    Relu {
        a: NodeId,
    },
    Log1pClamp {
        a: NodeId,
    },
    /// Rows of `table` selected by index (embedding lookup).
    GatherRows {
        table: NodeId,
        indices: Vec<usize>,
    },
    SliceCols {
        a: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols {
        parts: Vec<NodeId>,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    /// Column-wise max over a row subset; `argmax[j]` is None when the row
    /// set is empty (the value falls back to 0).
    MaskedColMax {
        a: NodeId,
        argmax: Vec<Option<usize>>,
    },
    RowLogSumExp {
        a: NodeId,
    },
    /// Picks entry `(r, cols[r])` from each row as an n x 1 column.
    GatherEntries {
        a: NodeId,
        cols: Vec<usize>,
    },
    /// Per-row dot product of two same-shape matrices, as an n x 1 column.
    RowwiseDot {
        a: NodeId,
        b: NodeId,
    },
    MeanRows {
        a: NodeId,
    },
    SumAll {
        a: NodeId,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph. See the module docs.
pub struct Tape {
    nodes: Vec<Node>,
    param_cache: HashMap<String, NodeId>,
    precision: Precision,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_cache: HashMap::new(),
            precision: Precision::F64,
        }
    }

    /// Tape whose node values are rounded through the given precision.
    pub fn with_precision(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            param_cache: HashMap::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        let v = self.value(id);
        if v.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "expected a scalar node, got {}x{}",
                v.rows(),
                v.cols()
            )));
        }
        Ok(v.data()[0])
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> NodeId {
        let value = value.rounded(self.precision);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Non-trainable input leaf (activations, masks, constants).
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(
            value,
            Op::Leaf {
                name: None,
                trainable: false,
            },
            false,
        )
    }

    /// Anonymous trainable leaf. Useful for small closed-form tests; model
    /// code goes through [`Tape::param`] so gradients land in the map by name.
    pub fn variable(&mut self, name: impl Into<String>, value: Matrix) -> NodeId {
        let name = name.into();
        let id = self.push(
            value,
            Op::Leaf {
                name: Some(name.clone()),
                trainable: true,
            },
            true,
        );
        self.param_cache.insert(name, id);
        id
    }

    /// Registers a named parameter from the store as a leaf, or returns the
    /// existing node when the same name was already registered on this tape.
    ///
    /// The caching is what ties shared weights: every use of one name sees
    /// one node, so gradients from all of its uses accumulate together.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.param_cache.get(name) {
            return Ok(id);
        }
        let p = store.get(name)?;
        let id = self.push(
            p.value.clone(),
            Op::Leaf {
                name: Some(name.to_string()),
                trainable: p.trainable,
            },
            p.trainable,
        );
        self.param_cache.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = linalg::matmul(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MatMul { a, b }, needs))
    }

    pub fn matmul_transpose_b(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = linalg::matmul_transpose_b(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MatMulTransB { a, b }, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = linalg::add(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = linalg::sub(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Sub { a, b }, needs))
    }

    pub fn mul_elementwise(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = linalg::mul_elementwise(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MulElem { a, b }, needs))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = linalg::scale(self.value(a), c);
        let needs = self.needs(a);
        self.push(v, Op::Scale { a, c }, needs)
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = linalg::add_row_broadcast(self.value(a), self.value(bias))?;
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(v, Op::AddRowBroadcast { a, bias }, needs))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = linalg::transpose(self.value(a));
        let needs = self.needs(a);
        self.push(v, Op::Transpose { a }, needs)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = linalg::softmax_rows(self.value(a));
        let needs = self.needs(a);
        self.push(v, Op::SoftmaxRows { a }, needs)
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let v = linalg::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(v, Op::LayerNorm { x, gain, bias, eps }, needs))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = linalg::gelu(self.value(a));
        let needs = self.needs(a);
        self.push(v, Op::Gelu { a }, needs)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = linalg::relu(self.value(a));
        let needs = self.needs(a);
        self.push(v, Op::Relu { a }, needs)
    }

    pub fn log1p_clamp(&mut self, a: NodeId) -> NodeId {
        let v = linalg::log1p_clamp(self.value(a));
        let needs = self.needs(a);
        self.push(v, Op::Log1pClamp { a }, needs)
    }

    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let cols = t.cols();
        let mut v = Matrix::zeros(indices.len(), cols);
        for (r, &idx) in indices.iter().enumerate() {
            if idx >= t.rows() {
                return Err(Error::Contract(format!(
                    "gather_rows: index {idx} out of range for table with {} rows",
                    t.rows()
                )));
            }
            v.row_mut(r).copy_from_slice(t.row(idx));
        }
        let needs = self.needs(table);
        Ok(self.push(
            v,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            needs,
        ))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let m = self.value(a);
        if start + len > m.cols() {
            return Err(Error::Shape(format!(
                "slice_cols: [{start}, {}) out of range for {}x{}",
                start + len,
                m.rows(),
                m.cols()
            )));
        }
        let mut v = Matrix::zeros(m.rows(), len);
        for r in 0..m.rows() {
            v.row_mut(r).copy_from_slice(&m.row(r)[start..start + len]);
        }
        let needs = self.needs(a);
        Ok(self.push(v, Op::SliceCols { a, start, len }, needs))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            if m.rows() != rows {
                return Err(Error::Shape(format!(
                    "concat_cols: row mismatch {} vs {}",
                    m.rows(),
                    rows
                )));
            }
            for r in 0..rows {
                v.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
            }
            off += m.cols();
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            v,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero parts".into()));
        }
        let cols = self.value(parts[0]).cols();
        let total: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut v = Matrix::zeros(total, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            if m.cols() != cols {
                return Err(Error::Shape(format!(
                    "concat_rows: column mismatch {} vs {}",
                    m.cols(),
                    cols
                )));
            }
            for r in 0..m.rows() {
                v.row_mut(off + r).copy_from_slice(m.row(r));
            }
            off += m.rows();
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            v,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Column-wise max over the given row subset, as a 1 x cols row.
    ///
    /// With an empty row subset the result is all zeros (and nothing receives
    /// gradient), which is the degenerate all-padding case.
    pub fn masked_col_max(&mut self, a: NodeId, active_rows: &[usize]) -> Result<NodeId> {
        let m = self.value(a);
        for &r in active_rows {
            if r >= m.rows() {
                return Err(Error::Contract(format!(
                    "masked_col_max: row {r} out of range for {} rows",
                    m.rows()
                )));
            }
        }
        let mut v = Matrix::zeros(1, m.cols());
        let mut argmax: Vec<Option<usize>> = vec![None; m.cols()];
        for c in 0..m.cols() {
            let mut best: Option<(usize, f64)> = None;
            for &r in active_rows {
                let x = m.get(r, c);
                if best.map_or(true, |(_, b)| x > b) {
                    best = Some((r, x));
                }
            }
            if let Some((r, x)) = best {
                v.set(0, c, x);
                argmax[c] = Some(r);
            }
        }
        let needs = self.needs(a);
        Ok(self.push(v, Op::MaskedColMax { a, argmax }, needs))
    }

    pub fn row_logsumexp(&mut self, a: NodeId) -> NodeId {
        let v = linalg::row_logsumexp(self.value(a));
        let needs = self.needs(a);
        self.push(v, Op::RowLogSumExp { a }, needs)
    }

    pub fn gather_entries(&mut self, a: NodeId, cols: &[usize]) -> Result<NodeId> {
        let m = self.value(a);
        if cols.len() != m.rows() {
            return Err(Error::Contract(format!(
                "gather_entries: {} column picks for {} rows",
                cols.len(),
                m.rows()
            )));
        }
        let mut v = Matrix::zeros(m.rows(), 1);
        for (r, &c) in cols.iter().enumerate() {
            if c >= m.cols() {
                return Err(Error::Contract(format!(
                    "gather_entries: column {c} out of range for {} columns",
                    m.cols()
                )));
            }
            v.set(r, 0, m.get(r, c));
        }
        let needs = self.needs(a);
        Ok(self.push(
            v,
            Op::GatherEntries {
                a,
                cols: cols.to_vec(),
            },
            needs,
        ))
    }

    pub fn rowwise_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ma, mb) = (self.value(a), self.value(b));
        if ma.shape() != mb.shape() {
            return Err(Error::Shape(format!(
                "rowwise_dot: {}x{} vs {}x{}",
                ma.rows(),
                ma.cols(),
                mb.rows(),
                mb.cols()
            )));
        }
        let mut v = Matrix::zeros(ma.rows(), 1);
        for r in 0..ma.rows() {
            let mut acc = 0.0;
            for (x, y) in ma.row(r).iter().zip(mb.row(r)) {
                acc += x * y;
            }
            v.set(r, 0, acc);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::RowwiseDot { a, b }, needs))
    }

    /// Column means over all rows, as a 1 x cols row.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let m = self.value(a);
        if m.rows() == 0 {
            return Err(Error::Contract("mean_rows over zero rows".into()));
        }
        let mut v = Matrix::zeros(1, m.cols());
        for r in 0..m.rows() {
            for (o, &x) in v.row_mut(0).iter_mut().zip(m.row(r)) {
                *o += x;
            }
        }
        let inv = 1.0 / m.rows() as f64;
        for o in v.data_mut() {
            *o *= inv;
        }
        let needs = self.needs(a);
        Ok(self.push(v, Op::MeanRows { a }, needs))
    }

    /// Sum of all entries as a 1x1 scalar node.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let m = self.value(a);
        let v = Matrix::from_vec(1, 1, vec![m.data().iter().sum()]).unwrap();
        let needs = self.needs(a);
        self.push(v, Op::SumAll { a }, needs)
    }

    /// Mean of all entries as a 1x1 scalar node.
    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let m = self.value(a);
        if m.is_empty() {
            return Err(Error::Contract("mean_all over an empty matrix".into()));
        }
        let inv = 1.0 / m.len() as f64;
        let s = self.sum_all(a);
        Ok(self.scale(s, inv))
    }

    /// Reverse pass from a scalar loss node. Returns gradients for every
    /// trainable leaf the loss actually depends on.
    pub fn backward(&mut self, loss: NodeId) -> Result<GradientMap> {
        if self.precision != Precision::F64 {
            return Err(Error::Contract(
                "backward requires an f64 tape (training mode)".into(),
            ));
        }
        let loss_val = self.value(loss);
        if loss_val.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got {}x{}",
                loss_val.rows(),
                loss_val.cols()
            )));
        }

        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0]).unwrap());

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g_out) = grads[i].take() else {
                continue;
            };
            // Leaves keep their gradient for collection below.
            if matches!(self.nodes[i].op, Op::Leaf { .. }) {
                grads[i] = Some(g_out);
                continue;
            }
            self.backprop_op(i, &g_out, &mut grads)?;
        }

        let mut map = GradientMap::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf {
                name: Some(name),
                trainable: true,
            } = &node.op
            {
                if let Some(g) = grads[i].take() {
                    map.grads.insert(name.clone(), g);
                }
            }
        }
        Ok(map)
    }

    fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix) {
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn backprop_op(&self, idx: usize, g_out: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &self.nodes[idx].op {
            Op::Leaf { .. } => unreachable!("handled by caller"),
            Op::MatMul { a, b } => {
                if self.needs(*a) {
                    let da = linalg::matmul_transpose_b(g_out, val(*b))?;
                    Self::accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = linalg::matmul_transpose_a(val(*a), g_out)?;
                    Self::accumulate(grads, *b, db);
                }
            }
            Op::MatMulTransB { a, b } => {
                if self.needs(*a) {
                    let da = linalg::matmul(g_out, val(*b))?;
                    Self::accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = linalg::matmul_transpose_a(g_out, val(*a))?;
                    Self::accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, g_out.clone());
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, g_out.clone());
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, g_out.clone());
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, linalg::scale(g_out, -1.0));
                }
            }
            Op::MulElem { a, b } => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, linalg::mul_elementwise(g_out, val(*b))?);
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, linalg::mul_elementwise(g_out, val(*a))?);
                }
            }
            Op::Scale { a, c } => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, linalg::scale(g_out, *c));
                }
            }
            Op::AddRowBroadcast { a, bias } => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, g_out.clone());
                }
                if self.needs(*bias) {
                    let mut db = Matrix::zeros(1, g_out.cols());
                    for r in 0..g_out.rows() {
                        for (o, &g) in db.row_mut(0).iter_mut().zip(g_out.row(r)) {
                            *o += g;
                        }
                    }
                    Self::accumulate(grads, *bias, db);
                }
            }
            Op::Transpose { a } => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, linalg::transpose(g_out));
                }
            }
            Op::SoftmaxRows { a } => {
                if self.needs(*a) {
                    let y = &self.nodes[idx].value;
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g_out.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(x, g)| x * g).sum();
                        for ((o, &yv), &gv) in da.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    Self::accumulate(grads, *a, da);
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = val(*x);
                let gv = val(*gain);
                let n = xv.cols();
                let nf = n as f64;
                let mut dx = Matrix::zeros(xv.rows(), n);
                let mut dgain = Matrix::zeros(1, n);
                let mut dbias = Matrix::zeros(1, n);
                for r in 0..xv.rows() {
                    let row = xv.row(r);
                    let mean = row.iter().sum::<f64>() / nf;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gr = g_out.row(r);
                    // xhat = (x - mean) * inv; dxhat = g_out .* gain
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for c in 0..n {
                        let xhat = (row[c] - mean) * inv;
                        let dxhat = gr[c] * gv.data()[c];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                        dgain.data_mut()[c] += gr[c] * xhat;
                        dbias.data_mut()[c] += gr[c];
                    }
                    mean_dxhat /= nf;
                    mean_dxhat_xhat /= nf;
                    for c in 0..n {
                        let xhat = (row[c] - mean) * inv;
                        let dxhat = gr[c] * gv.data()[c];
                        dx.set(r, c, inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat));
                    }
                }
                if self.needs(*x) {
                    Self::accumulate(grads, *x, dx);
                }
                if self.needs(*gain) {
                    Self::accumulate(grads, *gain, dgain);
                }
                if self.needs(*bias) {
                    Self::accumulate(grads, *bias, dbias);
                }
            }
            Op::Gelu { a } => {
                if self.needs(*a) {
                    let xv = val(*a);
                    let mut da = g_out.clone();
                    for (o, &x) in da.data_mut().iter_mut().zip(xv.data()) {
                        *o *= linalg::gelu_grad_scalar(x);
                    }
                    Self::accumulate(grads, *a, da);
                }
            }
            Op::Relu { a } => {
                if self.needs(*a) {
                    let xv = val(*a);
                    let mut da = g_out.clone();
                    for (o, &x) in da.data_mut().iter_mut().zip(xv.data()) {
                        if x <= 0.0 {
                            *o = 0.0;
                        }
                    }
                    Self::accumulate(grads, *a, da);
                }
            }
            Op::Log1pClamp { a } => {
                if self.needs(*a) {
                    let xv = val(*a);
                    let mut da = g_out.clone();
                    for (o, &x) in da.data_mut().iter_mut().zip(xv.data()) {
                        *o = if x > 0.0 { *o / (1.0 + x) } else { 0.0 };
                    }
                    Self::accumulate(grads, *a, da);
                }
            }
            Op::GatherRows { table, indices } => {
                if self.needs(*table) {
                    let t = val(*table);
                    let mut dt = Matrix::zeros(t.rows(), t.cols());
                    for (r, &idx) in indices.iter().enumerate() {
                        for (o, &g) in dt.row_mut(idx).iter_mut().zip(g_out.row(r)) {
                            *o += g;
                        }
                    }
                    Self::accumulate(grads, *table, dt);
                }
            }
            Op::SliceCols { a, start, len } => {
                if self.needs(*a) {
                    let m = val(*a);
                    let mut da = Matrix::zeros(m.rows(), m.cols());
                    for r in 0..m.rows() {
                        da.row_mut(r)[*start..start + len].copy_from_slice(g_out.row(r));
                    }
                    Self::accumulate(grads, *a, da);
                }
            }
            Op::ConcatCols { parts } => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if self.needs(p) {
                        let mut dp = Matrix::zeros(g_out.rows(), w);
                        for r in 0..g_out.rows() {
                            dp.row_mut(r).copy_from_slice(&g_out.row(r)[off..off + w]);
                        }
                        Self::accumulate(grads, p, dp);
                    }
                    off += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let h = val(p).rows();
                    if self.needs(p) {
                        let mut dp = Matrix::zeros(h, g_out.cols());
                        for r in 0..h {
                            dp.row_mut(r).copy_from_slice(g_out.row(off + r));
                        }
                        Self::accumulate(grads, p, dp);
                    }
                    off += h;
                }
            }
            Op::MaskedColMax { a, argmax } => {
                // With an empty row subset nothing depends on the input.
                if self.needs(*a) && argmax.iter().any(Option::is_some) {
                    let m = val(*a);
                    let mut da = Matrix::zeros(m.rows(), m.cols());
                    for (c, am) in argmax.iter().enumerate() {
                        if let Some(r) = am {
                            da.set(*r, c, g_out.get(0, c));
                        }
                    }
                    Self::accumulate(grads, *a, da);
                }
            }
            Op::RowLogSumExp { a } => {
                if self.needs(*a) {
                    let soft = linalg::softmax_rows(val(*a));
                    let mut da = soft;
                    for r in 0..da.rows() {
                        let g = g_out.get(r, 0);
                        for o in da.row_mut(r) {
                            *o *= g;
                        }
                    }
                    Self::accumulate(grads, *a, da);
                }
            }
            Op::GatherEntries { a, cols } => {
                if self.needs(*a) {
                    let m = val(*a);
                    let mut da = Matrix::zeros(m.rows(), m.cols());
                    for (r, &c) in cols.iter().enumerate() {
                        da.set(r, c, g_out.get(r, 0));
                    }
                    Self::accumulate(grads, *a, da);
                }
            }
            Op::RowwiseDot { a, b } => {
                let scale_rows = |src: &Matrix| {
                    let mut out = src.clone();
                    for r in 0..out.rows() {
                        let g = g_out.get(r, 0);
                        for o in out.row_mut(r) {
                            *o *= g;
                        }
                    }
                    out
                };
                if self.needs(*a) {
                    Self::accumulate(grads, *a, scale_rows(val(*b)));
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, scale_rows(val(*a)));
                }
            }
            Op::MeanRows { a } => {
                if self.needs(*a) {
                    let m = val(*a);
                    let inv = 1.0 / m.rows() as f64;
                    let mut da = Matrix::zeros(m.rows(), m.cols());
                    for r in 0..m.rows() {
                        for (o, &g) in da.row_mut(r).iter_mut().zip(g_out.row(0)) {
                            *o = g * inv;
                        }
                    }
                    Self::accumulate(grads, *a, da);
                }
            }
            Op::SumAll { a } => {
                if self.needs(*a) {
                    let m = val(*a);
                    let g = g_out.data()[0];
                    let da = Matrix::from_vec(m.rows(), m.cols(), vec![g; m.len()]).unwrap();
                    Self::accumulate(grads, *a, da);
                }
            }
        }
        Ok(())
    }
}

/// Settings for [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates sampled per parameter (all coordinates when the parameter
    /// is smaller).
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            coords_per_param: 50,
            seed: 0x5eed,
        }
    }
}

/// Compares reverse-mode gradients of `f` against central finite differences.
///
/// `f` receives the parameter store and a fresh f64 tape and must return the
/// scalar loss node. Returns the max over sampled coordinates of
/// `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
pub fn grad_check<F>(f: F, params: &ParameterStore, cfg: &GradCheckConfig) -> Result<f64>
where
    F: Fn(&ParameterStore, &mut Tape) -> Result<NodeId>,
{
    use rand::{Rng, SeedableRng};

    let eval = |store: &ParameterStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(store, &mut tape)?;
        let v = tape.scalar_value(loss)?;
        if !v.is_finite() {
            return Err(Error::Contract(format!("non-finite loss value {v}")));
        }
        Ok(v)
    };

    // Analytic gradients at the base point.
    let mut tape = Tape::new();
    let loss = f(params, &mut tape)?;
    let base = tape.scalar_value(loss)?;
    if !base.is_finite() {
        return Err(Error::Contract(format!("non-finite loss value {base}")));
    }
    let ad = tape.backward(loss)?;
    drop(tape);

    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut work = params.clone();
    let mut max_rel = 0.0f64;

    let names: Vec<String> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    for name in names {
        let len = params.value(&name)?.len();
        let coords: Vec<usize> = if len <= cfg.coords_per_param {
            (0..len).collect()
        } else {
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < cfg.coords_per_param {
                picked.insert(rng.gen_range(0..len));
            }
            picked.into_iter().collect()
        };

        for c in coords {
            let orig = params.value(&name)?.data()[c];
            work.value_mut(&name)?.data_mut()[c] = orig + cfg.step;
            let plus = eval(&work)?;
            work.value_mut(&name)?.data_mut()[c] = orig - cfg.step;
            let minus = eval(&work)?;
            work.value_mut(&name)?.data_mut()[c] = orig;

            let g_fd = (plus - minus) / (2.0 * cfg.step);
            let g_ad = ad.get(&name).map_or(0.0, |m| m.data()[c]);
            let rel = (g_ad - g_fd).abs() / (g_ad.abs() + g_fd.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_matrix(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn store_with(rng: &mut ChaCha12Rng, shapes: &[(&str, usize, usize)]) -> ParameterStore {
        let mut store = ParameterStore::new();
        for &(name, r, c) in shapes {
            store.insert(name, random_matrix(rng, r, c), true);
        }
        store
    }

    /// Every differentiable op, composed into a scalar, agrees with finite
    /// differences.
    #[test]
    fn grad_check_covers_all_ops() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let store = store_with(
            &mut rng,
            &[
                ("w", 4, 3),
                ("u", 3, 5),
                ("bias", 1, 5),
                ("gain", 1, 5),
                ("table", 6, 3),
            ],
        );
        let err = grad_check(
            |s, t| {
                let w = t.param(s, "w")?;
                let u = t.param(s, "u")?;
                let bias = t.param(s, "bias")?;
                let gain = t.param(s, "gain")?;
                let table = t.param(s, "table")?;

                let gathered = t.gather_rows(table, &[0, 2, 5, 2])?; // 4x3
                let x = t.add(w, gathered)?; // 4x3
                let h = t.matmul(x, u)?; // 4x5
                let h = t.add_row_broadcast(h, bias)?;
                let h = t.layer_norm(h, gain, bias, 1e-12)?;
                let h = t.gelu(h);
                let sm = t.softmax_rows(h);
                let lse = t.row_logsumexp(sm); // 4x1
                let picked = t.gather_entries(sm, &[1, 0, 3, 2])?; // 4x1
                let diff = t.sub(lse, picked)?;

                let pooled = t.masked_col_max(sm, &[0, 1, 3])?; // 1x5
                let pooled = t.relu(pooled);
                let pooled = t.log1p_clamp(pooled);
                let pooled_sum = t.sum_all(pooled);

                let a_part = t.slice_cols(sm, 0, 2)?; // 4x2
                let b_part = t.slice_cols(sm, 2, 2)?; // 4x2
                let cat = t.concat_cols(&[a_part, b_part])?; // 4x4
                let catr = t.concat_rows(&[cat, cat])?; // 8x4
                let means = t.mean_rows(catr)?; // 1x4
                let sq = t.mul_elementwise(means, means)?;
                let sq_sum = t.sum_all(sq);

                let tr = t.transpose(sm); // 5x4
                let prod = t.matmul_transpose_b(tr, tr)?; // 5x5
                let prod_mean = t.mean_all(prod)?;

                let rd = t.rowwise_dot(diff, diff)?; // 4x1
                let rd_mean = t.mean_all(rd)?;

                let s1 = t.add(pooled_sum, sq_sum)?;
                let s2 = t.add(prod_mean, rd_mean)?;
                let s2 = t.scale(s2, 0.5);
                t.add(s1, s2)
            },
            &store,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn quadratic_loss_gradcheck_is_tight() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let store = store_with(&mut rng, &[("theta", 3, 4)]);
        let err = grad_check(
            |s, t| {
                let th = t.param(s, "theta")?;
                let sq = t.mul_elementwise(th, th)?;
                let sum = t.sum_all(sq);
                Ok(t.scale(sum, 0.5))
            },
            &store,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(err < 1e-9, "quadratic should be near-exact, got {err}");
    }

    #[test]
    fn linear_loss_gradient_is_input_structure() {
        // loss = sum(W x) for fixed x: dL/dW replicates x^T in every row.
        let mut tape = Tape::new();
        let w = tape.variable("w", Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let x = tape.constant(Matrix::from_vec(2, 1, vec![5.0, 7.0]).unwrap());
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        let gw = grads.get("w").unwrap();
        assert_eq!(gw.data(), &[5.0, 7.0, 5.0, 7.0]);
    }

    #[test]
    fn disconnected_leaf_absent_from_map() {
        let mut tape = Tape::new();
        let used = tape.variable("used", Matrix::row_vector(&[2.0]));
        let _unused = tape.variable("unused", Matrix::row_vector(&[3.0]));
        let loss = tape.sum_all(used);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.contains("used"));
        assert!(!grads.contains("unused"));
    }

    #[test]
    fn frozen_leaf_receives_no_gradient() {
        let mut store = ParameterStore::new();
        store.insert("frozen", Matrix::row_vector(&[1.0, 2.0]), false);
        store.insert("free", Matrix::row_vector(&[3.0, 4.0]), true);
        let mut tape = Tape::new();
        let a = tape.param(&store, "frozen").unwrap();
        let b = tape.param(&store, "free").unwrap();
        let prod = tape.mul_elementwise(a, b).unwrap();
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss).unwrap();
        assert!(!grads.contains("frozen"));
        // d loss / d free = frozen values.
        assert_eq!(grads.get("free").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn param_nodes_are_cached_and_tied() {
        // Using one name twice must accumulate gradients from both uses.
        let mut store = ParameterStore::new();
        store.insert("e", Matrix::row_vector(&[2.0]), true);
        let mut tape = Tape::new();
        let e1 = tape.param(&store, "e").unwrap();
        let e2 = tape.param(&store, "e").unwrap();
        assert_eq!(e1, e2);
        let prod = tape.mul_elementwise(e1, e2).unwrap(); // e^2
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("e").unwrap().data(), &[4.0]); // d(e^2)/de = 2e
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut tape = Tape::new();
        let v = tape.variable("v", Matrix::row_vector(&[1.0, 2.0]));
        let err = tape.backward(v).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut store = ParameterStore::new();
        store.insert("p", Matrix::row_vector(&[1.0, 2.0, 3.0]), true);
        let err = grad_check(
            |_s, t| {
                let c = t.constant(Matrix::row_vector(&[5.0]));
                Ok(t.sum_all(c))
            },
            &store,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_loss_is_contract_error() {
        let mut store = ParameterStore::new();
        store.insert("p", Matrix::row_vector(&[1.0]), true);
        let res = grad_check(
            |s, t| {
                let p = t.param(s, "p")?;
                let big = t.scale(p, f64::MAX);
                let bigger = t.mul_elementwise(big, big)?; // overflows to inf
                Ok(t.sum_all(bigger))
            },
            &store,
            &GradCheckConfig::default(),
        );
        assert!(matches!(res, Err(Error::Contract(_))));
    }

    #[test]
    fn backward_on_f32_tape_is_rejected() {
        let mut tape = Tape::with_precision(Precision::F32);
        let v = tape.variable("v", Matrix::row_vector(&[1.0]));
        let loss = tape.sum_all(v);
        assert!(tape.backward(loss).is_err());
    }

    #[test]
    fn f32_tape_rounds_forward_values() {
        let mut t32 = Tape::with_precision(Precision::F32);
        let m = Matrix::row_vector(&[0.1, 0.2]);
        let a32 = t32.constant(m);
        let b32 = t32.mul_elementwise(a32, a32).unwrap();
        // Every stored value is exactly representable in f32, and differs
        // from the f64 result of the same computation.
        for &x in t32.value(b32).data() {
            assert_eq!(x, x as f32 as f64);
        }
        assert_ne!(t32.value(b32).data()[0], 0.1f64 * 0.1f64);
    }

    #[test]
    fn masked_col_max_empty_mask_gives_zeros_and_no_grad() {
        let mut tape = Tape::new();
        let v = tape.variable("v", Matrix::from_vec(2, 3, vec![1.0; 6]).unwrap());
        let pooled = tape.masked_col_max(v, &[]).unwrap();
        assert_eq!(tape.value(pooled).data(), &[0.0, 0.0, 0.0]);
        let loss = tape.sum_all(pooled);
        let grads = tape.backward(loss).unwrap();
        assert!(!grads.contains("v"));
    }

    #[test]
    fn masked_col_max_routes_gradient_to_argmax_row_only() {
        let mut tape = Tape::new();
        let v = tape.variable(
            "v",
            Matrix::from_vec(3, 2, vec![1.0, 9.0, 5.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        // Only rows 0 and 2 active; maxima: col0 -> row2 (3.0), col1 -> row0 (9.0).
        let pooled = tape.masked_col_max(v, &[0, 2]).unwrap();
        assert_eq!(tape.value(pooled).data(), &[3.0, 9.0]);
        let loss = tape.sum_all(pooled);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(
            grads.get("v").unwrap().data(),
            &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]
        );
    }
}
