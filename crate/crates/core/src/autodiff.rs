//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, and [`Graph::backward`] walks the tape in reverse accumulating
//! gradients. Everything is a 2-D matrix; vectors are `1 × n` rows and
//! scalars are `1 × 1`.
//!
//! Parameters are pulled from a [`ParamStore`] by name and memoized, so a
//! batch that runs the same block over many samples shares one leaf per
//! parameter and its gradient accumulates naturally.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use ndarray::{s, Array2, Axis};
use rand::Rng;

use crate::error::{EmoqError, Result};

pub type Mat = Array2<f64>;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Norm floor used by row-wise L2 normalization.
pub const L2_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// A named, optionally trainable parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Mat,
    pub trainable: bool,
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat, trainable: bool) {
        self.params.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| EmoqError::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| EmoqError::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn value(&self, name: &str) -> Result<&Mat> {
        self.get(name).map(|p| &p.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.params.remove(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Mark every parameter whose name starts with `prefix` as (non-)trainable.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    /// Move every entry of `other` into `self`, replacing same-named entries.
    pub fn merge(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    /// Copy of the entries whose names start with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }
}

#[derive(Debug, Clone)]
pub enum AttnMask {
    /// Per-column validity: column `j` may be attended iff `cols[j]`.
    Columns(Rc<Vec<bool>>),
    /// Lower-triangular mask for autoregressive decoding.
    Causal,
}

impl AttnMask {
    fn allowed(&self, i: usize, j: usize) -> bool {
        match self {
            AttnMask::Columns(cols) => cols[j],
            AttnMask::Causal => j <= i,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    MulConst(NodeId, Mat),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Softmax(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    Transpose(NodeId),
    GatherRows(NodeId, Vec<usize>),
    ReplaceRow {
        base: NodeId,
        pos: usize,
        row: NodeId,
    },
    MeanRows(NodeId, usize),
    L2NormalizeRows {
        x: NodeId,
        norms: Vec<f64>,
    },
    Sum(NodeId),
    /// Scalar produced by a fused kernel that already knows its gradients.
    Fused(Vec<(NodeId, Mat)>),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Gradients keyed by node, produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    params: Vec<(String, NodeId)>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Mat> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter leaf that took part in the graph.
    pub fn by_name(&self) -> BTreeMap<String, Mat> {
        self.params
            .iter()
            .filter_map(|(name, id)| self.get(*id).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

/// Reverse-mode tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_ids: HashMap<String, NodeId>,
    param_order: Vec<(String, NodeId)>,
}

fn dims(m: &Mat) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
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

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dim()
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    /// A constant input (never receives gradient).
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf that receives gradient (used by tests and probes).
    pub fn variable(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(id) = self.param_ids.get(name) {
            return Ok(*id);
        }
        let p = store.get(name)?;
        let id = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.param_ids.insert(name.to_string(), id);
        self.param_order.push((name.to_string(), id));
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(EmoqError::shape("matmul", format!("lhs cols = {}", vb.nrows()), dims(va)));
        }
        let v = va.dot(vb);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.ncols() {
            return Err(EmoqError::shape("matmul_nt", format!("rhs cols = {}", va.ncols()), dims(vb)));
        }
        let v = va.dot(&vb.t());
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMulNT(a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(EmoqError::shape("add", dims(va), dims(vb)));
        }
        let v = va + vb;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    /// Broadcast-add a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != va.ncols() {
            return Err(EmoqError::shape("add_row", format!("1x{}", va.ncols()), dims(vr)));
        }
        let v = va + vr;
        let rg = self.rg(&[a, row]);
        Ok(self.push(v, Op::AddRow(a, row), rg))
    }

    /// `x · w + b` with `w: in × out`, `b: 1 × out`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn mul_const(&mut self, a: NodeId, m: Mat) -> Result<NodeId> {
        let va = self.value(a);
        if va.dim() != m.dim() {
            return Err(EmoqError::shape("mul_const", dims(va), dims(&m)));
        }
        let v = va * &m;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::MulConst(a, m), rg))
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: NodeId, rate: f64, rng: &mut R) -> Result<NodeId> {
        if rate <= 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let (r, c) = self.shape(a);
        let mask = Mat::from_shape_fn((r, c), |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        self.mul_const(a, mask)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(gelu);
        let rg = self.rg(&[a]);
        self.push(v, Op::Gelu(a), rg)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 × n`).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let n = vx.ncols();
        for p in [gamma, beta] {
            let vp = self.value(p);
            if vp.dim() != (1, n) {
                return Err(EmoqError::shape("layer_norm", format!("1x{n}"), dims(vp)));
            }
        }
        let mut xhat = vx.clone();
        let mut inv_std = Vec::with_capacity(vx.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n as f64;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let v = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Row-wise softmax. Disallowed positions get exactly zero weight.
    pub fn softmax_rows(&mut self, x: NodeId, mask: Option<&AttnMask>) -> NodeId {
        let v = softmax_rows_masked(self.value(x), mask);
        let rg = self.rg(&[x]);
        self.push(v, Op::Softmax(x), rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| EmoqError::InvalidArgument("concat_rows of nothing".into()))?;
        let cols = self.value(*first).ncols();
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        if let Some(bad) = views.iter().find(|v| v.ncols() != cols) {
            return Err(EmoqError::shape("concat_rows", format!("{cols} cols"), format!("{} cols", bad.ncols())));
        }
        let v = ndarray::concatenate(Axis(0), &views).expect("checked widths");
        let rg = self.rg(parts);
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| EmoqError::InvalidArgument("concat_cols of nothing".into()))?;
        let rows = self.value(*first).nrows();
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        if let Some(bad) = views.iter().find(|v| v.nrows() != rows) {
            return Err(EmoqError::shape("concat_cols", format!("{rows} rows"), format!("{} rows", bad.nrows())));
        }
        let v = ndarray::concatenate(Axis(1), &views).expect("checked heights");
        let rg = self.rg(parts);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let vx = self.value(x);
        if start > end || end > vx.nrows() {
            return Err(EmoqError::shape("slice_rows", format!("range {start}..{end}"), dims(vx)));
        }
        let v = vx.slice(s![start..end, ..]).to_owned();
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::SliceRows(x, start), rg))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let vx = self.value(x);
        if start > end || end > vx.ncols() {
            return Err(EmoqError::shape("slice_cols", format!("range {start}..{end}"), dims(vx)));
        }
        let v = vx.slice(s![.., start..end]).to_owned();
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::SliceCols(x, start), rg))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).t().to_owned();
        let rg = self.rg(&[x]);
        self.push(v, Op::Transpose(x), rg)
    }

    /// Embedding lookup: rows of `table` at `indices`.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        if let Some(bad) = indices.iter().find(|&&i| i >= vt.nrows()) {
            return Err(EmoqError::shape("gather_rows", format!("index < {}", vt.nrows()), bad.to_string()));
        }
        let v = vt.select(Axis(0), indices);
        let rg = self.rg(&[table]);
        Ok(self.push(v, Op::GatherRows(table, indices.to_vec()), rg))
    }

    /// Copy of `base` with row `pos` replaced by the `1 × n` node `row`.
    pub fn replace_row(&mut self, base: NodeId, pos: usize, row: NodeId) -> Result<NodeId> {
        let (vb, vr) = (self.value(base), self.value(row));
        if pos >= vb.nrows() {
            return Err(EmoqError::InvalidArgument(format!(
                "replacement row {pos} out of range for {} rows",
                vb.nrows()
            )));
        }
        if vr.dim() != (1, vb.ncols()) {
            return Err(EmoqError::shape("replace_row", format!("1x{}", vb.ncols()), dims(vr)));
        }
        let mut v = vb.clone();
        v.row_mut(pos).assign(&vr.row(0));
        let rg = self.rg(&[base, row]);
        Ok(self.push(v, Op::ReplaceRow { base, pos, row }, rg))
    }

    /// Mean of the first `count` rows, as a `1 × n` row.
    pub fn mean_rows(&mut self, x: NodeId, count: usize) -> Result<NodeId> {
        let vx = self.value(x);
        if count == 0 || count > vx.nrows() {
            return Err(EmoqError::shape("mean_rows", format!("1..={} rows", vx.nrows()), count.to_string()));
        }
        let v = vx
            .slice(s![..count, ..])
            .sum_axis(Axis(0))
            .insert_axis(Axis(0))
            / count as f64;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::MeanRows(x, count), rg))
    }

    /// Divide every row by `max(‖row‖₂, L2_EPS)`.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let mut v = vx.clone();
        let mut norms = Vec::with_capacity(vx.nrows());
        for mut row in v.rows_mut() {
            let n = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            let d = n.max(L2_EPS);
            row.mapv_inplace(|a| a / d);
            norms.push(n);
        }
        let rg = self.rg(&[x]);
        self.push(v, Op::L2NormalizeRows { x, norms }, rg)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Mat::from_elem((1, 1), self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(v, Op::Sum(x), rg)
    }

    /// Register a scalar computed by a fused kernel together with the
    /// gradients of that scalar w.r.t. each input.
    pub fn fused_scalar(&mut self, value: f64, grads: Vec<(NodeId, Mat)>) -> Result<NodeId> {
        for (id, g) in &grads {
            if self.value(*id).dim() != g.dim() {
                return Err(EmoqError::shape("fused_scalar", dims(self.value(*id)), dims(g)));
            }
        }
        let ids: Vec<_> = grads.iter().map(|(id, _)| *id).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Mat::from_elem((1, 1), value), Op::Fused(grads), rg))
    }

    /// Back-propagate from the scalar node `out`.
    pub fn backward(&self, out: NodeId) -> Result<Gradients> {
        if self.value(out).dim() != (1, 1) {
            return Err(EmoqError::shape("backward", "1x1", dims(self.value(out))));
        }
        let mut grads: Vec<Option<Mat>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Mat::ones((1, 1)));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop_node(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(Gradients {
            grads,
            params: self.param_order.clone(),
        })
    }

    fn backprop_node(&self, node: &Node, gy: &Mat, grads: &mut [Option<Mat>]) {
        let mut acc = |id: NodeId, g: Mat| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, gy.dot(&vb.t()));
                acc(*b, va.t().dot(gy));
            }
            Op::MatMulNT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, gy.dot(vb));
                acc(*b, gy.t().dot(va));
            }
            Op::Add(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.clone());
            }
            Op::AddRow(a, row) => {
                acc(*a, gy.clone());
                acc(*row, gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, c) => acc(*a, gy * *c),
            Op::MulConst(a, m) => acc(*a, gy * m),
            Op::Gelu(a) => {
                let d = self.value(*a).mapv(gelu_grad);
                acc(*a, gy * &d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let g = self.value(*gamma);
                acc(*gamma, (gy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(*beta, gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                let dxhat = gy * g;
                let n = xhat.ncols() as f64;
                let mut dx = Mat::zeros(xhat.dim());
                for r in 0..xhat.nrows() {
                    let dh = dxhat.row(r);
                    let xh = xhat.row(r);
                    let mean_dh = dh.sum() / n;
                    let mean_dh_xh = dh.dot(&xh) / n;
                    for c in 0..xhat.ncols() {
                        dx[[r, c]] = inv_std[r] * (dh[c] - mean_dh - xh[c] * mean_dh_xh);
                    }
                }
                acc(*x, dx);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let mut dx = Mat::zeros(y.dim());
                for r in 0..y.nrows() {
                    let dot = y.row(r).dot(&gy.row(r));
                    for c in 0..y.ncols() {
                        dx[[r, c]] = y[[r, c]] * (gy[[r, c]] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.value(*p).nrows();
                    acc(*p, gy.slice(s![start..start + rows, ..]).to_owned());
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let cols = self.value(*p).ncols();
                    acc(*p, gy.slice(s![.., start..start + cols]).to_owned());
                    start += cols;
                }
            }
            Op::SliceRows(x, start) => {
                let mut dx = Mat::zeros(self.value(*x).dim());
                dx.slice_mut(s![*start..*start + gy.nrows(), ..]).assign(gy);
                acc(*x, dx);
            }
            Op::SliceCols(x, start) => {
                let mut dx = Mat::zeros(self.value(*x).dim());
                dx.slice_mut(s![.., *start..*start + gy.ncols()]).assign(gy);
                acc(*x, dx);
            }
            Op::Transpose(x) => acc(*x, gy.t().to_owned()),
            Op::GatherRows(table, indices) => {
                let mut dt = Mat::zeros(self.value(*table).dim());
                for (r, &i) in indices.iter().enumerate() {
                    let mut row = dt.row_mut(i);
                    row += &gy.row(r);
                }
                acc(*table, dt);
            }
            Op::ReplaceRow { base, pos, row } => {
                let mut db = gy.clone();
                db.row_mut(*pos).fill(0.0);
                acc(*base, db);
                acc(*row, gy.slice(s![*pos..*pos + 1, ..]).to_owned());
            }
            Op::MeanRows(x, count) => {
                let mut dx = Mat::zeros(self.value(*x).dim());
                let share = gy.row(0).mapv(|v| v / *count as f64);
                for r in 0..*count {
                    dx.row_mut(r).assign(&share);
                }
                acc(*x, dx);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut dx = Mat::zeros(y.dim());
                for r in 0..y.nrows() {
                    if norms[r] > L2_EPS {
                        let dot = y.row(r).dot(&gy.row(r));
                        for c in 0..y.ncols() {
                            dx[[r, c]] = (gy[[r, c]] - y[[r, c]] * dot) / norms[r];
                        }
                    } else {
                        for c in 0..y.ncols() {
                            dx[[r, c]] = gy[[r, c]] / L2_EPS;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Sum(x) => {
                let g = gy[[0, 0]];
                acc(*x, Mat::from_elem(self.value(*x).dim(), g));
            }
            Op::Fused(parts) => {
                let g = gy[[0, 0]];
                for (id, local) in parts {
                    acc(*id, local * g);
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stable row softmax; masked entries are exactly zero.
pub fn softmax_rows_masked(x: &Mat, mask: Option<&AttnMask>) -> Mat {
    let mut out = Mat::zeros(x.dim());
    for r in 0..x.nrows() {
        let allowed = |c: usize| mask.map_or(true, |m| m.allowed(r, c));
        let max = (0..x.ncols())
            .filter(|&c| allowed(c))
            .map(|c| x[[r, c]])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for c in 0..x.ncols() {
            if allowed(c) {
                let e = (x[[r, c]] - max).exp();
                out[[r, c]] = e;
                total += e;
            }
        }
        out.row_mut(r).mapv_inplace(|v| v / total);
    }
    out
}

/// Softmax of a plain slice.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Numerically stable `ln Σ exp(values)`.
pub fn log_sum_exp(values: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.into_iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(f: impl Fn(&Mat) -> f64, x: &Mat) -> Mat {
        let h = 1e-6;
        let mut g = Mat::zeros(x.dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            xp[[r, c]] += h;
            xm[[r, c]] -= h;
            g[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn close(a: &Mat, b: &Mat, tol: f64) -> bool {
        let diff = (a - b).mapv(|v| v * v).sum().sqrt();
        let scale = a.mapv(|v| v * v).sum().sqrt().max(b.mapv(|v| v * v).sum().sqrt()).max(1e-12);
        diff / scale < tol
    }

    #[test]
    fn layer_norm_gelu_softmax_gradients() {
        let x0 = array![[0.3, -1.2, 0.7], [1.5, 0.1, -0.4]];
        let build = |x: &Mat| -> (Graph, NodeId, NodeId) {
            let mut g = Graph::new();
            let xi = g.variable(x.clone());
            let gamma = g.constant(array![[1.1, 0.9, 1.3]]);
            let beta = g.constant(array![[0.1, -0.2, 0.05]]);
            let ln = g.layer_norm(xi, gamma, beta).unwrap();
            let ge = g.gelu(ln);
            let mask = AttnMask::Columns(Rc::new(vec![true, false, true]));
            let sm = g.softmax_rows(ge, Some(&mask));
            let w = g.constant(array![[1.0, 2.0], [3.0, -1.0], [0.5, 0.25]]);
            let y = g.matmul(sm, w).unwrap();
            let out = g.sum(y);
            (g, xi, out)
        };
        let (g, xi, out) = build(&x0);
        let grads = g.backward(out).unwrap();
        let analytic = grads.get(xi).unwrap().clone();
        let numeric = numeric_grad(
            |x| {
                let (g, _, out) = build(x);
                g.scalar(out)
            },
            &x0,
        );
        assert!(close(&analytic, &numeric, 1e-6), "{analytic:?} vs {numeric:?}");
    }

    #[test]
    fn structural_op_gradients() {
        let x0 = array![[0.3, -1.2], [1.5, 0.1], [0.2, 0.9]];
        let build = |x: &Mat| -> (Graph, NodeId, NodeId) {
            let mut g = Graph::new();
            let xi = g.variable(x.clone());
            let top = g.slice_rows(xi, 0, 2).unwrap();
            let t = g.transpose(top);
            let cat = g.concat_cols(&[t, t]).unwrap();
            let left = g.slice_cols(cat, 1, 3).unwrap();
            let row = g.mean_rows(xi, 2).unwrap();
            let rep = g.replace_row(xi, 2, row).unwrap();
            let gathered = g.gather_rows(rep, &[2, 0, 2]).unwrap();
            let normed = g.l2_normalize_rows(gathered);
            let prod = g.matmul_nt(normed, left).unwrap();
            let out = g.sum(prod);
            (g, xi, out)
        };
        let (g, xi, out) = build(&x0);
        let grads = g.backward(out).unwrap();
        let numeric = numeric_grad(
            |x| {
                let (g, _, out) = build(x);
                g.scalar(out)
            },
            &x0,
        );
        assert!(close(grads.get(xi).unwrap(), &numeric, 1e-6));
    }

    #[test]
    fn masked_softmax_is_exactly_zero() {
        let x = array![[1.0, 1e300, -3.0]];
        let mask = AttnMask::Columns(Rc::new(vec![true, false, true]));
        let y = softmax_rows_masked(&x, Some(&mask));
        assert_eq!(y[[0, 1]], 0.0);
        assert!((y.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn causal_mask_blocks_future() {
        let y = softmax_rows_masked(&Mat::zeros((3, 3)), Some(&AttnMask::Causal));
        assert_eq!(y[[0, 1]], 0.0);
        assert_eq!(y[[1, 2]], 0.0);
        assert!((y[[2, 0]] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn params_are_memoized_and_accumulate() {
        let mut store = ParamStore::new();
        store.insert("w", array![[2.0]], true);
        let mut g = Graph::new();
        let a = g.param(&store, "w").unwrap();
        let b = g.param(&store, "w").unwrap();
        assert_eq!(a, b);
        let y = g.matmul(a, b).unwrap();
        let out = g.sum(y);
        let grads = g.backward(out).unwrap().by_name();
        assert_eq!(grads["w"][[0, 0]], 4.0);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", array![[2.0]], false);
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let x = g.variable(array![[3.0]]);
        let y = g.matmul(x, w).unwrap();
        let out = g.sum(y);
        let grads = g.backward(out).unwrap();
        assert!(grads.by_name().is_empty());
        assert_eq!(grads.get(x).unwrap()[[0, 0]], 2.0);
    }
}
