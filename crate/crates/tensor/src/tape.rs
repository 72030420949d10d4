//! Reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the node
//! list visits every node after all of its consumers. Constant subgraphs are
//! tracked with a `needs_grad` bit and skipped during the sweep.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{shape_err, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_a_bt_into, matmul_at_b_into, matmul_into};
use crate::{Result, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Precomputed sparse linear read-out from a table (hash-grid lookups).
///
/// Output element `[r, g * F + f]` equals
/// `sum_t weights[(r, g, t)] * table[indices[(r, g, t)], f]` where `F` is the
/// table width.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGatherPlan {
    pub rows: usize,
    pub groups: usize,
    pub taps: usize,
    pub indices: Vec<u32>,
    pub weights: Vec<f32>,
}

impl SparseGatherPlan {
    fn validate(&self, table_rows: usize) -> Result<()> {
        let n = self.rows * self.groups * self.taps;
        if self.indices.len() != n || self.weights.len() != n {
            return Err(shape_err("sparse_gather", format!("{n} taps"), self.indices.len()));
        }
        if let Some(&bad) = self.indices.iter().find(|&&i| i as usize >= table_rows) {
            return Err(shape_err("sparse_gather", format!("index < {table_rows}"), bad));
        }
        Ok(())
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddConst(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Arc<[usize]>),
    SegmentWeightedSum(Var, Arc<[f32]>),
    ColMax(Var, Vec<usize>),
    BroadcastRows(Var),
    NormalizeRows(Var, Vec<f32>),
    SparseGather(Var, Arc<SparseGatherPlan>),
    Custom(Vec<Var>, Vec<Tensor>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for later differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.params.contains_key(&id)
    }

    /// Gradient of the root with respect to any recorded value that took part
    /// in the differentiable part of the graph.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.nodes.get(var.0).and_then(|g| g.as_ref())
    }
}

const NORM_FLOOR: f32 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// Records a leaf. It receives a gradient only if `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let needs = value.requires_grad();
        self.push(value, Op::Leaf, needs)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value.with_requires_grad(false), Op::Leaf, false)
    }

    /// Snapshots a parameter onto the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, k] = self.shape(a);
        let [k2, m] = self.shape(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dimension {k}"), k2));
        }
        let mut out = vec![0.0; n * m];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(n, m, out)?, Op::MatMul(a, b), needs))
    }

    /// `a[n x m] + bias[1 x m]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let [n, m] = self.shape(a);
        if self.shape(bias) != [1, m] {
            return Err(shape_err("add_row", format!("[1, {m}]"), format!("{:?}", self.shape(bias))));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(m.max(1)) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(Tensor::new(n, m, out)?, Op::AddRow(a, bias), needs))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, format!("{:?}", self.shape(a)), format!("{:?}", self.shape(b))));
        }
        let [n, m] = self.shape(a);
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(n, m, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), needs))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let [n, m] = self.shape(a);
        let out = self.value(a).data().iter().map(|&x| f(x)).collect();
        Tensor::new(n, m, out).expect("same shape")
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let t = self.unary(a, |x| x * s);
        let needs = self.needs(a);
        self.push(t, Op::Scale(a, s), needs)
    }

    /// Adds a constant tensor of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(shape_err("add_const", format!("{:?}", self.shape(a)), format!("{:?}", c.shape())));
        }
        let [n, m] = self.shape(a);
        let out = self.value(a).data().iter().zip(c.data()).map(|(&x, &y)| x + y).collect();
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(n, m, out)?, Op::AddConst(a), needs))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| x.max(0.0));
        let needs = self.needs(a);
        self.push(t, Op::Relu(a), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.unary(a, sigmoid);
        let needs = self.needs(a);
        self.push(t, Op::Sigmoid(a), needs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.unary(a, f32::exp);
        let needs = self.needs(a);
        self.push(t, Op::Exp(a), needs)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.unary(a, f32::abs);
        let needs = self.needs(a);
        self.push(t, Op::Abs(a), needs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| x * x);
        let needs = self.needs(a);
        self.push(t, Op::Square(a), needs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|&x| x as f64).sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s as f32), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: f64 = v.data().iter().map(|&x| x as f64).sum();
        let mean = if v.is_empty() { 0.0 } else { s / v.len() as f64 };
        let needs = self.needs(a);
        self.push(Tensor::scalar(mean as f32), Op::Mean(a), needs)
    }

    /// Horizontal concatenation of tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Invalid("concat_cols of nothing".into()));
        };
        let n = self.shape(first)[0];
        let mut total = 0;
        for &p in parts {
            let [r, c] = self.shape(p);
            if r != n {
                return Err(shape_err("concat_cols", format!("{n} rows"), r));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(n, total, out)?, Op::ConcatCols(parts.to_vec()), needs))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let [n, m] = self.shape(a);
        if start > end || end > m {
            return Err(shape_err("slice_cols", format!("range within 0..{m}"), format!("{start}..{end}")));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(n * (end - start));
        for r in 0..n {
            out.extend_from_slice(&src.row_slice(r)[start..end]);
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(n, end - start, out)?, Op::SliceCols(a, start), needs))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let [n, m] = self.shape(a);
        if start > end || end > n {
            return Err(shape_err("slice_rows", format!("range within 0..{n}"), format!("{start}..{end}")));
        }
        let out = self.value(a).data()[start * m..end * m].to_vec();
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(end - start, m, out)?, Op::SliceRows(a, start), needs))
    }

    /// Output row `r` is input row `index[r]`.
    pub fn gather_rows(&mut self, a: Var, index: Arc<[usize]>) -> Result<Var> {
        let [n, m] = self.shape(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(shape_err("gather_rows", format!("row index < {n}"), bad));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(index.len() * m);
        for &i in index.iter() {
            out.extend_from_slice(src.row_slice(i));
        }
        let needs = self.needs(a);
        let rows = index.len();
        Ok(self.push(Tensor::new(rows, m, out)?, Op::GatherRows(a, index), needs))
    }

    /// Groups consecutive blocks of `k` rows and returns their weighted sums:
    /// `out[i] = sum_j weights[i*k + j] * a[i*k + j]`, with `k = weights.len() / out_rows`.
    pub fn segment_weighted_sum(&mut self, a: Var, weights: Arc<[f32]>, k: usize) -> Result<Var> {
        let [n, m] = self.shape(a);
        if k == 0 || n % k != 0 || weights.len() != n {
            return Err(shape_err("segment_weighted_sum", format!("{n} weights in groups of {k}"), weights.len()));
        }
        let src = self.value(a);
        let groups = n / k;
        let mut out = vec![0.0f32; groups * m];
        for g in 0..groups {
            let orow = &mut out[g * m..(g + 1) * m];
            for j in 0..k {
                let r = g * k + j;
                let w = weights[r];
                for (o, &x) in orow.iter_mut().zip(src.row_slice(r)) {
                    *o += w * x;
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(groups, m, out)?, Op::SegmentWeightedSum(a, weights), needs))
    }

    /// Channel-wise maximum over rows, `[n x m] -> [1 x m]`. The subgradient is
    /// routed to the first row attaining the maximum.
    pub fn col_max(&mut self, a: Var) -> Result<Var> {
        let [n, m] = self.shape(a);
        if n == 0 {
            return Err(shape_err("col_max", "at least one row", 0));
        }
        let src = self.value(a);
        let mut best = src.row_slice(0).to_vec();
        let mut arg = vec![0usize; m];
        for r in 1..n {
            for (c, &x) in src.row_slice(r).iter().enumerate() {
                if x > best[c] {
                    best[c] = x;
                    arg[c] = r;
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::row(best), Op::ColMax(a, arg), needs))
    }

    /// Repeats a `[1 x m]` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let [r, m] = self.shape(a);
        if r != 1 {
            return Err(shape_err("broadcast_rows", "1 row", r));
        }
        let row = self.value(a).data().to_vec();
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(&row);
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(n, m, out)?, Op::BroadcastRows(a), needs))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let [n, m] = self.shape(a);
        let src = self.value(a);
        let mut norms = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * m);
        for r in 0..n {
            let row = src.row_slice(r);
            let norm = row.iter().map(|x| x * x).sum::<f32>().sqrt().max(NORM_FLOOR);
            norms.push(norm);
            out.extend(row.iter().map(|x| x / norm));
        }
        let needs = self.needs(a);
        self.push(Tensor::new(n, m, out).expect("same shape"), Op::NormalizeRows(a, norms), needs)
    }

    pub fn sparse_gather(&mut self, table: Var, plan: Arc<SparseGatherPlan>) -> Result<Var> {
        let [t, f] = self.shape(table);
        plan.validate(t)?;
        let src = self.value(table).data();
        let mut out = vec![0.0f32; plan.rows * plan.groups * f];
        let mut e = 0;
        for r in 0..plan.rows {
            for g in 0..plan.groups {
                let o = &mut out[(r * plan.groups + g) * f..(r * plan.groups + g + 1) * f];
                for _ in 0..plan.taps {
                    let idx = plan.indices[e] as usize;
                    let w = plan.weights[e];
                    e += 1;
                    for (ov, &tv) in o.iter_mut().zip(&src[idx * f..(idx + 1) * f]) {
                        *ov += w * tv;
                    }
                }
            }
        }
        let needs = self.needs(table);
        let (rows, cols) = (plan.rows, plan.groups * f);
        Ok(self.push(Tensor::new(rows, cols, out)?, Op::SparseGather(table, plan), needs))
    }

    /// Scalar node computed outside the tape, together with its gradients
    /// with respect to `inputs` (used for the rasterizer + image loss).
    pub fn custom_scalar(&mut self, inputs: &[Var], value: f32, grads: Vec<Tensor>) -> Result<Var> {
        if inputs.len() != grads.len() {
            return Err(shape_err("custom_scalar", format!("{} gradients", inputs.len()), grads.len()));
        }
        for (&v, g) in inputs.iter().zip(&grads) {
            if self.shape(v) != g.shape() {
                return Err(shape_err("custom_scalar", format!("{:?}", self.shape(v)), format!("{:?}", g.shape())));
            }
        }
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(Tensor::scalar(value), Op::Custom(inputs.to_vec(), grads), needs))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(TensorError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        let mut params: BTreeMap<ParamId, Tensor> = BTreeMap::new();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            if let Op::Param(id) = node.op {
                let [r, c] = node.value.shape();
                match params.get_mut(&id) {
                    Some(acc) => {
                        for (a, &x) in acc.data_mut().iter_mut().zip(&g) {
                            *a += x;
                        }
                    }
                    None => {
                        params.insert(id, Tensor::new(r, c, g.clone())?);
                    }
                }
            }
            grads[idx] = Some(g);
        }

        let nodes = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.map(|g| {
                    let [r, c] = n.value.shape();
                    Tensor::new(r, c, g).expect("gradient shape matches value")
                })
            })
            .collect();
        Ok(Gradients { params, nodes })
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            let n = &self.nodes[v.0];
            if !n.needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let [n, k] = val(*a).shape();
                let m = val(*b).cols();
                let bv = val(*b).data();
                let av = val(*a).data();
                acc(*a, &mut |ga| matmul_a_bt_into(g, bv, ga, n, k, m));
                acc(*b, &mut |gb| matmul_at_b_into(av, g, gb, n, k, m));
            }
            Op::AddRow(a, b) => {
                let m = val(*a).cols();
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for row in g.chunks(m.max(1)) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (x, &y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| {
                    for ((x, &gy), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gy * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, &gy), &y) in gb.iter_mut().zip(g).zip(av) {
                        *x += gy * y;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| {
                for (x, &gy) in ga.iter_mut().zip(g) {
                    *x += gy * s;
                }
            }),
            Op::AddConst(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Relu(a) => {
                let av = val(*a).data();
                acc(*a, &mut |ga| {
                    for ((x, &gy), &v) in ga.iter_mut().zip(g).zip(av) {
                        if v > 0.0 {
                            *x += gy;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, &mut |ga| {
                    for ((x, &gy), &s) in ga.iter_mut().zip(g).zip(y) {
                        *x += gy * s * (1.0 - s);
                    }
                });
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, &mut |ga| {
                    for ((x, &gy), &e) in ga.iter_mut().zip(g).zip(y) {
                        *x += gy * e;
                    }
                });
            }
            Op::Abs(a) => {
                let av = val(*a).data();
                acc(*a, &mut |ga| {
                    for ((x, &gy), &v) in ga.iter_mut().zip(g).zip(av) {
                        if v > 0.0 {
                            *x += gy;
                        } else if v < 0.0 {
                            *x -= gy;
                        }
                    }
                });
            }
            Op::Square(a) => {
                let av = val(*a).data();
                acc(*a, &mut |ga| {
                    for ((x, &gy), &v) in ga.iter_mut().zip(g).zip(av) {
                        *x += 2.0 * v * gy;
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }),
            Op::Mean(a) => {
                let n = val(*a).len().max(1) as f32;
                acc(*a, &mut |ga| {
                    for x in ga.iter_mut() {
                        *x += g[0] / n;
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let n = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).cols();
                    acc(p, &mut |gp| {
                        for r in 0..n {
                            add_into(&mut gp[r * c..(r + 1) * c], &g[r * total + offset..r * total + offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::SliceCols(a, start) => {
                let m = val(*a).cols();
                let w = node.value.cols();
                let n = node.value.rows();
                acc(*a, &mut |ga| {
                    for r in 0..n {
                        add_into(&mut ga[r * m + start..r * m + start + w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let m = val(*a).cols();
                acc(*a, &mut |ga| add_into(&mut ga[start * m..start * m + g.len()], g));
            }
            Op::GatherRows(a, index) => {
                let m = val(*a).cols();
                acc(*a, &mut |ga| {
                    for (r, &i) in index.iter().enumerate() {
                        add_into(&mut ga[i * m..(i + 1) * m], &g[r * m..(r + 1) * m]);
                    }
                });
            }
            Op::SegmentWeightedSum(a, weights) => {
                let m = val(*a).cols();
                let groups = node.value.rows();
                let k = weights.len() / groups.max(1);
                acc(*a, &mut |ga| {
                    for (r, &w) in weights.iter().enumerate() {
                        let grow = &g[(r / k) * m..(r / k + 1) * m];
                        for (x, &gy) in ga[r * m..(r + 1) * m].iter_mut().zip(grow) {
                            *x += w * gy;
                        }
                    }
                });
            }
            Op::ColMax(a, arg) => {
                let m = val(*a).cols();
                acc(*a, &mut |ga| {
                    for (c, &r) in arg.iter().enumerate() {
                        ga[r * m + c] += g[c];
                    }
                });
            }
            Op::BroadcastRows(a) => {
                let m = val(*a).cols();
                acc(*a, &mut |ga| {
                    for row in g.chunks(m.max(1)) {
                        add_into(ga, row);
                    }
                });
            }
            Op::NormalizeRows(a, norms) => {
                let m = val(*a).cols();
                let y = node.value.data();
                acc(*a, &mut |ga| {
                    for (r, &norm) in norms.iter().enumerate() {
                        let yr = &y[r * m..(r + 1) * m];
                        let gr = &g[r * m..(r + 1) * m];
                        let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((x, &gy), &yy) in ga[r * m..(r + 1) * m].iter_mut().zip(gr).zip(yr) {
                            *x += (gy - yy * dot) / norm;
                        }
                    }
                });
            }
            Op::SparseGather(table, plan) => {
                let f = val(*table).cols();
                acc(*table, &mut |gt| {
                    let mut e = 0;
                    for r in 0..plan.rows {
                        for gi in 0..plan.groups {
                            let go = &g[(r * plan.groups + gi) * f..(r * plan.groups + gi + 1) * f];
                            for _ in 0..plan.taps {
                                let idx = plan.indices[e] as usize;
                                let w = plan.weights[e];
                                e += 1;
                                for (x, &gy) in gt[idx * f..(idx + 1) * f].iter_mut().zip(go) {
                                    *x += w * gy;
                                }
                            }
                        }
                    }
                });
            }
            Op::Custom(inputs, local) => {
                for (&v, lg) in inputs.iter().zip(local) {
                    acc(v, &mut |gv| {
                        for (x, &d) in gv.iter_mut().zip(lg.data()) {
                            *x += g[0] * d;
                        }
                    });
                }
            }
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
