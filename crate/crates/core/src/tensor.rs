//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every tensor created during one forward pass and records
//! the primitive op that produced it. [`Tape::backward`] replays the record in
//! exact reverse execution order, accumulating adjoints, and adds the result
//! into the persistent `grad` buffer of every `requires_grad` leaf. Running
//! backward twice without clearing doubles the leaf gradients.
//!
//! Tensors are row-major flat `Vec<f64>` plus an explicit shape. There is no
//! general broadcasting; row/column broadcasts are dedicated ops
//! ([`Tape::add_row`], [`Tape::add_col`]) so every kernel stays small and
//! checkable. All ops are deterministic: identical inputs and parameters give
//! bit-identical outputs regardless of the parallel feature.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels;

/// Handle to a tensor on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Minimum row norm accepted by L2 normalization; anything smaller is treated
/// as a zero vector and rejected (a zero embedding indicates an upstream bug).
const MIN_L2_NORM: f64 = 1e-100;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId, f64),
    MatMul { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    Transpose(TensorId),
    AddRow { x: TensorId, v: TensorId },
    AddCol { x: TensorId, v: TensorId },
    Exp(TensorId),
    Ln(TensorId),
    Sqrt(TensorId),
    Relu(TensorId),
    Gelu(TensorId),
    SumAll(TensorId),
    MeanAll(TensorId),
    SumRows(TensorId),
    Softmax(TensorId),
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    L2NormRows(TensorId),
    ConcatRows(Vec<TensorId>),
    ConcatCols(Vec<TensorId>),
    SliceRows { x: TensorId, start: usize },
    SliceCols { x: TensorId, start: usize },
    Embedding { table: TensorId, ids: Vec<usize> },
    Reshape(TensorId),
}

struct Node {
    data: Arc<Vec<f64>>,
    shape: Vec<usize>,
    /// Leaf the caller wants gradients accumulated on.
    requires_grad: bool,
    /// True when any requires_grad leaf is reachable below this node.
    needs_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Append-only computation record.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// View any tensor as (rows, cols) over its last axis.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.last() {
        Some(&c) => (numel(shape) / c.max(1), c),
        None => (1, 1),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── Leaves ───────────────────────────────────────────────────────

    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        self.leaf_shared(Arc::new(data), shape, requires_grad)
    }

    /// Register a leaf that shares its storage with the caller (parameters).
    pub fn leaf_shared(
        &mut self,
        data: Arc<Vec<f64>>,
        shape: Vec<usize>,
        requires_grad: bool,
    ) -> Result<TensorId> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape { op: "leaf", lhs: shape, rhs: vec![data.len()] });
        }
        Ok(self.push(data, shape, requires_grad, requires_grad, Op::Leaf))
    }

    /// Leaf that never receives gradients (masks, targets, inputs).
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.leaf(vec![v], vec![1], false).expect("scalar leaf")
    }

    fn push(
        &mut self,
        data: Arc<Vec<f64>>,
        shape: Vec<usize>,
        requires_grad: bool,
        needs_grad: bool,
        op: Op,
    ) -> TensorId {
        self.nodes.push(Node { data, shape, requires_grad, needs_grad, grad: None, op });
        TensorId(self.nodes.len() - 1)
    }

    fn out(&mut self, data: Vec<f64>, shape: Vec<usize>, inputs: &[TensorId], op: Op) -> TensorId {
        let needs = inputs.iter().any(|id| self.nodes[id.0].needs_grad);
        self.push(Arc::new(data), shape, false, needs, op)
    }

    // ── Accessors ────────────────────────────────────────────────────

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Value of a single-element tensor.
    pub fn value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(numel(&self.nodes[id.0].shape), 1);
        self.nodes[id.0].data[0]
    }

    pub fn clear_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn shapes_of(&self, a: TensorId, b: TensorId) -> (Vec<usize>, Vec<usize>) {
        (self.nodes[a.0].shape.clone(), self.nodes[b.0].shape.clone())
    }

    fn check_same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            let (lhs, rhs) = self.shapes_of(a, b);
            return Err(Error::Shape { op, lhs, rhs });
        }
        Ok(())
    }

    // ── Elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("add", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x + y);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.out(data, shape, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("sub", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x - y);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.out(data, shape, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("mul", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x * y);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.out(data, shape, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let data = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.out(data, shape, &[a], Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let data = self.data(a).iter().map(|x| x + c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.out(data, shape, &[a], Op::AddScalar(a, c))
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let data = self.data(a).iter().map(|x| x.exp()).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.out(data, shape, &[a], Op::Exp(a))
    }

    pub fn ln(&mut self, a: TensorId) -> TensorId {
        let data = self.data(a).iter().map(|x| x.ln()).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.out(data, shape, &[a], Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: TensorId) -> TensorId {
        let data = self.data(a).iter().map(|x| x.sqrt()).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.out(data, shape, &[a], Op::Sqrt(a))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data = self.data(a).iter().map(|x| x.max(0.0)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.out(data, shape, &[a], Op::Relu(a))
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let data = self.data(a).iter().map(|&x| gelu_fwd(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.out(data, shape, &[a], Op::Gelu(a))
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = self.shapes_of(a, b);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.data(a), self.data(b), m, k, n);
        Ok(self.out(data, vec![m, n], &[a, b], Op::MatMul { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.nodes[a.0].shape.clone();
        if sa.len() != 2 {
            return Err(Error::Shape { op: "transpose", lhs: sa, rhs: vec![] });
        }
        let data = kernels::transpose(self.data(a), sa[0], sa[1]);
        Ok(self.out(data, vec![sa[1], sa[0]], &[a], Op::Transpose(a)))
    }

    /// Broadcast-add a `[c]` vector to every row of `x` (last axis `c`).
    pub fn add_row(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        let (sx, sv) = self.shapes_of(x, v);
        let (_, c) = rows_cols(&sx);
        if sv.len() != 1 || sv[0] != c {
            return Err(Error::Shape { op: "add_row", lhs: sx, rhs: sv });
        }
        let vd = self.data(v).to_vec();
        let data: Vec<f64> = self
            .data(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(&vd).map(|(a, b)| a + b).collect::<Vec<_>>())
            .collect();
        Ok(self.out(data, sx, &[x, v], Op::AddRow { x, v }))
    }

    /// Add `v[i]` to every element of row `i` of a 2-D `x`.
    pub fn add_col(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        let (sx, sv) = self.shapes_of(x, v);
        let (r, c) = rows_cols(&sx);
        if sv.len() != 1 || sv[0] != r {
            return Err(Error::Shape { op: "add_col", lhs: sx, rhs: sv });
        }
        let vd = self.data(v).to_vec();
        let mut data = self.data(x).to_vec();
        for (i, row) in data.chunks_mut(c).enumerate() {
            for e in row.iter_mut() {
                *e += vd[i];
            }
        }
        Ok(self.out(data, sx, &[x, v], Op::AddCol { x, v }))
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.data(a).iter().sum();
        self.out(vec![s], vec![1], &[a], Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.data(a).len().max(1) as f64;
        let s: f64 = self.data(a).iter().sum();
        self.out(vec![s / n], vec![1], &[a], Op::MeanAll(a))
    }

    /// Sum over the last axis: `[r×c] → [r]`.
    pub fn sum_rows(&mut self, a: TensorId) -> TensorId {
        let (r, c) = rows_cols(&self.nodes[a.0].shape);
        let data: Vec<f64> = self.data(a).chunks(c).map(|row| row.iter().sum()).collect();
        let _ = r;
        let shape = vec![data.len()];
        self.out(data, shape, &[a], Op::SumRows(a))
    }

    // ── Normalizations ───────────────────────────────────────────────

    /// Softmax over the last axis, stabilized by per-row max subtraction.
    /// NaN rows propagate NaN.
    pub fn softmax(&mut self, a: TensorId) -> TensorId {
        let (_, c) = rows_cols(&self.nodes[a.0].shape);
        let mut data = self.data(a).to_vec();
        for row in data.chunks_mut(c) {
            softmax_row(row);
        }
        let shape = self.nodes[a.0].shape.clone();
        self.out(data, shape, &[a], Op::Softmax(a))
    }

    /// Per-row standardization over the last axis followed by affine
    /// `gamma`/`beta` of length `c`.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> Result<TensorId> {
        let sx = self.nodes[x.0].shape.clone();
        let (_, c) = rows_cols(&sx);
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            let sp = &self.nodes[p.0].shape;
            if sp.len() != 1 || sp[0] != c {
                let _ = name;
                return Err(Error::Shape { op: "layer_norm", lhs: sx, rhs: sp.clone() });
            }
        }
        let g = self.data(gamma).to_vec();
        let b = self.data(beta).to_vec();
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g[j] + b[j];
            }
        }
        Ok(self.out(data, sx, &[x, gamma, beta], Op::LayerNorm { x, gamma, beta, eps }))
    }

    /// Scale every row to unit L2 norm. A (near-)zero row is an error: zero
    /// embeddings indicate a bug upstream, not a case to smooth over.
    pub fn l2_normalize_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (_, c) = rows_cols(&self.nodes[a.0].shape);
        let mut data = self.data(a).to_vec();
        for (i, row) in data.chunks_mut(c).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > MIN_L2_NORM) {
                return Err(Error::Contract(format!(
                    "l2_normalize: row {i} has zero (or non-finite) norm {norm}"
                )));
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.out(data, shape, &[a], Op::L2NormRows(a)))
    }

    // ── Shape ops ────────────────────────────────────────────────────

    pub fn reshape(&mut self, a: TensorId, new_shape: Vec<usize>) -> Result<TensorId> {
        if numel(&new_shape) != self.data(a).len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: new_shape,
            });
        }
        let data = self.data(a).to_vec();
        Ok(self.out(data, new_shape, &[a], Op::Reshape(a)))
    }

    /// Stack 2-D blocks with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows: no inputs".into()));
        }
        let c = self.cols_2d("concat_rows", parts[0])?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let cp = self.cols_2d("concat_rows", p)?;
            if cp != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            rows += self.nodes[p.0].shape[0];
            data.extend_from_slice(self.data(p));
        }
        Ok(self.out(data, vec![rows, c], parts, Op::ConcatRows(parts.to_vec())))
    }

    /// Concatenate 2-D blocks with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols: no inputs".into()));
        }
        let r = self.rows_2d("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.rows_2d("concat_cols", p)? != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            widths.push(self.nodes[p.0].shape[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.data(p);
            for i in 0..r {
                data[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        Ok(self.out(data, vec![r, total], parts, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let sx = self.nodes[x.0].shape.clone();
        if sx.len() != 2 || start + len > sx[0] {
            return Err(Error::Shape { op: "slice_rows", lhs: sx, rhs: vec![start, len] });
        }
        let c = sx[1];
        let data = self.data(x)[start * c..(start + len) * c].to_vec();
        Ok(self.out(data, vec![len, c], &[x], Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let sx = self.nodes[x.0].shape.clone();
        if sx.len() != 2 || start + len > sx[1] {
            return Err(Error::Shape { op: "slice_cols", lhs: sx, rhs: vec![start, len] });
        }
        let (r, c) = (sx[0], sx[1]);
        let src = self.data(x);
        let mut data = vec![0.0; r * len];
        for i in 0..r {
            data[i * len..(i + 1) * len].copy_from_slice(&src[i * c + start..i * c + start + len]);
        }
        Ok(self.out(data, vec![r, len], &[x], Op::SliceCols { x, start }))
    }

    /// Gather rows of `table` by index; backward scatter-adds into the table.
    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let st = self.nodes[table.0].shape.clone();
        if st.len() != 2 {
            return Err(Error::Shape { op: "embedding", lhs: st, rhs: vec![ids.len()] });
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!("embedding index {bad} out of range 0..{v}")));
        }
        let src = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.out(data, vec![ids.len(), d], &[table], Op::Embedding { table, ids: ids.to_vec() }))
    }

    fn cols_2d(&self, op: &'static str, t: TensorId) -> Result<usize> {
        let s = &self.nodes[t.0].shape;
        if s.len() != 2 {
            return Err(Error::Shape { op, lhs: s.clone(), rhs: vec![] });
        }
        Ok(s[1])
    }

    fn rows_2d(&self, op: &'static str, t: TensorId) -> Result<usize> {
        let s = &self.nodes[t.0].shape;
        if s.len() != 2 {
            return Err(Error::Shape { op, lhs: s.clone(), rhs: vec![] });
        }
        Ok(s[0])
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss (seeded with 1).
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if numel(&self.nodes[loss.0].shape) != 1 {
            return Err(Error::Contract(format!(
                "backward: output must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.backward_seeded(&[(loss, vec![1.0])])
    }

    /// Reverse sweep seeded with explicit adjoints at arbitrary nodes. Used to
    /// continue a backward pass that started on another tape (batch losses
    /// over per-sample descriptor graphs).
    pub fn backward_seeded(&mut self, seeds: &[(TensorId, Vec<f64>)]) -> Result<()> {
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut max_seed = 0usize;
        for (id, g) in seeds {
            if g.len() != self.nodes[id.0].data.len() {
                return Err(Error::Shape {
                    op: "backward_seeded",
                    lhs: self.nodes[id.0].shape.clone(),
                    rhs: vec![g.len()],
                });
            }
            accumulate(&mut adj[id.0], g, g.len());
            max_seed = max_seed.max(id.0);
        }

        for i in (0..=max_seed).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            if self.nodes[i].requires_grad {
                let target = self.nodes[i].grad.get_or_insert_with(|| vec![0.0; g.len()]);
                for (t, s) in target.iter_mut().zip(&g) {
                    *t += s;
                }
            }
        }
        Ok(())
    }

    fn wants(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&mut self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}

            Op::Add(a, b) => {
                if self.wants(a) {
                    accumulate(&mut adj[a.0], g, g.len());
                }
                if self.wants(b) {
                    accumulate(&mut adj[b.0], g, g.len());
                }
            }

            Op::Sub(a, b) => {
                if self.wants(a) {
                    accumulate(&mut adj[a.0], g, g.len());
                }
                if self.wants(b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut adj[b.0], &neg, neg.len());
                }
            }

            Op::Mul(a, b) => {
                if self.wants(a) {
                    let da = zip_map(g, self.data(b), |gv, bv| gv * bv);
                    accumulate(&mut adj[a.0], &da, da.len());
                }
                if self.wants(b) {
                    let db = zip_map(g, self.data(a), |gv, av| gv * av);
                    accumulate(&mut adj[b.0], &db, db.len());
                }
            }

            Op::Scale(a, c) => {
                if self.wants(a) {
                    let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                    accumulate(&mut adj[a.0], &da, da.len());
                }
            }

            Op::AddScalar(a, _) | Op::Reshape(a) => {
                if self.wants(a) {
                    accumulate(&mut adj[a.0], g, g.len());
                }
            }

            Op::MatMul { a, b, m, k, n } => {
                if self.wants(a) {
                    // dA = G · Bᵀ
                    let bt = kernels::transpose(self.data(b), k, n);
                    let da = kernels::matmul(g, &bt, m, n, k);
                    accumulate(&mut adj[a.0], &da, da.len());
                }
                if self.wants(b) {
                    // dB = Aᵀ · G
                    let at = kernels::transpose(self.data(a), m, k);
                    let db = kernels::matmul(&at, g, k, m, n);
                    accumulate(&mut adj[b.0], &db, db.len());
                }
            }

            Op::Transpose(a) => {
                if self.wants(a) {
                    let s = &self.nodes[i].shape;
                    let da = kernels::transpose(g, s[0], s[1]);
                    accumulate(&mut adj[a.0], &da, da.len());
                }
            }

            Op::AddRow { x, v } => {
                if self.wants(x) {
                    accumulate(&mut adj[x.0], g, g.len());
                }
                if self.wants(v) {
                    let c = self.nodes[v.0].shape[0];
                    let mut dv = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (d, s) in dv.iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                    accumulate(&mut adj[v.0], &dv, c);
                }
            }

            Op::AddCol { x, v } => {
                if self.wants(x) {
                    accumulate(&mut adj[x.0], g, g.len());
                }
                if self.wants(v) {
                    let r = self.nodes[v.0].shape[0];
                    let c = g.len() / r;
                    let dv: Vec<f64> = g.chunks(c).map(|row| row.iter().sum()).collect();
                    accumulate(&mut adj[v.0], &dv, r);
                }
            }

            Op::Exp(a) => {
                if self.wants(a) {
                    let da = zip_map(g, self.data(TensorId(i)), |gv, out| gv * out);
                    accumulate(&mut adj[a.0], &da, da.len());
                }
            }

            Op::Ln(a) => {
                if self.wants(a) {
                    let da = zip_map(g, self.data(a), |gv, x| gv / x);
                    accumulate(&mut adj[a.0], &da, da.len());
                }
            }

            Op::Sqrt(a) => {
                if self.wants(a) {
                    let da = zip_map(g, self.data(TensorId(i)), |gv, out| gv * 0.5 / out.max(1e-150));
                    accumulate(&mut adj[a.0], &da, da.len());
                }
            }

            Op::Relu(a) => {
                if self.wants(a) {
                    let da = zip_map(g, self.data(a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                    accumulate(&mut adj[a.0], &da, da.len());
                }
            }

            Op::Gelu(a) => {
                if self.wants(a) {
                    let da = zip_map(g, self.data(a), |gv, x| gv * gelu_bwd(x));
                    accumulate(&mut adj[a.0], &da, da.len());
                }
            }

            Op::SumAll(a) => {
                if self.wants(a) {
                    let len = self.data(a).len();
                    let da = vec![g[0]; len];
                    accumulate(&mut adj[a.0], &da, len);
                }
            }

            Op::MeanAll(a) => {
                if self.wants(a) {
                    let len = self.data(a).len();
                    let da = vec![g[0] / len as f64; len];
                    accumulate(&mut adj[a.0], &da, len);
                }
            }

            Op::SumRows(a) => {
                if self.wants(a) {
                    let (r, c) = rows_cols(&self.nodes[a.0].shape);
                    let mut da = vec![0.0; r * c];
                    for (row, &gv) in da.chunks_mut(c).zip(g) {
                        row.fill(gv);
                    }
                    accumulate(&mut adj[a.0], &da, r * c);
                }
            }

            Op::Softmax(a) => {
                if self.wants(a) {
                    let (_, c) = rows_cols(&self.nodes[a.0].shape);
                    let out = self.data(TensorId(i));
                    let mut da = vec![0.0; out.len()];
                    for ((drow, orow), grow) in da.chunks_mut(c).zip(out.chunks(c)).zip(g.chunks(c)) {
                        let dot: f64 = orow.iter().zip(grow).map(|(o, gv)| o * gv).sum();
                        for ((d, o), gv) in drow.iter_mut().zip(orow).zip(grow) {
                            *d = o * (gv - dot);
                        }
                    }
                    accumulate(&mut adj[a.0], &da, out.len());
                }
            }

            Op::LayerNorm { x, gamma, beta, eps } => {
                let (_, c) = rows_cols(&self.nodes[x.0].shape);
                let xd = self.data(x).to_vec();
                let gd = self.data(gamma).to_vec();
                let want_x = self.wants(x);
                let want_g = self.wants(gamma);
                let want_b = self.wants(beta);
                let mut dx = vec![0.0; xd.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (row_idx, (xrow, grow)) in xd.chunks(c).zip(g.chunks(c)).enumerate() {
                    let mean = xrow.iter().sum::<f64>() / c as f64;
                    let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xrow.iter().map(|v| (v - mean) * inv).collect();
                    if want_g || want_b {
                        for j in 0..c {
                            dgamma[j] += grow[j] * xhat[j];
                            dbeta[j] += grow[j];
                        }
                    }
                    if want_x {
                        let dxhat: Vec<f64> = grow.iter().zip(&gd).map(|(gv, gm)| gv * gm).collect();
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        let cf = c as f64;
                        for j in 0..c {
                            dx[row_idx * c + j] =
                                inv / cf * (cf * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                }
                if want_x {
                    accumulate(&mut adj[x.0], &dx, dx.len());
                }
                if want_g {
                    accumulate(&mut adj[gamma.0], &dgamma, c);
                }
                if want_b {
                    accumulate(&mut adj[beta.0], &dbeta, c);
                }
            }

            Op::L2NormRows(a) => {
                if self.wants(a) {
                    let (_, c) = rows_cols(&self.nodes[a.0].shape);
                    let xd = self.data(a);
                    let out = self.data(TensorId(i));
                    let mut da = vec![0.0; xd.len()];
                    for ((drow, (xrow, orow)), grow) in da
                        .chunks_mut(c)
                        .zip(xd.chunks(c).zip(out.chunks(c)))
                        .zip(g.chunks(c))
                    {
                        let norm = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = grow.iter().zip(orow).map(|(gv, o)| gv * o).sum();
                        for ((d, gv), o) in drow.iter_mut().zip(grow).zip(orow) {
                            *d = (gv - o * dot) / norm;
                        }
                    }
                    accumulate(&mut adj[a.0], &da, da.len());
                }
            }

            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.data(p).len();
                    if self.wants(p) {
                        accumulate(&mut adj[p.0], &g[off..off + len], len);
                    }
                    off += len;
                }
            }

            Op::ConcatCols(parts) => {
                let r = self.nodes[i].shape[0];
                let total = self.nodes[i].shape[1];
                let mut off = 0;
                for p in parts {
                    let w = self.nodes[p.0].shape[1];
                    if self.wants(p) {
                        let mut dp = vec![0.0; r * w];
                        for row in 0..r {
                            dp[row * w..(row + 1) * w]
                                .copy_from_slice(&g[row * total + off..row * total + off + w]);
                        }
                        accumulate(&mut adj[p.0], &dp, r * w);
                    }
                    off += w;
                }
            }

            Op::SliceRows { x, start } => {
                if self.wants(x) {
                    let sx = &self.nodes[x.0].shape;
                    let c = sx[1];
                    let mut dx = vec![0.0; sx[0] * c];
                    dx[start * c..start * c + g.len()].copy_from_slice(g);
                    accumulate(&mut adj[x.0], &dx, dx.len());
                }
            }

            Op::SliceCols { x, start } => {
                if self.wants(x) {
                    let sx = &self.nodes[x.0].shape;
                    let (r, c) = (sx[0], sx[1]);
                    let w = self.nodes[i].shape[1];
                    let mut dx = vec![0.0; r * c];
                    for row in 0..r {
                        dx[row * c + start..row * c + start + w]
                            .copy_from_slice(&g[row * w..(row + 1) * w]);
                    }
                    accumulate(&mut adj[x.0], &dx, dx.len());
                }
            }

            Op::Embedding { table, ids } => {
                if self.wants(table) {
                    let st = &self.nodes[table.0].shape;
                    let d = st[1];
                    let mut dt = vec![0.0; st[0] * d];
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[row * d + j];
                        }
                    }
                    accumulate(&mut adj[table.0], &dt, dt.len());
                }
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, src: &[f64], len: usize) {
    match slot {
        Some(buf) => {
            for (t, s) in buf.iter_mut().zip(src) {
                *t += s;
            }
        }
        None => {
            let mut buf = vec![0.0; len];
            buf.copy_from_slice(src);
            *slot = Some(buf);
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * dinner
}

// ── Gradient checking ───────────────────────────────────────────────

/// Outcome of [`check_gradients`].
#[derive(Debug)]
pub struct GradCheckReport {
    /// Largest relative error over all leaf elements.
    pub max_rel_err: f64,
    /// (leaf index, element index) where it occurred.
    pub worst: Option<(usize, usize)>,
    /// Max relative error per leaf.
    pub per_leaf: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compare reverse-mode gradients against central finite differences.
///
/// `build` must construct a deterministic scalar from the given leaves on a
/// fresh tape; a non-scalar output is a contract error. The relative error is
/// `|a - n| / max(1, |a|, |n|)` so near-zero gradients are judged absolutely.
pub fn check_gradients<F>(
    build: F,
    leaves: &[(Vec<f64>, Vec<usize>)],
    step: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let eval = |values: &[Vec<f64>]| -> Result<(Tape, Vec<TensorId>, TensorId)> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = values
            .iter()
            .zip(leaves)
            .map(|(v, (_, shape))| tape.leaf(v.clone(), shape.clone(), true))
            .collect::<Result<_>>()?;
        let out = build(&mut tape, &ids)?;
        if numel(tape.shape(out)) != 1 {
            return Err(Error::Contract(format!(
                "check_gradients: computation must be scalar, got shape {:?}",
                tape.shape(out)
            )));
        }
        Ok((tape, ids, out))
    };

    let base: Vec<Vec<f64>> = leaves.iter().map(|(v, _)| v.clone()).collect();
    let (mut tape, ids, out) = eval(&base)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.data(id).len()]))
        .collect();

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, per_leaf: vec![0.0; leaves.len()] };
    for (li, (values, _)) in leaves.iter().enumerate() {
        for ei in 0..values.len() {
            let mut plus = base.clone();
            plus[li][ei] += step;
            let (tp, _, op) = eval(&plus)?;
            let fp = tp.value(op);

            let mut minus = base.clone();
            minus[li][ei] -= step;
            let (tm, _, om) = eval(&minus)?;
            let fm = tm.value(om);

            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[li][ei];
            let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            report.per_leaf[li] = report.per_leaf[li].max(rel);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((li, ei));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn matmul_identity_and_annihilator() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1., 2., 3., 4.], vec![2, 2], false).unwrap();
        let eye = t.constant(vec![1., 0., 0., 1.], vec![2, 2]).unwrap();
        let zero = t.constant(vec![0.0; 4], vec![2, 2]).unwrap();
        let ai = t.matmul(a, eye).unwrap();
        assert_eq!(t.data(ai), &[1., 2., 3., 4.]);
        let az = t.matmul(a, zero).unwrap();
        assert_eq!(t.data(az), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(vec![0.0; 6], vec![2, 3]).unwrap();
        let b = t.constant(vec![0.0; 8], vec![4, 2]).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_grad_matches_hand_value() {
        // d sum(A·B) / dA for A=[[1,2]], B=[[3],[5]] is [[3,5]].
        let mut t = Tape::new();
        let a = t.leaf(vec![1., 2.], vec![1, 2], true).unwrap();
        let b = t.constant(vec![3., 5.], vec![2, 1]).unwrap();
        let c = t.matmul(a, b).unwrap();
        let s = t.sum_all(c);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[3., 5.]);

        // And against central differences.
        let report = check_gradients(
            |tape, ids| {
                let b = tape.constant(vec![3., 5.], vec![2, 1])?;
                let c = tape.matmul(ids[0], b)?;
                Ok(tape.sum_all(c))
            },
            &[(vec![1., 2.], vec![1, 2])],
            1e-6,
        )
        .unwrap();
        assert!(report.passes(1e-8), "{report:?}");
    }

    #[test]
    fn softmax_values() {
        let mut t = Tape::new();
        let a = t.constant(vec![0.0, 0.0], vec![2]).unwrap();
        let s = t.softmax(a);
        assert_eq!(t.data(s), &[0.5, 0.5]);

        // Stabilization must survive large inputs.
        let b = t.constant(vec![1000.0, 1000.0], vec![2]).unwrap();
        let sb = t.softmax(b);
        assert_eq!(t.data(sb), &[0.5, 0.5]);

        // Closed form: e^0 / (e^0 + 3).
        let c = t.constant(vec![0.0, 3.0f64.ln()], vec![2]).unwrap();
        let sc = t.softmax(c);
        assert!((t.data(sc)[0] - 0.25).abs() < 1e-15);
        assert!((t.data(sc)[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = rand_vec(&mut rng, 4 * 7);
        let mut t = Tape::new();
        let a = t.constant(data.clone(), vec![4, 7]).unwrap();
        let s = t.softmax(a);
        for row in t.data(s).chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // Adding a per-row constant must not change the output.
        let shifted: Vec<f64> = data
            .chunks(7)
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |v| v + (i as f64 + 1.0) * 10.0).collect::<Vec<_>>())
            .collect();
        let b = t.constant(shifted, vec![4, 7]).unwrap();
        let sb = t.softmax(b);
        let (sa, sbv) = (t.data(s).to_vec(), t.data(sb).to_vec());
        for (x, y) in sa.iter().zip(&sbv) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_values() {
        let mut t = Tape::new();
        let g = t.constant(vec![1.0, 1.0], vec![2]).unwrap();
        let b = t.constant(vec![0.0, 0.0], vec![2]).unwrap();

        // Constant row maps to zeros through the eps guard.
        let x = t.constant(vec![5.0, 5.0], vec![1, 2]).unwrap();
        let ln = t.layer_norm(x, g, b, 1e-12).unwrap();
        assert!(t.data(ln).iter().all(|v| v.abs() < 1e-5));

        // [1,3] standardizes to [-1,1] as eps -> 0.
        let y = t.constant(vec![1.0, 3.0], vec![1, 2]).unwrap();
        let lny = t.layer_norm(y, g, b, 1e-15).unwrap();
        assert!((t.data(lny)[0] + 1.0).abs() < 1e-7);
        assert!((t.data(lny)[1] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn layer_norm_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_vec(&mut rng, 12);
        let g = rand_vec(&mut rng, 4);
        let b = rand_vec(&mut rng, 4);
        let report = check_gradients(
            |t, ids| {
                let ln = t.layer_norm(ids[0], ids[1], ids[2], 1e-8)?;
                let sq = t.mul(ln, ln)?;
                Ok(t.sum_all(sq))
            },
            &[(x, vec![3, 4]), (g, vec![4]), (b, vec![4])],
            1e-6,
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn check_gradients_sum_of_squares() {
        let report = check_gradients(
            |t, ids| {
                let sq = t.mul(ids[0], ids[0])?;
                Ok(t.sum_all(sq))
            },
            &[(vec![1., 2., 3.], vec![3])],
            1e-6,
        )
        .unwrap();
        // Analytic gradient is [2,4,6]; x^2 differences are near-exact.
        assert!(report.passes(1e-8), "{report:?}");
    }

    #[test]
    fn check_gradients_rejects_non_scalar() {
        let err = check_gradients(
            |t, ids| t.mul(ids[0], ids[0]),
            &[(vec![1., 2.], vec![2])],
            1e-6,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn backward_accumulates_additively() {
        let mut t = Tape::new();
        let x = t.leaf(vec![3.0], vec![1], true).unwrap();
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[12.0]);
    }

    #[test]
    fn l2_normalize_unit_norm_and_zero_error() {
        let mut t = Tape::new();
        let x = t.constant(vec![3.0, 4.0], vec![2]).unwrap();
        let n = t.l2_normalize_rows(x).unwrap();
        let norm: f64 = t.data(n).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);

        let z = t.constant(vec![0.0, 0.0], vec![2]).unwrap();
        assert!(matches!(t.l2_normalize_rows(z), Err(Error::Contract(_))));
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_vec(&mut rng, 6 * 4);
        let w = rand_vec(&mut rng, 4 * 3);
        let run = || {
            let mut t = Tape::new();
            let xi = t.leaf(x.clone(), vec![6, 4], false).unwrap();
            let wi = t.leaf(w.clone(), vec![4, 3], false).unwrap();
            let h = t.matmul(xi, wi).unwrap();
            let s = t.softmax(h);
            let e = t.gelu(s);
            t.data(e).to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    /// Every primitive participates in one randomized composite; reverse-mode
    /// must match central differences on random inputs in [-2, 2].
    #[test]
    fn primitive_gradient_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        type Case = (&'static str, fn(&mut Tape, &[TensorId]) -> Result<TensorId>, Vec<(Vec<f64>, Vec<usize>)>);

        let two_mats = |rng: &mut ChaCha8Rng| vec![((0..12).map(|_| rng.random_range(-2.0..2.0)).collect(), vec![3, 4]), ((0..12).map(|_| rng.random_range(-2.0..2.0)).collect(), vec![3, 4])];

        let cases: Vec<Case> = vec![
            ("add", |t, ids| { let y = t.add(ids[0], ids[1])?; Ok(t.sum_all(y)) }, two_mats(&mut rng)),
            ("sub_mul", |t, ids| { let d = t.sub(ids[0], ids[1])?; let m = t.mul(d, ids[0])?; Ok(t.sum_all(m)) }, two_mats(&mut rng)),
            ("scale_addscalar", |t, ids| { let s = t.scale(ids[0], -1.7); let a = t.add_scalar(s, 0.3); let m = t.mul(a, a)?; Ok(t.mean_all(m)) }, vec![(rand_vec(&mut rng, 12), vec![3, 4])]),
            ("matmul_transpose", |t, ids| { let bt = t.transpose(ids[1])?; let c = t.matmul(ids[0], bt)?; let m = t.mul(c, c)?; Ok(t.sum_all(m)) }, two_mats(&mut rng)),
            ("add_row", |t, ids| { let y = t.add_row(ids[0], ids[1])?; let m = t.mul(y, y)?; Ok(t.sum_all(m)) }, vec![(rand_vec(&mut rng, 12), vec![3, 4]), (rand_vec(&mut rng, 4), vec![4])]),
            ("add_col", |t, ids| { let y = t.add_col(ids[0], ids[1])?; let m = t.mul(y, y)?; Ok(t.sum_all(m)) }, vec![(rand_vec(&mut rng, 12), vec![3, 4]), (rand_vec(&mut rng, 3), vec![3])]),
            ("exp_ln", |t, ids| { let e = t.exp(ids[0]); let sh = t.add_scalar(e, 1.0); let l = t.ln(sh); Ok(t.sum_all(l)) }, vec![(rand_vec(&mut rng, 10), vec![10])]),
            ("sqrt", |t, ids| { let sq = t.mul(ids[0], ids[0])?; let sh = t.add_scalar(sq, 0.5); let r = t.sqrt(sh); Ok(t.sum_all(r)) }, vec![(rand_vec(&mut rng, 8), vec![8])]),
            ("relu", |t, ids| { let r = t.relu(ids[0]); let m = t.mul(r, r)?; Ok(t.sum_all(m)) }, vec![((0..9).map(|i| i as f64 - 4.2).collect(), vec![9])]),
            ("gelu", |t, ids| { let gl = t.gelu(ids[0]); Ok(t.sum_all(gl)) }, vec![(rand_vec(&mut rng, 9), vec![9])]),
            ("sum_rows_softmax", |t, ids| { let s = t.softmax(ids[0]); let e = t.mul(s, s)?; let r = t.sum_rows(e); let m = t.mul(r, r)?; Ok(t.sum_all(m)) }, vec![(rand_vec(&mut rng, 12), vec![3, 4])]),
            ("l2norm", |t, ids| { let n = t.l2_normalize_rows(ids[0])?; let m = t.mul(n, ids[0])?; Ok(t.sum_all(m)) }, vec![((0..12).map(|_| rng.random_range(0.5..2.0)).collect(), vec![3, 4])]),
            ("concat_slice_rows", |t, ids| { let cat = t.concat_rows(&[ids[0], ids[1]])?; let sl = t.slice_rows(cat, 1, 3)?; let m = t.mul(sl, sl)?; Ok(t.sum_all(m)) }, two_mats(&mut rng)),
            ("concat_slice_cols", |t, ids| { let cat = t.concat_cols(&[ids[0], ids[1]])?; let sl = t.slice_cols(cat, 2, 4)?; let m = t.mul(sl, sl)?; Ok(t.sum_all(m)) }, two_mats(&mut rng)),
            ("embedding", |t, ids| { let e = t.embedding(ids[0], &[2, 0, 2, 1])?; let m = t.mul(e, e)?; Ok(t.sum_all(m)) }, vec![(rand_vec(&mut rng, 12), vec![3, 4])]),
            ("reshape", |t, ids| { let r = t.reshape(ids[0], vec![4, 3])?; let tt = t.transpose(r)?; let m = t.mul(tt, tt)?; Ok(t.sum_all(m)) }, vec![(rand_vec(&mut rng, 12), vec![3, 4])]),
        ];

        for (name, build, leaves) in cases {
            let report = check_gradients(build, &leaves, 1e-6).unwrap();
            assert!(report.passes(1e-4), "{name}: {report:?}");
        }
    }

    #[test]
    fn backward_seeded_matches_direct() {
        // Splitting a graph across two tapes at the descriptor boundary must
        // reproduce the single-tape gradient exactly.
        let x = vec![0.4, -1.1, 0.7, 0.2];
        let w = vec![0.3, -0.2, 0.9, 0.5];

        // Single tape: loss = sum((x·W)^2)
        let mut t1 = Tape::new();
        let xi = t1.leaf(x.clone(), vec![1, 4], false).unwrap();
        let wi = t1.leaf(w.clone(), vec![4, 1], true).unwrap();
        let h = t1.matmul(xi, wi).unwrap();
        let hs = t1.mul(h, h).unwrap();
        let loss = t1.sum_all(hs);
        t1.backward(loss).unwrap();
        let direct = t1.grad(wi).unwrap().to_vec();

        // Two tapes: tape A produces h; tape B computes the loss on h as a
        // leaf; h's adjoint from B seeds A.
        let mut ta = Tape::new();
        let xa = ta.leaf(x.clone(), vec![1, 4], false).unwrap();
        let wa = ta.leaf(w.clone(), vec![4, 1], true).unwrap();
        let ha = ta.matmul(xa, wa).unwrap();

        let mut tb = Tape::new();
        let hb = tb.leaf(ta.data(ha).to_vec(), vec![1, 1], true).unwrap();
        let hbs = tb.mul(hb, hb).unwrap();
        let lb = tb.sum_all(hbs);
        tb.backward(lb).unwrap();
        let seed = tb.grad(hb).unwrap().to_vec();

        ta.backward_seeded(&[(ha, seed)]).unwrap();
        let staged = ta.grad(wa).unwrap().to_vec();
        assert!(direct.iter().zip(&staged).all(|(a, b)| (a - b).abs() < 1e-15));
    }
}
