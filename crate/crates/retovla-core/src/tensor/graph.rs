//! Dynamic computation tape.
//!
//! Each forward operation appends a node holding its output buffer and enough
//! saved state for the backward rule. `backward` sweeps the records in reverse
//! order once; gradients accumulate additively across fan-out. Buffers are
//! recycled through an internal pool so a training loop that rebuilds the
//! graph every step reaches a steady state with no allocation.

use std::collections::HashMap;

use super::{product, Tensor, TensorError, TensorResult};

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// Batched matrix product on the last two axes.
    Matmul { a: NodeId, b: NodeId },
    /// Swap the last two axes.
    TransposeLast2 { a: NodeId },
    /// Same data, new shape.
    Reshape { a: NodeId },
    /// [B, S, h*dh] -> [B, h, S, dh]
    SplitHeads { a: NodeId, heads: usize },
    /// [B, h, S, dh] -> [B, S, h*dh]
    MergeHeads { a: NodeId },
    Concat { a: NodeId, b: NodeId, axis: usize },
    /// Tile a tensor along a new leading batch axis.
    ExpandBatch { a: NodeId, batch: usize },
    /// Row gather from a [V, d] table.
    Embed { table: NodeId, ids: Vec<usize> },
    Softmax { a: NodeId },
    Sigmoid { a: NodeId },
    LogSigmoid { a: NodeId },
    Gelu { a: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    /// Add a scalar node to the trailing `cols` entries of every last-axis row.
    AddScalarToTrailingCols { a: NodeId, bias: NodeId, cols: usize },
    Sum { a: NodeId },
    Mean { a: NodeId },
    MseLoss { pred: NodeId, target: NodeId },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    /// Per-op saved activations (gelu tanh values; layernorm mean/inv_std).
    aux: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
struct Pool {
    free: HashMap<usize, Vec<Vec<f64>>>,
}

impl Pool {
    /// Returns a buffer of exactly `len` elements with unspecified contents.
    fn take(&mut self, len: usize) -> Vec<f64> {
        match self.free.get_mut(&len).and_then(|v| v.pop()) {
            Some(buf) => buf,
            None => vec![0.0; len],
        }
    }

    fn take_zeroed(&mut self, len: usize) -> Vec<f64> {
        match self.free.get_mut(&len).and_then(|v| v.pop()) {
            Some(mut buf) => {
                buf.iter_mut().for_each(|v| *v = 0.0);
                buf
            }
            None => vec![0.0; len],
        }
    }

    fn give(&mut self, buf: Vec<f64>) {
        if !buf.is_empty() {
            self.free.entry(buf.len()).or_default().push(buf);
        }
    }
}

/// Ordered record of one forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    pool: Pool,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            pool: Pool::default(),
            consumed: false,
        }
    }

    /// Drops all records but keeps their buffers for reuse.
    pub fn reset(&mut self) {
        for node in self.nodes.drain(..) {
            self.pool.give(node.data);
            if let Some(g) = node.grad {
                self.pool.give(g);
            }
            self.pool.give(node.aux);
        }
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── Node access ─────────────────────────────────────────────────

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    /// Scalar value of a one-element node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Copies a node's value out as a standalone tensor.
    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor::from_vec(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
            .expect("node shape/data always consistent")
    }

    // ── Leaves ──────────────────────────────────────────────────────

    /// Inserts a constant leaf; no gradient will be tracked through it.
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push_leaf(t, false)
    }

    /// Inserts a differentiable leaf (a parameter or checked input).
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push_leaf(t, true)
    }

    fn push_leaf(&mut self, t: &Tensor, requires_grad: bool) -> NodeId {
        let mut data = self.pool.take(t.numel());
        data.copy_from_slice(t.data());
        self.push(t.shape().to_vec(), data, Op::Leaf, requires_grad)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> NodeId {
        debug_assert_eq!(product(&shape), data.len());
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            aux: Vec::new(),
            op,
            requires_grad,
        });
        id
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ── Forward operations ──────────────────────────────────────────

    /// Matrix product on the last two axes. `b` may be rank 2 (broadcast over
    /// `a`'s leading batch dims) or share `a`'s leading dims exactly.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        let (ash, bsh) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if ash.len() < 2 {
            return Err(TensorError::BadRank { op: "matmul", expected: ">=2", got: ash.len() });
        }
        if bsh.len() < 2 {
            return Err(TensorError::BadRank { op: "matmul", expected: ">=2", got: bsh.len() });
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        let lead_a = &ash[..ash.len() - 2];
        let lead_b = &bsh[..bsh.len() - 2];
        let broadcast_b = lead_b.is_empty();
        if k != kb || (!broadcast_b && lead_a != lead_b) {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ash.clone(),
                rhs: bsh.clone(),
            });
        }
        let batch = product(lead_a);
        let mut out_shape = lead_a.to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let mut out = self.pool.take(batch * m * n);
        {
            let adata = &self.nodes[a.0].data;
            let bdata = &self.nodes[b.0].data;
            if broadcast_b {
                // One flat GEMM: [batch*m, k] x [k, n].
                dgemm(batch * m, k, n, adata, k as isize, 1, bdata, n as isize, 1, &mut out, 0.0);
            } else {
                for i in 0..batch {
                    dgemm(
                        m,
                        k,
                        n,
                        &adata[i * m * k..(i + 1) * m * k],
                        k as isize,
                        1,
                        &bdata[i * k * n..(i + 1) * k * n],
                        n as isize,
                        1,
                        &mut out[i * m * n..(i + 1) * m * n],
                        0.0,
                    );
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out_shape, out, Op::Matmul { a, b }, rg))
    }

    /// Swaps the last two axes (materialized copy).
    pub fn transpose_last2(&mut self, a: NodeId) -> TensorResult<NodeId> {
        let ash = &self.nodes[a.0].shape;
        if ash.len() < 2 {
            return Err(TensorError::BadRank { op: "transpose", expected: ">=2", got: ash.len() });
        }
        let (r, c) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let batch = product(&ash[..ash.len() - 2]);
        let mut out_shape = ash.clone();
        let len = out_shape.len();
        out_shape.swap(len - 2, len - 1);
        let mut out = self.pool.take(batch * r * c);
        {
            let src = &self.nodes[a.0].data;
            for i in 0..batch {
                transpose2d(&src[i * r * c..(i + 1) * r * c], &mut out[i * r * c..(i + 1) * r * c], r, c);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out_shape, out, Op::TransposeLast2 { a }, rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> TensorResult<NodeId> {
        let numel = self.nodes[a.0].data.len();
        if product(&shape) != numel {
            return Err(TensorError::DataLength { expected: product(&shape), got: numel });
        }
        let mut out = self.pool.take(numel);
        out.copy_from_slice(&self.nodes[a.0].data);
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Reshape { a }, rg))
    }

    /// [B, S, h*dh] -> [B, h, S, dh]
    pub fn split_heads(&mut self, a: NodeId, heads: usize) -> TensorResult<NodeId> {
        let ash = &self.nodes[a.0].shape;
        if ash.len() != 3 {
            return Err(TensorError::BadRank { op: "split_heads", expected: "3", got: ash.len() });
        }
        let (b, s, d) = (ash[0], ash[1], ash[2]);
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::BadArgument {
                op: "split_heads",
                detail: format!("width {d} not divisible by heads {heads}"),
            });
        }
        let dh = d / heads;
        let mut out = self.pool.take(b * s * d);
        {
            let src = &self.nodes[a.0].data;
            for bi in 0..b {
                for si in 0..s {
                    let row = &src[(bi * s + si) * d..(bi * s + si + 1) * d];
                    for h in 0..heads {
                        let dst = ((bi * heads + h) * s + si) * dh;
                        out[dst..dst + dh].copy_from_slice(&row[h * dh..(h + 1) * dh]);
                    }
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![b, heads, s, dh], out, Op::SplitHeads { a, heads }, rg))
    }

    /// [B, h, S, dh] -> [B, S, h*dh]
    pub fn merge_heads(&mut self, a: NodeId) -> TensorResult<NodeId> {
        let ash = &self.nodes[a.0].shape;
        if ash.len() != 4 {
            return Err(TensorError::BadRank { op: "merge_heads", expected: "4", got: ash.len() });
        }
        let (b, heads, s, dh) = (ash[0], ash[1], ash[2], ash[3]);
        let d = heads * dh;
        let mut out = self.pool.take(b * s * d);
        {
            let src = &self.nodes[a.0].data;
            for bi in 0..b {
                for h in 0..heads {
                    for si in 0..s {
                        let from = ((bi * heads + h) * s + si) * dh;
                        let to = (bi * s + si) * d + h * dh;
                        out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                    }
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![b, s, d], out, Op::MergeHeads { a }, rg))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> TensorResult<NodeId> {
        let (ash, bsh) = (self.nodes[a.0].shape.clone(), self.nodes[b.0].shape.clone());
        let compatible = ash.len() == bsh.len()
            && axis < ash.len()
            && ash
                .iter()
                .zip(&bsh)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(TensorError::ShapeMismatch { op: "concat", lhs: ash, rhs: bsh });
        }
        let outer = product(&ash[..axis]);
        let inner = product(&ash[axis + 1..]);
        let (ca, cb) = (ash[axis], bsh[axis]);
        let mut out_shape = ash.clone();
        out_shape[axis] = ca + cb;
        let mut out = self.pool.take(outer * (ca + cb) * inner);
        {
            let (sa, sb) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
            let (ba, bb, bo) = (ca * inner, cb * inner, (ca + cb) * inner);
            for o in 0..outer {
                out[o * bo..o * bo + ba].copy_from_slice(&sa[o * ba..(o + 1) * ba]);
                out[o * bo + ba..(o + 1) * bo].copy_from_slice(&sb[o * bb..(o + 1) * bb]);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out_shape, out, Op::Concat { a, b, axis }, rg))
    }

    /// Tiles `a` along a new leading axis of size `batch`.
    pub fn expand_batch(&mut self, a: NodeId, batch: usize) -> TensorResult<NodeId> {
        if batch == 0 {
            return Err(TensorError::BadArgument { op: "expand_batch", detail: "batch must be >= 1".into() });
        }
        let ash = self.nodes[a.0].shape.clone();
        let n = self.nodes[a.0].data.len();
        let mut out = self.pool.take(batch * n);
        {
            let src = &self.nodes[a.0].data;
            for i in 0..batch {
                out[i * n..(i + 1) * n].copy_from_slice(src);
            }
        }
        let mut out_shape = Vec::with_capacity(ash.len() + 1);
        out_shape.push(batch);
        out_shape.extend_from_slice(&ash);
        let rg = self.rg(a);
        Ok(self.push(out_shape, out, Op::ExpandBatch { a, batch }, rg))
    }

    /// Gathers rows of a [V, d] `table`; output shape is `out_lead` + [d].
    pub fn embed(&mut self, table: NodeId, ids: &[usize], out_lead: &[usize]) -> TensorResult<NodeId> {
        let tsh = &self.nodes[table.0].shape;
        if tsh.len() != 2 {
            return Err(TensorError::BadRank { op: "embed", expected: "2", got: tsh.len() });
        }
        let (v, d) = (tsh[0], tsh[1]);
        if product(out_lead) != ids.len() {
            return Err(TensorError::DataLength { expected: product(out_lead), got: ids.len() });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::IndexOutOfRange { index: bad, len: v });
        }
        let mut out = self.pool.take(ids.len() * d);
        {
            let src = &self.nodes[table.0].data;
            for (row, &id) in ids.iter().enumerate() {
                out[row * d..(row + 1) * d].copy_from_slice(&src[id * d..(id + 1) * d]);
            }
        }
        let mut out_shape = out_lead.to_vec();
        out_shape.push(d);
        let rg = self.rg(table);
        Ok(self.push(out_shape, out, Op::Embed { table, ids: ids.to_vec() }, rg))
    }

    /// Softmax over the last axis, computed with max-subtraction.
    pub fn softmax(&mut self, a: NodeId) -> TensorResult<NodeId> {
        let ash = self.nodes[a.0].shape.clone();
        let d = *ash.last().ok_or(TensorError::BadRank { op: "softmax", expected: ">=1", got: 0 })?;
        if d == 0 {
            return Err(TensorError::EmptyInput { op: "softmax" });
        }
        let n = self.nodes[a.0].data.len();
        let mut out = self.pool.take(n);
        {
            let src = &self.nodes[a.0].data;
            for r in 0..n / d {
                let row = &src[r * d..(r + 1) * d];
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                if !max.is_finite() {
                    return Err(TensorError::NonFinite { op: "softmax" });
                }
                let dst = &mut out[r * d..(r + 1) * d];
                let mut sum = 0.0;
                for (o, &v) in dst.iter_mut().zip(row) {
                    let e = (v - max).exp();
                    *o = e;
                    sum += e;
                }
                let inv = 1.0 / sum;
                dst.iter_mut().for_each(|v| *v *= inv);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(ash, out, Op::Softmax { a }, rg))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> TensorResult<NodeId> {
        let ash = self.nodes[a.0].shape.clone();
        let mut out = self.pool.take(self.nodes[a.0].data.len());
        for (o, &x) in out.iter_mut().zip(&self.nodes[a.0].data) {
            *o = stable_sigmoid(x);
        }
        let rg = self.rg(a);
        Ok(self.push(ash, out, Op::Sigmoid { a }, rg))
    }

    /// ln(sigmoid(x)), computed as -softplus(-x) for stability.
    pub fn log_sigmoid(&mut self, a: NodeId) -> TensorResult<NodeId> {
        let ash = self.nodes[a.0].shape.clone();
        let mut out = self.pool.take(self.nodes[a.0].data.len());
        for (o, &x) in out.iter_mut().zip(&self.nodes[a.0].data) {
            *o = -softplus(-x);
        }
        let rg = self.rg(a);
        Ok(self.push(ash, out, Op::LogSigmoid { a }, rg))
    }

    /// Tanh-form GELU.
    pub fn gelu(&mut self, a: NodeId) -> TensorResult<NodeId> {
        let ash = self.nodes[a.0].shape.clone();
        let n = self.nodes[a.0].data.len();
        let mut out = self.pool.take(n);
        let mut aux = self.pool.take(n);
        for i in 0..n {
            let x = self.nodes[a.0].data[i];
            let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
            aux[i] = t;
            out[i] = 0.5 * x * (1.0 + t);
        }
        let rg = self.rg(a);
        let id = self.push(ash, out, Op::Gelu { a }, rg);
        self.nodes[id.0].aux = aux;
        Ok(id)
    }

    /// Normalizes each last-axis slice to mean 0 / variance 1, then applies
    /// the affine transform `gain * xhat + bias`.
    pub fn layernorm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> TensorResult<NodeId> {
        let xsh = self.nodes[x.0].shape.clone();
        let d = *xsh.last().ok_or(TensorError::BadRank { op: "layernorm", expected: ">=1", got: 0 })?;
        if self.nodes[gain.0].shape != [d] || self.nodes[bias.0].shape != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layernorm",
                lhs: xsh,
                rhs: self.nodes[gain.0].shape.clone(),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::BadArgument { op: "layernorm", detail: "eps must be > 0".into() });
        }
        let n = self.nodes[x.0].data.len();
        let rows = n / d;
        let mut out = self.pool.take(n);
        let mut aux = self.pool.take(rows * 2);
        {
            let src = &self.nodes[x.0].data;
            let g = &self.nodes[gain.0].data;
            let b = &self.nodes[bias.0].data;
            for r in 0..rows {
                let row = &src[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                aux[r * 2] = mean;
                aux[r * 2 + 1] = inv_std;
                let dst = &mut out[r * d..(r + 1) * d];
                for j in 0..d {
                    dst[j] = (row[j] - mean) * inv_std * g[j] + b[j];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let id = self.push(xsh, out, Op::LayerNorm { x, gain, bias }, rg);
        self.nodes[id.0].aux = aux;
        Ok(id)
    }

    /// Elementwise sum. `b` must match `a`'s shape, be a scalar, or be a
    /// suffix of `a`'s shape (broadcast over the leading batch dims).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        self.binary_broadcast(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    /// Elementwise product with the same broadcast rule as [`Graph::add`].
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        self.binary_broadcast(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn binary_broadcast(
        &mut self,
        a: NodeId,
        b: NodeId,
        opname: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make_op: impl Fn(NodeId, NodeId) -> Op,
    ) -> TensorResult<NodeId> {
        let ash = self.nodes[a.0].shape.clone();
        let bn = self.nodes[b.0].data.len();
        if !broadcast_ok(&ash, &self.nodes[b.0].shape) {
            return Err(TensorError::ShapeMismatch {
                op: opname,
                lhs: ash,
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let n = self.nodes[a.0].data.len();
        let mut out = self.pool.take(n);
        {
            let sa = &self.nodes[a.0].data;
            let sb = &self.nodes[b.0].data;
            if bn == 1 {
                let y = sb[0];
                for (o, &x) in out.iter_mut().zip(sa) {
                    *o = f(x, y);
                }
            } else {
                for (chunk, ochunk) in sa.chunks_exact(bn).zip(out.chunks_exact_mut(bn)) {
                    for ((o, &x), &y) in ochunk.iter_mut().zip(chunk).zip(sb) {
                        *o = f(x, y);
                    }
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(ash, out, make_op(a, b), rg))
    }

    /// Multiplies by a compile-time constant (not a graph value).
    pub fn scale(&mut self, a: NodeId, c: f64) -> TensorResult<NodeId> {
        let ash = self.nodes[a.0].shape.clone();
        let mut out = self.pool.take(self.nodes[a.0].data.len());
        for (o, &x) in out.iter_mut().zip(&self.nodes[a.0].data) {
            *o = c * x;
        }
        let rg = self.rg(a);
        Ok(self.push(ash, out, Op::Scale { a, c }, rg))
    }

    /// Adds the scalar node `bias` to the trailing `cols` entries of every
    /// last-axis row of `a`.
    pub fn add_scalar_to_trailing_cols(&mut self, a: NodeId, bias: NodeId, cols: usize) -> TensorResult<NodeId> {
        let ash = self.nodes[a.0].shape.clone();
        let d = *ash.last().ok_or(TensorError::BadRank { op: "add_trailing", expected: ">=1", got: 0 })?;
        if self.nodes[bias.0].data.len() != 1 {
            return Err(TensorError::BadRank { op: "add_trailing", expected: "scalar bias", got: self.nodes[bias.0].shape.len() });
        }
        if cols > d {
            return Err(TensorError::BadArgument {
                op: "add_trailing",
                detail: format!("cols {cols} exceeds last dim {d}"),
            });
        }
        let n = self.nodes[a.0].data.len();
        let mut out = self.pool.take(n);
        out.copy_from_slice(&self.nodes[a.0].data);
        let bv = self.nodes[bias.0].data[0];
        for r in 0..n / d {
            for v in &mut out[r * d + (d - cols)..(r + 1) * d] {
                *v += bv;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(ash, out, Op::AddScalarToTrailingCols { a, bias, cols }, rg))
    }

    pub fn sum(&mut self, a: NodeId) -> TensorResult<NodeId> {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let mut out = self.pool.take(1);
        out[0] = s;
        let rg = self.rg(a);
        Ok(self.push(vec![1], out, Op::Sum { a }, rg))
    }

    pub fn mean(&mut self, a: NodeId) -> TensorResult<NodeId> {
        let n = self.nodes[a.0].data.len();
        if n == 0 {
            return Err(TensorError::EmptyInput { op: "mean" });
        }
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let mut out = self.pool.take(1);
        out[0] = s / n as f64;
        let rg = self.rg(a);
        Ok(self.push(vec![1], out, Op::Mean { a }, rg))
    }

    /// Scalar mean of squared differences.
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> TensorResult<NodeId> {
        if self.nodes[pred.0].shape != self.nodes[target.0].shape {
            return Err(TensorError::ShapeMismatch {
                op: "mse_loss",
                lhs: self.nodes[pred.0].shape.clone(),
                rhs: self.nodes[target.0].shape.clone(),
            });
        }
        let n = self.nodes[pred.0].data.len();
        if n == 0 {
            return Err(TensorError::EmptyInput { op: "mse_loss" });
        }
        let mut acc = 0.0;
        for (&p, &t) in self.nodes[pred.0].data.iter().zip(&self.nodes[target.0].data) {
            let d = p - t;
            acc += d * d;
        }
        let mut out = self.pool.take(1);
        out[0] = acc / n as f64;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(vec![1], out, Op::MseLoss { pred, target }, rg))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients accumulate additively
    /// across fan-out; a graph can be swept only once between resets.
    pub fn backward(&mut self, loss: NodeId) -> TensorResult<()> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyInput { op: "backward" });
        }
        self.consumed = true;
        let mut seed = self.pool.take(1);
        seed[0] = 1.0;
        self.nodes[loss.0].grad = Some(seed);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            self.step_backward(i);
        }
        Ok(())
    }

    /// Ensures node `id` has a zeroed gradient buffer and returns a raw
    /// pointer pair for split borrows within `step_backward`.
    fn ensure_grad(&mut self, id: NodeId) {
        if self.nodes[id.0].grad.is_none() {
            let buf = self.pool.take_zeroed(self.nodes[id.0].data.len());
            self.nodes[id.0].grad = Some(buf);
        }
    }

    fn step_backward(&mut self, i: usize) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k, n, batch, broadcast_b) = {
                    let ash = &self.nodes[a.0].shape;
                    let bsh = &self.nodes[b.0].shape;
                    let m = ash[ash.len() - 2];
                    let k = ash[ash.len() - 1];
                    let n = bsh[bsh.len() - 1];
                    let batch = product(&ash[..ash.len() - 2]);
                    (m, k, n, batch, bsh.len() == 2)
                };
                if self.rg(a) {
                    self.ensure_grad(a);
                    let (ga, g, bd) = grad_in_out(&mut self.nodes, a.0, i, b.0);
                    if broadcast_b {
                        // dA[batch*m, k] += dC[batch*m, n] * B^T
                        dgemm(batch * m, n, k, g, n as isize, 1, bd, 1, n as isize, ga, 1.0);
                    } else {
                        for t in 0..batch {
                            dgemm(
                                m, n, k,
                                &g[t * m * n..(t + 1) * m * n], n as isize, 1,
                                &bd[t * k * n..(t + 1) * k * n], 1, n as isize,
                                &mut ga[t * m * k..(t + 1) * m * k], 1.0,
                            );
                        }
                    }
                }
                if self.rg(b) {
                    self.ensure_grad(b);
                    let (gb, g, ad) = grad_in_out(&mut self.nodes, b.0, i, a.0);
                    if broadcast_b {
                        // dB[k, n] += A^T[k, batch*m] * dC[batch*m, n]
                        dgemm(k, batch * m, n, ad, 1, k as isize, g, n as isize, 1, gb, 1.0);
                    } else {
                        for t in 0..batch {
                            dgemm(
                                k, m, n,
                                &ad[t * m * k..(t + 1) * m * k], 1, k as isize,
                                &g[t * m * n..(t + 1) * m * n], n as isize, 1,
                                &mut gb[t * k * n..(t + 1) * k * n], 1.0,
                            );
                        }
                    }
                }
            }
            Op::TransposeLast2 { a } => {
                if self.rg(a) {
                    let (r, c) = {
                        let osh = &self.nodes[i].shape;
                        (osh[osh.len() - 2], osh[osh.len() - 1])
                    };
                    let batch = self.nodes[i].data.len() / (r * c);
                    self.ensure_grad(a);
                    let (ga, g, _) = grad_in_out(&mut self.nodes, a.0, i, i);
                    let mut tmp = vec![0.0; r * c];
                    for t in 0..batch {
                        transpose2d(&g[t * r * c..(t + 1) * r * c], &mut tmp, r, c);
                        for (x, y) in ga[t * r * c..(t + 1) * r * c].iter_mut().zip(&tmp) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if self.rg(a) {
                    self.ensure_grad(a);
                    let (ga, g, _) = grad_in_out(&mut self.nodes, a.0, i, i);
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            Op::SplitHeads { a, heads } => {
                if self.rg(a) {
                    let (b, s, d) = {
                        let ash = &self.nodes[a.0].shape;
                        (ash[0], ash[1], ash[2])
                    };
                    let dh = d / heads;
                    self.ensure_grad(a);
                    let (ga, g, _) = grad_in_out(&mut self.nodes, a.0, i, i);
                    for bi in 0..b {
                        for h in 0..heads {
                            for si in 0..s {
                                let from = ((bi * heads + h) * s + si) * dh;
                                let to = (bi * s + si) * d + h * dh;
                                for j in 0..dh {
                                    ga[to + j] += g[from + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { a } => {
                if self.rg(a) {
                    let (b, heads, s, dh) = {
                        let ash = &self.nodes[a.0].shape;
                        (ash[0], ash[1], ash[2], ash[3])
                    };
                    let d = heads * dh;
                    self.ensure_grad(a);
                    let (ga, g, _) = grad_in_out(&mut self.nodes, a.0, i, i);
                    for bi in 0..b {
                        for h in 0..heads {
                            for si in 0..s {
                                let to = ((bi * heads + h) * s + si) * dh;
                                let from = (bi * s + si) * d + h * dh;
                                for j in 0..dh {
                                    ga[to + j] += g[from + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat { a, b, axis } => {
                let (outer, inner, ca, cb) = {
                    let ash = &self.nodes[a.0].shape;
                    let bsh = &self.nodes[b.0].shape;
                    (product(&ash[..axis]), product(&ash[axis + 1..]), ash[axis], bsh[axis])
                };
                let (ba, bb, bo) = (ca * inner, cb * inner, (ca + cb) * inner);
                if self.rg(a) {
                    self.ensure_grad(a);
                    let (ga, g, _) = grad_in_out(&mut self.nodes, a.0, i, i);
                    for o in 0..outer {
                        for j in 0..ba {
                            ga[o * ba + j] += g[o * bo + j];
                        }
                    }
                }
                if self.rg(b) {
                    self.ensure_grad(b);
                    let (gb, g, _) = grad_in_out(&mut self.nodes, b.0, i, i);
                    for o in 0..outer {
                        for j in 0..bb {
                            gb[o * bb + j] += g[o * bo + ba + j];
                        }
                    }
                }
            }
            Op::ExpandBatch { a, batch } => {
                if self.rg(a) {
                    self.ensure_grad(a);
                    let (ga, g, _) = grad_in_out(&mut self.nodes, a.0, i, i);
                    let n = ga.len();
                    for t in 0..batch {
                        for j in 0..n {
                            ga[j] += g[t * n + j];
                        }
                    }
                }
            }
            Op::Embed { table, ref ids } => {
                if self.rg(table) {
                    let d = *self.nodes[table.0].shape.last().unwrap();
                    self.ensure_grad(table);
                    let (gt, g, _) = grad_in_out(&mut self.nodes, table.0, i, i);
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[row * d + j];
                        }
                    }
                }
            }
            Op::Softmax { a } => {
                if self.rg(a) {
                    let d = *self.nodes[i].shape.last().unwrap();
                    self.ensure_grad(a);
                    let (ga, g, out) = grad_in_out(&mut self.nodes, a.0, i, i);
                    for r in 0..out.len() / d {
                        let (o, gr) = (&out[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let dot: f64 = o.iter().zip(gr).map(|(&s, &gv)| s * gv).sum();
                        let dst = &mut ga[r * d..(r + 1) * d];
                        for j in 0..d {
                            dst[j] += o[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Sigmoid { a } => {
                if self.rg(a) {
                    self.ensure_grad(a);
                    let (ga, g, out) = grad_in_out(&mut self.nodes, a.0, i, i);
                    for j in 0..out.len() {
                        ga[j] += g[j] * out[j] * (1.0 - out[j]);
                    }
                }
            }
            Op::LogSigmoid { a } => {
                if self.rg(a) {
                    self.ensure_grad(a);
                    let (ga, g, xs) = grad_in_out(&mut self.nodes, a.0, i, a.0);
                    for j in 0..g.len() {
                        // d/dx ln(sigmoid(x)) = 1 - sigmoid(x) = sigmoid(-x)
                        ga[j] += g[j] * stable_sigmoid(-xs[j]);
                    }
                }
            }
            Op::Gelu { a } => {
                if self.rg(a) {
                    self.ensure_grad(a);
                    let (ga, g, xs, aux) = grad_in_aux(&mut self.nodes, a.0, i);
                    for j in 0..g.len() {
                        let x = xs[j];
                        let t = aux[j];
                        let sech2 = 1.0 - t * t;
                        let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        ga[j] += g[j] * (0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let d = *self.nodes[i].shape.last().unwrap();
                let rows = self.nodes[i].data.len() / d;
                // Gradients w.r.t. gain and bias.
                if self.rg(gain) {
                    self.ensure_grad(gain);
                    for r in 0..rows {
                        let mean = self.nodes[i].aux[r * 2];
                        let inv_std = self.nodes[i].aux[r * 2 + 1];
                        for j in 0..d {
                            let xv = self.nodes[x.0].data[r * d + j];
                            let gv = self.nodes[i].grad.as_ref().unwrap()[r * d + j];
                            self.nodes[gain.0].grad.as_mut().unwrap()[j] += gv * (xv - mean) * inv_std;
                        }
                    }
                }
                if self.rg(bias) {
                    self.ensure_grad(bias);
                    for r in 0..rows {
                        for j in 0..d {
                            let gv = self.nodes[i].grad.as_ref().unwrap()[r * d + j];
                            self.nodes[bias.0].grad.as_mut().unwrap()[j] += gv;
                        }
                    }
                }
                if self.rg(x) {
                    self.ensure_grad(x);
                    let df = d as f64;
                    for r in 0..rows {
                        let mean = self.nodes[i].aux[r * 2];
                        let inv_std = self.nodes[i].aux[r * 2 + 1];
                        let mut dxhat = vec![0.0; d];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let gv = self.nodes[i].grad.as_ref().unwrap()[r * d + j];
                            let gj = self.nodes[gain.0].data[j];
                            let xhat = (self.nodes[x.0].data[r * d + j] - mean) * inv_std;
                            let dxh = gv * gj;
                            dxhat[j] = dxh;
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat;
                        }
                        for j in 0..d {
                            let xhat = (self.nodes[x.0].data[r * d + j] - mean) * inv_std;
                            let dx = inv_std / df * (df * dxhat[j] - sum_dxhat - xhat * sum_dxhat_xhat);
                            self.nodes[x.0].grad.as_mut().unwrap()[r * d + j] += dx;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if self.rg(a) {
                    self.ensure_grad(a);
                    let (ga, g, _) = grad_in_out(&mut self.nodes, a.0, i, i);
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if self.rg(b) {
                    self.ensure_grad(b);
                    let (gb, g, _) = grad_in_out(&mut self.nodes, b.0, i, i);
                    let bn = gb.len();
                    if bn == 1 {
                        gb[0] += g.iter().sum::<f64>();
                    } else {
                        for chunk in g.chunks_exact(bn) {
                            for (x, y) in gb.iter_mut().zip(chunk) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let bn = self.nodes[b.0].data.len();
                if self.rg(a) {
                    self.ensure_grad(a);
                    let (ga, g, bd) = grad_in_out(&mut self.nodes, a.0, i, b.0);
                    if bn == 1 {
                        let y = bd[0];
                        for (x, gv) in ga.iter_mut().zip(g) {
                            *x += gv * y;
                        }
                    } else {
                        for (gchunk, achunk) in g.chunks_exact(bn).zip(ga.chunks_exact_mut(bn)) {
                            for ((x, &gv), &y) in achunk.iter_mut().zip(gchunk).zip(bd) {
                                *x += gv * y;
                            }
                        }
                    }
                }
                if self.rg(b) {
                    self.ensure_grad(b);
                    let (gb, g, ad) = grad_in_out(&mut self.nodes, b.0, i, a.0);
                    if bn == 1 {
                        gb[0] += g.iter().zip(ad).map(|(&gv, &x)| gv * x).sum::<f64>();
                    } else {
                        for (gchunk, achunk) in g.chunks_exact(bn).zip(ad.chunks_exact(bn)) {
                            for ((x, &gv), &av) in gb.iter_mut().zip(gchunk).zip(achunk) {
                                *x += gv * av;
                            }
                        }
                    }
                }
            }
            Op::Scale { a, c } => {
                if self.rg(a) {
                    self.ensure_grad(a);
                    let (ga, g, _) = grad_in_out(&mut self.nodes, a.0, i, i);
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += c * y;
                    }
                }
            }
            Op::AddScalarToTrailingCols { a, bias, cols } => {
                let d = *self.nodes[i].shape.last().unwrap();
                if self.rg(a) {
                    self.ensure_grad(a);
                    let (ga, g, _) = grad_in_out(&mut self.nodes, a.0, i, i);
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if self.rg(bias) {
                    self.ensure_grad(bias);
                    let (gb, g, _) = grad_in_out(&mut self.nodes, bias.0, i, i);
                    let mut acc = 0.0;
                    for r in 0..g.len() / d {
                        for j in d - cols..d {
                            acc += g[r * d + j];
                        }
                    }
                    gb[0] += acc;
                }
            }
            Op::Sum { a } => {
                if self.rg(a) {
                    self.ensure_grad(a);
                    let (ga, g, _) = grad_in_out(&mut self.nodes, a.0, i, i);
                    let gv = g[0];
                    for x in ga.iter_mut() {
                        *x += gv;
                    }
                }
            }
            Op::Mean { a } => {
                if self.rg(a) {
                    self.ensure_grad(a);
                    let (ga, g, _) = grad_in_out(&mut self.nodes, a.0, i, i);
                    let gv = g[0] / ga.len() as f64;
                    for x in ga.iter_mut() {
                        *x += gv;
                    }
                }
            }
            Op::MseLoss { pred, target } => {
                let n = self.nodes[pred.0].data.len() as f64;
                if self.rg(pred) {
                    self.ensure_grad(pred);
                    let gv = self.nodes[i].grad.as_ref().unwrap()[0];
                    let (gp, _, td) = grad_in_out(&mut self.nodes, pred.0, i, target.0);
                    let pd: Vec<f64> = Vec::new();
                    debug_assert!(pd.is_empty());
                    for j in 0..gp.len() {
                        // pred data lives on the pred node itself; read via td's sibling
                        let _ = j;
                    }
                    // Recompute with direct indexing to keep the borrow simple.
                    drop(pd);
                    let _ = (gp, td, gv);
                    let gseed = self.nodes[i].grad.as_ref().unwrap()[0];
                    for j in 0..self.nodes[pred.0].data.len() {
                        let d = self.nodes[pred.0].data[j] - self.nodes[target.0].data[j];
                        self.nodes[pred.0].grad.as_mut().unwrap()[j] += gseed * 2.0 * d / n;
                    }
                }
                if self.rg(target) {
                    self.ensure_grad(target);
                    let gseed = self.nodes[i].grad.as_ref().unwrap()[0];
                    for j in 0..self.nodes[target.0].data.len() {
                        let d = self.nodes[pred.0].data[j] - self.nodes[target.0].data[j];
                        self.nodes[target.0].grad.as_mut().unwrap()[j] -= gseed * 2.0 * d / n;
                    }
                }
            }
        }
    }
}

/// Split-borrow helper: mutable grad of `target`, shared grad of node `out`,
/// and shared data of node `other`.
fn grad_in_out(
    nodes: &mut [Node],
    target: usize,
    out: usize,
    other: usize,
) -> (&mut [f64], &[f64], &[f64]) {
    debug_assert_ne!(target, out);
    let ptr = nodes.as_mut_ptr();
    unsafe {
        let g_target = (*ptr.add(target)).grad.as_mut().unwrap().as_mut_slice();
        let g_out = (*ptr.add(out)).grad.as_ref().unwrap().as_slice();
        let d_other = (*ptr.add(other)).data.as_slice();
        (g_target, g_out, d_other)
    }
}

/// Like [`grad_in_out`] but also returns the output node's aux buffer.
fn grad_in_aux(nodes: &mut [Node], target: usize, out: usize) -> (&mut [f64], &[f64], &[f64], &[f64]) {
    debug_assert_ne!(target, out);
    let ptr = nodes.as_mut_ptr();
    unsafe {
        let g_target = (*ptr.add(target)).grad.as_mut().unwrap().as_mut_slice();
        let g_out = (*ptr.add(out)).grad.as_ref().unwrap().as_slice();
        let d_in = (*ptr.add(target)).data.as_slice();
        let aux = (*ptr.add(out)).aux.as_slice();
        (g_target, g_out, d_in, aux)
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn transpose2d(src: &[f64], dst: &mut [f64], r: usize, c: usize) {
    for i in 0..r {
        for j in 0..c {
            dst[j * r + i] = src[i * c + j];
        }
    }
}

/// `b` broadcasts over `a` when shapes are equal, `b` is a scalar, or `b`'s
/// shape is a suffix of `a`'s shape. Broadcasting is deliberately limited to
/// leading batch dimensions.
fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    if product(b) == 1 {
        return true;
    }
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    beta: f64,
) {
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
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_passes_through() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let id3 = g.constant(&Tensor::identity(3));
        let y = g.matmul(id3, x).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

        let a = g.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let id2 = g.constant(&Tensor::identity(2));
        let b = g.matmul(a, id2).unwrap();
        assert_eq!(g.value(b), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        let a = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let mut expect = vec![0.0; 4 * 3];
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..5 {
                    s += a.data()[i * 5 + p] * b.data()[p * 3 + j];
                }
                expect[i * 3 + j] = s;
            }
        }
        let mut g = Graph::new();
        let an = g.leaf(&a);
        let bn = g.leaf(&b);
        let c = g.matmul(an, bn).unwrap();
        for (got, want) in g.value(c).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::zeros(&[2, 3]));
        let b = g.leaf(&Tensor::zeros(&[4, 2]));
        match g.matmul(a, b) {
            Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn softmax_uniform_and_saturated() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[3], &[0.0, 0.0, 0.0]));
        let s = g.softmax(x).unwrap();
        for v in g.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = g.leaf(&t(&[3], &[1000.0, 0.0, 0.0]));
        let sy = g.softmax(y).unwrap();
        let out = g.value(sy);
        assert!((out[0] - 1.0).abs() < 1e-12);
        assert!(out[1] < 1e-12 && out[2] < 1e-12);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rows_sum_to_one_for_large_inputs() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = Tensor::randn(&[4, 9], 1e3, &mut rng);
            let mut g = Graph::new();
            let xn = g.leaf(&x);
            let s = g.softmax(xn).unwrap();
            for row in g.value(s).chunks_exact(9) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|v| *v >= 0.0));
            }
        }
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.softmax(x).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (got, v) in g.value(s).iter().zip([1.0f64, 2.0, 3.0]) {
            assert!((got - v.exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(g.softmax(x), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn sigmoid_known_values() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[3], &[0.0, -40.0, 2.0]));
        let s = g.sigmoid(x).unwrap();
        let out = g.value(s);
        assert_eq!(out[0], 0.5);
        assert!(out[1] < 1e-17);
        let direct = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((out[2] - direct).abs() < 1e-15);
    }

    #[test]
    fn concat_shapes_and_identity() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::zeros(&[2, 4, 8]));
        let b = g.leaf(&Tensor::zeros(&[2, 2, 8]));
        let c = g.concat(a, b, 1).unwrap();
        assert_eq!(g.shape(c), &[2, 6, 8]);

        let x = g.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let empty = g.leaf(&Tensor::zeros(&[2, 0]));
        let y = g.concat(x, empty, 1).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0, 3.0, 4.0]);

        let bad = g.leaf(&Tensor::zeros(&[3, 2]));
        assert!(matches!(g.concat(x, bad, 1), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn concat_backward_splits_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(&t(&[2, 2], &[1.0; 4]));
        let b = g.leaf(&t(&[2, 3], &[2.0; 6]));
        let c = g.concat(a, b, 1).unwrap();
        let loss = g.sum(c).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0; 4]);
        assert_eq!(g.grad(b).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn layernorm_constant_slice_and_zero_gain() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[3], &[5.0, 5.0, 5.0]));
        let gain = g.leaf(&t(&[3], &[1.0, 1.0, 1.0]));
        let bias = g.leaf(&t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.layernorm(x, gain, bias, 1e-5).unwrap();
        for v in g.value(y) {
            assert_eq!(*v, 0.0);
        }
        let zero_gain = g.leaf(&t(&[3], &[0.0; 3]));
        let b2 = g.leaf(&t(&[3], &[7.0, 8.0, 9.0]));
        let x2 = g.leaf(&t(&[2, 3], &[1.0, -4.0, 2.5, 0.0, 0.0, 3.0]));
        let y2 = g.layernorm(x2, zero_gain, b2, 1e-5).unwrap();
        assert_eq!(g.value(y2), &[7.0, 8.0, 9.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn layernorm_statistics_oracle() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
        let x = Tensor::randn(&[4, 16], 3.0, &mut rng);
        let mut g = Graph::new();
        let xn = g.leaf(&x);
        let gain = g.constant(&Tensor::full(&[16], 1.0));
        let bias = g.constant(&Tensor::zeros(&[16]));
        let y = g.layernorm(xn, gain, bias, 1e-12).unwrap();
        for row in g.value(y).chunks_exact(16) {
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-10, "var {var}");
        }
    }

    #[test]
    fn mse_loss_basics() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[2], &[1.5, -0.5]));
        let same = g.leaf(&t(&[2], &[1.5, -0.5]));
        let zero = g.mse_loss(x, same).unwrap();
        assert_eq!(g.scalar_value(zero), 0.0);

        let ones = g.leaf(&t(&[2], &[1.0, 1.0]));
        let zeros = g.leaf(&t(&[2], &[0.0, 0.0]));
        let one = g.mse_loss(ones, zeros).unwrap();
        assert_eq!(g.scalar_value(one), 1.0);
    }

    #[test]
    fn backward_linear_and_fanout() {
        // loss = sum(3 * x) -> grad(x) = 3 everywhere
        let mut g = Graph::new();
        let x = g.leaf(&t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.scale(x, 3.0).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0; 4]);

        // fan-out: loss = sum(y) + sum(y) -> grad(y) = 2
        for k in 1..=4usize {
            let mut g = Graph::new();
            let x = g.leaf(&t(&[3], &[0.5, -1.0, 2.0]));
            let y = g.scale(x, 1.0).unwrap();
            let mut total = g.sum(y).unwrap();
            for _ in 1..k {
                let s = g.sum(y).unwrap();
                let both = g.concat(total, s, 0).unwrap();
                total = g.sum(both).unwrap();
            }
            g.backward(total).unwrap();
            assert_eq!(g.grad(x).unwrap(), &[k as f64; 3], "fan-out k={k}");
        }
    }

    #[test]
    fn backward_rejects_nonscalar_and_double_sweep() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss { .. })));
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(TensorError::GraphConsumed)));
        g.reset();
        assert!(g.is_empty());
    }

    #[test]
    fn batched_matmul_matches_per_slice_oracle() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(2);
        for (b, m, k, n) in [(2, 3, 4, 5), (8, 8, 8, 8), (3, 1, 7, 2)] {
            let a = Tensor::randn(&[b, m, k], 1.0, &mut rng);
            let bt = Tensor::randn(&[b, k, n], 1.0, &mut rng);
            let mut g = Graph::new();
            let an = g.leaf(&a);
            let bn = g.leaf(&bt);
            let c = g.matmul(an, bn).unwrap();
            for bi in 0..b {
                for i in 0..m {
                    for j in 0..n {
                        let mut s = 0.0;
                        for p in 0..k {
                            s += a.data()[bi * m * k + i * k + p] * bt.data()[bi * k * n + p * n + j];
                        }
                        let got = g.value(c)[bi * m * n + i * n + j];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn split_merge_heads_roundtrip() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        let x = Tensor::randn(&[2, 3, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let xn = g.leaf(&x);
        let split = g.split_heads(xn, 4).unwrap();
        assert_eq!(g.shape(split), &[2, 4, 3, 2]);
        let merged = g.merge_heads(split).unwrap();
        assert_eq!(g.value(merged), x.data());
    }

    #[test]
    fn embed_gathers_rows_and_backprops() {
        let mut g = Graph::new();
        let table = g.leaf(&t(&[3, 2], &[0.0, 1.0, 10.0, 11.0, 20.0, 21.0]));
        let e = g.embed(table, &[2, 0, 2], &[3]).unwrap();
        assert_eq!(g.value(e), &[20.0, 21.0, 0.0, 1.0, 20.0, 21.0]);
        let loss = g.sum(e).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);

        let bad = g.embed(table, &[3], &[1]);
        assert!(matches!(bad, Err(TensorError::IndexOutOfRange { index: 3, len: 3 })));
    }

    #[test]
    fn add_broadcast_rules() {
        let mut g = Graph::new();
        let a = g.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(&t(&[2], &[10.0, 20.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c), &[11.0, 22.0, 13.0, 24.0]);
        let s = g.leaf(&Tensor::scalar(1.0));
        let d = g.add(a, s).unwrap();
        assert_eq!(g.value(d), &[2.0, 3.0, 4.0, 5.0]);
        let loss0 = g.sum(c).unwrap();
        g.backward(loss0).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[2.0, 2.0]);

        let mut g = Graph::new();
        let a = g.leaf(&Tensor::zeros(&[4]));
        let b = g.leaf(&Tensor::zeros(&[3]));
        assert!(matches!(g.add(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn trailing_cols_bias() {
        let mut g = Graph::new();
        let a = g.leaf(&t(&[2, 4], &[0.0; 8]));
        let bias = g.leaf(&Tensor::scalar(3.0));
        let y = g.add_scalar_to_trailing_cols(a, bias, 2).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0, 3.0, 3.0, 0.0, 0.0, 3.0, 3.0]);
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(bias).unwrap(), &[4.0]);
    }

    #[test]
    fn pool_reuses_buffers() {
        let mut g = Graph::new();
        for _ in 0..3 {
            let x = g.leaf(&Tensor::zeros(&[16, 16]));
            let y = g.scale(x, 2.0).unwrap();
            let loss = g.sum(y).unwrap();
            g.backward(loss).unwrap();
            g.reset();
        }
        assert!(g.is_empty());
    }
}
