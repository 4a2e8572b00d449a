//! Reverse-mode automatic differentiation on a recorded tape.
//!
//! Values live in a [`Graph`]: a flat list of tensors appended in construction
//! order (define-by-run). Each non-leaf tensor remembers the operation that
//! produced it; [`Graph::backward`] walks the tape once in exact reverse
//! recording order, accumulating vector-Jacobian products into per-node
//! gradient buffers. Storage is row-major `Vec<f64>` throughout and every
//! computation is 64-bit: the engine trades speed for bit-level determinism,
//! which the rest of the workspace relies on (identical inputs must produce
//! bit-identical tapes and checkpoints).
//!
//! Leaves come in two flavours: [`Graph::input`] (constants — gradients are
//! never materialized for them, so frozen weights provably receive none) and
//! [`Graph::param`] (trainable — gradients appear after `backward`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};

/// Handle to a tensor recorded on a [`Graph`]. Ids are graph-local: using an
/// id from one graph with another is a logic error (caught by bounds checks).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    /// Position in the tape (recording order).
    pub fn index(self) -> usize {
        self.0
    }
}

/// One recorded tensor: value, shape, optional gradient, and provenance.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Populated by `backward` for every node that influences the loss,
    /// except constant leaves (which never hold gradients).
    pub grad: Option<Vec<f64>>,
    op: Op,
    trainable: bool,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn is_constant_leaf(&self) -> bool {
        matches!(self.op, Op::Leaf) && !self.trainable
    }
}

/// Recorded operation with whatever forward-pass state its backward needs.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: TensorId, b: TensorId },
    AddBias { x: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Affine { x: TensorId, scale: f64 },
    MatMul { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    Transpose { x: TensorId, rows: usize, cols: usize },
    Sigmoid { x: TensorId },
    Tanh { x: TensorId },
    SoftmaxRows { x: TensorId, rows: usize, cols: usize },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, rows: usize, cols: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout { x: TensorId, mask: Vec<f64> },
    Embedding { table: TensorId, ids: Vec<usize>, dim: usize },
    CrossEntropy { logits: TensorId, targets: Vec<Option<usize>>, rows: usize, cols: usize, probs: Vec<f64>, active: usize },
    SumAll { x: TensorId },
    MeanRows { x: TensorId, rows: usize, cols: usize },
    ConcatRows { parts: Vec<TensorId>, rows: Vec<usize>, cols: usize },
    ConcatCols { parts: Vec<TensorId>, widths: Vec<usize>, rows: usize },
    SliceRows { x: TensorId, start: usize, cols: usize },
    SliceCols { x: TensorId, start: usize, len: usize, rows: usize, cols: usize },
    CausalMask { x: TensorId, rows: usize },
}

/// Tape of recorded tensors plus the bookkeeping for one backward pass.
pub struct Graph {
    nodes: Vec<Tensor>,
    backward_used: bool,
    training: bool,
}

impl Graph {
    /// Fresh tape in evaluation mode (dropout is the identity).
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), backward_used: false, training: false }
    }

    /// Fresh tape in training mode (dropout masks are applied).
    pub fn new_training() -> Self {
        Graph { nodes: Vec::new(), backward_used: false, training: true }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    /// Gradient of the loss w.r.t. this tensor, if one was accumulated.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    // ── leaf creation ────────────────────────────────────────────────────

    /// Constant leaf: participates in the forward pass but never receives a
    /// gradient (frozen weights and raw inputs enter the graph this way).
    pub fn input(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    /// Trainable leaf: `backward` leaves its gradient in place.
    pub fn param(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<TensorId> {
        self.leaf(data, shape, true)
    }

    fn leaf(&mut self, data: Vec<f64>, shape: &[usize], trainable: bool) -> Result<TensorId> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(CoreError::InvalidShape {
                op: "leaf",
                shape: shape.to_vec(),
                reason: "dimensions must be positive".into(),
            });
        }
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(CoreError::InvalidShape {
                op: "leaf",
                shape: shape.to_vec(),
                reason: format!("data length {} does not match shape", data.len()),
            });
        }
        Ok(self.push(data, shape.to_vec(), Op::Leaf, trainable))
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, trainable: bool) -> TensorId {
        self.nodes.push(Tensor { shape, data, grad: None, op, trainable });
        TensorId(self.nodes.len() - 1)
    }

    fn check_id(&self, id: TensorId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(CoreError::IndexOutOfRange {
                what: "tensor id",
                index: id.0,
                bound: self.nodes.len(),
            });
        }
        Ok(())
    }

    fn dims2(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        let t = &self.nodes[id.0];
        match t.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            other => Err(CoreError::InvalidShape {
                op,
                shape: other.to_vec(),
                reason: "expected a rank-2 tensor".into(),
            }),
        }
    }

    // ── elementwise and linear algebra ───────────────────────────────────

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_id(a)?;
        self.check_id(b)?;
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(CoreError::ShapeMismatch {
                op: "add",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(data, shape, Op::Add { a, b }, false))
    }

    /// Adds a length-`n` bias vector to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_id(x)?;
        self.check_id(b)?;
        let (m, n) = self.dims2(x, "add_bias")?;
        if self.nodes[b.0].shape != [n] {
            return Err(CoreError::ShapeMismatch {
                op: "add_bias",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut data = self.nodes[x.0].data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += self.nodes[b.0].data[j];
            }
        }
        Ok(self.push(data, vec![m, n], Op::AddBias { x, b }, false))
    }

    /// Elementwise (Hadamard) product of two same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_id(a)?;
        self.check_id(b)?;
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(CoreError::ShapeMismatch {
                op: "mul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(data, shape, Op::Mul { a, b }, false))
    }

    /// Elementwise `scale * x + shift` (covers negation, `1 - x`, score
    /// scaling, and friends).
    pub fn affine(&mut self, x: TensorId, scale: f64, shift: f64) -> Result<TensorId> {
        self.check_id(x)?;
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| scale * v + shift).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(data, shape, Op::Affine { x, scale }, false))
    }

    /// Matrix product of `[m, k] x [k, n]`, plain triple loop.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_id(a)?;
        self.check_id(b)?;
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n);
        Ok(self.push(data, vec![m, n], Op::MatMul { a, b, m, k: ka, n }, false))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_id(x)?;
        let (m, n) = self.dims2(x, "transpose")?;
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(data, vec![n, m], Op::Transpose { x, rows: m, cols: n }, false))
    }

    /// Affine map `x W^T + b` for `x: [m, in]`, `w: [out, in]`, optional
    /// bias `[out]`. Convenience composed from `matmul`/`transpose`/`add_bias`.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: Option<TensorId>) -> Result<TensorId> {
        let wt = self.transpose(w)?;
        let y = self.matmul(x, wt)?;
        match b {
            Some(bias) => self.add_bias(y, bias),
            None => Ok(y),
        }
    }

    // ── nonlinearities ───────────────────────────────────────────────────

    /// Elementwise logistic sigmoid.
    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_id(x)?;
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| sigmoid_scalar(*v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(data, shape, Op::Sigmoid { x }, false))
    }

    /// Elementwise hyperbolic tangent.
    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_id(x)?;
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.tanh()).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(data, shape, Op::Tanh { x }, false))
    }

    /// Row-wise softmax of an `[m, n]` matrix, max-shifted for stability.
    /// Rejects NaN input outright rather than producing NaN rows.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_id(x)?;
        let (m, n) = self.dims2(x, "softmax_rows")?;
        if self.nodes[x.0].data.iter().any(|v| v.is_nan()) {
            return Err(CoreError::NonFinite { op: "softmax_rows" });
        }
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                data[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                data[i * n + j] /= sum;
            }
        }
        Ok(self.push(data, vec![m, n], Op::SoftmaxRows { x, rows: m, cols: n }, false))
    }

    /// Row-wise layer normalization with learnable gain and bias:
    /// `y = gain * (x - mean) / sqrt(var + eps) + bias`, population variance,
    /// normalized over the last dimension (which must have at least 2
    /// entries — a single value has no spread to normalize).
    pub fn layernorm(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: f64) -> Result<TensorId> {
        self.check_id(x)?;
        self.check_id(gain)?;
        self.check_id(bias)?;
        let (m, n) = self.dims2(x, "layernorm")?;
        if n < 2 {
            return Err(CoreError::InvalidShape {
                op: "layernorm",
                shape: self.nodes[x.0].shape.clone(),
                reason: "normalized dimension must have at least 2 entries".into(),
            });
        }
        for (name, t) in [("gain", gain), ("bias", bias)] {
            if self.nodes[t.0].shape != [n] {
                return Err(CoreError::ShapeMismatch {
                    op: if name == "gain" { "layernorm gain" } else { "layernorm bias" },
                    lhs: vec![m, n],
                    rhs: self.nodes[t.0].shape.clone(),
                });
            }
        }
        let src = &self.nodes[x.0].data;
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let mut data = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[i * n + j] = h;
                data[i * n + j] = g[j] * h + b[j];
            }
        }
        Ok(self.push(data, vec![m, n], Op::LayerNorm { x, gain, bias, rows: m, cols: n, xhat, inv_std }, false))
    }

    /// Inverted dropout with a deterministic mask derived from `seed`.
    /// Survivors are scaled by `1 / (1 - p)`. In evaluation mode, or with
    /// `p = 0`, this is the exact identity (the same tensor id is returned).
    pub fn dropout(&mut self, x: TensorId, p: f64, seed: u64) -> Result<TensorId> {
        self.check_id(x)?;
        if !(0.0..1.0).contains(&p) {
            return Err(CoreError::Config(format!(
                "dropout probability must lie in [0, 1), got {p}"
            )));
        }
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep_scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .map(|_| if rng.gen::<f64>() >= p { keep_scale } else { 0.0 })
            .collect();
        let data: Vec<f64> = self.nodes[x.0].data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(data, shape, Op::Dropout { x, mask }, false))
    }

    // ── lookup, reduction, loss ──────────────────────────────────────────

    /// Gathers rows of a `[vocab, dim]` table: output row `i` is
    /// `table[ids[i]]`. Backward scatter-adds into the table gradient.
    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        self.check_id(table)?;
        let (vocab, dim) = self.dims2(table, "embedding")?;
        if ids.is_empty() {
            return Err(CoreError::InvalidShape {
                op: "embedding",
                shape: vec![0],
                reason: "id list must be non-empty".into(),
            });
        }
        for &id in ids {
            if id >= vocab {
                return Err(CoreError::IndexOutOfRange { what: "embedding id", index: id, bound: vocab });
            }
        }
        let src = &self.nodes[table.0].data;
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            data.extend_from_slice(&src[id * dim..(id + 1) * dim]);
        }
        let rows = ids.len();
        Ok(self.push(data, vec![rows, dim], Op::Embedding { table, ids: ids.to_vec(), dim }, false))
    }

    /// Scalar mean negative log-likelihood over the unmasked rows of
    /// `[rows, classes]` logits. `targets[i] = None` masks row `i` out of the
    /// loss entirely. Computed via max-shifted log-softmax.
    pub fn cross_entropy_with_logits(&mut self, logits: TensorId, targets: &[Option<usize>]) -> Result<TensorId> {
        self.check_id(logits)?;
        let (rows, cols) = self.dims2(logits, "cross_entropy_with_logits")?;
        if targets.len() != rows {
            return Err(CoreError::ShapeMismatch {
                op: "cross_entropy_with_logits",
                lhs: vec![rows, cols],
                rhs: vec![targets.len()],
            });
        }
        let active = targets.iter().flatten().count();
        if active == 0 {
            return Err(CoreError::Config(
                "cross entropy needs at least one unmasked target".into(),
            ));
        }
        for t in targets.iter().flatten() {
            if *t >= cols {
                return Err(CoreError::IndexOutOfRange { what: "target label", index: *t, bound: cols });
            }
        }
        let src = &self.nodes[logits.0].data;
        let mut probs = vec![0.0; rows * cols];
        let mut nll_sum = 0.0;
        for i in 0..rows {
            let row = &src[i * cols..(i + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..cols {
                let e = (row[j] - max).exp();
                probs[i * cols + j] = e;
                sum += e;
            }
            for j in 0..cols {
                probs[i * cols + j] /= sum;
            }
            if let Some(t) = targets[i] {
                // log p = (x_t - max) - ln sum, computed without re-exponentiating.
                nll_sum -= (row[t] - max) - sum.ln();
            }
        }
        let loss = nll_sum / active as f64;
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::CrossEntropy { logits, targets: targets.to_vec(), rows, cols, probs, active },
            false,
        ))
    }

    /// Scalar sum of every entry.
    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_id(x)?;
        let s: f64 = self.nodes[x.0].data.iter().sum();
        Ok(self.push(vec![s], vec![1], Op::SumAll { x }, false))
    }

    /// Column means of an `[m, n]` matrix as a `[1, n]` row.
    pub fn mean_rows(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_id(x)?;
        let (m, n) = self.dims2(x, "mean_rows")?;
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                data[j] += src[i * n + j];
            }
        }
        for v in &mut data {
            *v /= m as f64;
        }
        Ok(self.push(data, vec![1, n], Op::MeanRows { x, rows: m, cols: n }, false))
    }

    // ── layout ───────────────────────────────────────────────────────────

    /// Stacks rank-2 tensors vertically (all must share a column count).
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(CoreError::InvalidShape {
                op: "concat_rows",
                shape: vec![0],
                reason: "need at least one part".into(),
            });
        }
        let (_, cols) = self.dims2(parts[0], "concat_rows")?;
        let mut rows = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for &p in parts {
            let (m, n) = self.dims2(p, "concat_rows")?;
            if n != cols {
                return Err(CoreError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            rows.push(m);
            total += m;
        }
        let mut data = Vec::with_capacity(total * cols);
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        Ok(self.push(data, vec![total, cols], Op::ConcatRows { parts: parts.to_vec(), rows, cols }, false))
    }

    /// Stacks rank-2 tensors horizontally (all must share a row count).
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(CoreError::InvalidShape {
                op: "concat_cols",
                shape: vec![0],
                reason: "need at least one part".into(),
            });
        }
        let (rows, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for &p in parts {
            let (m, n) = self.dims2(p, "concat_cols")?;
            if m != rows {
                return Err(CoreError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            widths.push(n);
            total += n;
        }
        let mut data = vec![0.0; rows * total];
        let mut offset = 0usize;
        for (idx, &p) in parts.iter().enumerate() {
            let n = widths[idx];
            let src = &self.nodes[p.0].data;
            for i in 0..rows {
                data[i * total + offset..i * total + offset + n]
                    .copy_from_slice(&src[i * n..(i + 1) * n]);
            }
            offset += n;
        }
        Ok(self.push(data, vec![rows, total], Op::ConcatCols { parts: parts.to_vec(), widths, rows }, false))
    }

    /// Contiguous row slice `[start, start + len)` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        self.check_id(x)?;
        let (m, n) = self.dims2(x, "slice_rows")?;
        if len == 0 || start + len > m {
            return Err(CoreError::IndexOutOfRange { what: "row slice", index: start + len, bound: m });
        }
        let data = self.nodes[x.0].data[start * n..(start + len) * n].to_vec();
        Ok(self.push(data, vec![len, n], Op::SliceRows { x, start, cols: n }, false))
    }

    /// Contiguous column slice `[start, start + len)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        self.check_id(x)?;
        let (m, n) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(CoreError::IndexOutOfRange { what: "column slice", index: start + len, bound: n });
        }
        let src = &self.nodes[x.0].data;
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        Ok(self.push(data, vec![m, len], Op::SliceCols { x, start, len, rows: m, cols: n }, false))
    }

    /// Replaces entries above the diagonal of a square score matrix with
    /// negative infinity, so a following row softmax attends only to
    /// positions at or before each query position.
    pub fn causal_mask(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_id(x)?;
        let (m, n) = self.dims2(x, "causal_mask")?;
        if m != n {
            return Err(CoreError::InvalidShape {
                op: "causal_mask",
                shape: vec![m, n],
                reason: "score matrix must be square".into(),
            });
        }
        let src = &self.nodes[x.0].data;
        let mut data = src.clone();
        for i in 0..m {
            for j in (i + 1)..n {
                data[i * n + j] = f64::NEG_INFINITY;
            }
        }
        Ok(self.push(data, vec![m, n], Op::CausalMask { x, rows: m }, false))
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Walks the tape in exact reverse
    /// recording order, accumulating gradients. May run at most once per
    /// recorded graph; record a fresh graph to differentiate again.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        self.check_id(loss)?;
        if self.backward_used {
            return Err(CoreError::BackwardConsumed);
        }
        self.backward_used = true;
        if self.nodes[loss.0].numel() != 1 {
            return Err(CoreError::InvalidShape {
                op: "backward",
                shape: self.nodes[loss.0].shape.clone(),
                reason: "loss must be a scalar".into(),
            });
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            // Tape invariant: an op's inputs were recorded strictly before it,
            // so splitting at `i` gives mutable access to every input.
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &tail[0];
            let Some(g) = node.grad.as_ref() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Add { a, b } => {
                    accumulate(head, *a, g);
                    accumulate(head, *b, g);
                }
                Op::AddBias { x, b } => {
                    accumulate(head, *x, g);
                    let n = head[b.0].numel();
                    let mut gb = vec![0.0; n];
                    for (idx, v) in g.iter().enumerate() {
                        gb[idx % n] += v;
                    }
                    accumulate(head, *b, &gb);
                }
                Op::Mul { a, b } => {
                    let ga: Vec<f64> = g.iter().zip(&head[b.0].data).map(|(v, y)| v * y).collect();
                    let gb: Vec<f64> = g.iter().zip(&head[a.0].data).map(|(v, x)| v * x).collect();
                    accumulate(head, *a, &ga);
                    accumulate(head, *b, &gb);
                }
                Op::Affine { x, scale } => {
                    let gx: Vec<f64> = g.iter().map(|v| scale * v).collect();
                    accumulate(head, *x, &gx);
                }
                Op::MatMul { a, b, m, k, n } => {
                    // dA = g B^T, dB = A^T g
                    let (m, k, n) = (*m, *k, *n);
                    let bd = &head[b.0].data;
                    let ad = &head[a.0].data;
                    let mut ga = vec![0.0; m * k];
                    for i2 in 0..m {
                        for j2 in 0..k {
                            let mut s = 0.0;
                            for l in 0..n {
                                s += g[i2 * n + l] * bd[j2 * n + l];
                            }
                            ga[i2 * k + j2] = s;
                        }
                    }
                    let mut gb = vec![0.0; k * n];
                    for i2 in 0..k {
                        for j2 in 0..n {
                            let mut s = 0.0;
                            for l in 0..m {
                                s += ad[l * k + i2] * g[l * n + j2];
                            }
                            gb[i2 * n + j2] = s;
                        }
                    }
                    accumulate(head, *a, &ga);
                    accumulate(head, *b, &gb);
                }
                Op::Transpose { x, rows, cols } => {
                    // g has shape [cols, rows]; route back transposed.
                    let (m, n) = (*rows, *cols);
                    let mut gx = vec![0.0; m * n];
                    for i2 in 0..m {
                        for j2 in 0..n {
                            gx[i2 * n + j2] = g[j2 * m + i2];
                        }
                    }
                    accumulate(head, *x, &gx);
                }
                Op::Sigmoid { x } => {
                    let y = &node.data;
                    let gx: Vec<f64> = g.iter().zip(y).map(|(v, s)| v * s * (1.0 - s)).collect();
                    accumulate(head, *x, &gx);
                }
                Op::Tanh { x } => {
                    let y = &node.data;
                    let gx: Vec<f64> = g.iter().zip(y).map(|(v, t)| v * (1.0 - t * t)).collect();
                    accumulate(head, *x, &gx);
                }
                Op::SoftmaxRows { x, rows, cols } => {
                    let y = &node.data;
                    let (m, n) = (*rows, *cols);
                    let mut gx = vec![0.0; m * n];
                    for i2 in 0..m {
                        let mut dot = 0.0;
                        for j2 in 0..n {
                            dot += g[i2 * n + j2] * y[i2 * n + j2];
                        }
                        for j2 in 0..n {
                            gx[i2 * n + j2] = y[i2 * n + j2] * (g[i2 * n + j2] - dot);
                        }
                    }
                    accumulate(head, *x, &gx);
                }
                Op::LayerNorm { x, gain, bias, rows, cols, xhat, inv_std } => {
                    let (m, n) = (*rows, *cols);
                    let gd = &head[gain.0].data;
                    let mut gx = vec![0.0; m * n];
                    let mut ggain = vec![0.0; n];
                    let mut gbias = vec![0.0; n];
                    for i2 in 0..m {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j2 in 0..n {
                            let dxhat = g[i2 * n + j2] * gd[j2];
                            mean_d += dxhat;
                            mean_dx += dxhat * xhat[i2 * n + j2];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for j2 in 0..n {
                            let dxhat = g[i2 * n + j2] * gd[j2];
                            gx[i2 * n + j2] =
                                inv_std[i2] * (dxhat - mean_d - xhat[i2 * n + j2] * mean_dx);
                            ggain[j2] += g[i2 * n + j2] * xhat[i2 * n + j2];
                            gbias[j2] += g[i2 * n + j2];
                        }
                    }
                    accumulate(head, *x, &gx);
                    accumulate(head, *gain, &ggain);
                    accumulate(head, *bias, &gbias);
                }
                Op::Dropout { x, mask } => {
                    let gx: Vec<f64> = g.iter().zip(mask).map(|(v, m2)| v * m2).collect();
                    accumulate(head, *x, &gx);
                }
                Op::Embedding { table, ids, dim } => {
                    if !head[table.0].is_constant_leaf() {
                        let d = *dim;
                        let numel = head[table.0].numel();
                        let buf = head[table.0].grad.get_or_insert_with(|| vec![0.0; numel]);
                        for (row, &id) in ids.iter().enumerate() {
                            for j2 in 0..d {
                                buf[id * d + j2] += g[row * d + j2];
                            }
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, rows, cols, probs, active } => {
                    let (m, n) = (*rows, *cols);
                    let scale = g[0] / *active as f64;
                    let mut gx = vec![0.0; m * n];
                    for i2 in 0..m {
                        if let Some(t) = targets[i2] {
                            for j2 in 0..n {
                                let indicator = if j2 == t { 1.0 } else { 0.0 };
                                gx[i2 * n + j2] = scale * (probs[i2 * n + j2] - indicator);
                            }
                        }
                    }
                    accumulate(head, *logits, &gx);
                }
                Op::SumAll { x } => {
                    let gx = vec![g[0]; head[x.0].numel()];
                    accumulate(head, *x, &gx);
                }
                Op::MeanRows { x, rows, cols } => {
                    let (m, n) = (*rows, *cols);
                    let mut gx = vec![0.0; m * n];
                    for i2 in 0..m {
                        for j2 in 0..n {
                            gx[i2 * n + j2] = g[j2] / m as f64;
                        }
                    }
                    accumulate(head, *x, &gx);
                }
                Op::ConcatRows { parts, rows, cols } => {
                    let n = *cols;
                    let mut offset = 0usize;
                    for (idx, &p) in parts.iter().enumerate() {
                        let m = rows[idx];
                        accumulate(head, p, &g[offset * n..(offset + m) * n]);
                        offset += m;
                    }
                }
                Op::ConcatCols { parts, widths, rows } => {
                    let m = *rows;
                    let total: usize = widths.iter().sum();
                    let mut offset = 0usize;
                    for (idx, &p) in parts.iter().enumerate() {
                        let n = widths[idx];
                        let mut gp = vec![0.0; m * n];
                        for i2 in 0..m {
                            gp[i2 * n..(i2 + 1) * n]
                                .copy_from_slice(&g[i2 * total + offset..i2 * total + offset + n]);
                        }
                        accumulate(head, p, &gp);
                        offset += n;
                    }
                }
                Op::SliceRows { x, start, cols } => {
                    if !head[x.0].is_constant_leaf() {
                        let (s, n) = (*start, *cols);
                        let numel = head[x.0].numel();
                        let buf = head[x.0].grad.get_or_insert_with(|| vec![0.0; numel]);
                        for (idx, v) in g.iter().enumerate() {
                            buf[s * n + idx] += v;
                        }
                    }
                }
                Op::SliceCols { x, start, len, rows, cols } => {
                    if !head[x.0].is_constant_leaf() {
                        let (s, l, m, n) = (*start, *len, *rows, *cols);
                        let numel = head[x.0].numel();
                        let buf = head[x.0].grad.get_or_insert_with(|| vec![0.0; numel]);
                        for i2 in 0..m {
                            for j2 in 0..l {
                                buf[i2 * n + s + j2] += g[i2 * l + j2];
                            }
                        }
                    }
                }
                Op::CausalMask { x, rows } => {
                    let n = *rows;
                    let mut gx = vec![0.0; n * n];
                    for i2 in 0..n {
                        for j2 in 0..=i2 {
                            gx[i2 * n + j2] = g[i2 * n + j2];
                        }
                    }
                    accumulate(head, *x, &gx);
                }
            }
        }
        Ok(())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Adds `contribution` into the gradient buffer of `id`, allocating it on
/// first touch. Constant leaves are skipped so they provably never hold
/// gradients.
fn accumulate(head: &mut [Tensor], id: TensorId, contribution: &[f64]) {
    let target = &mut head[id.0];
    if target.is_constant_leaf() {
        return;
    }
    let numel = target.numel();
    let buf = target.grad.get_or_insert_with(|| vec![0.0; numel]);
    for (b, c) in buf.iter_mut().zip(contribution) {
        *b += c;
    }
}

/// Plain `[m, k] x [k, n]` product used by the forward pass.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[l * n + j];
            }
        }
    }
    out
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    // Split on sign so neither branch exponentiates a large positive value.
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
