//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape of operation records built during the forward pass
//! and rebuilt from scratch every training step, which keeps sampled control
//! flow (the span slice point differs per sample) trivially correct.
//! [`Graph::backward`] walks the tape once in reverse creation order and
//! accumulates gradients additively; call [`Graph::zero_grads`] to reset.
//!
//! Everything is f64 and strictly sequential, so identical inputs produce
//! bit-identical outputs and finite-difference checks have the precision
//! they need.

use crate::error::{Error, Result};


/// Dense row-major tensor. Scalars have rank 0 (empty shape, one element).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, validating that the shape matches the element count,
    /// every extent is positive and every value is finite.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "tensor shape {shape:?} contains a zero extent"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Contract(
                "tensor values must be finite".to_string(),
            ));
        }
        Ok(Tensor { shape, values, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, values: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], values: vec![v], requires_grad: false, grad: None }
    }

    /// Marks this tensor as a differentiation target.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.values[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.values.len());
        let g = self
            .grad
            .get_or_insert_with(|| vec![0.0; self.values.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
        debug_assert!(g.iter().all(|v| v.is_finite()), "non-finite gradient");
    }
}

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Recorded operation kinds. Creation order is the topological order.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Transpose { x: TensorId },
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, factor: f64 },
    Tanh { x: TensorId },
    Gelu { x: TensorId },
    Softmax { x: TensorId },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, eps: f64 },
    MeanRows { x: TensorId },
    CrossEntropy { logits: TensorId, label: usize },
    GatherRows { table: TensorId, indices: Vec<usize> },
    SliceRows { x: TensorId, start: usize, end: usize },
    SliceCols { x: TensorId, start: usize, end: usize },
    ConcatCols { parts: Vec<TensorId> },
    Reshape { x: TensorId },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Dynamic computation tape. Single-threaded during construction and
/// backward; results can be snapshotted out as plain [`Tensor`]s.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a tensor as a leaf node. Its `requires_grad` flag decides
    /// whether backward accumulates a gradient for it.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        self.push(tensor, Op::Leaf)
    }

    /// Inserts a gradient-free constant.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<TensorId> {
        Ok(self.leaf(Tensor::new(shape, values)?))
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].tensor.values()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad()
    }

    /// Clones the forward value out of the graph.
    pub fn snapshot(&self, id: TensorId) -> Tensor {
        let t = &self.nodes[id.0].tensor;
        Tensor {
            shape: t.shape.clone(),
            values: t.values.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.tensor.zero_grad();
        }
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> TensorId {
        debug_assert!(
            tensor.values.iter().all(|v| v.is_finite()),
            "non-finite values out of {op:?}"
        );
        self.nodes.push(Node { tensor, op });
        TensorId(self.nodes.len() - 1)
    }

    fn push_result(
        &mut self,
        shape: Vec<usize>,
        values: Vec<f64>,
        requires_grad: bool,
        op: Op,
    ) -> TensorId {
        let tensor = Tensor { shape, values, requires_grad, grad: None };
        self.push(tensor, op)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].tensor.requires_grad
    }

    // ── Forward operations ──────────────────────────────────────────────

    /// Matrix product with numpy-style rank handling: 2-D×2-D, plus 1-D
    /// operands treated as a row/column that is dropped from the output
    /// ([m,k]×[k] → [m], [k]×[k,n] → [n], [k]×[k] → scalar).
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (am, ak) = as_matrix(self.shape(a), MatSide::Lhs)?;
        let (bk, bn) = as_matrix(self.shape(b), MatSide::Rhs)?;
        if ak != bk {
            return Err(Error::Dimension(format!(
                "matmul inner extents differ: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = matmul_raw(self.values(a), self.values(b), am, ak, bn);
        let mut shape = Vec::new();
        if self.shape(a).len() == 2 {
            shape.push(am);
        }
        if self.shape(b).len() == 2 {
            shape.push(bn);
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push_result(shape, out, rg, Op::Matmul { a, b }))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x);
        let [m, n] = two_d(shape, "transpose")?;
        let v = self.values(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        let rg = self.requires(x);
        Ok(self.push_result(vec![n, m], out, rg, Op::Transpose { x }))
    }

    /// Elementwise addition. Supports identical shapes, `[n,h] + [h]`
    /// (vector broadcast over rows) and `x + scalar`.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let bc = broadcast_kind(self.shape(a), self.shape(b), "add")?;
        let av = self.values(a);
        let bv = self.values(b);
        let out = match bc {
            Broadcast::Same => av.iter().zip(bv).map(|(x, y)| x + y).collect(),
            Broadcast::Row => {
                let h = bv.len();
                av.iter()
                    .enumerate()
                    .map(|(i, x)| x + bv[i % h])
                    .collect()
            }
            Broadcast::Scalar => av.iter().map(|x| x + bv[0]).collect(),
        };
        let rg = self.requires(a) || self.requires(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push_result(shape, out, rg, Op::Add { a, b }))
    }

    /// Elementwise product, same broadcast rules as [`Graph::add`].
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let bc = broadcast_kind(self.shape(a), self.shape(b), "mul")?;
        let av = self.values(a);
        let bv = self.values(b);
        let out = match bc {
            Broadcast::Same => av.iter().zip(bv).map(|(x, y)| x * y).collect(),
            Broadcast::Row => {
                let h = bv.len();
                av.iter()
                    .enumerate()
                    .map(|(i, x)| x * bv[i % h])
                    .collect()
            }
            Broadcast::Scalar => av.iter().map(|x| x * bv[0]).collect(),
        };
        let rg = self.requires(a) || self.requires(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push_result(shape, out, rg, Op::Mul { a, b }))
    }

    /// Multiplication by a compile-time constant (not differentiated through).
    pub fn scale(&mut self, x: TensorId, factor: f64) -> TensorId {
        let out: Vec<f64> = self.values(x).iter().map(|v| v * factor).collect();
        let rg = self.requires(x);
        let shape = self.shape(x).to_vec();
        self.push_result(shape, out, rg, Op::Scale { x, factor })
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let out: Vec<f64> = self.values(x).iter().map(|v| v.tanh()).collect();
        let rg = self.requires(x);
        let shape = self.shape(x).to_vec();
        self.push_result(shape, out, rg, Op::Tanh { x })
    }

    /// Gaussian error linear unit, tanh form:
    /// `0.5·x·(1 + tanh(sqrt(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let out: Vec<f64> = self.values(x).iter().map(|&v| gelu_scalar(v)).collect();
        let rg = self.requires(x);
        let shape = self.shape(x).to_vec();
        self.push_result(shape, out, rg, Op::Gelu { x })
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let Some(&n) = shape.last() else {
            return Err(Error::Dimension(
                "softmax requires at least one axis".to_string(),
            ));
        };
        let mut out = self.values(x).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.requires(x);
        Ok(self.push_result(shape, out, rg, Op::Softmax { x }))
    }

    /// Per-last-axis-slice normalization to zero mean and unit variance,
    /// followed by the affine transform `gain * x̂ + bias`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let Some(&h) = shape.last() else {
            return Err(Error::Dimension(
                "layer_norm requires at least one axis".to_string(),
            ));
        };
        if self.shape(gain) != [h] || self.shape(bias) != [h] {
            return Err(Error::Dimension(format!(
                "layer_norm gain/bias must have shape [{h}], got {:?} and {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".to_string()));
        }
        let gv = self.values(gain).to_vec();
        let bv = self.values(bias).to_vec();
        let mut out = self.values(x).to_vec();
        for row in out.chunks_mut(h) {
            let (mean, var) = mean_var(row);
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..h {
                row[j] = (row[j] - mean) * inv * gv[j] + bv[j];
            }
        }
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push_result(shape, out, rg, Op::LayerNorm { x, gain, bias, eps }))
    }

    /// Mean over axis 0 of a 2-D tensor: `[m,n] → [n]`.
    pub fn mean_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let [m, n] = two_d(self.shape(x), "mean_rows")?;
        let v = self.values(x);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += v[i * n + j];
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let rg = self.requires(x);
        Ok(self.push_result(vec![n], out, rg, Op::MeanRows { x }))
    }

    /// Negative log softmax probability of `label`: `−log softmax(logits)[label]`,
    /// evaluated in log space. Returns a scalar.
    pub fn cross_entropy(&mut self, logits: TensorId, label: usize) -> Result<TensorId> {
        let shape = self.shape(logits);
        if shape.len() != 1 {
            return Err(Error::Dimension(format!(
                "cross_entropy expects a logit vector, got shape {shape:?}"
            )));
        }
        let c = shape[0];
        if label >= c {
            return Err(Error::Index(format!(
                "label {label} out of range for {c} classes"
            )));
        }
        let v = self.values(logits);
        let loss = log_sum_exp(v) - v[label];
        let rg = self.requires(logits);
        Ok(self.push_result(vec![], vec![loss], rg, Op::CrossEntropy { logits, label }))
    }

    /// Selects rows of a 2-D table by index, in order (embedding lookup).
    pub fn gather_rows(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId> {
        let [rows, h] = two_d(self.shape(table), "gather_rows")?;
        if indices.is_empty() {
            return Err(Error::Contract("gather_rows needs at least one index".to_string()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!(
                "gather index {bad} out of range for table with {rows} rows"
            )));
        }
        let v = self.values(table);
        let mut out = Vec::with_capacity(indices.len() * h);
        for &i in indices {
            out.extend_from_slice(&v[i * h..(i + 1) * h]);
        }
        let rg = self.requires(table);
        Ok(self.push_result(
            vec![indices.len(), h],
            out,
            rg,
            Op::GatherRows { table, indices: indices.to_vec() },
        ))
    }

    /// Contiguous row window `[start, end)` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let [m, n] = two_d(self.shape(x), "slice_rows")?;
        if start >= end || end > m {
            return Err(Error::Contract(format!(
                "row slice [{start}, {end}) invalid for {m} rows"
            )));
        }
        let out = self.values(x)[start * n..end * n].to_vec();
        let rg = self.requires(x);
        Ok(self.push_result(vec![end - start, n], out, rg, Op::SliceRows { x, start, end }))
    }

    /// Contiguous column window `[start, end)` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let [m, n] = two_d(self.shape(x), "slice_cols")?;
        if start >= end || end > n {
            return Err(Error::Contract(format!(
                "column slice [{start}, {end}) invalid for {n} columns"
            )));
        }
        let v = self.values(x);
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&v[i * n + start..i * n + end]);
        }
        let rg = self.requires(x);
        Ok(self.push_result(vec![m, w], out, rg, Op::SliceCols { x, start, end }))
    }

    /// Concatenates 2-D tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols needs at least one part".to_string()));
        }
        let [m, _] = two_d(self.shape(parts[0]), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let [pm, pn] = two_d(self.shape(p), "concat_cols")?;
            if pm != m {
                return Err(Error::Dimension(format!(
                    "concat_cols row counts differ: {m} vs {pm}"
                )));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                let v = self.values(p);
                out.extend_from_slice(&v[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push_result(
            vec![m, total],
            out,
            rg,
            Op::ConcatCols { parts: parts.to_vec() },
        ))
    }

    /// Reinterprets the value buffer under a new shape with equal element count.
    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let out = self.values(x).to_vec();
        let rg = self.requires(x);
        Ok(self.push_result(shape, out, rg, Op::Reshape { x }))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
    /// `requires_grad` node; leaves the loss cannot reach end up with
    /// exactly-zero gradients. Calling twice without [`Graph::zero_grads`]
    /// doubles the accumulated values.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        // Disconnected requires_grad leaves still get a (zero) gradient.
        for node in &mut self.nodes {
            if node.tensor.requires_grad
                && matches!(node.op, Op::Leaf)
                && node.tensor.grad.is_none()
            {
                node.tensor.grad = Some(vec![0.0; node.tensor.numel()]);
            }
        }
        if !self.requires(loss) {
            return Ok(());
        }
        // Seed, then walk in reverse creation order. Pending cotangents are
        // kept separately from the persistent grad buffers so repeated
        // backward calls accumulate instead of feeding back; only leaves
        // retain gradients after the sweep.
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        pending[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(dout) = pending[idx].take() else { continue };
            if self.nodes[idx].tensor.requires_grad && matches!(self.nodes[idx].op, Op::Leaf) {
                self.nodes[idx].tensor.accumulate_grad(&dout);
            }
            let op = self.nodes[idx].op.clone();
            self.backprop_op(idx, &op, &dout, &mut pending);
        }
        Ok(())
    }

    fn send(&self, pending: &mut [Option<Vec<f64>>], to: TensorId, delta: Vec<f64>) {
        if !self.requires(to) {
            return;
        }
        match &mut pending[to.0] {
            Some(acc) => {
                for (a, d) in acc.iter_mut().zip(&delta) {
                    *a += d;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn backprop_op(
        &mut self,
        idx: usize,
        op: &Op,
        dout: &[f64],
        pending: &mut [Option<Vec<f64>>],
    ) {
        match *op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (am, ak) = as_matrix(self.shape(a), MatSide::Lhs).unwrap();
                let (_, bn) = as_matrix(self.shape(b), MatSide::Rhs).unwrap();
                if self.requires(a) {
                    // dA = dOut · Bᵀ
                    let bv = self.values(b);
                    let mut da = vec![0.0; am * ak];
                    for i in 0..am {
                        for j in 0..bn {
                            let d = dout[i * bn + j];
                            if d != 0.0 {
                                for p in 0..ak {
                                    da[i * ak + p] += d * bv[p * bn + j];
                                }
                            }
                        }
                    }
                    self.send(pending, a, da);
                }
                if self.requires(b) {
                    // dB = Aᵀ · dOut
                    let av = self.values(a);
                    let mut db = vec![0.0; ak * bn];
                    for i in 0..am {
                        for p in 0..ak {
                            let x = av[i * ak + p];
                            if x != 0.0 {
                                for j in 0..bn {
                                    db[p * bn + j] += x * dout[i * bn + j];
                                }
                            }
                        }
                    }
                    self.send(pending, b, db);
                }
            }
            Op::Transpose { x } => {
                let [n, m] = two_d(self.shape(TensorId(idx)), "transpose").unwrap();
                let mut dx = vec![0.0; m * n];
                for i in 0..n {
                    for j in 0..m {
                        dx[j * n + i] = dout[i * m + j];
                    }
                }
                self.send(pending, x, dx);
            }
            Op::Add { a, b } => {
                let bc = broadcast_kind(self.shape(a), self.shape(b), "add").unwrap();
                if self.requires(a) {
                    self.send(pending, a, dout.to_vec());
                }
                if self.requires(b) {
                    self.send(pending, b, reduce_broadcast(dout, self.value(b).numel(), bc));
                }
            }
            Op::Mul { a, b } => {
                let bc = broadcast_kind(self.shape(a), self.shape(b), "mul").unwrap();
                if self.requires(a) {
                    let bv = self.values(b);
                    let da: Vec<f64> = match bc {
                        Broadcast::Same => dout.iter().zip(bv).map(|(d, y)| d * y).collect(),
                        Broadcast::Row => {
                            let h = bv.len();
                            dout.iter().enumerate().map(|(i, d)| d * bv[i % h]).collect()
                        }
                        Broadcast::Scalar => dout.iter().map(|d| d * bv[0]).collect(),
                    };
                    self.send(pending, a, da);
                }
                if self.requires(b) {
                    let av = self.values(a);
                    let prod: Vec<f64> = dout.iter().zip(av).map(|(d, x)| d * x).collect();
                    self.send(pending, b, reduce_broadcast(&prod, self.value(b).numel(), bc));
                }
            }
            Op::Scale { x, factor } => {
                let dx: Vec<f64> = dout.iter().map(|d| d * factor).collect();
                self.send(pending, x, dx);
            }
            Op::Tanh { x } => {
                let y = self.values(TensorId(idx));
                let dx: Vec<f64> = dout.iter().zip(y).map(|(d, y)| d * (1.0 - y * y)).collect();
                self.send(pending, x, dx);
            }
            Op::Gelu { x } => {
                let xv = self.values(x);
                let dx: Vec<f64> = dout
                    .iter()
                    .zip(xv)
                    .map(|(d, &v)| d * gelu_grad_scalar(v))
                    .collect();
                self.send(pending, x, dx);
            }
            Op::Softmax { x } => {
                let y = self.values(TensorId(idx));
                let n = *self.shape(TensorId(idx)).last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.len() / n {
                    let ys = &y[r * n..(r + 1) * n];
                    let ds = &dout[r * n..(r + 1) * n];
                    let dot: f64 = ys.iter().zip(ds).map(|(y, d)| y * d).sum();
                    for j in 0..n {
                        dx[r * n + j] = ys[j] * (ds[j] - dot);
                    }
                }
                self.send(pending, x, dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let h = *self.shape(x).last().unwrap();
                let xv = self.values(x).to_vec();
                let gv = self.values(gain).to_vec();
                let rows = xv.len() / h;
                let mut dx = vec![0.0; xv.len()];
                let mut dgain = vec![0.0; h];
                let mut dbias = vec![0.0; h];
                for r in 0..rows {
                    let xs = &xv[r * h..(r + 1) * h];
                    let ds = &dout[r * h..(r + 1) * h];
                    let (mean, var) = mean_var(xs);
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xs.iter().map(|&v| (v - mean) * inv).collect();
                    let dy_g: Vec<f64> = ds.iter().zip(&gv).map(|(d, g)| d * g).collect();
                    let mean_dy: f64 = dy_g.iter().sum::<f64>() / h as f64;
                    let mean_dy_xhat: f64 =
                        dy_g.iter().zip(&xhat).map(|(d, xh)| d * xh).sum::<f64>() / h as f64;
                    for j in 0..h {
                        dx[r * h + j] = (dy_g[j] - mean_dy - xhat[j] * mean_dy_xhat) * inv;
                        dgain[j] += ds[j] * xhat[j];
                        dbias[j] += ds[j];
                    }
                }
                self.send(pending, x, dx);
                self.send(pending, gain, dgain);
                self.send(pending, bias, dbias);
            }
            Op::MeanRows { x } => {
                let [m, n] = two_d(self.shape(x), "mean_rows").unwrap();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = dout[j] / m as f64;
                    }
                }
                self.send(pending, x, dx);
            }
            Op::CrossEntropy { logits, label } => {
                // d logits = (softmax(logits) − onehot(label)) · dout
                let mut p = self.values(logits).to_vec();
                softmax_in_place(&mut p);
                p[label] -= 1.0;
                for v in &mut p {
                    *v *= dout[0];
                }
                self.send(pending, logits, p);
            }
            Op::GatherRows { table, ref indices } => {
                let [rows, h] = two_d(self.shape(table), "gather_rows").unwrap();
                let mut dt = vec![0.0; rows * h];
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..h {
                        dt[i * h + j] += dout[k * h + j];
                    }
                }
                self.send(pending, table, dt);
            }
            Op::SliceRows { x, start, end } => {
                let [m, n] = two_d(self.shape(x), "slice_rows").unwrap();
                let mut dx = vec![0.0; m * n];
                dx[start * n..end * n].copy_from_slice(dout);
                self.send(pending, x, dx);
            }
            Op::SliceCols { x, start, end } => {
                let [m, n] = two_d(self.shape(x), "slice_cols").unwrap();
                let w = end - start;
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + end].copy_from_slice(&dout[i * w..(i + 1) * w]);
                }
                self.send(pending, x, dx);
            }
            Op::ConcatCols { ref parts } => {
                let [m, total] = two_d(self.shape(TensorId(idx)), "concat_cols").unwrap();
                let mut offset = 0;
                for &p in parts {
                    let [_, w] = two_d(self.shape(p), "concat_cols").unwrap();
                    if self.requires(p) {
                        let mut dp = vec![0.0; m * w];
                        for i in 0..m {
                            dp[i * w..(i + 1) * w].copy_from_slice(
                                &dout[i * total + offset..i * total + offset + w],
                            );
                        }
                        self.send(pending, p, dp);
                    }
                    offset += w;
                }
            }
            Op::Reshape { x } => {
                self.send(pending, x, dout.to_vec());
            }
        }
    }
}

// ── Scalar kernels and shape helpers ───────────────────────────────────

const GELU_COEF: f64 = 0.044715;
/// sqrt(2/π)
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}

/// Max-subtracted softmax of one slice, in place.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
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

/// `ln Σ exp(x_i)`, max-subtracted.
pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let x = a[i * k + p];
            if x != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                let crow = &mut c[i * n..(i + 1) * n];
                for j in 0..n {
                    crow[j] += x * brow[j];
                }
            }
        }
    }
    c
}

enum MatSide {
    Lhs,
    Rhs,
}

/// Views a 1-D or 2-D shape as (rows, cols) for matmul; a 1-D operand acts
/// as a row vector on the left and a column vector on the right.
fn as_matrix(shape: &[usize], side: MatSide) -> Result<(usize, usize)> {
    match (shape.len(), side) {
        (2, _) => Ok((shape[0], shape[1])),
        (1, MatSide::Lhs) => Ok((1, shape[0])),
        (1, MatSide::Rhs) => Ok((shape[0], 1)),
        _ => Err(Error::Dimension(format!(
            "matmul operand must be 1-D or 2-D, got shape {shape:?}"
        ))),
    }
}

fn two_d(shape: &[usize], what: &str) -> Result<[usize; 2]> {
    if shape.len() == 2 {
        Ok([shape[0], shape[1]])
    } else {
        Err(Error::Dimension(format!(
            "{what} expects a 2-D tensor, got shape {shape:?}"
        )))
    }
}

#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

fn broadcast_kind(a: &[usize], b: &[usize], what: &str) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    if b.is_empty() {
        return Ok(Broadcast::Scalar);
    }
    if b.len() == 1 && a.last() == b.last() && a.len() > 1 {
        return Ok(Broadcast::Row);
    }
    Err(Error::Dimension(format!(
        "{what} cannot broadcast {b:?} onto {a:?}"
    )))
}

fn reduce_broadcast(dout: &[f64], target_len: usize, bc: Broadcast) -> Vec<f64> {
    match bc {
        Broadcast::Same => dout.to_vec(),
        Broadcast::Row => {
            let mut acc = vec![0.0; target_len];
            for (i, d) in dout.iter().enumerate() {
                acc[i % target_len] += d;
            }
            acc
        }
        Broadcast::Scalar => vec![dout.iter().sum()],
    }
}
