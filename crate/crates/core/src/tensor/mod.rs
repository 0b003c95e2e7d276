//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation; [`Tape::backward`] replays it in
//! reverse to accumulate gradients for all leaves created with
//! `requires_grad`. The op set is exactly what the masked-autoencoder
//! forward pass needs; there is no general broadcasting beyond bias rows.

mod adamw;
mod kernels;

pub use adamw::{AdamWConfig, AdamWState};
pub(crate) use kernels::{matmul_into, matmul_nt_into, matmul_tn_into};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("backward root must be scalar-shaped, got {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("empty index set for masked mean")]
    EmptyIndexSet,
    #[error("optimizer state/parameter mismatch: {0}")]
    OptimizerMismatch(String),
}

fn dim_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Dimension { op, detail }
}

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(dim_err(
                "tensor",
                format!("shape {:?} does not describe {} elements", shape, data.len()),
            ));
        }
        Ok(Tensor { shape, data, requires_grad })
    }

    pub fn zeros(shape: Vec<usize>, requires_grad: bool) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// (rows, cols) of a 2D tensor.
    fn dims2(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        if self.shape.len() != 2 {
            return Err(dim_err(op, format!("expected 2D tensor, got shape {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    /// out = a @ b^T with a: [m×k], b: [r×k].
    MatMulNT { a: TensorId, b: TensorId, m: usize, k: usize, r: usize },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    AddBias { x: TensorId, bias: TensorId, cols: usize },
    Scale { x: TensorId, factor: f64 },
    Gelu { x: TensorId, tanh_cache: Vec<f64> },
    Softmax { x: TensorId, axis: usize },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, eps: f64 },
    GatherRows { x: TensorId, indices: Vec<usize>, cols: usize },
    AssembleRows { src: TensorId, fill: TensorId, placement: Vec<Option<usize>>, cols: usize },
    SliceCols { x: TensorId, start: usize, width: usize, src_cols: usize },
    ConcatCols { parts: Vec<(TensorId, usize)>, rows: usize },
    SumAll { x: TensorId },
    MaskedSqErrMean { pred: TensorId, target: Vec<f64>, indices: Vec<usize> },
}

struct Node {
    tensor: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`TensorId`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Registers an existing tensor as a leaf.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        let needs_grad = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Registers constant input data (no gradient).
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        Ok(self.leaf(Tensor::new(data, shape, false)?))
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].tensor.data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    /// Scalar value of a 1-element tensor.
    pub fn scalar(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].tensor.numel(), 1);
        self.nodes[id.0].tensor.data[0]
    }

    fn push(&mut self, tensor: Tensor, op: Op, needs_grad: bool) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { tensor, op, needs_grad });
        id
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (kb, n) = self.value(b).dims2("matmul")?;
        if k != kb {
            return Err(dim_err("matmul", format!("inner dims {k} vs {kb}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.data(a), self.data(b), m, k, n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor { shape: vec![m, n], data: out, requires_grad: false },
            Op::MatMul { a, b, m, k, n },
            needs,
        ))
    }

    /// `a @ b^T` for row-major operands: a is [m×k], b is [r×k], result [m×r].
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (m, k) = self.value(a).dims2("matmul_nt")?;
        let (r, kb) = self.value(b).dims2("matmul_nt")?;
        if k != kb {
            return Err(dim_err("matmul_nt", format!("inner dims {k} vs {kb}")));
        }
        let mut out = vec![0.0; m * r];
        matmul_nt_into(self.data(a), self.data(b), m, k, r, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor { shape: vec![m, r], data: out, requires_grad: false },
            Op::MatMulNT { a, b, m, k, r },
            needs,
        ))
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(
                op_name,
                format!("shape {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape, data, requires_grad: false }, op, needs))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Adds a bias row to every row of a 2D tensor. The one sanctioned
    /// broadcast.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId, TensorError> {
        let (rows, cols) = self.value(x).dims2("add_bias")?;
        let bn = self.value(bias).numel();
        if bn != cols {
            return Err(dim_err("add_bias", format!("bias len {bn} vs {cols} columns")));
        }
        let mut data = self.data(x).to_vec();
        let b = self.data(bias);
        for row in data.chunks_exact_mut(cols) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(
            Tensor { shape: vec![rows, cols], data, requires_grad: false },
            Op::AddBias { x, bias, cols },
            needs,
        ))
    }

    pub fn scale(&mut self, x: TensorId, factor: f64) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Tensor { shape, data, requires_grad: false }, Op::Scale { x, factor }, needs)
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let xs = self.data(x);
        let mut data = Vec::with_capacity(xs.len());
        let mut tanh_cache = Vec::with_capacity(xs.len());
        for &v in xs {
            let t = gelu_inner_tanh(v);
            tanh_cache.push(t);
            data.push(0.5 * v * (1.0 + t));
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(
            Tensor { shape, data, requires_grad: false },
            Op::Gelu { x, tanh_cache },
            needs,
        )
    }

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xs = self.data(x);
        let mut data = vec![0.0; xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for a in 0..len {
                    max = max.max(xs[base + a * inner]);
                }
                let mut sum = 0.0;
                for a in 0..len {
                    let e = (xs[base + a * inner] - max).exp();
                    data[base + a * inner] = e;
                    sum += e;
                }
                for a in 0..len {
                    data[base + a * inner] /= sum;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor { shape, data, requires_grad: false }, Op::Softmax { x, axis }, needs))
    }

    /// Layer normalization over the last axis with affine gain/bias.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| dim_err("layer_norm", "0-d input".into()))?;
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(dim_err(
                "layer_norm",
                format!(
                    "gain/bias lens {}/{} vs normalized extent {d}",
                    self.value(gain).numel(),
                    self.value(bias).numel()
                ),
            ));
        }
        let xs = self.data(x);
        let mut data = vec![0.0; xs.len()];
        {
            let g = self.data(gain);
            let b = self.data(bias);
            for (row_in, row_out) in xs.chunks_exact(d).zip(data.chunks_exact_mut(d)) {
                let mean = row_in.iter().sum::<f64>() / d as f64;
                let var = row_in.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    row_out[j] = (row_in[j] - mean) * inv_std * g[j] + b[j];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Tensor { shape, data, requires_grad: false },
            Op::LayerNorm { x, gain, bias, eps },
            needs,
        ))
    }

    /// Selects rows of a 2D tensor by index.
    pub fn gather_rows(&mut self, x: TensorId, indices: &[usize]) -> Result<TensorId, TensorError> {
        let (rows, cols) = self.value(x).dims2("gather_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(dim_err("gather_rows", format!("row {bad} out of {rows}")));
        }
        let xs = self.data(x);
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&xs[i * cols..(i + 1) * cols]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor { shape: vec![indices.len(), cols], data, requires_grad: false },
            Op::GatherRows { x, indices: indices.to_vec(), cols },
            needs,
        ))
    }

    /// Builds an output where row `i` is `src[placement[i]]` when present
    /// and the `fill` row otherwise. Used to interleave encoded tokens with
    /// mask tokens.
    pub fn assemble_rows(
        &mut self,
        src: TensorId,
        fill: TensorId,
        placement: &[Option<usize>],
    ) -> Result<TensorId, TensorError> {
        let (src_rows, cols) = self.value(src).dims2("assemble_rows")?;
        if self.value(fill).numel() != cols {
            return Err(dim_err(
                "assemble_rows",
                format!("fill len {} vs {cols} columns", self.value(fill).numel()),
            ));
        }
        if let Some(bad) = placement.iter().flatten().find(|&&r| r >= src_rows) {
            return Err(dim_err("assemble_rows", format!("source row {bad} out of {src_rows}")));
        }
        let xs = self.data(src);
        let f = self.data(fill);
        let mut data = Vec::with_capacity(placement.len() * cols);
        for slot in placement {
            match slot {
                Some(r) => data.extend_from_slice(&xs[r * cols..(r + 1) * cols]),
                None => data.extend_from_slice(f),
            }
        }
        let needs = self.needs(src) || self.needs(fill);
        Ok(self.push(
            Tensor { shape: vec![placement.len(), cols], data, requires_grad: false },
            Op::AssembleRows { src, fill, placement: placement.to_vec(), cols },
            needs,
        ))
    }

    /// Column slice of a 2D tensor.
    pub fn slice_cols(
        &mut self,
        x: TensorId,
        start: usize,
        width: usize,
    ) -> Result<TensorId, TensorError> {
        let (rows, cols) = self.value(x).dims2("slice_cols")?;
        if start + width > cols || width == 0 {
            return Err(dim_err("slice_cols", format!("[{start}, {}) of {cols} cols", start + width)));
        }
        let xs = self.data(x);
        let mut data = Vec::with_capacity(rows * width);
        for row in xs.chunks_exact(cols) {
            data.extend_from_slice(&row[start..start + width]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor { shape: vec![rows, width], data, requires_grad: false },
            Op::SliceCols { x, start, width, src_cols: cols },
            needs,
        ))
    }

    /// Concatenates 2D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, ids: &[TensorId]) -> Result<TensorId, TensorError> {
        if ids.is_empty() {
            return Err(dim_err("concat_cols", "no inputs".into()));
        }
        let (rows, _) = self.value(ids[0]).dims2("concat_cols")?;
        let mut parts = Vec::with_capacity(ids.len());
        let mut total_cols = 0;
        for &id in ids {
            let (r, c) = self.value(id).dims2("concat_cols")?;
            if r != rows {
                return Err(dim_err("concat_cols", format!("row counts {rows} vs {r}")));
            }
            parts.push((id, c));
            total_cols += c;
        }
        let mut data = vec![0.0; rows * total_cols];
        let mut offset = 0;
        for &(id, c) in &parts {
            let xs = self.data(id);
            for r in 0..rows {
                data[r * total_cols + offset..r * total_cols + offset + c]
                    .copy_from_slice(&xs[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        let needs = ids.iter().any(|&id| self.needs(id));
        Ok(self.push(
            Tensor { shape: vec![rows, total_cols], data, requires_grad: false },
            Op::ConcatCols { parts, rows },
            needs,
        ))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.data(x).iter().sum();
        let needs = self.needs(x);
        self.push(
            Tensor { shape: vec![1], data: vec![s], requires_grad: false },
            Op::SumAll { x },
            needs,
        )
    }

    /// Mean squared error over an explicit index subset:
    /// `(1/|indices|) Σ (pred[i] - target[i])²`.
    ///
    /// Only the listed indices contribute, so entries outside the subset
    /// cannot perturb the result even at the last bit.
    pub fn masked_sq_err_mean(
        &mut self,
        pred: TensorId,
        target: &[f64],
        indices: &[usize],
    ) -> Result<TensorId, TensorError> {
        if indices.is_empty() {
            return Err(TensorError::EmptyIndexSet);
        }
        let n = self.value(pred).numel();
        if target.len() != n {
            return Err(dim_err(
                "masked_sq_err_mean",
                format!("target len {} vs pred numel {n}", target.len()),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(dim_err("masked_sq_err_mean", format!("index {bad} out of {n}")));
        }
        let ps = self.data(pred);
        let mut sum = 0.0;
        for &i in indices {
            let d = ps[i] - target[i];
            sum += d * d;
        }
        let value = sum / indices.len() as f64;
        let needs = self.needs(pred);
        Ok(self.push(
            Tensor { shape: vec![1], data: vec![value], requires_grad: false },
            Op::MaskedSqErrMean { pred, target: target.to_vec(), indices: indices.to_vec() },
            needs,
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Accumulates gradients of a scalar `root` with respect to every
    /// tensor on the tape that requires them.
    pub fn backward(&self, root: TensorId) -> Result<Gradients, TensorError> {
        let root_node = &self.nodes[root.0];
        if root_node.tensor.numel() != 1 {
            return Err(TensorError::NonScalarRoot { shape: root_node.tensor.shape.clone() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(grad) = grads[idx].take() else { continue };
            self.propagate(idx, &grad, &mut grads);
            grads[idx] = Some(grad);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: TensorId, update: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[id.0].tensor.numel()]);
        }
        update(slot.as_mut().unwrap());
    }

    fn propagate(&self, idx: usize, grad: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}

            &Op::MatMul { a, b, m, k, n } => {
                // dA = dC @ B^T, dB = A^T @ dC
                self.accumulate(grads, a, |ga| {
                    matmul_nt_into(grad, self.data(b), m, n, k, ga);
                });
                self.accumulate(grads, b, |gb| {
                    matmul_tn_into(self.data(a), grad, m, k, n, gb);
                });
            }

            &Op::MatMulNT { a, b, m, k, r } => {
                // out = A @ B^T: dA = dOut @ B, dB = dOut^T @ A
                self.accumulate(grads, a, |ga| {
                    matmul_into(grad, self.data(b), m, r, k, ga);
                });
                self.accumulate(grads, b, |gb| {
                    matmul_tn_into(grad, self.data(a), m, r, k, gb);
                });
            }

            &Op::Add { a, b } => {
                self.accumulate(grads, a, |ga| axpy(ga, grad, 1.0));
                self.accumulate(grads, b, |gb| axpy(gb, grad, 1.0));
            }

            &Op::Sub { a, b } => {
                self.accumulate(grads, a, |ga| axpy(ga, grad, 1.0));
                self.accumulate(grads, b, |gb| axpy(gb, grad, -1.0));
            }

            &Op::Mul { a, b } => {
                self.accumulate(grads, a, |ga| {
                    for ((g, &dv), &bv) in ga.iter_mut().zip(grad).zip(self.data(b)) {
                        *g += dv * bv;
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for ((g, &dv), &av) in gb.iter_mut().zip(grad).zip(self.data(a)) {
                        *g += dv * av;
                    }
                });
            }

            &Op::AddBias { x, bias, cols } => {
                self.accumulate(grads, x, |gx| axpy(gx, grad, 1.0));
                self.accumulate(grads, bias, |gb| {
                    for row in grad.chunks_exact(cols) {
                        for (g, &dv) in gb.iter_mut().zip(row) {
                            *g += dv;
                        }
                    }
                });
            }

            &Op::Scale { x, factor } => {
                self.accumulate(grads, x, |gx| axpy(gx, grad, factor));
            }

            Op::Gelu { x, tanh_cache } => {
                let x = *x;
                let xs = self.data(x);
                self.accumulate(grads, x, |gx| {
                    for i in 0..xs.len() {
                        let v = xs[i];
                        let t = tanh_cache[i];
                        let sech2 = 1.0 - t * t;
                        let d_inner = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        gx[i] += grad[i] * (0.5 * (1.0 + t) + 0.5 * v * sech2 * d_inner);
                    }
                });
            }

            &Op::Softmax { x, axis } => {
                let out = self.data(TensorId(idx));
                let shape = &self.nodes[idx].tensor.shape;
                let (outer, len, inner) = axis_split(shape, axis);
                self.accumulate(grads, x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0;
                            for a in 0..len {
                                let f = base + a * inner;
                                dot += grad[f] * out[f];
                            }
                            for a in 0..len {
                                let f = base + a * inner;
                                gx[f] += out[f] * (grad[f] - dot);
                            }
                        }
                    }
                });
            }

            &Op::LayerNorm { x, gain, bias, eps } => {
                let xs = self.data(x);
                let g = self.data(gain);
                let d = self.value(gain).numel();
                let rows = xs.len() / d;

                self.accumulate(grads, bias, |gb| {
                    for row in grad.chunks_exact(d) {
                        for (gv, &dv) in gb.iter_mut().zip(row) {
                            *gv += dv;
                        }
                    }
                });
                self.accumulate(grads, gain, |gg| {
                    for r in 0..rows {
                        let row = &xs[r * d..(r + 1) * d];
                        let (mean, inv_std) = row_stats(row, eps);
                        for j in 0..d {
                            gg[j] += grad[r * d + j] * (row[j] - mean) * inv_std;
                        }
                    }
                });
                self.accumulate(grads, x, |gx| {
                    let df = d as f64;
                    for r in 0..rows {
                        let row = &xs[r * d..(r + 1) * d];
                        let grow = &grad[r * d..(r + 1) * d];
                        let (mean, inv_std) = row_stats(row, eps);
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv_std;
                            let dxhat = grow[j] * g[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv_std;
                            let dxhat = grow[j] * g[j];
                            gx[r * d + j] +=
                                inv_std / df * (df * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                        }
                    }
                });
            }

            Op::GatherRows { x, indices, cols } => {
                let (x, cols) = (*x, *cols);
                self.accumulate(grads, x, |gx| {
                    for (slot, &row) in indices.iter().enumerate() {
                        let src = &grad[slot * cols..(slot + 1) * cols];
                        let dst = &mut gx[row * cols..(row + 1) * cols];
                        for (g, &dv) in dst.iter_mut().zip(src) {
                            *g += dv;
                        }
                    }
                });
            }

            Op::AssembleRows { src, fill, placement, cols } => {
                let (src, fill, cols) = (*src, *fill, *cols);
                self.accumulate(grads, src, |gs| {
                    for (slot, mapping) in placement.iter().enumerate() {
                        if let Some(row) = mapping {
                            let grow = &grad[slot * cols..(slot + 1) * cols];
                            let dst = &mut gs[row * cols..(row + 1) * cols];
                            for (g, &dv) in dst.iter_mut().zip(grow) {
                                *g += dv;
                            }
                        }
                    }
                });
                self.accumulate(grads, fill, |gf| {
                    for (slot, mapping) in placement.iter().enumerate() {
                        if mapping.is_none() {
                            let grow = &grad[slot * cols..(slot + 1) * cols];
                            for (g, &dv) in gf.iter_mut().zip(grow) {
                                *g += dv;
                            }
                        }
                    }
                });
            }

            &Op::SliceCols { x, start, width, src_cols } => {
                let rows = grad.len() / width;
                self.accumulate(grads, x, |gx| {
                    for r in 0..rows {
                        let grow = &grad[r * width..(r + 1) * width];
                        let dst = &mut gx[r * src_cols + start..r * src_cols + start + width];
                        for (g, &dv) in dst.iter_mut().zip(grow) {
                            *g += dv;
                        }
                    }
                });
            }

            Op::ConcatCols { parts, rows } => {
                let rows = *rows;
                let total_cols: usize = parts.iter().map(|&(_, c)| c).sum();
                let mut offset = 0;
                for &(id, c) in parts {
                    self.accumulate(grads, id, |gp| {
                        for r in 0..rows {
                            let grow = &grad[r * total_cols + offset..r * total_cols + offset + c];
                            let dst = &mut gp[r * c..(r + 1) * c];
                            for (g, &dv) in dst.iter_mut().zip(grow) {
                                *g += dv;
                            }
                        }
                    });
                    offset += c;
                }
            }

            &Op::SumAll { x } => {
                let g = grad[0];
                self.accumulate(grads, x, |gx| {
                    for v in gx.iter_mut() {
                        *v += g;
                    }
                });
            }

            Op::MaskedSqErrMean { pred, target, indices } => {
                let pred = *pred;
                let ps = self.data(pred);
                let scale = 2.0 * grad[0] / indices.len() as f64;
                self.accumulate(grads, pred, |gp| {
                    for &i in indices {
                        gp[i] += scale * (ps[i] - target[i]);
                    }
                });
            }
        }
    }
}

const GELU_A: f64 = 0.044715;
// sqrt(2/pi)
const GELU_C: f64 = 0.797_884_560_802_865_4;

#[inline]
fn gelu_inner_tanh(x: f64) -> f64 {
    (GELU_C * (x + GELU_A * x * x * x)).tanh()
}

/// Scalar reference for the tanh-approximated GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_inner_tanh(x))
}

#[inline]
fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

#[inline]
fn axpy(dst: &mut [f64], src: &[f64], factor: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s * factor;
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
