//! Dense f64 tensor graph with reverse-mode differentiation.
//!
//! Operations are recorded into a [`Graph`] (a linear tape); `backward`
//! replays the tape in reverse and accumulates gradients into every
//! reachable leaf with `requires_grad`. The operation set covers exactly
//! what the dual encoder and the adaptation losses require: matmul,
//! LayerNorm, softmax, cosine similarity, row-wise entropy and
//! cross-entropy, plus the glue (slices, concats, broadcasts, reductions).
//!
//! Everything is 64-bit. Graph evaluation is single-threaded and
//! reduction order is fixed, so identical inputs produce bit-identical
//! outputs.

use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// A dense value with an optional gradient buffer of the same shape.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Transpose { x: TensorId },
    Add { a: TensorId, b: TensorId },
    AddRow { x: TensorId, row: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, k: f64 },
    ScaleByScalar { x: TensorId, s: TensorId },
    Exp { x: TensorId },
    Gelu { x: TensorId },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    SoftmaxRows { x: TensorId },
    SliceRows { x: TensorId, start: usize },
    SliceCols { x: TensorId, start: usize },
    ConcatRows { parts: Vec<TensorId> },
    ConcatCols { parts: Vec<TensorId> },
    MeanAxis0 { x: TensorId },
    SumAll { x: TensorId },
    MeanAll { x: TensorId },
    EmbedRows { table: TensorId, ids: Vec<usize> },
    NormalizeRows { x: TensorId },
    CosineSim { a: TensorId, b: TensorId },
    EntropyRowsMean { probs: TensorId },
    CrossEntropyRows { logits: TensorId, targets: Vec<f64> },
}

struct Node {
    op: Op,
    out: Tensor,
}

/// Ordered record of operations; inputs of every node precede it.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Interpret a 1-D or 2-D shape as (rows, cols).
fn as_2d(shape: &[usize]) -> Result<(usize, usize)> {
    match shape.len() {
        1 => Ok((1, shape[0])),
        2 => Ok((shape[0], shape[1])),
        _ => Err(Error::Dimension(format!(
            "expected 1-D or 2-D tensor, got shape {shape:?}"
        ))),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    // ikj order: streams over contiguous rows of b and out.
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].out.shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].out.data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].out.grad.as_deref()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].out
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].out.numel(), 1);
        self.nodes[id.0].out.data[0]
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> TensorId {
        debug_assert_eq!(numel(&shape), data.len());
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            op,
            out: Tensor { shape, data, requires_grad: false, grad: None },
        });
        id
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Register an input tensor. `requires_grad` leaves receive gradients
    /// after `backward`.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        if numel(&shape) != data.len() {
            return Err(Error::Dimension(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        let id = self.push(Op::Leaf, shape, data);
        self.nodes[id.0].out.requires_grad = requires_grad;
        Ok(id)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(Op::Leaf, vec![1], vec![v])
    }

    // ── Arithmetic ───────────────────────────────────────────────────

    /// `a[m,k] @ b[k,n] -> [m,n]`; backward is dA = G·Bᵀ, dB = Aᵀ·G.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = as_2d(self.shape(a))?;
        let (k2, n) = as_2d(self.shape(b))?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_raw(self.data(a), self.data(b), m, k, n, &mut out);
        Ok(self.push(Op::MatMul { a, b }, vec![m, n], out))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, c) = as_2d(self.shape(x))?;
        let src = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Op::Transpose { x }, vec![c, r], out))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "add")?;
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Add { a, b }, shape, data))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "sub")?;
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Sub { a, b }, shape, data))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "mul")?;
        let data: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Mul { a, b }, shape, data))
    }

    fn binary_same_shape(&self, a: TensorId, b: TensorId, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{op} requires equal shapes: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Add a row vector `[c]` to every row of `x[r,c]`.
    pub fn add_row(&mut self, x: TensorId, row: TensorId) -> Result<TensorId> {
        let (r, c) = as_2d(self.shape(x))?;
        if self.data(row).len() != c {
            return Err(Error::Dimension(format!(
                "add_row: row length {} does not match columns {}",
                self.data(row).len(),
                c
            )));
        }
        let rowd = self.data(row).to_vec();
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + rowd[i % c])
            .collect();
        let _ = r;
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::AddRow { x, row }, shape, data))
    }

    pub fn scale(&mut self, x: TensorId, k: f64) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|v| v * k).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Scale { x, k }, shape, data)
    }

    /// Multiply every element of `x` by the single-element tensor `s`.
    pub fn scale_by_scalar(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        if self.tensor(s).numel() != 1 {
            return Err(Error::Dimension("scale_by_scalar expects a scalar tensor".into()));
        }
        let sv = self.data(s)[0];
        let data: Vec<f64> = self.data(x).iter().map(|v| v * sv).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::ScaleByScalar { x, s }, shape, data))
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Exp { x }, shape, data)
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|&v| gelu_fwd(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Gelu { x }, shape, data)
    }

    // ── Normalization and softmax ────────────────────────────────────

    /// Per-row normalization over the last axis:
    /// `((x - mean) / sqrt(var + eps)) * gamma + beta`.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> Result<TensorId> {
        if eps <= 0.0 {
            return Err(Error::Parameter(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Dimension("layer_norm on empty shape".into()))?;
        if self.data(gamma).len() != d || self.data(beta).len() != d {
            return Err(Error::Dimension(format!(
                "layer_norm: gamma/beta length must equal last dim {d}"
            )));
        }
        let xs = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let rows = xs.len() / d;
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, shape, out))
    }

    /// Row-wise softmax with max-subtraction stabilization.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, c) = as_2d(self.shape(x))?;
        let xs = self.data(x);
        let mut out = vec![0.0; xs.len()];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                out[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                out[i * c + j] /= sum;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::SoftmaxRows { x }, shape, out))
    }

    /// Temperature softmax over rows: `softmax(x / tau)`. `tau` must be
    /// positive.
    pub fn softmax(&mut self, x: TensorId, tau: f64) -> Result<TensorId> {
        if tau <= 0.0 {
            return Err(Error::Parameter(format!("softmax temperature must be > 0, got {tau}")));
        }
        let scaled = self.scale(x, 1.0 / tau);
        self.softmax_rows(scaled)
    }

    /// Rescale every row of `x` to unit L2 norm. Errors on a zero-norm row.
    pub fn normalize_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, c) = as_2d(self.shape(x))?;
        let xs = self.data(x);
        let mut out = vec![0.0; xs.len()];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::DegenerateInput(format!("zero-norm row {i} in normalize_rows")));
            }
            for j in 0..c {
                out[i * c + j] = row[j] / norm;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::NormalizeRows { x }, shape, out))
    }

    /// Cosine similarity of two equally-sized tensors viewed as flat
    /// vectors; differentiable through both norms.
    pub fn cosine_sim(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.tensor(a).numel() != self.tensor(b).numel() {
            return Err(Error::Dimension(format!(
                "cosine_sim requires equal element counts: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let av = self.data(a);
        let bv = self.data(b);
        let na = av.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = bv.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::DegenerateInput("cosine_sim of a zero-norm vector".into()));
        }
        let dot: f64 = av.iter().zip(bv).map(|(x, y)| x * y).sum();
        let c = dot / (na * nb);
        Ok(self.push(Op::CosineSim { a, b }, vec![1], vec![c]))
    }

    // ── Shape plumbing ───────────────────────────────────────────────

    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (r, c) = as_2d(self.shape(x))?;
        if start + len > r {
            return Err(Error::Dimension(format!(
                "slice_rows {start}..{} out of {r} rows",
                start + len
            )));
        }
        let data = self.data(x)[start * c..(start + len) * c].to_vec();
        Ok(self.push(Op::SliceRows { x, start }, vec![len, c], data))
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (r, c) = as_2d(self.shape(x))?;
        if start + len > c {
            return Err(Error::Dimension(format!(
                "slice_cols {start}..{} out of {c} columns",
                start + len
            )));
        }
        let src = self.data(x);
        let mut data = vec![0.0; r * len];
        for i in 0..r {
            data[i * len..(i + 1) * len].copy_from_slice(&src[i * c + start..i * c + start + len]);
        }
        Ok(self.push(Op::SliceCols { x, start }, vec![r, len], data))
    }

    /// Stack parts vertically; all parts must share a column count.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_rows of zero parts".into()));
        }
        let (_, c) = as_2d(self.shape(parts[0]))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = as_2d(self.shape(p))?;
            if pc != c {
                return Err(Error::Dimension(format!(
                    "concat_rows: column mismatch {pc} vs {c}"
                )));
            }
            rows += r;
            data.extend_from_slice(self.data(p));
        }
        Ok(self.push(Op::ConcatRows { parts: parts.to_vec() }, vec![rows, c], data))
    }

    /// Stack parts horizontally; all parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_cols of zero parts".into()));
        }
        let (r, _) = as_2d(self.shape(parts[0]))?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = as_2d(self.shape(p))?;
            if pr != r {
                return Err(Error::Dimension(format!("concat_cols: row mismatch {pr} vs {r}")));
            }
            widths.push(pc);
            total += pc;
        }
        let mut data = vec![0.0; r * total];
        let mut offset = 0;
        for (idx, &p) in parts.iter().enumerate() {
            let pc = widths[idx];
            let src = self.data(p);
            for i in 0..r {
                data[i * total + offset..i * total + offset + pc]
                    .copy_from_slice(&src[i * pc..(i + 1) * pc]);
            }
            offset += pc;
        }
        Ok(self.push(Op::ConcatCols { parts: parts.to_vec() }, vec![r, total], data))
    }

    /// Mean over rows: `[r,c] -> [1,c]`.
    pub fn mean_axis0(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, c) = as_2d(self.shape(x))?;
        let src = self.data(x);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += src[i * c + j];
            }
        }
        for v in out.iter_mut() {
            *v /= r as f64;
        }
        Ok(self.push(Op::MeanAxis0 { x }, vec![1, c], out))
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.data(x).iter().sum();
        self.push(Op::SumAll { x }, vec![1], vec![s])
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.data(x).len() as f64;
        let s: f64 = self.data(x).iter().sum();
        self.push(Op::MeanAll { x }, vec![1], vec![s / n])
    }

    /// Gather rows of `table` by index; duplicate ids accumulate gradient.
    pub fn embed_rows(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (v, w) = as_2d(self.shape(table))?;
        let mut data = Vec::with_capacity(ids.len() * w);
        for &id in ids {
            if id >= v {
                return Err(Error::Dimension(format!("embed_rows: id {id} out of {v} rows")));
            }
            data.extend_from_slice(&self.data(table)[id * w..(id + 1) * w]);
        }
        Ok(self.push(Op::EmbedRows { table, ids: ids.to_vec() }, vec![ids.len(), w], data))
    }

    // ── Loss kernels ─────────────────────────────────────────────────

    /// Batch mean of the Shannon entropy of each row, with 0·log 0 = 0.
    pub fn entropy_rows_mean(&mut self, probs: TensorId) -> Result<TensorId> {
        let (r, c) = as_2d(self.shape(probs))?;
        let p = self.data(probs);
        let mut total = 0.0;
        for i in 0..r {
            let mut h = 0.0;
            for j in 0..c {
                let v = p[i * c + j];
                if v > 0.0 {
                    h -= v * v.ln();
                }
            }
            total += h;
        }
        let out = total / r as f64;
        Ok(self.push(Op::EntropyRowsMean { probs }, vec![1], vec![out]))
    }

    /// Per-row softmax cross-entropy against constant target rows:
    /// `ce_r = Σ_c t_rc (logsumexp(l_r) - l_rc)`, output `[r,1]`.
    /// An all-zero target row yields zero loss and zero gradient.
    pub fn cross_entropy_rows(&mut self, logits: TensorId, targets: &[f64]) -> Result<TensorId> {
        let (r, c) = as_2d(self.shape(logits))?;
        if targets.len() != r * c {
            return Err(Error::Dimension(format!(
                "cross_entropy_rows: target length {} does not match logits {r}x{c}",
                targets.len()
            )));
        }
        let l = self.data(logits);
        let mut out = vec![0.0; r];
        for i in 0..r {
            let row = &l[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let mut ce = 0.0;
            for j in 0..c {
                let t = targets[i * c + j];
                if t != 0.0 {
                    ce += t * (lse - row[j]);
                }
            }
            out[i] = ce;
        }
        Ok(self.push(
            Op::CrossEntropyRows { logits, targets: targets.to_vec() },
            vec![r, 1],
            out,
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse-mode pass from a scalar loss. Populates `grad` on every
    /// reachable leaf with `requires_grad`. A second invocation without
    /// `clear_grads` is rejected.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already invoked on this graph; call clear_grads first".into(),
            ));
        }
        if self.nodes[loss.0].out.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].out.shape
            )));
        }
        self.backward_done = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    if self.nodes[i].out.requires_grad {
                        self.nodes[i].out.grad = Some(g);
                    }
                    continue;
                }
                Op::MatMul { a, b } => {
                    let (m, k) = as_2d(&self.nodes[a.0].out.shape).unwrap();
                    let n2 = self.nodes[i].out.shape[1];
                    // dA = G @ Bᵀ
                    let bt = transpose_raw(&self.nodes[b.0].out.data, k, n2);
                    let mut da = vec![0.0; m * k];
                    matmul_raw(&g, &bt, m, n2, k, &mut da);
                    // dB = Aᵀ @ G
                    let at = transpose_raw(&self.nodes[a.0].out.data, m, k);
                    let mut db = vec![0.0; k * n2];
                    matmul_raw(&at, &g, k, m, n2, &mut db);
                    accumulate(&mut grads, a.0, &da);
                    accumulate(&mut grads, b.0, &db);
                }
                Op::Transpose { x } => {
                    let (c, r) = as_2d(&self.nodes[i].out.shape).unwrap();
                    let gt = transpose_raw(&g, c, r);
                    accumulate(&mut grads, x.0, &gt);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, a.0, &g);
                    accumulate(&mut grads, b.0, &g);
                }
                Op::AddRow { x, row } => {
                    accumulate(&mut grads, x.0, &g);
                    let c = self.nodes[row.0].out.data.len();
                    let mut dr = vec![0.0; c];
                    for (idx, gv) in g.iter().enumerate() {
                        dr[idx % c] += gv;
                    }
                    accumulate(&mut grads, row.0, &dr);
                }
                Op::Sub { a, b } => {
                    accumulate(&mut grads, a.0, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads, b.0, &neg);
                }
                Op::Mul { a, b } => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[b.0].out.data)
                        .map(|(gv, bv)| gv * bv)
                        .collect();
                    let db: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].out.data)
                        .map(|(gv, av)| gv * av)
                        .collect();
                    accumulate(&mut grads, a.0, &da);
                    accumulate(&mut grads, b.0, &db);
                }
                Op::Scale { x, k } => {
                    let dx: Vec<f64> = g.iter().map(|v| v * k).collect();
                    accumulate(&mut grads, x.0, &dx);
                }
                Op::ScaleByScalar { x, s } => {
                    let sv = self.nodes[s.0].out.data[0];
                    let dx: Vec<f64> = g.iter().map(|v| v * sv).collect();
                    let ds: f64 = g.iter().zip(&self.nodes[x.0].out.data).map(|(gv, xv)| gv * xv).sum();
                    accumulate(&mut grads, x.0, &dx);
                    accumulate(&mut grads, s.0, &[ds]);
                }
                Op::Exp { x } => {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[i].out.data)
                        .map(|(gv, ev)| gv * ev)
                        .collect();
                    accumulate(&mut grads, x.0, &dx);
                }
                Op::Gelu { x } => {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[x.0].out.data)
                        .map(|(gv, &xv)| gv * gelu_bwd(xv))
                        .collect();
                    accumulate(&mut grads, x.0, &dx);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let d = *self.nodes[i].out.shape.last().unwrap();
                    let xs = &self.nodes[x.0].out.data;
                    let gm = &self.nodes[gamma.0].out.data;
                    let rows = xs.len() / d;
                    let mut dx = vec![0.0; xs.len()];
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for r in 0..rows {
                        let xrow = &xs[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        let mean = xrow.iter().sum::<f64>() / d as f64;
                        let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = xrow.iter().map(|v| (v - mean) * inv_std).collect();
                        let mut dxhat = vec![0.0; d];
                        for j in 0..d {
                            dgamma[j] += grow[j] * xhat[j];
                            dbeta[j] += grow[j];
                            dxhat[j] = grow[j] * gm[j];
                        }
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        let df = d as f64;
                        for j in 0..d {
                            dx[r * d + j] =
                                inv_std / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    accumulate(&mut grads, x.0, &dx);
                    accumulate(&mut grads, gamma.0, &dgamma);
                    accumulate(&mut grads, beta.0, &dbeta);
                }
                Op::SoftmaxRows { x } => {
                    let (r, c) = as_2d(&self.nodes[i].out.shape).unwrap();
                    let s = &self.nodes[i].out.data;
                    let mut dx = vec![0.0; s.len()];
                    for row in 0..r {
                        let mut dot = 0.0;
                        for j in 0..c {
                            dot += g[row * c + j] * s[row * c + j];
                        }
                        for j in 0..c {
                            dx[row * c + j] = s[row * c + j] * (g[row * c + j] - dot);
                        }
                    }
                    accumulate(&mut grads, x.0, &dx);
                }
                Op::SliceRows { x, start } => {
                    let (_, c) = as_2d(&self.nodes[x.0].out.shape).unwrap();
                    let mut dx = vec![0.0; self.nodes[x.0].out.data.len()];
                    dx[start * c..start * c + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads, x.0, &dx);
                }
                Op::SliceCols { x, start } => {
                    let (r, c) = as_2d(&self.nodes[x.0].out.shape).unwrap();
                    let len = self.nodes[i].out.shape[1];
                    let mut dx = vec![0.0; r * c];
                    for row in 0..r {
                        dx[row * c + start..row * c + start + len]
                            .copy_from_slice(&g[row * len..(row + 1) * len]);
                    }
                    accumulate(&mut grads, x.0, &dx);
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.nodes[p.0].out.data.len();
                        accumulate(&mut grads, p.0, &g[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::ConcatCols { parts } => {
                    let (r, total) = as_2d(&self.nodes[i].out.shape).unwrap();
                    let mut offset = 0;
                    for p in parts {
                        let pc = self.nodes[p.0].out.shape[1];
                        let mut dp = vec![0.0; r * pc];
                        for row in 0..r {
                            dp[row * pc..(row + 1) * pc]
                                .copy_from_slice(&g[row * total + offset..row * total + offset + pc]);
                        }
                        accumulate(&mut grads, p.0, &dp);
                        offset += pc;
                    }
                }
                Op::MeanAxis0 { x } => {
                    let (r, c) = as_2d(&self.nodes[x.0].out.shape).unwrap();
                    let mut dx = vec![0.0; r * c];
                    for row in 0..r {
                        for j in 0..c {
                            dx[row * c + j] = g[j] / r as f64;
                        }
                    }
                    accumulate(&mut grads, x.0, &dx);
                }
                Op::SumAll { x } => {
                    let dx = vec![g[0]; self.nodes[x.0].out.data.len()];
                    accumulate(&mut grads, x.0, &dx);
                }
                Op::MeanAll { x } => {
                    let n2 = self.nodes[x.0].out.data.len();
                    let dx = vec![g[0] / n2 as f64; n2];
                    accumulate(&mut grads, x.0, &dx);
                }
                Op::EmbedRows { table, ids } => {
                    let w = self.nodes[i].out.shape[1];
                    let mut dt = vec![0.0; self.nodes[table.0].out.data.len()];
                    for (pos, &id) in ids.iter().enumerate() {
                        for j in 0..w {
                            dt[id * w + j] += g[pos * w + j];
                        }
                    }
                    accumulate(&mut grads, table.0, &dt);
                }
                Op::NormalizeRows { x } => {
                    let (r, c) = as_2d(&self.nodes[x.0].out.shape).unwrap();
                    let xs = &self.nodes[x.0].out.data;
                    let ys = &self.nodes[i].out.data;
                    let mut dx = vec![0.0; xs.len()];
                    for row in 0..r {
                        let xrow = &xs[row * c..(row + 1) * c];
                        let yrow = &ys[row * c..(row + 1) * c];
                        let grow = &g[row * c..(row + 1) * c];
                        let norm = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let gy: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[row * c + j] = (grow[j] - yrow[j] * gy) / norm;
                        }
                    }
                    accumulate(&mut grads, x.0, &dx);
                }
                Op::CosineSim { a, b } => {
                    let av = &self.nodes[a.0].out.data;
                    let bv = &self.nodes[b.0].out.data;
                    let na = av.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nb = bv.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let cos = self.nodes[i].out.data[0];
                    let gv = g[0];
                    let da: Vec<f64> = av
                        .iter()
                        .zip(bv)
                        .map(|(&x, &y)| gv * (y / (na * nb) - cos * x / (na * na)))
                        .collect();
                    let db: Vec<f64> = av
                        .iter()
                        .zip(bv)
                        .map(|(&x, &y)| gv * (x / (na * nb) - cos * y / (nb * nb)))
                        .collect();
                    accumulate(&mut grads, a.0, &da);
                    accumulate(&mut grads, b.0, &db);
                }
                Op::EntropyRowsMean { probs } => {
                    let (r, c) = as_2d(&self.nodes[probs.0].out.shape).unwrap();
                    let p = &self.nodes[probs.0].out.data;
                    let gv = g[0];
                    let mut dp = vec![0.0; p.len()];
                    for idx in 0..r * c {
                        if p[idx] > 0.0 {
                            dp[idx] = -gv * (p[idx].ln() + 1.0) / r as f64;
                        }
                    }
                    accumulate(&mut grads, probs.0, &dp);
                }
                Op::CrossEntropyRows { logits, targets } => {
                    let (r, c) = as_2d(&self.nodes[logits.0].out.shape).unwrap();
                    let l = &self.nodes[logits.0].out.data;
                    let mut dl = vec![0.0; l.len()];
                    for row in 0..r {
                        let lrow = &l[row * c..(row + 1) * c];
                        let trow = &targets[row * c..(row + 1) * c];
                        let tsum: f64 = trow.iter().sum();
                        let gv = g[row];
                        if gv == 0.0 || (tsum == 0.0 && trow.iter().all(|t| *t == 0.0)) {
                            continue;
                        }
                        let max = lrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = lrow.iter().map(|v| (v - max).exp()).sum();
                        for j in 0..c {
                            let sm = (lrow[j] - max).exp() / denom;
                            dl[row * c + j] = gv * (sm * tsum - trow[j]);
                        }
                    }
                    accumulate(&mut grads, logits.0, &dl);
                }
            }
        }
        Ok(())
    }

    /// Drop all gradients and re-arm `backward`.
    pub fn clear_grads(&mut self) {
        for node in self.nodes.iter_mut() {
            node.out.grad = None;
        }
        self.backward_done = false;
    }
}

fn transpose_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, g: &[f64]) {
    match &mut grads[idx] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => grads[idx] = Some(g.to_vec()),
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
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of a scalar-valued function of several
    /// flat inputs. Step 1e-5, matching the documented gradient contract.
    fn numerical_grad<F>(f: &F, inputs: &[Vec<f64>], h: f64) -> Vec<Vec<f64>>
    where
        F: Fn(&[Vec<f64>]) -> f64,
    {
        let mut out = Vec::new();
        for p in 0..inputs.len() {
            let mut grad = vec![0.0; inputs[p].len()];
            for i in 0..inputs[p].len() {
                let mut plus = inputs.to_vec();
                plus[p][i] += h;
                let mut minus = inputs.to_vec();
                minus[p][i] -= h;
                grad[i] = (f(&plus) - f(&minus)) / (2.0 * h);
            }
            out.push(grad);
        }
        out
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
            .fold(0.0, f64::max)
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i2 = g.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        let a = g.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        let c = g.matmul(i2, a).unwrap();
        assert_eq!(g.data(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_orthogonal_vectors() {
        let mut g = Graph::new();
        let a = g.constant(vec![1.0, 0.0], vec![1, 2]).unwrap();
        let b = g.constant(vec![0.0, 1.0], vec![2, 1]).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[0.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(vec![0.0; 6], vec![2, 3]).unwrap();
        let b = g.constant(vec![0.0; 4], vec![2, 2]).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a0 = rand_vec(&mut rng, 12);
        let b0 = rand_vec(&mut rng, 8);
        let f = |inp: &[Vec<f64>]| {
            let mut g = Graph::new();
            let a = g.leaf(inp[0].clone(), vec![3, 4], true).unwrap();
            let b = g.leaf(inp[1].clone(), vec![4, 2], true).unwrap();
            let c = g.matmul(a, b).unwrap();
            let s = g.sum_all(c);
            g.scalar_value(s)
        };
        let mut g = Graph::new();
        let a = g.leaf(a0.clone(), vec![3, 4], true).unwrap();
        let b = g.leaf(b0.clone(), vec![4, 2], true).unwrap();
        let c = g.matmul(a, b).unwrap();
        let s = g.sum_all(c);
        g.backward(s).unwrap();
        let numeric = numerical_grad(&f, &[a0, b0], 1e-5);
        assert!(max_rel_err(g.grad(a).unwrap(), &numeric[0]) < 1e-7);
        assert!(max_rel_err(g.grad(b).unwrap(), &numeric[1]) < 1e-7);
    }

    #[test]
    fn layer_norm_constant_row_maps_to_beta() {
        let mut g = Graph::new();
        let x = g.constant(vec![5.0, 5.0, 5.0], vec![1, 3]).unwrap();
        let gamma = g.constant(vec![1.0; 3], vec![3]).unwrap();
        let beta = g.constant(vec![0.0; 3], vec![3]).unwrap();
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for v in g.data(y) {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_hand_computed() {
        // x=[1,-1], mean 0, var 1: output = xhat*2 + 1 = [3,-1] as eps -> 0.
        let mut g = Graph::new();
        let x = g.constant(vec![1.0, -1.0], vec![1, 2]).unwrap();
        let gamma = g.constant(vec![2.0, 2.0], vec![2]).unwrap();
        let beta = g.constant(vec![1.0, 1.0], vec![2]).unwrap();
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        assert!((g.data(y)[0] - 3.0).abs() < 1e-6);
        assert!((g.data(y)[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = rand_vec(&mut rng, 32);
        let g0 = rand_vec(&mut rng, 8);
        let b0 = rand_vec(&mut rng, 8);
        let f = |inp: &[Vec<f64>]| {
            let mut g = Graph::new();
            let x = g.leaf(inp[0].clone(), vec![4, 8], true).unwrap();
            let ga = g.leaf(inp[1].clone(), vec![8], true).unwrap();
            let be = g.leaf(inp[2].clone(), vec![8], true).unwrap();
            let y = g.layer_norm(x, ga, be, 1e-5).unwrap();
            // weight the outputs so the gradient is not uniform
            let w: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
            let wt = g.constant(w, vec![4, 8]).unwrap();
            let m = g.mul(y, wt).unwrap();
            let s = g.sum_all(m);
            g.scalar_value(s)
        };
        let inputs = vec![x0, g0, b0];
        let mut g = Graph::new();
        let x = g.leaf(inputs[0].clone(), vec![4, 8], true).unwrap();
        let ga = g.leaf(inputs[1].clone(), vec![8], true).unwrap();
        let be = g.leaf(inputs[2].clone(), vec![8], true).unwrap();
        let y = g.layer_norm(x, ga, be, 1e-5).unwrap();
        let w: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let wt = g.constant(w, vec![4, 8]).unwrap();
        let m = g.mul(y, wt).unwrap();
        let s = g.sum_all(m);
        g.backward(s).unwrap();
        let numeric = numerical_grad(&f, &inputs, 1e-5);
        assert!(max_rel_err(g.grad(x).unwrap(), &numeric[0]) < 1e-6);
        assert!(max_rel_err(g.grad(ga).unwrap(), &numeric[1]) < 1e-6);
        assert!(max_rel_err(g.grad(be).unwrap(), &numeric[2]) < 1e-6);
    }

    #[test]
    fn softmax_constant_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(vec![3.7; 5], vec![1, 5]).unwrap();
        let y = g.softmax(x, 0.42).unwrap();
        for v in g.data(y) {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_closed_form() {
        let mut g = Graph::new();
        let x = g.constant(vec![2.0f64.ln(), 0.0], vec![1, 2]).unwrap();
        let y = g.softmax(x, 1.0).unwrap();
        assert!((g.data(y)[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((g.data(y)[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        let mut g = Graph::new();
        let x = g.constant(vec![1.0, 2.0], vec![1, 2]).unwrap();
        assert!(matches!(g.softmax(x, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(g.softmax(x, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn softmax_argmax_invariant_under_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x0 = rand_vec(&mut rng, 6);
            let argmax = |v: &[f64]| {
                v.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            };
            let mut ids = Vec::new();
            for tau in [0.05, 1.0, 20.0] {
                let mut g = Graph::new();
                let x = g.constant(x0.clone(), vec![1, 6]).unwrap();
                let y = g.softmax(x, tau).unwrap();
                ids.push(argmax(g.data(y)));
            }
            assert!(ids.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn cosine_sim_basics() {
        let mut g = Graph::new();
        let v = g.constant(vec![0.3, -1.2, 0.5], vec![3]).unwrap();
        let c = g.cosine_sim(v, v).unwrap();
        assert!((g.scalar_value(c) - 1.0).abs() < 1e-12);

        let a = g.constant(vec![1.0, 0.0], vec![2]).unwrap();
        let b = g.constant(vec![0.0, 1.0], vec![2]).unwrap();
        let c = g.cosine_sim(a, b).unwrap();
        assert!(g.scalar_value(c).abs() < 1e-12);

        let a3 = g.scale(a, 3.0);
        let c2 = g.cosine_sim(a3, b).unwrap();
        assert!((g.scalar_value(c2) - g.scalar_value(c)).abs() < 1e-12);
    }

    #[test]
    fn cosine_sim_zero_norm_is_degenerate() {
        let mut g = Graph::new();
        let z = g.constant(vec![0.0, 0.0], vec![2]).unwrap();
        let v = g.constant(vec![1.0, 0.0], vec![2]).unwrap();
        assert!(matches!(g.cosine_sim(z, v), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(vec![2.0, -1.0, 0.5, 7.0], vec![2, 2], true).unwrap();
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_cosine_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v0 = rand_vec(&mut rng, 6);
        let z0 = rand_vec(&mut rng, 6);
        let f = |inp: &[Vec<f64>]| {
            let mut g = Graph::new();
            let v = g.leaf(inp[0].clone(), vec![6], true).unwrap();
            let z = g.leaf(inp[1].clone(), vec![6], true).unwrap();
            let c = g.cosine_sim(v, z).unwrap();
            g.scalar_value(c)
        };
        let mut g = Graph::new();
        let v = g.leaf(v0.clone(), vec![6], true).unwrap();
        let z = g.leaf(z0.clone(), vec![6], true).unwrap();
        let c = g.cosine_sim(v, z).unwrap();
        g.backward(c).unwrap();
        let numeric = numerical_grad(&f, &[v0, z0], 1e-5);
        assert!(max_rel_err(g.grad(v).unwrap(), &numeric[0]) < 1e-6);
        assert!(max_rel_err(g.grad(z).unwrap(), &numeric[1]) < 1e-6);
    }

    #[test]
    fn detached_constants_get_no_gradient() {
        // Pseudo-label style: the indicator matrix is a constant, so no
        // gradient reaches it even though it multiplies a live tensor.
        let mut g = Graph::new();
        let features = g.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2], true).unwrap();
        let indicator = g.constant(vec![0.5, 0.5], vec![1, 2]).unwrap();
        let proto = g.matmul(indicator, features).unwrap();
        let s = g.sum_all(proto);
        g.backward(s).unwrap();
        assert!(g.grad(indicator).is_none());
        assert!(g.grad(features).is_some());
    }

    #[test]
    fn backward_twice_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0], vec![1], true).unwrap();
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Contract(_))));
        g.clear_grads();
        assert!(g.backward(s).is_ok());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn entropy_closed_forms() {
        let mut g = Graph::new();
        let uniform = g.constant(vec![0.1; 20], vec![2, 10]).unwrap();
        let h = g.entropy_rows_mean(uniform).unwrap();
        assert!((g.scalar_value(h) - 10.0f64.ln()).abs() < 1e-12);

        let onehot = g.constant(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0], vec![2, 3]).unwrap();
        let h0 = g.entropy_rows_mean(onehot).unwrap();
        assert_eq!(g.scalar_value(h0), 0.0);
    }

    #[test]
    fn cross_entropy_rows_matches_manual() {
        let mut g = Graph::new();
        let logits = g.constant(vec![2.0, 1.0, 0.1, 0.1, 2.0, 1.0], vec![2, 3]).unwrap();
        let targets = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let ce = g.cross_entropy_rows(logits, &targets).unwrap();
        let lse0 = (2.0f64.exp() + 1.0f64.exp() + 0.1f64.exp()).ln();
        let lse1 = (0.1f64.exp() + 2.0f64.exp() + 1.0f64.exp()).ln();
        assert!((g.data(ce)[0] - (lse0 - 2.0)).abs() < 1e-12);
        assert!((g.data(ce)[1] - (lse1 - 2.0)).abs() < 1e-12);
    }

    /// Finite-difference audit of every differentiable op on randomized
    /// small inputs (the per-op gradient contract: rel. err < 1e-5 at
    /// step 1e-5 in 64-bit).
    #[test]
    fn all_ops_match_finite_differences() {
        type BuildFn = fn(&mut Graph, &[Vec<f64>]) -> (TensorId, Vec<TensorId>);
        // Each entry: (name, input sizes, builder returning loss + leaves).
        let cases: Vec<(&str, Vec<usize>, BuildFn)> = vec![
            ("transpose", vec![12], |g, inp| {
                let x = g.leaf(inp[0].clone(), vec![3, 4], true).unwrap();
                let t = g.transpose(x).unwrap();
                let w: Vec<f64> = (0..12).map(|i| (i as f64).cos()).collect();
                let wt = g.constant(w, vec![4, 3]).unwrap();
                let m = g.mul(t, wt).unwrap();
                (g.sum_all(m), vec![x])
            }),
            ("add_sub_mul", vec![6, 6], |g, inp| {
                let a = g.leaf(inp[0].clone(), vec![2, 3], true).unwrap();
                let b = g.leaf(inp[1].clone(), vec![2, 3], true).unwrap();
                let s = g.add(a, b).unwrap();
                let d = g.sub(s, b).unwrap();
                let m = g.mul(d, b).unwrap();
                (g.sum_all(m), vec![a, b])
            }),
            ("add_row", vec![12, 4], |g, inp| {
                let x = g.leaf(inp[0].clone(), vec![3, 4], true).unwrap();
                let r = g.leaf(inp[1].clone(), vec![4], true).unwrap();
                let y = g.add_row(x, r).unwrap();
                let m = g.mul(y, y).unwrap();
                (g.sum_all(m), vec![x, r])
            }),
            ("scale_by_scalar_exp", vec![6, 1], |g, inp| {
                let x = g.leaf(inp[0].clone(), vec![2, 3], true).unwrap();
                let s = g.leaf(inp[1].clone(), vec![1], true).unwrap();
                let es = g.exp(s);
                let y = g.scale_by_scalar(x, es).unwrap();
                let m = g.mul(y, y).unwrap();
                (g.sum_all(m), vec![x, s])
            }),
            ("gelu", vec![8], |g, inp| {
                let x = g.leaf(inp[0].clone(), vec![2, 4], true).unwrap();
                let y = g.gelu(x);
                let m = g.mul(y, y).unwrap();
                (g.sum_all(m), vec![x])
            }),
            ("softmax_rows", vec![8], |g, inp| {
                let x = g.leaf(inp[0].clone(), vec![2, 4], true).unwrap();
                let y = g.softmax_rows(x).unwrap();
                let w: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
                let wt = g.constant(w, vec![2, 4]).unwrap();
                let m = g.mul(y, wt).unwrap();
                (g.sum_all(m), vec![x])
            }),
            ("normalize_rows", vec![8], |g, inp| {
                let x = g.leaf(inp[0].clone(), vec![2, 4], true).unwrap();
                let y = g.normalize_rows(x).unwrap();
                let w: Vec<f64> = (0..8).map(|i| (i as f64 * 1.3).cos()).collect();
                let wt = g.constant(w, vec![2, 4]).unwrap();
                let m = g.mul(y, wt).unwrap();
                (g.sum_all(m), vec![x])
            }),
            ("slice_concat", vec![12], |g, inp| {
                let x = g.leaf(inp[0].clone(), vec![3, 4], true).unwrap();
                let top = g.slice_rows(x, 0, 1).unwrap();
                let rest = g.slice_rows(x, 1, 2).unwrap();
                let left = g.slice_cols(x, 0, 2).unwrap();
                let right = g.slice_cols(x, 2, 2).unwrap();
                let v = g.concat_rows(&[rest, top]).unwrap();
                let h = g.concat_cols(&[right, left]).unwrap();
                let m = g.mul(v, h).unwrap();
                let m2 = g.mul(m, m).unwrap();
                (g.sum_all(m2), vec![x])
            }),
            ("mean_axis0_mean_all", vec![12], |g, inp| {
                let x = g.leaf(inp[0].clone(), vec![3, 4], true).unwrap();
                let m = g.mean_axis0(x).unwrap();
                let sq = g.mul(m, m).unwrap();
                (g.mean_all(sq), vec![x])
            }),
            ("embed_rows", vec![8], |g, inp| {
                let table = g.leaf(inp[0].clone(), vec![4, 2], true).unwrap();
                let e = g.embed_rows(table, &[1, 3, 1, 0]).unwrap();
                let m = g.mul(e, e).unwrap();
                (g.sum_all(m), vec![table])
            }),
            ("entropy_of_softmax", vec![8], |g, inp| {
                let x = g.leaf(inp[0].clone(), vec![2, 4], true).unwrap();
                let p = g.softmax_rows(x).unwrap();
                let h = g.entropy_rows_mean(p).unwrap();
                (h, vec![x])
            }),
            ("cross_entropy_rows", vec![8], |g, inp| {
                let x = g.leaf(inp[0].clone(), vec![2, 4], true).unwrap();
                let t = vec![0.0, 1.0, 0.0, 0.0, 0.25, 0.25, 0.25, 0.25];
                let ce = g.cross_entropy_rows(x, &t).unwrap();
                (g.sum_all(ce), vec![x])
            }),
            ("layer_norm_chain", vec![8, 4, 4], |g, inp| {
                let x = g.leaf(inp[0].clone(), vec![2, 4], true).unwrap();
                let ga = g.leaf(inp[1].clone(), vec![4], true).unwrap();
                let be = g.leaf(inp[2].clone(), vec![4], true).unwrap();
                let y = g.layer_norm(x, ga, be, 1e-5).unwrap();
                let z = g.gelu(y);
                (g.sum_all(z), vec![x, ga, be])
            }),
        ];

        for (name, sizes, build) in cases {
            for seed in 0..3u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed * 31);
                let inputs: Vec<Vec<f64>> = sizes.iter().map(|&n| rand_vec(&mut rng, n)).collect();
                let mut g = Graph::new();
                let (loss, leaves) = build(&mut g, &inputs);
                g.backward(loss).unwrap();
                let f = |inp: &[Vec<f64>]| {
                    let mut g = Graph::new();
                    let (loss, _) = build(&mut g, inp);
                    g.scalar_value(loss)
                };
                let numeric = numerical_grad(&f, &inputs, 1e-5);
                for (k, leaf) in leaves.iter().enumerate() {
                    let analytic = g
                        .grad(*leaf)
                        .unwrap_or_else(|| panic!("{name}: no grad on leaf {k}"));
                    let err = max_rel_err(analytic, &numeric[k]);
                    assert!(err < 1e-5, "{name} leaf {k}: rel err {err} (seed {seed})");
                }
            }
        }
    }

    #[test]
    fn graph_evaluation_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let x0 = rand_vec(&mut rng, 24);
            let w0 = rand_vec(&mut rng, 24);
            let mut g = Graph::new();
            let x = g.leaf(x0, vec![4, 6], true).unwrap();
            let w = g.leaf(w0, vec![6, 4], true).unwrap();
            let y = g.matmul(x, w).unwrap();
            let p = g.softmax_rows(y).unwrap();
            let h = g.entropy_rows_mean(p).unwrap();
            g.backward(h).unwrap();
            (
                g.scalar_value(h).to_bits(),
                g.grad(x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn softmax_is_probability_vector(
                vals in proptest::collection::vec(-30.0f64..30.0, 2..12),
                tau in 0.01f64..10.0,
            ) {
                let n = vals.len();
                let mut g = Graph::new();
                let x = g.constant(vals, vec![1, n]).unwrap();
                let y = g.softmax(x, tau).unwrap();
                let data = g.data(y);
                prop_assert!(data.iter().all(|v| *v >= 0.0));
                prop_assert!((data.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }

            #[test]
            fn cosine_sim_scale_invariant(
                a in proptest::collection::vec(-5.0f64..5.0, 4),
                b in proptest::collection::vec(-5.0f64..5.0, 4),
                k in 0.01f64..100.0,
            ) {
                prop_assume!(a.iter().map(|v| v * v).sum::<f64>() > 1e-6);
                prop_assume!(b.iter().map(|v| v * v).sum::<f64>() > 1e-6);
                let mut g = Graph::new();
                let av = g.constant(a, vec![4]).unwrap();
                let bv = g.constant(b, vec![4]).unwrap();
                let c0 = g.cosine_sim(av, bv).unwrap();
                let ak = g.scale(av, k);
                let c1 = g.cosine_sim(ak, bv).unwrap();
                prop_assert!((g.scalar_value(c0) - g.scalar_value(c1)).abs() < 1e-12);
                prop_assert!(g.scalar_value(c0) <= 1.0 + 1e-12);
                prop_assert!(g.scalar_value(c0) >= -1.0 - 1e-12);
            }
        }
    }
}
