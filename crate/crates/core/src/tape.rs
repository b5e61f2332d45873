//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Forward operations append nodes to the tape in topological order (every
//! node's inputs precede it); [`Tape::backward`] replays adjoints in reverse.
//! A tape and its nodes are confined to one thread for the duration of a
//! forward/backward pass.
//!
//! The primitive set is intentionally small: dense linear algebra, the
//! activations and normalizations used by the encoder, the 1-D depthwise
//! convolution used for downsampling, row pooling/selection for the
//! alignment path, and fused loss kernels (cross-entropy rows, focal,
//! interval DIoU) whose adjoints are hand-derived and gradchecked.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only valid for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: S },
    AddBias { a: NodeId, bias: NodeId },
    Matmul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Gelu { a: NodeId },
    Sigmoid { a: NodeId },
    Softplus { a: NodeId },
    Softmax { a: NodeId, axis: usize },
    LayerNorm { a: NodeId, gamma: NodeId, beta: NodeId, eps: S },
    DepthwiseConv1d { x: NodeId, kernels: NodeId, stride: usize, padding: usize },
    SliceCols { a: NodeId, start: usize, end: usize },
    ConcatCols { parts: Vec<NodeId> },
    SelectRows { a: NodeId, rows: Vec<usize> },
    StackRows { parts: Vec<NodeId> },
    MeanRows { a: NodeId, start: usize, end: usize },
    SumAll { a: NodeId },
    MeanAll { a: NodeId },
    RowNormalize { a: NodeId, eps: S },
    Dropout { a: NodeId, keep: Vec<bool>, scale: S },
    CrossEntropyRows { logits: NodeId, targets: Vec<usize>, strict_negatives: bool },
    FocalBce { p: NodeId, positive: Vec<bool>, alpha: S, gamma: S },
    DiouBatch { offsets: NodeId, centers: Vec<S>, targets: Vec<(S, S)> },
}

#[derive(Debug)]
struct Node<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    op: Op<S>,
}

/// Wengert tape: records primitive applications, replays adjoints in reverse.
#[derive(Debug, Default)]
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<S>, requires_grad: bool, op: Op<S>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, requires_grad, op });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Register a tensor as a tape input, copying its data. Gradient flows
    /// into the node iff the tensor has `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<S>) -> NodeId {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<S>) -> Result<NodeId> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch {
                context: "constant: shape product vs data length",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(self.push(shape, data, false, Op::Leaf))
    }

    pub fn value(&self, id: NodeId) -> &[S] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, id: NodeId) -> S {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    /// Materialize a node's value as a detached tensor.
    pub fn to_tensor(&self, id: NodeId) -> Tensor<S> {
        Tensor::from_vec(self.shape(id).to_vec(), self.value(id).to_vec())
            .expect("tape node is a valid tensor")
    }

    fn dims2(&self, id: NodeId, context: &'static str) -> Result<(usize, usize)> {
        let shape = self.shape(id);
        match shape.len() {
            2 => Ok((shape[0], shape[1])),
            _ => Err(Error::ShapeMismatch {
                context,
                left: shape.to_vec(),
                right: vec![],
            }),
        }
    }

    // ── Elementwise and linear algebra ──────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> NodeId {
        let data = self.value(a).iter().map(|&x| x * c).collect();
        let rg = self.requires(a);
        self.push(self.shape(a).to_vec(), data, rg, Op::Scale { a, c })
    }

    /// Broadcast-add a length-`n` bias to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(a, "add_bias: matrix must be 2-D")?;
        if self.shape(bias) != [n] {
            return Err(Error::ShapeMismatch {
                context: "add_bias: bias vs matrix columns",
                left: self.shape(bias).to_vec(),
                right: vec![m, n],
            });
        }
        let mut data = self.value(a).to_vec();
        let bias_data = self.value(bias);
        for row in data.chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(bias_data) {
                *x += *b;
            }
        }
        let rg = self.requires(a) || self.requires(bias);
        Ok(self.push(vec![m, n], data, rg, Op::AddBias { a, bias }))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a, "matmul: lhs must be 2-D")?;
        let (k2, n) = self.dims2(b, "matmul: rhs must be 2-D")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                context: "matmul: inner dimensions",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![S::zero(); m * n];
        mm_nn(self.value(a), self.value(b), m, k, n, &mut out);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(vec![m, n], out, rg, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(a, "transpose: input must be 2-D")?;
        let src = self.value(a);
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.requires(a);
        Ok(self.push(vec![n, m], out, rg, Op::Transpose { a }))
    }

    // ── Activations ─────────────────────────────────────────────────

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).iter().map(|&x| gelu_value(x)).collect();
        let rg = self.requires(a);
        self.push(self.shape(a).to_vec(), data, rg, Op::Gelu { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).iter().map(|&x| sigmoid_value(x)).collect();
        let rg = self.requires(a);
        self.push(self.shape(a).to_vec(), data, rg, Op::Sigmoid { a })
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).iter().map(|&x| softplus_value(x)).collect();
        let rg = self.requires(a);
        self.push(self.shape(a).to_vec(), data, rg, Op::Softplus { a })
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "softmax: axis {axis} out of range for shape {shape:?}"
            )));
        }
        let mut data = self.value(a).to_vec();
        for_each_lane(&shape, axis, |lane| softmax_lane(&mut data, lane));
        let rg = self.requires(a);
        Ok(self.push(shape, data, rg, Op::Softmax { a, axis }))
    }

    /// Per-row zero-mean unit-variance normalization then affine transform.
    pub fn layer_norm(&mut self, a: NodeId, gamma: NodeId, beta: NodeId, eps: S) -> Result<NodeId> {
        let d = *self.shape(a).last().ok_or_else(|| Error::contract("layer_norm: scalar input"))?;
        for (id, name) in [(gamma, "gamma"), (beta, "beta")] {
            if self.shape(id) != [d] {
                return Err(Error::ShapeMismatch {
                    context: "layer_norm: affine parameter vs feature dim",
                    left: self.shape(id).to_vec(),
                    right: vec![d],
                });
            }
            let _ = name;
        }
        let src = self.value(a);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut out = vec![S::zero(); src.len()];
        for (row, orow) in src.chunks(d).zip(out.chunks_mut(d)) {
            let (mean, inv_std) = row_moments(row, eps);
            for j in 0..d {
                orow[j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let rg = self.requires(a) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::LayerNorm { a, gamma, beta, eps }))
    }

    // ── Convolution ─────────────────────────────────────────────────

    /// Channel-wise 1-D convolution of a `T x d` sequence with per-channel
    /// kernels `k x d`. Output length is `(T + 2*padding - k) / stride + 1`.
    pub fn depthwise_conv1d(
        &mut self,
        x: NodeId,
        kernels: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (t, d) = self.dims2(x, "depthwise_conv1d: input must be 2-D")?;
        let (k, dk) = self.dims2(kernels, "depthwise_conv1d: kernels must be 2-D")?;
        if t < 1 {
            return Err(Error::contract("depthwise_conv1d: empty input sequence"));
        }
        if dk != d {
            return Err(Error::ShapeMismatch {
                context: "depthwise_conv1d: kernel channels vs input channels",
                left: vec![k, dk],
                right: vec![t, d],
            });
        }
        if k % 2 == 0 || stride < 1 {
            return Err(Error::contract(format!(
                "depthwise_conv1d: kernel size must be odd and stride >= 1 (got k={k}, stride={stride})"
            )));
        }
        if t + 2 * padding < k {
            return Err(Error::contract(format!(
                "depthwise_conv1d: padded length {t}+2*{padding} shorter than kernel {k}"
            )));
        }
        let t_out = (t + 2 * padding - k) / stride + 1;
        let xs = self.value(x);
        let ks = self.value(kernels);
        let mut out = vec![S::zero(); t_out * d];
        for to in 0..t_out {
            for j in 0..k {
                let ti = (to * stride + j) as isize - padding as isize;
                if ti < 0 || ti >= t as isize {
                    continue;
                }
                let xrow = &xs[ti as usize * d..ti as usize * d + d];
                let krow = &ks[j * d..j * d + d];
                let orow = &mut out[to * d..to * d + d];
                for c in 0..d {
                    orow[c] += krow[c] * xrow[c];
                }
            }
        }
        let rg = self.requires(x) || self.requires(kernels);
        Ok(self.push(vec![t_out, d], out, rg, Op::DepthwiseConv1d { x, kernels, stride, padding }))
    }

    // ── Structure: slicing, stacking, pooling ───────────────────────

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (m, n) = self.dims2(a, "slice_cols: input must be 2-D")?;
        if start >= end || end > n {
            return Err(Error::contract(format!(
                "slice_cols: invalid column range {start}..{end} for width {n}"
            )));
        }
        let w = end - start;
        let src = self.value(a);
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        let rg = self.requires(a);
        Ok(self.push(vec![m, w], out, rg, Op::SliceCols { a, start, end }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols: no parts"));
        }
        let (m, _) = self.dims2(parts[0], "concat_cols: parts must be 2-D")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, w) = self.dims2(p, "concat_cols: parts must be 2-D")?;
            if mp != m {
                return Err(Error::ShapeMismatch {
                    context: "concat_cols: row counts",
                    left: vec![m],
                    right: vec![mp],
                });
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = self.value(p);
                out.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(vec![m, total], out, rg, Op::ConcatCols { parts: parts.to_vec() }))
    }

    /// Gather rows by index; duplicate indices accumulate in the adjoint.
    pub fn select_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (m, n) = self.dims2(a, "select_rows: input must be 2-D")?;
        if rows.is_empty() {
            return Err(Error::contract("select_rows: empty row set"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::contract(format!("select_rows: row {bad} out of range 0..{m}")));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let rg = self.requires(a);
        Ok(self.push(vec![rows.len(), n], out, rg, Op::SelectRows { a, rows: rows.to_vec() }))
    }

    /// Stack length-`d` vectors into a `parts.len() x d` matrix.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("stack_rows: no parts"));
        }
        let d = self.nodes[parts[0].0].data.len();
        let mut out = Vec::with_capacity(parts.len() * d);
        for &p in parts {
            if self.nodes[p.0].data.len() != d {
                return Err(Error::ShapeMismatch {
                    context: "stack_rows: part lengths",
                    left: vec![d],
                    right: vec![self.nodes[p.0].data.len()],
                });
            }
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(vec![parts.len(), d], out, rg, Op::StackRows { parts: parts.to_vec() }))
    }

    /// Mean of rows `start..end` of a 2-D tensor, as a length-`d` vector.
    pub fn mean_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (m, n) = self.dims2(a, "mean_rows: input must be 2-D")?;
        if start >= end || end > m {
            return Err(Error::contract(format!(
                "mean_rows: invalid row range {start}..{end} for {m} rows"
            )));
        }
        let src = self.value(a);
        let inv = S::one() / S::cast_usize(end - start);
        let mut out = vec![S::zero(); n];
        for r in start..end {
            for j in 0..n {
                out[j] += src[r * n + j];
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.requires(a);
        Ok(self.push(vec![n], out, rg, Op::MeanRows { a, start, end }))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).iter().fold(S::zero(), |acc, &x| acc + x);
        let rg = self.requires(a);
        self.push(vec![1], vec![s], rg, Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len();
        let s = self.value(a).iter().fold(S::zero(), |acc, &x| acc + x) / S::cast_usize(n);
        let rg = self.requires(a);
        self.push(vec![1], vec![s], rg, Op::MeanAll { a })
    }

    /// L2-normalize each row (rows with norm below `eps` are scaled by `1/eps`).
    pub fn row_normalize(&mut self, a: NodeId, eps: S) -> Result<NodeId> {
        let (m, n) = self.dims2(a, "row_normalize: input must be 2-D")?;
        let src = self.value(a);
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let norm = row_norm(row).max(eps);
            for j in 0..n {
                out[i * n + j] = row[j] / norm;
            }
        }
        let rg = self.requires(a);
        Ok(self.push(vec![m, n], out, rg, Op::RowNormalize { a, eps }))
    }

    /// Inverted dropout; identity when `rate` is zero.
    pub fn dropout(&mut self, a: NodeId, rate: S, rng: &mut impl Rng) -> NodeId {
        if rate <= S::zero() {
            return a;
        }
        let rate_f = rate.as_f64();
        let keep: Vec<bool> = (0..self.value(a).len()).map(|_| rng.gen::<f64>() >= rate_f).collect();
        let scale = S::one() / (S::one() - rate);
        let data = self
            .value(a)
            .iter()
            .zip(&keep)
            .map(|(&x, &k)| if k { x * scale } else { S::zero() })
            .collect();
        let rg = self.requires(a);
        self.push(self.shape(a).to_vec(), data, rg, Op::Dropout { a, keep, scale })
    }

    // ── Fused loss kernels ──────────────────────────────────────────

    /// Mean over rows of `-log softmax(logits_i)[target_i]`.
    ///
    /// With `strict_negatives`, the target class is excluded from the
    /// denominator (which requires at least two classes and can drive the
    /// loss below zero).
    pub fn cross_entropy_rows(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        strict_negatives: bool,
    ) -> Result<NodeId> {
        let (n, m) = self.dims2(logits, "cross_entropy_rows: logits must be 2-D")?;
        if targets.len() != n {
            return Err(Error::ShapeMismatch {
                context: "cross_entropy_rows: targets vs rows",
                left: vec![targets.len()],
                right: vec![n],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= m) {
            return Err(Error::contract(format!(
                "cross_entropy_rows: target {bad} out of range for {m} classes"
            )));
        }
        if strict_negatives && m < 2 {
            return Err(Error::contract(
                "cross_entropy_rows: strict negative denominator needs >= 2 classes",
            ));
        }
        let src = self.value(logits);
        let mut total = S::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = &src[i * m..(i + 1) * m];
            total += row_nll(row, t, strict_negatives);
        }
        let loss = total / S::cast_usize(n);
        let rg = self.requires(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropyRows { logits, targets: targets.to_vec(), strict_negatives },
        ))
    }

    /// Elementwise focal binary cross-entropy on probabilities.
    ///
    /// Probabilities are clamped to `[1e-7, 1 - 1e-7]`; the clamp blocks
    /// gradient outside that range.
    pub fn focal_bce(&mut self, p: NodeId, positive: &[bool], alpha: S, gamma: S) -> Result<NodeId> {
        if positive.len() != self.value(p).len() {
            return Err(Error::ShapeMismatch {
                context: "focal_bce: mask vs probabilities",
                left: vec![positive.len()],
                right: vec![self.value(p).len()],
            });
        }
        let data = self
            .value(p)
            .iter()
            .zip(positive)
            .map(|(&q, &is_pos)| focal_value_grad(q, is_pos, alpha, gamma).0)
            .collect();
        let rg = self.requires(p);
        Ok(self.push(
            self.shape(p).to_vec(),
            data,
            rg,
            Op::FocalBce { p, positive: positive.to_vec(), alpha, gamma },
        ))
    }

    /// Per-row interval DIoU loss for predicted boundary offsets.
    ///
    /// Row `i` of `offsets` holds `(d_start, d_end)` for a frame centered at
    /// `centers[i]`; `targets[i]` is the ground-truth offset pair in the same
    /// units. Loss per row: `1 - IoU + center_distance^2 / enclosure^2`.
    pub fn diou_batch(
        &mut self,
        offsets: NodeId,
        centers: &[S],
        targets: &[(S, S)],
    ) -> Result<NodeId> {
        let (p, two) = self.dims2(offsets, "diou_batch: offsets must be 2-D")?;
        if two != 2 {
            return Err(Error::ShapeMismatch {
                context: "diou_batch: offsets must have two columns",
                left: vec![p, two],
                right: vec![p, 2],
            });
        }
        if centers.len() != p || targets.len() != p {
            return Err(Error::ShapeMismatch {
                context: "diou_batch: centers/targets vs rows",
                left: vec![centers.len(), targets.len()],
                right: vec![p, p],
            });
        }
        let src = self.value(offsets);
        let mut out = vec![S::zero(); p];
        for i in 0..p {
            let (ds, de) = (src[i * 2], src[i * 2 + 1]);
            let (tds, tde) = targets[i];
            let c = centers[i];
            let (loss, _, _) = diou_interval_grad(c - ds, c + de, c - tds, c + tde)?;
            out[i] = loss;
        }
        let rg = self.requires(offsets);
        Ok(self.push(
            vec![p],
            out,
            rg,
            Op::DiouBatch { offsets, centers: centers.to_vec(), targets: targets.to_vec() },
        ))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Populate gradients for every node reachable from `loss`.
    ///
    /// `loss` must be a single-element node. Repeated calls recompute from
    /// scratch and yield bitwise-identical results for an unchanged tape.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the last `backward` w.r.t. a node, if it was reached.
    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Copy a leaf's gradient into the tensor it was created from.
    pub fn write_grad_into(&self, id: NodeId, t: &mut Tensor<S>) {
        if let Some(g) = self.grad(id) {
            t.accumulate_grad(g);
        }
    }

    fn accum(&mut self, id: NodeId, update: impl FnOnce(&mut [S])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let len = self.nodes[id.0].data.len();
        let slot = self.grads[id.0].get_or_insert_with(|| vec![S::zero(); len]);
        update(slot);
    }

    fn propagate(&mut self, idx: usize, g: &[S]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accum(a, |dst| axpy(dst, g, S::one()));
                self.accum(b, |dst| axpy(dst, g, S::one()));
            }
            Op::Sub { a, b } => {
                self.accum(a, |dst| axpy(dst, g, S::one()));
                self.accum(b, |dst| axpy(dst, g, -S::one()));
            }
            Op::Mul { a, b } => {
                let bv = self.nodes[b.0].data.clone();
                self.accum(a, |dst| {
                    for ((d, &gi), &bi) in dst.iter_mut().zip(g).zip(&bv) {
                        *d += gi * bi;
                    }
                });
                let av = self.nodes[a.0].data.clone();
                self.accum(b, |dst| {
                    for ((d, &gi), &ai) in dst.iter_mut().zip(g).zip(&av) {
                        *d += gi * ai;
                    }
                });
            }
            Op::Scale { a, c } => {
                self.accum(a, |dst| axpy(dst, g, c));
            }
            Op::AddBias { a, bias } => {
                self.accum(a, |dst| axpy(dst, g, S::one()));
                let n = self.nodes[bias.0].data.len();
                self.accum(bias, |dst| {
                    for row in g.chunks(n) {
                        for (d, &gi) in dst.iter_mut().zip(row) {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let bv = self.nodes[b.0].data.clone();
                self.accum(a, |dst| mm_nt(g, &bv, m, n, k, dst));
                let av = self.nodes[a.0].data.clone();
                self.accum(b, |dst| mm_tn(&av, g, m, k, n, dst));
            }
            Op::Transpose { a } => {
                let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                self.accum(a, |dst| {
                    for i in 0..m {
                        for j in 0..n {
                            dst[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Gelu { a } => {
                let xs = self.nodes[a.0].data.clone();
                self.accum(a, |dst| {
                    for ((d, &gi), &x) in dst.iter_mut().zip(g).zip(&xs) {
                        *d += gi * gelu_derivative(x);
                    }
                });
            }
            Op::Sigmoid { a } => {
                let ys = self.nodes[idx].data.clone();
                self.accum(a, |dst| {
                    for ((d, &gi), &y) in dst.iter_mut().zip(g).zip(&ys) {
                        *d += gi * y * (S::one() - y);
                    }
                });
            }
            Op::Softplus { a } => {
                let xs = self.nodes[a.0].data.clone();
                self.accum(a, |dst| {
                    for ((d, &gi), &x) in dst.iter_mut().zip(g).zip(&xs) {
                        *d += gi * sigmoid_value(x);
                    }
                });
            }
            Op::Softmax { a, axis } => {
                let shape = self.nodes[idx].shape.clone();
                let ys = self.nodes[idx].data.clone();
                self.accum(a, |dst| {
                    for_each_lane(&shape, axis, |lane| {
                        let dot = lane
                            .iter()
                            .map(|&i| g[i] * ys[i])
                            .fold(S::zero(), |acc, v| acc + v);
                        for &i in lane {
                            dst[i] += ys[i] * (g[i] - dot);
                        }
                    });
                });
            }
            Op::LayerNorm { a, gamma, beta, eps } => {
                let d = *self.nodes[a.0].shape.last().unwrap();
                let xs = self.nodes[a.0].data.clone();
                let gam = self.nodes[gamma.0].data.clone();
                let inv_d = S::one() / S::cast_usize(d);
                self.accum(a, |dst| {
                    for (r, (row, grow)) in xs.chunks(d).zip(g.chunks(d)).enumerate() {
                        let (mean, inv_std) = row_moments(row, eps);
                        let mut sum_gh = S::zero();
                        let mut sum_gh_xh = S::zero();
                        for j in 0..d {
                            let xh = (row[j] - mean) * inv_std;
                            let gh = grow[j] * gam[j];
                            sum_gh += gh;
                            sum_gh_xh += gh * xh;
                        }
                        for j in 0..d {
                            let xh = (row[j] - mean) * inv_std;
                            let gh = grow[j] * gam[j];
                            dst[r * d + j] +=
                                inv_std * (gh - inv_d * sum_gh - xh * inv_d * sum_gh_xh);
                        }
                    }
                });
                self.accum(gamma, |dst| {
                    for (row, grow) in xs.chunks(d).zip(g.chunks(d)) {
                        let (mean, inv_std) = row_moments(row, eps);
                        for j in 0..d {
                            dst[j] += grow[j] * (row[j] - mean) * inv_std;
                        }
                    }
                });
                self.accum(beta, |dst| {
                    for grow in g.chunks(d) {
                        for (dj, &gj) in dst.iter_mut().zip(grow) {
                            *dj += gj;
                        }
                    }
                });
            }
            Op::DepthwiseConv1d { x, kernels, stride, padding } => {
                let (t, d) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let k = self.nodes[kernels.0].shape[0];
                let t_out = self.nodes[idx].shape[0];
                let ks = self.nodes[kernels.0].data.clone();
                self.accum(x, |dst| {
                    for to in 0..t_out {
                        for j in 0..k {
                            let ti = (to * stride + j) as isize - padding as isize;
                            if ti < 0 || ti >= t as isize {
                                continue;
                            }
                            let grow = &g[to * d..to * d + d];
                            let krow = &ks[j * d..j * d + d];
                            let drow = &mut dst[ti as usize * d..ti as usize * d + d];
                            for c in 0..d {
                                drow[c] += krow[c] * grow[c];
                            }
                        }
                    }
                });
                let xs = self.nodes[x.0].data.clone();
                self.accum(kernels, |dst| {
                    for to in 0..t_out {
                        for j in 0..k {
                            let ti = (to * stride + j) as isize - padding as isize;
                            if ti < 0 || ti >= t as isize {
                                continue;
                            }
                            let grow = &g[to * d..to * d + d];
                            let xrow = &xs[ti as usize * d..ti as usize * d + d];
                            let drow = &mut dst[j * d..j * d + d];
                            for c in 0..d {
                                drow[c] += xrow[c] * grow[c];
                            }
                        }
                    }
                });
            }
            Op::SliceCols { a, start, end } => {
                let n = self.nodes[a.0].shape[1];
                let w = end - start;
                let m = self.nodes[idx].shape[0];
                self.accum(a, |dst| {
                    for i in 0..m {
                        for j in 0..w {
                            dst[i * n + start + j] += g[i * w + j];
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let m = self.nodes[idx].shape[0];
                let total = self.nodes[idx].shape[1];
                let mut offset = 0;
                for &p in &parts {
                    let w = self.nodes[p.0].shape[1];
                    self.accum(p, |dst| {
                        for i in 0..m {
                            for j in 0..w {
                                dst[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SelectRows { a, rows } => {
                let n = self.nodes[a.0].shape[1];
                self.accum(a, |dst| {
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..n {
                            dst[r * n + j] += g[i * n + j];
                        }
                    }
                });
            }
            Op::StackRows { parts } => {
                let d = self.nodes[idx].shape[1];
                for (i, &p) in parts.iter().enumerate() {
                    self.accum(p, |dst| axpy(dst, &g[i * d..(i + 1) * d], S::one()));
                }
            }
            Op::MeanRows { a, start, end } => {
                let n = self.nodes[a.0].shape[1];
                let inv = S::one() / S::cast_usize(end - start);
                self.accum(a, |dst| {
                    for r in start..end {
                        for j in 0..n {
                            dst[r * n + j] += g[j] * inv;
                        }
                    }
                });
            }
            Op::SumAll { a } => {
                let gi = g[0];
                self.accum(a, |dst| dst.iter_mut().for_each(|d| *d += gi));
            }
            Op::MeanAll { a } => {
                let n = self.nodes[a.0].data.len();
                let gi = g[0] / S::cast_usize(n);
                self.accum(a, |dst| dst.iter_mut().for_each(|d| *d += gi));
            }
            Op::RowNormalize { a, eps } => {
                let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let xs = self.nodes[a.0].data.clone();
                let ys = self.nodes[idx].data.clone();
                self.accum(a, |dst| {
                    for i in 0..m {
                        let row = &xs[i * n..(i + 1) * n];
                        let norm = row_norm(row);
                        if norm > eps {
                            let yrow = &ys[i * n..(i + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            let dot = yrow
                                .iter()
                                .zip(grow)
                                .map(|(&y, &gi)| y * gi)
                                .fold(S::zero(), |acc, v| acc + v);
                            for j in 0..n {
                                dst[i * n + j] += (grow[j] - yrow[j] * dot) / norm;
                            }
                        } else {
                            for j in 0..n {
                                dst[i * n + j] += g[i * n + j] / eps;
                            }
                        }
                    }
                });
            }
            Op::Dropout { a, keep, scale } => {
                self.accum(a, |dst| {
                    for ((d, &gi), &k) in dst.iter_mut().zip(g).zip(&keep) {
                        if k {
                            *d += gi * scale;
                        }
                    }
                });
            }
            Op::CrossEntropyRows { logits, targets, strict_negatives } => {
                let (n, m) = (self.nodes[logits.0].shape[0], self.nodes[logits.0].shape[1]);
                let src = self.nodes[logits.0].data.clone();
                let gn = g[0] / S::cast_usize(n);
                self.accum(logits, |dst| {
                    for (i, &t) in targets.iter().enumerate() {
                        let row = &src[i * m..(i + 1) * m];
                        let drow = &mut dst[i * m..(i + 1) * m];
                        row_nll_backward(row, t, strict_negatives, gn, drow);
                    }
                });
            }
            Op::FocalBce { p, positive, alpha, gamma } => {
                let ps = self.nodes[p.0].data.clone();
                self.accum(p, |dst| {
                    for (i, ((&q, &is_pos), &gi)) in ps.iter().zip(&positive).zip(g).enumerate() {
                        let (_, dq) = focal_value_grad(q, is_pos, alpha, gamma);
                        dst[i] += gi * dq;
                    }
                });
            }
            Op::DiouBatch { offsets, centers, targets } => {
                let src = self.nodes[offsets.0].data.clone();
                self.accum(offsets, |dst| {
                    for i in 0..centers.len() {
                        let (ds, de) = (src[i * 2], src[i * 2 + 1]);
                        let (tds, tde) = targets[i];
                        let c = centers[i];
                        let (_, dps, dpe) =
                            diou_interval_grad(c - ds, c + de, c - tds, c + tde)
                                .expect("forward already validated intervals");
                        // ps = c - d_start, pe = c + d_end
                        dst[i * 2] += g[i] * -dps;
                        dst[i * 2 + 1] += g[i] * dpe;
                    }
                });
            }
        }
    }
}

// ── Scalar math shared with the non-tape paths ──────────────────────

/// Tanh-approximation GELU: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu_value<S: Scalar>(x: S) -> S {
    let half = S::cast(0.5);
    half * x * (S::one() + gelu_inner(x).tanh())
}

fn gelu_inner<S: Scalar>(x: S) -> S {
    let c0 = S::cast(0.7978845608028654); // sqrt(2/pi)
    let c1 = S::cast(0.044715);
    c0 * (x + c1 * x * x * x)
}

pub fn gelu_derivative<S: Scalar>(x: S) -> S {
    let half = S::cast(0.5);
    let c0 = S::cast(0.7978845608028654);
    let c1 = S::cast(0.044715);
    let three = S::cast(3.0);
    let t = gelu_inner(x).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c0 * (S::one() + three * c1 * x * x)
}

pub fn sigmoid_value<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub fn softplus_value<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Interval DIoU loss with partials w.r.t. the predicted endpoints.
///
/// Returns `(loss, d_loss/d_pred_start, d_loss/d_pred_end)` for prediction
/// `(ps, pe)` against ground truth `(gs, ge)`.
pub fn diou_interval_grad<S: Scalar>(ps: S, pe: S, gs: S, ge: S) -> Result<(S, S, S)> {
    if pe <= ps || ge <= gs {
        return Err(Error::contract(format!(
            "diou: degenerate interval (pred {:?}..{:?}, gt {:?}..{:?})",
            ps, pe, gs, ge
        )));
    }
    let zero = S::zero();
    let one = S::one();
    let two = S::cast(2.0);

    let inter_lo = ps.max(gs);
    let inter_hi = pe.min(ge);
    let inter = (inter_hi - inter_lo).max(zero);
    let d_inter_dps = if inter > zero && ps > gs { -one } else { zero };
    let d_inter_dpe = if inter > zero && pe < ge { one } else { zero };

    let union = (pe - ps) + (ge - gs) - inter;
    let d_union_dps = -one - d_inter_dps;
    let d_union_dpe = one - d_inter_dpe;

    let iou = inter / union;
    let d_iou_dps = (d_inter_dps * union - inter * d_union_dps) / (union * union);
    let d_iou_dpe = (d_inter_dpe * union - inter * d_union_dpe) / (union * union);

    let diff = (ps + pe) / two - (gs + ge) / two;
    let c = pe.max(ge) - ps.min(gs);
    let d_c_dps = if ps < gs { -one } else { zero };
    let d_c_dpe = if pe > ge { one } else { zero };

    let r = diff * diff / (c * c);
    let d_r_dps = diff / (c * c) - two * diff * diff * d_c_dps / (c * c * c);
    let d_r_dpe = diff / (c * c) - two * diff * diff * d_c_dpe / (c * c * c);

    Ok((one - iou + r, -d_iou_dps + d_r_dps, -d_iou_dpe + d_r_dpe))
}

/// Focal BCE value and derivative w.r.t. the probability, with clamping.
pub fn focal_value_grad<S: Scalar>(p: S, positive: bool, alpha: S, gamma: S) -> (S, S) {
    let lo = S::cast(1e-7);
    let hi = S::one() - lo;
    let clamped = p < lo || p > hi;
    let q = p.max(lo).min(hi);
    let one = S::one();
    let (value, dq) = if positive {
        let w = (one - q).powf(gamma);
        let value = -alpha * w * q.ln();
        let dq = if gamma == S::zero() {
            -alpha / q
        } else {
            alpha * gamma * (one - q).powf(gamma - one) * q.ln() - alpha * w / q
        };
        (value, dq)
    } else {
        let w = q.powf(gamma);
        let value = -(one - alpha) * w * (one - q).ln();
        let dq = if gamma == S::zero() {
            (one - alpha) / (one - q)
        } else {
            -(one - alpha) * (gamma * q.powf(gamma - one) * (one - q).ln() - w / (one - q))
        };
        (value, dq)
    };
    (value, if clamped { S::zero() } else { dq })
}

// ── Row/lane helpers ────────────────────────────────────────────────

fn zip_map<S: Scalar>(a: &[S], b: &[S], f: impl Fn(S, S) -> S) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn axpy<S: Scalar>(dst: &mut [S], src: &[S], c: S) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s * c;
    }
}

fn row_norm<S: Scalar>(row: &[S]) -> S {
    row.iter().map(|&x| x * x).fold(S::zero(), |acc, v| acc + v).sqrt()
}

/// Population mean and `1/sqrt(var + eps)` of a row.
fn row_moments<S: Scalar>(row: &[S], eps: S) -> (S, S) {
    let n = S::cast_usize(row.len());
    let mean = row.iter().fold(S::zero(), |acc, &v| acc + v) / n;
    let var = row
        .iter()
        .map(|&v| (v - mean) * (v - mean))
        .fold(S::zero(), |acc, v| acc + v)
        / n;
    (mean, S::one() / (var + eps).sqrt())
}

/// Visit every 1-D lane along `axis` of a row-major tensor, passing the flat
/// indices of the lane's elements.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut lane = vec![0usize; len];
    for o in 0..outer {
        for i in 0..inner {
            for (j, slot) in lane.iter_mut().enumerate() {
                *slot = o * len * inner + j * inner + i;
            }
            f(&lane);
        }
    }
}

fn softmax_lane<S: Scalar>(data: &mut [S], lane: &[usize]) {
    let max = lane
        .iter()
        .map(|&i| data[i])
        .fold(S::neg_infinity(), |acc, v| acc.max(v));
    let mut sum = S::zero();
    for &i in lane {
        let e = (data[i] - max).exp();
        data[i] = e;
        sum += e;
    }
    for &i in lane {
        data[i] = data[i] / sum;
    }
}

/// `-log softmax(row)[target]`, optionally excluding the target from the
/// denominator.
fn row_nll<S: Scalar>(row: &[S], target: usize, strict_negatives: bool) -> S {
    let max = row
        .iter()
        .enumerate()
        .filter(|(j, _)| !(strict_negatives && *j == target))
        .map(|(_, &v)| v)
        .fold(S::neg_infinity(), |acc, v| acc.max(v));
    let sum: S = row
        .iter()
        .enumerate()
        .filter(|(j, _)| !(strict_negatives && *j == target))
        .map(|(_, &v)| (v - max).exp())
        .fold(S::zero(), |acc, v| acc + v);
    -(row[target] - max) + sum.ln()
}

fn row_nll_backward<S: Scalar>(
    row: &[S],
    target: usize,
    strict_negatives: bool,
    upstream: S,
    out: &mut [S],
) {
    let max = row
        .iter()
        .enumerate()
        .filter(|(j, _)| !(strict_negatives && *j == target))
        .map(|(_, &v)| v)
        .fold(S::neg_infinity(), |acc, v| acc.max(v));
    let sum: S = row
        .iter()
        .enumerate()
        .filter(|(j, _)| !(strict_negatives && *j == target))
        .map(|(_, &v)| (v - max).exp())
        .fold(S::zero(), |acc, v| acc + v);
    for (j, slot) in out.iter_mut().enumerate() {
        if j == target {
            if strict_negatives {
                *slot += -upstream;
            } else {
                *slot += upstream * ((row[j] - max).exp() / sum - S::one());
            }
        } else {
            *slot += upstream * (row[j] - max).exp() / sum;
        }
    }
}

// ── Matmul kernels ──────────────────────────────────────────────────

/// `out += a[m x k] * b[k x n]`.
fn mm_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a[m x k] * b^T` where `b` is `n x k`.
fn mm_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// `out += a^T * b` where `a` is `m x k` and `b` is `m x n`.
fn mm_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

impl<S: Scalar> Tape<S> {
    fn same_shape(&self, a: NodeId, b: NodeId, context: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                context: match context {
                    "add" => "add: operand shapes",
                    "sub" => "sub: operand shapes",
                    "mul" => "mul: operand shapes",
                    _ => "elementwise: operand shapes",
                },
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }
}
