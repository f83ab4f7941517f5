use std::ops::Range;

use rand::Rng;

use super::{AutodiffError, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { input: NodeId, axis: usize, start: usize, end: usize },
    Reshape(NodeId),
    Sum(NodeId),
    MeanAxis { input: NodeId, axis: usize },
    Softmax(NodeId),
    LogSoftmax(NodeId),
    CrossEntropy { logits: NodeId, labels: Vec<usize>, log_probs: Vec<f64> },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<f64>, rstd: Vec<f64> },
    Tanh(NodeId),
    Gelu(NodeId),
    Gather { table: NodeId, ids: Vec<usize> },
    MaskedFill { input: NodeId, mask: Vec<bool> },
    Dropout { input: NodeId, keep: Vec<f64> },
    Attention(Box<AttentionCache>),
}

struct AttentionCache {
    q: NodeId,
    k: NodeId,
    v: NodeId,
    segments: Vec<Range<usize>>,
    heads: usize,
    probs: Vec<f64>,
    keep: Option<Vec<f64>>,
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Records primitive operations for one forward pass and replays them in
/// reverse to produce gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every leaf on a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `id`; zero when the node did not influence the loss.
    pub fn get(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    pub fn get_ref(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Tensor {
        self.grads[id.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }
}

/// `c = op(a) · op(b) + beta * c` for row-major operands; `op(a)` is
/// `m × inner`, `op(b)` is `inner × n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    inner: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * inner && b.len() >= inner * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m) } else { (inner, 1) };
    let (rsb, csb) = if trans_b { (1, inner) } else { (n, 1) };
    // SAFETY: bounds asserted above; strides describe the row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            inner,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - max).exp();
            total += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= total;
        }
    }
    out
}

fn log_softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = xi - lse;
        }
    }
    out
}

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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> NodeId {
        self.nodes.push(Node { value, op, tracked });
        NodeId(self.nodes.len() - 1)
    }

    fn tracked(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].tracked)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn mismatch(&self, op: &'static str, a: NodeId, b: NodeId) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Tensor::from_raw(vec![m, n], out), Op::MatMul(a, b), tracked))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(AutodiffError::InvalidArgument {
                op: "transpose",
                msg: format!("expected a matrix, got shape {s:?}"),
            });
        }
        let (r, c) = (s[0], s[1]);
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let tracked = self.tracked(&[a]);
        Ok(self.push(Tensor::from_raw(vec![c, r], out), Op::Transpose(a), tracked))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Tensor::from_raw(shape, out), Op::Add(a, b), tracked))
    }

    /// Adds vector `row` to every row of `a` (broadcast over the last axis).
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, AutodiffError> {
        let w = self.value(a).last_dim();
        if self.shape(row) != [w] {
            return Err(self.mismatch("add_row", a, row));
        }
        let r = self.value(row).data();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(w)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(&[a, row]);
        Ok(self.push(Tensor::from_raw(shape, out), Op::AddRow(a, row), tracked))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Tensor::from_raw(shape, out), Op::Mul(a, b), tracked))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(&[a]);
        self.push(Tensor::from_raw(shape, out), Op::Scale(a, factor), tracked)
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId, AutodiffError> {
        let first = *inputs.first().ok_or(AutodiffError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(AutodiffError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {base:?}"),
            });
        }
        let mut total = 0;
        for &id in inputs {
            let s = self.shape(id);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(self.mismatch("concat", first, id));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &id in inputs {
                let n = self.shape(id)[axis];
                let x = self.value(id).data();
                out.extend_from_slice(&x[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let tracked = self.tracked(inputs);
        Ok(self.push(
            Tensor::from_raw(shape, out),
            Op::Concat { inputs: inputs.to_vec(), axis },
            tracked,
        ))
    }

    pub fn slice(
        &mut self,
        input: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    ) -> Result<NodeId, AutodiffError> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(AutodiffError::InvalidArgument {
                op: "slice",
                msg: format!("range {start}..{end} on axis {axis} invalid for shape {s:?}"),
            });
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let tracked = self.tracked(&[input]);
        Ok(self.push(
            Tensor::from_raw(shape, out),
            Op::Slice { input, axis, start, end },
            tracked,
        ))
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId, AutodiffError> {
        let value = self.value(input).clone().reshaped(shape.to_vec())?;
        let tracked = self.tracked(&[input]);
        Ok(self.push(value, Op::Reshape(input), tracked))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let total = self.value(input).data().iter().sum();
        let tracked = self.tracked(&[input]);
        self.push(Tensor::scalar(total), Op::Sum(input), tracked)
    }

    /// Mean over `axis`; the axis is removed from the output shape.
    pub fn mean_over_axis(&mut self, input: NodeId, axis: usize) -> Result<NodeId, AutodiffError> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() {
            return Err(AutodiffError::InvalidArgument {
                op: "mean_over_axis",
                msg: format!("axis {axis} out of range for shape {s:?}"),
            });
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let x = self.value(input).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let src = &x[(o * n + a) * inner..(o * n + a + 1) * inner];
                for (d, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape: Vec<usize> = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let tracked = self.tracked(&[input]);
        Ok(self.push(Tensor::from_raw(shape, out), Op::MeanAxis { input, axis }, tracked))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, input: NodeId) -> NodeId {
        let v = self.value(input);
        let out = softmax_rows(v.data(), v.last_dim());
        let shape = v.shape().to_vec();
        let tracked = self.tracked(&[input]);
        self.push(Tensor::from_raw(shape, out), Op::Softmax(input), tracked)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, input: NodeId) -> NodeId {
        let v = self.value(input);
        let out = log_softmax_rows(v.data(), v.last_dim());
        let shape = v.shape().to_vec();
        let tracked = self.tracked(&[input]);
        self.push(Tensor::from_raw(shape, out), Op::LogSoftmax(input), tracked)
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits` (`[batch, classes]`, or `[classes]` for a single example).
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId, AutodiffError> {
        let v = self.value(logits);
        let width = v.last_dim();
        let rows = v.len() / width;
        if rows != labels.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross_entropy",
                left: v.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= width) {
            return Err(AutodiffError::IndexOutOfRange {
                op: "cross_entropy",
                index: bad,
                bound: width,
            });
        }
        let log_probs = log_softmax_rows(v.data(), width);
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(r, &l)| log_probs[r * width + l])
            .sum::<f64>()
            / rows as f64;
        let tracked = self.tracked(&[logits]);
        Ok(self.push(
            Tensor::from_raw(vec![1], vec![loss]),
            Op::CrossEntropy { logits, labels: labels.to_vec(), log_probs },
            tracked,
        ))
    }

    /// Row-wise layer normalization over the last axis.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId, AutodiffError> {
        let w = self.value(x).last_dim();
        if self.shape(gain) != [w] {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        if self.shape(bias) != [w] {
            return Err(self.mismatch("layer_norm", x, bias));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.len() / w;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * w..(r + 1) * w];
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let inv = 1.0 / (var + eps).sqrt();
            rstd[r] = inv;
            for i in 0..w {
                let h = (row[i] - mean) * inv;
                xhat[r * w + i] = h;
                out[r * w + i] = h * g[i] + b[i];
            }
        }
        let shape = self.shape(x).to_vec();
        let tracked = self.tracked(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_raw(shape, out),
            Op::LayerNorm { x, gain, bias, xhat, rstd },
            tracked,
        ))
    }

    pub fn tanh(&mut self, input: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(input).data().iter().map(|x| x.tanh()).collect();
        let shape = self.shape(input).to_vec();
        let tracked = self.tracked(&[input]);
        self.push(Tensor::from_raw(shape, out), Op::Tanh(input), tracked)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, input: NodeId) -> NodeId {
        let out: Vec<f64> = self
            .value(input)
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()))
            .collect();
        let shape = self.shape(input).to_vec();
        let tracked = self.tracked(&[input]);
        self.push(Tensor::from_raw(shape, out), Op::Gelu(input), tracked)
    }

    /// Gathers rows of `table` (`[rows, width]` or `[rows]`) by index.
    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, AutodiffError> {
        let t = self.value(table);
        let rows = t.shape()[0];
        let width = t.len() / rows;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(AutodiffError::IndexOutOfRange {
                op: "embedding_lookup",
                index: bad,
                bound: rows,
            });
        }
        if ids.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "embedding_lookup",
                msg: "empty id list".into(),
            });
        }
        let mut out = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            out.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = ids.len();
        let tracked = self.tracked(&[table]);
        Ok(self.push(
            Tensor::from_raw(shape, out),
            Op::Gather { table, ids: ids.to_vec() },
            tracked,
        ))
    }

    /// Replaces entries where `mask` is true with `value` (which may be
    /// infinite, e.g. `-inf` before a softmax).
    pub fn masked_fill(&mut self, input: NodeId, mask: &[bool], value: f64) -> Result<NodeId, AutodiffError> {
        if mask.len() != self.value(input).len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "masked_fill",
                left: self.shape(input).to_vec(),
                right: vec![mask.len()],
            });
        }
        let out: Vec<f64> = self
            .value(input)
            .data()
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        let shape = self.shape(input).to_vec();
        let tracked = self.tracked(&[input]);
        Ok(self.push(
            Tensor::from_raw(shape, out),
            Op::MaskedFill { input, mask: mask.to_vec() },
            tracked,
        ))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: NodeId, p: f64, rng: &mut R) -> NodeId {
        if p <= 0.0 {
            return input;
        }
        let scale = 1.0 / (1.0 - p);
        let keep: Vec<f64> = (0..self.value(input).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
            .collect();
        let out: Vec<f64> = self.value(input).data().iter().zip(&keep).map(|(x, k)| x * k).collect();
        let shape = self.shape(input).to_vec();
        let tracked = self.tracked(&[input]);
        self.push(Tensor::from_raw(shape, out), Op::Dropout { input, keep }, tracked)
    }

    /// Multi-head scaled dot-product self-attention restricted to row
    /// segments: rows in one segment attend only to rows of the same segment.
    /// `q`, `k`, `v` are `[rows, width]` with `width` divisible by `heads`.
    /// `prob_dropout` drops attention probabilities when present.
    pub fn segment_attention<R: Rng + ?Sized>(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segments: &[Range<usize>],
        heads: usize,
        prob_dropout: Option<(f64, &mut R)>,
    ) -> Result<NodeId, AutodiffError> {
        let s = self.shape(q).to_vec();
        if s.len() != 2 {
            return Err(AutodiffError::InvalidArgument {
                op: "segment_attention",
                msg: format!("expected a matrix, got shape {s:?}"),
            });
        }
        if self.shape(k) != s.as_slice() {
            return Err(self.mismatch("segment_attention", q, k));
        }
        if self.shape(v) != s.as_slice() {
            return Err(self.mismatch("segment_attention", q, v));
        }
        let (rows, width) = (s[0], s[1]);
        if heads == 0 || width % heads != 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "segment_attention",
                msg: format!("width {width} not divisible by {heads} heads"),
            });
        }
        if let Some(bad) = segments.iter().find(|r| r.start >= r.end || r.end > rows) {
            return Err(AutodiffError::InvalidArgument {
                op: "segment_attention",
                msg: format!("segment {bad:?} invalid for {rows} rows"),
            });
        }
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let total: usize = segments.iter().map(|r| r.len() * r.len()).sum::<usize>() * heads;
        let mut probs = Vec::with_capacity(total);
        let mut out = vec![0.0; rows * width];
        let (p_drop, mut rng) = match prob_dropout {
            Some((p, rng)) if p > 0.0 => (p, Some(rng)),
            _ => (0.0, None),
        };
        let mut keep = rng.as_ref().map(|_| Vec::with_capacity(total));
        let mut scores = Vec::new();
        for seg in segments {
            let len = seg.len();
            for h in 0..heads {
                let off = h * dh;
                scores.clear();
                for i in seg.clone() {
                    let qi = &qd[i * width + off..i * width + off + dh];
                    for j in seg.clone() {
                        let kj = &kd[j * width + off..j * width + off + dh];
                        scores.push(scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>());
                    }
                }
                let p = softmax_rows(&scores, len);
                for (ii, i) in seg.clone().enumerate() {
                    let dst = &mut out[i * width + off..i * width + off + dh];
                    for (jj, j) in seg.clone().enumerate() {
                        let mut pij = p[ii * len + jj];
                        if let (Some(rng), Some(keep)) = (rng.as_mut(), keep.as_mut()) {
                            let kf = if rng.random::<f64>() < p_drop { 0.0 } else { 1.0 / (1.0 - p_drop) };
                            keep.push(kf);
                            pij *= kf;
                        }
                        let vj = &vd[j * width + off..j * width + off + dh];
                        for (d, x) in dst.iter_mut().zip(vj) {
                            *d += pij * x;
                        }
                    }
                }
                probs.extend_from_slice(&p);
            }
        }
        let tracked = self.tracked(&[q, k, v]);
        Ok(self.push(
            Tensor::from_raw(vec![rows, width], out),
            Op::Attention(Box::new(AttentionCache {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
                keep,
            })),
            tracked,
        ))
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for leaves only.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, AutodiffError> {
        let loss_shape = self.shape(loss);
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: loss_shape.to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked || matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) => Some(Tensor::from_raw(node.value.shape().to_vec(), g)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Runs `$body` with the lazily allocated gradient buffer of an input;
        // skipped for inputs that carry no gradient.
        macro_rules! with_buf {
            ($id:expr, |$b:ident| $body:block) => {
                let id: NodeId = $id;
                if nodes[id.0].tracked {
                    let len = nodes[id.0].value.len();
                    let $b: &mut Vec<f64> = grads[id.0].get_or_insert_with(|| vec![0.0; len]);
                    $body
                }
            };
        }
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                with_buf!(*a, |da| {
                    gemm(m, n, k, g, false, self.value(*b).data(), true, da, 1.0);
                });
                with_buf!(*b, |db| {
                    gemm(k, m, n, self.value(*a).data(), true, g, false, db, 1.0);
                });
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                with_buf!(*a, |da| {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    with_buf!(id, |d| {
                        d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    });
                }
            }
            Op::AddRow(a, row) => {
                with_buf!(*a, |d| {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                });
                with_buf!(*row, |d| {
                    let w = d.len();
                    for chunk in g.chunks(w) {
                        d.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                with_buf!(*a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * vb[i];
                    }
                });
                with_buf!(*b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(a, f) => {
                with_buf!(*a, |d| {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += f * y);
                });
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut offset = 0;
                for &id in inputs {
                    let n = self.shape(id)[*axis];
                    with_buf!(id, |d| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            let dst = &mut d[o * n * inner..(o + 1) * n * inner];
                            dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    });
                    offset += n;
                }
            }
            Op::Slice { input, axis, start, end } => {
                let (outer, n, inner) = axis_split(self.shape(*input), *axis);
                let len = end - start;
                with_buf!(*input, |d| {
                    for o in 0..outer {
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        let dst = &mut d[(o * n + start) * inner..(o * n + end) * inner];
                        dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Reshape(a) => {
                with_buf!(*a, |d| {
                    d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                });
            }
            Op::Sum(a) => {
                with_buf!(*a, |d| {
                    d.iter_mut().for_each(|x| *x += g[0]);
                });
            }
            Op::MeanAxis { input, axis } => {
                let (outer, n, inner) = axis_split(self.shape(*input), *axis);
                let inv = 1.0 / n as f64;
                with_buf!(*input, |d| {
                    for o in 0..outer {
                        for a in 0..n {
                            let dst = &mut d[(o * n + a) * inner..(o * n + a + 1) * inner];
                            let src = &g[o * inner..(o + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(x, y)| *x += inv * y);
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let w = node.value.last_dim();
                with_buf!(*a, |d| {
                    for ((yr, gr), dr) in y.chunks(w).zip(g.chunks(w)).zip(d.chunks_mut(w)) {
                        let dotp: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for i in 0..w {
                            dr[i] += yr[i] * (gr[i] - dotp);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let w = node.value.last_dim();
                with_buf!(*a, |d| {
                    for ((yr, gr), dr) in y.chunks(w).zip(g.chunks(w)).zip(d.chunks_mut(w)) {
                        let total: f64 = gr.iter().sum();
                        for i in 0..w {
                            dr[i] += gr[i] - yr[i].exp() * total;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, log_probs } => {
                let w = self.value(*logits).last_dim();
                let scale = g[0] / labels.len() as f64;
                with_buf!(*logits, |d| {
                    for (r, &l) in labels.iter().enumerate() {
                        for i in 0..w {
                            let p = log_probs[r * w + i].exp();
                            let target = if i == l { 1.0 } else { 0.0 };
                            d[r * w + i] += scale * (p - target);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let w = node.value.last_dim();
                let gv = self.value(*gain).data();
                with_buf!(*gain, |d| {
                    for (gr, hr) in g.chunks(w).zip(xhat.chunks(w)) {
                        for i in 0..w {
                            d[i] += gr[i] * hr[i];
                        }
                    }
                });
                with_buf!(*bias, |d| {
                    for gr in g.chunks(w) {
                        d.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                    }
                });
                with_buf!(*x, |d| {
                    for (r, ((gr, hr), dr)) in g.chunks(w).zip(xhat.chunks(w)).zip(d.chunks_mut(w)).enumerate() {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for i in 0..w {
                            let dh = gr[i] * gv[i];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[i];
                        }
                        mean_dh /= w as f64;
                        mean_dh_h /= w as f64;
                        for i in 0..w {
                            let dh = gr[i] * gv[i];
                            dr[i] += rstd[r] * (dh - mean_dh - hr[i] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                with_buf!(*a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                with_buf!(*a, |d| {
                    for i in 0..d.len() {
                        let x = xv[i];
                        let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        d[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * x * dt);
                    }
                });
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let width = t.len() / t.shape()[0];
                with_buf!(*table, |d| {
                    for (r, &i) in ids.iter().enumerate() {
                        let dst = &mut d[i * width..(i + 1) * width];
                        dst.iter_mut().zip(&g[r * width..(r + 1) * width]).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::MaskedFill { input, mask } => {
                with_buf!(*input, |d| {
                    for i in 0..d.len() {
                        if !mask[i] {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Dropout { input, keep } => {
                with_buf!(*input, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * keep[i];
                    }
                });
            }
            Op::Attention(cache) => self.backprop_attention(cache, g, grads),
        }
    }

    fn backprop_attention(&self, c: &AttentionCache, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let s = self.shape(c.q);
        let (rows, width) = (s[0], s[1]);
        let dh = width / c.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(c.q).data(), self.value(c.k).data(), self.value(c.v).data());
        // Distinct local buffers avoid aliasing when q, k and v share a node.
        let mut dq = vec![0.0; rows * width];
        let mut dk = vec![0.0; rows * width];
        let mut dv = vec![0.0; rows * width];
        let mut offset = 0;
        let mut dp = Vec::new();
        for seg in &c.segments {
            let len = seg.len();
            for h in 0..c.heads {
                let off = h * dh;
                let p = &c.probs[offset..offset + len * len];
                let keep = c.keep.as_ref().map(|k| &k[offset..offset + len * len]);
                dp.clear();
                for (ii, i) in seg.clone().enumerate() {
                    let gi = &g[i * width + off..i * width + off + dh];
                    for (jj, j) in seg.clone().enumerate() {
                        let vj = &vd[j * width + off..j * width + off + dh];
                        let mut pij = p[ii * len + jj];
                        let kf = keep.map_or(1.0, |k| k[ii * len + jj]);
                        pij *= kf;
                        // dV_j += P'_ij * dO_i
                        let dvj = &mut dv[j * width + off..j * width + off + dh];
                        for (d, x) in dvj.iter_mut().zip(gi) {
                            *d += pij * x;
                        }
                        dp.push(kf * gi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>());
                    }
                }
                for (ii, i) in seg.clone().enumerate() {
                    let prow = &p[ii * len..(ii + 1) * len];
                    let drow = &dp[ii * len..(ii + 1) * len];
                    let dotp: f64 = prow.iter().zip(drow).map(|(a, b)| a * b).sum();
                    for (jj, j) in seg.clone().enumerate() {
                        let ds = prow[jj] * (drow[jj] - dotp) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for t in 0..dh {
                            dq[i * width + off + t] += ds * kd[j * width + off + t];
                            dk[j * width + off + t] += ds * qd[i * width + off + t];
                        }
                    }
                }
                offset += len * len;
            }
        }
        for (id, local) in [(c.q, dq), (c.k, dk), (c.v, dv)] {
            if !self.nodes[id.0].tracked {
                continue;
            }
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; rows * width]);
            slot.iter_mut().zip(&local).for_each(|(x, y)| *x += y);
        }
    }
}
