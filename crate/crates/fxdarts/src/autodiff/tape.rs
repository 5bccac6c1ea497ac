//! Define-by-run tape for reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass: the super-network's
//! topology changes while the search prunes operators, so nothing is
//! cached across passes. Each operation pushes an output node and a
//! record holding enough state to run its backward rule. [`Tape::backward`]
//! walks the records in reverse, accumulating gradients into every node
//! that requires them.

use super::conv::{conv2d_backward, conv2d_forward, conv2d_mac_count, Conv2dSpec};
use super::tensor::Tensor;
use super::TensorError;

/// Index of a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

struct Node {
    value: Tensor,
    grad: Vec<f64>,
    requires_grad: bool,
}

enum Record {
    Add { a: TensorId, b: TensorId, out: TensorId },
    Mul { a: TensorId, b: TensorId, out: TensorId },
    MulConst { x: TensorId, c: f64, out: TensorId },
    Relu { x: TensorId, out: TensorId },
    Conv2d { x: TensorId, w: TensorId, out: TensorId, spec: Conv2dSpec },
    Linear { x: TensorId, w: TensorId, b: TensorId, out: TensorId },
    AffineChannelNorm { x: TensorId, gain: TensorId, bias: TensorId, out: TensorId },
    Concat { xs: Vec<TensorId>, out: TensorId },
    GlobalAvgPool { x: TensorId, out: TensorId },
    Softmax { x: TensorId, out: TensorId, axis: usize },
    LogSoftmax { x: TensorId, out: TensorId, axis: usize },
    CrossEntropy { logits: TensorId, out: TensorId, labels: Vec<usize>, probs: Vec<f64> },
    MaskedSoftmax { x: TensorId, out: TensorId, alive: Vec<bool> },
    NegXLogX { x: TensorId, out: TensorId },
    Sum { x: TensorId, out: TensorId },
    ScaleByElement { x: TensorId, w: TensorId, idx: usize, out: TensorId },
}

/// Records a forward pass and plays it backwards.
pub struct Tape {
    nodes: Vec<Node>,
    records: Vec<Record>,
    macs: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            records: Vec::new(),
            macs: 0,
        }
    }

    /// Puts a tensor on the tape. `requires_grad` marks it as a leaf whose
    /// gradient should be retained by [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorId {
        self.push(value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.push(value, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` root with respect to `id`.
    pub fn grad(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    /// Multiply-accumulate operations executed by conv2d/linear so far.
    /// Used by the instrumented-forward complexity oracle.
    pub fn mac_count(&self) -> u64 {
        self.macs
    }

    fn push(&mut self, value: Tensor, requires_grad: bool) -> TensorId {
        let grad = vec![0.0; value.numel()];
        self.nodes.push(Node {
            value,
            grad,
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn push_result(&mut self, value: Tensor, inputs: &[TensorId]) -> TensorId {
        let requires = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.push(value, requires)
    }

    // ── Elementwise and shape ops ───────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = (&self.nodes[a.0].value.shape, &self.nodes[b.0].value.shape);
        if sa != sb {
            return Err(TensorError::BinaryShapeMismatch {
                op: "add",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x + y)
            .collect();
        let out = self.push_result(
            Tensor {
                shape: self.nodes[a.0].value.shape.clone(),
                data,
            },
            &[a, b],
        );
        self.records.push(Record::Add { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = (&self.nodes[a.0].value.shape, &self.nodes[b.0].value.shape);
        if sa != sb {
            return Err(TensorError::BinaryShapeMismatch {
                op: "mul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x * y)
            .collect();
        let out = self.push_result(
            Tensor {
                shape: self.nodes[a.0].value.shape.clone(),
                data,
            },
            &[a, b],
        );
        self.records.push(Record::Mul { a, b, out });
        Ok(out)
    }

    pub fn mul_const(&mut self, x: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[x.0].value.data.iter().map(|v| v * c).collect();
        let out = self.push_result(
            Tensor {
                shape: self.nodes[x.0].value.shape.clone(),
                data,
            },
            &[x],
        );
        self.records.push(Record::MulConst { x, c, out });
        out
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[x.0].value.data.iter().map(|v| v.max(0.0)).collect();
        let out = self.push_result(
            Tensor {
                shape: self.nodes[x.0].value.shape.clone(),
                data,
            },
            &[x],
        );
        self.records.push(Record::Relu { x, out });
        out
    }

    /// Sum of every element, yielding a rank-0 scalar.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.nodes[x.0].value.data.iter().sum();
        let out = self.push_result(Tensor::scalar(s), &[x]);
        self.records.push(Record::Sum { x, out });
        out
    }

    // ── Convolution and dense layers ────────────────────────────────────

    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        stride: usize,
        padding: usize,
        dilation: usize,
        groups: usize,
    ) -> Result<TensorId, TensorError> {
        let spec = Conv2dSpec {
            stride,
            padding,
            dilation,
            groups,
        };
        let value = conv2d_forward(&self.nodes[x.0].value, &self.nodes[w.0].value, &spec)?;
        self.macs += conv2d_mac_count(&self.nodes[x.0].value, &self.nodes[w.0].value, &value, &spec);
        let out = self.push_result(value, &[x, w]);
        self.records.push(Record::Conv2d { x, w, out, spec });
        Ok(out)
    }

    /// `x [N,F] · w[C,F]ᵀ + b[C] -> [N,C]`.
    pub fn linear(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
    ) -> Result<TensorId, TensorError> {
        let xs = &self.nodes[x.0].value;
        let ws = &self.nodes[w.0].value;
        let bs = &self.nodes[b.0].value;
        if xs.shape.len() != 2 || ws.shape.len() != 2 || bs.shape.len() != 1 {
            return Err(TensorError::RankMismatch {
                expected: 2,
                got: xs.shape.len().max(ws.shape.len()),
            });
        }
        let (n, f) = (xs.shape[0], xs.shape[1]);
        let (c, fw) = (ws.shape[0], ws.shape[1]);
        if f != fw {
            return Err(TensorError::DimMismatch {
                op: "linear",
                dim: "in_features",
                expected: fw,
                got: f,
            });
        }
        if bs.shape[0] != c {
            return Err(TensorError::DimMismatch {
                op: "linear",
                dim: "bias",
                expected: c,
                got: bs.shape[0],
            });
        }
        let mut data = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                let mut acc = bs.data[j];
                for k in 0..f {
                    acc += xs.data[i * f + k] * ws.data[j * f + k];
                }
                data[i * c + j] = acc;
            }
        }
        self.macs += (n * c * f) as u64;
        let out = self.push_result(
            Tensor {
                shape: vec![n, c],
                data,
            },
            &[x, w, b],
        );
        self.records.push(Record::Linear { x, w, b, out });
        Ok(out)
    }

    /// Per-channel affine `y = x * gain[c] + bias[c]` over NCHW input.
    pub fn affine_channel_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
    ) -> Result<TensorId, TensorError> {
        let (n, c, h, w) = self.nodes[x.0].value.dims4()?;
        let gs = &self.nodes[gain.0].value;
        let bs = &self.nodes[bias.0].value;
        if gs.shape != [c] || bs.shape != [c] {
            return Err(TensorError::DimMismatch {
                op: "affine_channel_norm",
                dim: "channels",
                expected: c,
                got: gs.shape.first().copied().unwrap_or(0),
            });
        }
        let xs = &self.nodes[x.0].value;
        let mut data = vec![0.0; xs.numel()];
        let plane = h * w;
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let (g, b) = (gs.data[ci], bs.data[ci]);
                for p in 0..plane {
                    data[base + p] = xs.data[base + p] * g + b;
                }
            }
        }
        let out = self.push_result(
            Tensor {
                shape: xs.shape.clone(),
                data,
            },
            &[x, gain, bias],
        );
        self.records
            .push(Record::AffineChannelNorm { x, gain, bias, out });
        Ok(out)
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat(&mut self, xs: &[TensorId]) -> Result<TensorId, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::EmptyConcat);
        }
        let (n, _, h, w) = self.nodes[xs[0].0].value.dims4()?;
        let mut c_total = 0;
        for &id in xs {
            let (ni, ci, hi, wi) = self.nodes[id.0].value.dims4()?;
            if (ni, hi, wi) != (n, h, w) {
                return Err(TensorError::BinaryShapeMismatch {
                    op: "concat",
                    lhs: self.nodes[xs[0].0].value.shape.clone(),
                    rhs: self.nodes[id.0].value.shape.clone(),
                });
            }
            c_total += ci;
        }
        let plane = h * w;
        let mut data = vec![0.0; n * c_total * plane];
        for ni in 0..n {
            let mut c_off = 0;
            for &id in xs {
                let t = &self.nodes[id.0].value;
                let ci = t.shape[1];
                let src = ni * ci * plane;
                let dst = (ni * c_total + c_off) * plane;
                data[dst..dst + ci * plane].copy_from_slice(&t.data[src..src + ci * plane]);
                c_off += ci;
            }
        }
        let out = self.push_result(
            Tensor {
                shape: vec![n, c_total, h, w],
                data,
            },
            xs,
        );
        self.records.push(Record::Concat {
            xs: xs.to_vec(),
            out,
        });
        Ok(out)
    }

    /// NCHW -> [N,C] spatial mean.
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let (n, c, h, w) = self.nodes[x.0].value.dims4()?;
        let plane = h * w;
        let xs = &self.nodes[x.0].value;
        let mut data = vec![0.0; n * c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let s: f64 = xs.data[base..base + plane].iter().sum();
                data[ni * c + ci] = s / plane as f64;
            }
        }
        let out = self.push_result(
            Tensor {
                shape: vec![n, c],
                data,
            },
            &[x],
        );
        self.records.push(Record::GlobalAvgPool { x, out });
        Ok(out)
    }

    // ── Softmax family ──────────────────────────────────────────────────

    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        let value = softmax_lanes(&self.nodes[x.0].value, axis, false)?;
        let out = self.push_result(value, &[x]);
        self.records.push(Record::Softmax { x, out, axis });
        Ok(out)
    }

    pub fn log_softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        let value = softmax_lanes(&self.nodes[x.0].value, axis, true)?;
        let out = self.push_result(value, &[x]);
        self.records.push(Record::LogSoftmax { x, out, axis });
        Ok(out)
    }

    /// Mean over the batch of `-log p(label)` for logits `[N, C]`.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        labels: &[usize],
    ) -> Result<TensorId, TensorError> {
        let ls = &self.nodes[logits.0].value;
        if ls.shape.len() != 2 {
            return Err(TensorError::RankMismatch {
                expected: 2,
                got: ls.shape.len(),
            });
        }
        let (n, c) = (ls.shape[0], ls.shape[1]);
        if labels.len() != n {
            return Err(TensorError::DimMismatch {
                op: "cross_entropy",
                dim: "labels",
                expected: n,
                got: labels.len(),
            });
        }
        if ls.data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "cross_entropy" });
        }
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let label = labels[i];
            if label >= c {
                return Err(TensorError::LabelOutOfRange { label, classes: c });
            }
            let row = &ls.data[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &v in row {
                denom += (v - m).exp();
            }
            let lse = m + denom.ln();
            for (j, &v) in row.iter().enumerate() {
                probs[i * c + j] = (v - lse).exp();
            }
            loss += lse - row[label];
        }
        loss /= n as f64;
        let out = self.push_result(Tensor::scalar(loss), &[logits]);
        self.records.push(Record::CrossEntropy {
            logits,
            out,
            labels: labels.to_vec(),
            probs,
        });
        Ok(out)
    }

    /// Softmax over the alive entries of a rank-1 tensor; dead entries
    /// produce exactly zero and receive no gradient.
    pub fn masked_softmax(
        &mut self,
        x: TensorId,
        alive: &[bool],
    ) -> Result<TensorId, TensorError> {
        let xs = &self.nodes[x.0].value;
        if xs.shape.len() != 1 {
            return Err(TensorError::RankMismatch {
                expected: 1,
                got: xs.shape.len(),
            });
        }
        if alive.len() != xs.data.len() {
            return Err(TensorError::DimMismatch {
                op: "masked_softmax",
                dim: "mask",
                expected: xs.data.len(),
                got: alive.len(),
            });
        }
        if !alive.iter().any(|&a| a) {
            return Err(TensorError::AllMasked);
        }
        let data = masked_softmax_values(&xs.data, alive);
        let out = self.push_result(
            Tensor {
                shape: xs.shape.clone(),
                data,
            },
            &[x],
        );
        self.records.push(Record::MaskedSoftmax {
            x,
            out,
            alive: alive.to_vec(),
        });
        Ok(out)
    }

    /// Elementwise `-v * ln v`, with the continuous extension 0 at v = 0.
    /// Summing this over a weight vector gives its Shannon entropy in nats.
    pub fn neg_xlogx(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[x.0]
            .value
            .data
            .iter()
            .map(|&v| if v > 0.0 { -v * v.ln() } else { 0.0 })
            .collect();
        let out = self.push_result(
            Tensor {
                shape: self.nodes[x.0].value.shape.clone(),
                data,
            },
            &[x],
        );
        self.records.push(Record::NegXLogX { x, out });
        out
    }

    /// Scales a tensor by one element of a rank-1 weight vector. The
    /// gradient flows into both the tensor and the selected weight.
    pub fn scale_by_element(
        &mut self,
        x: TensorId,
        w: TensorId,
        idx: usize,
    ) -> Result<TensorId, TensorError> {
        let ws = &self.nodes[w.0].value;
        if idx >= ws.data.len() {
            return Err(TensorError::DimMismatch {
                op: "scale_by_element",
                dim: "index",
                expected: ws.data.len(),
                got: idx,
            });
        }
        let c = ws.data[idx];
        let data: Vec<f64> = self.nodes[x.0].value.data.iter().map(|v| v * c).collect();
        let out = self.push_result(
            Tensor {
                shape: self.nodes[x.0].value.shape.clone(),
                data,
            },
            &[x, w],
        );
        self.records.push(Record::ScaleByElement { x, w, idx, out });
        Ok(out)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Backpropagates from a scalar root, accumulating gradients into every
    /// node reachable from it. Gradients add up on reuse; they are never
    /// overwritten within one traversal.
    pub fn backward(&mut self, root: TensorId) -> Result<(), TensorError> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(TensorError::NonScalarRoot {
                shape: self.nodes[root.0].value.shape.clone(),
            });
        }
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[root.0].grad[0] = 1.0;

        for rec_idx in (0..self.records.len()).rev() {
            // Records are split out by value to satisfy the borrow checker:
            // gradients of inputs and outputs live in the same arena.
            match &self.records[rec_idx] {
                Record::Add { a, b, out } => {
                    let (a, b, out) = (*a, *b, *out);
                    let go = self.nodes[out.0].grad.clone();
                    for (i, g) in go.iter().enumerate() {
                        self.nodes[a.0].grad[i] += g;
                    }
                    for (i, g) in go.iter().enumerate() {
                        self.nodes[b.0].grad[i] += g;
                    }
                }
                Record::Mul { a, b, out } => {
                    let (a, b, out) = (*a, *b, *out);
                    let go = self.nodes[out.0].grad.clone();
                    let bv = self.nodes[b.0].value.data.clone();
                    let av = self.nodes[a.0].value.data.clone();
                    for i in 0..go.len() {
                        self.nodes[a.0].grad[i] += go[i] * bv[i];
                    }
                    for i in 0..go.len() {
                        self.nodes[b.0].grad[i] += go[i] * av[i];
                    }
                }
                Record::MulConst { x, c, out } => {
                    let (x, c, out) = (*x, *c, *out);
                    let go = self.nodes[out.0].grad.clone();
                    for (i, g) in go.iter().enumerate() {
                        self.nodes[x.0].grad[i] += g * c;
                    }
                }
                Record::Relu { x, out } => {
                    let (x, out) = (*x, *out);
                    let go = self.nodes[out.0].grad.clone();
                    for (i, g) in go.iter().enumerate() {
                        if self.nodes[x.0].value.data[i] > 0.0 {
                            self.nodes[x.0].grad[i] += g;
                        }
                    }
                }
                Record::Sum { x, out } => {
                    let (x, out) = (*x, *out);
                    let g = self.nodes[out.0].grad[0];
                    for gi in self.nodes[x.0].grad.iter_mut() {
                        *gi += g;
                    }
                }
                Record::Conv2d { x, w, out, spec } => {
                    let (x, w, out, spec) = (*x, *w, *out, *spec);
                    let go = self.nodes[out.0].grad.clone();
                    let xv = self.nodes[x.0].value.clone();
                    let wv = self.nodes[w.0].value.clone();
                    let out_shape = self.nodes[out.0].value.shape.clone();
                    let (gx, gw) = conv2d_backward(&xv, &wv, &out_shape, &go, &spec);
                    for (i, g) in gx.iter().enumerate() {
                        self.nodes[x.0].grad[i] += g;
                    }
                    for (i, g) in gw.iter().enumerate() {
                        self.nodes[w.0].grad[i] += g;
                    }
                }
                Record::Linear { x, w, b, out } => {
                    let (x, w, b, out) = (*x, *w, *b, *out);
                    let go = self.nodes[out.0].grad.clone();
                    let xv = self.nodes[x.0].value.data.clone();
                    let wv = self.nodes[w.0].value.data.clone();
                    let n = self.nodes[x.0].value.shape[0];
                    let f = self.nodes[x.0].value.shape[1];
                    let c = self.nodes[w.0].value.shape[0];
                    for i in 0..n {
                        for j in 0..c {
                            let g = go[i * c + j];
                            if g == 0.0 {
                                continue;
                            }
                            for k in 0..f {
                                self.nodes[x.0].grad[i * f + k] += g * wv[j * f + k];
                            }
                        }
                    }
                    for j in 0..c {
                        for k in 0..f {
                            let mut acc = 0.0;
                            for i in 0..n {
                                acc += go[i * c + j] * xv[i * f + k];
                            }
                            self.nodes[w.0].grad[j * f + k] += acc;
                        }
                        let mut acc = 0.0;
                        for i in 0..n {
                            acc += go[i * c + j];
                        }
                        self.nodes[b.0].grad[j] += acc;
                    }
                }
                Record::AffineChannelNorm { x, gain, bias, out } => {
                    let (x, gain, bias, out) = (*x, *gain, *bias, *out);
                    let go = self.nodes[out.0].grad.clone();
                    let xv = self.nodes[x.0].value.data.clone();
                    let gv = self.nodes[gain.0].value.data.clone();
                    let shape = self.nodes[x.0].value.shape.clone();
                    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                    let plane = h * w;
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            let mut gsum = 0.0;
                            let mut bsum = 0.0;
                            for p in 0..plane {
                                let g = go[base + p];
                                self.nodes[x.0].grad[base + p] += g * gv[ci];
                                gsum += g * xv[base + p];
                                bsum += g;
                            }
                            self.nodes[gain.0].grad[ci] += gsum;
                            self.nodes[bias.0].grad[ci] += bsum;
                        }
                    }
                }
                Record::Concat { xs, out } => {
                    let xs = xs.clone();
                    let out = *out;
                    let go = self.nodes[out.0].grad.clone();
                    let out_shape = self.nodes[out.0].value.shape.clone();
                    let (n, c_total, h, w) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
                    let plane = h * w;
                    for ni in 0..n {
                        let mut c_off = 0;
                        for &id in &xs {
                            let ci = self.nodes[id.0].value.shape[1];
                            let src = (ni * c_total + c_off) * plane;
                            let dst = ni * ci * plane;
                            for p in 0..ci * plane {
                                self.nodes[id.0].grad[dst + p] += go[src + p];
                            }
                            c_off += ci;
                        }
                    }
                }
                Record::GlobalAvgPool { x, out } => {
                    let (x, out) = (*x, *out);
                    let go = self.nodes[out.0].grad.clone();
                    let shape = self.nodes[x.0].value.shape.clone();
                    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                    let plane = h * w;
                    let inv = 1.0 / plane as f64;
                    for ni in 0..n {
                        for ci in 0..c {
                            let g = go[ni * c + ci] * inv;
                            let base = (ni * c + ci) * plane;
                            for p in 0..plane {
                                self.nodes[x.0].grad[base + p] += g;
                            }
                        }
                    }
                }
                Record::Softmax { x, out, axis } => {
                    let (x, out, axis) = (*x, *out, *axis);
                    let go = self.nodes[out.0].grad.clone();
                    let yv = self.nodes[out.0].value.data.clone();
                    let shape = self.nodes[out.0].value.shape.clone();
                    for_each_lane(&shape, axis, |lane| {
                        let dot: f64 = lane.iter().map(|&i| go[i] * yv[i]).sum();
                        for &i in lane {
                            self.nodes[x.0].grad[i] += yv[i] * (go[i] - dot);
                        }
                    });
                }
                Record::LogSoftmax { x, out, axis } => {
                    let (x, out, axis) = (*x, *out, *axis);
                    let go = self.nodes[out.0].grad.clone();
                    let yv = self.nodes[out.0].value.data.clone();
                    let shape = self.nodes[out.0].value.shape.clone();
                    for_each_lane(&shape, axis, |lane| {
                        let gsum: f64 = lane.iter().map(|&i| go[i]).sum();
                        for &i in lane {
                            self.nodes[x.0].grad[i] += go[i] - yv[i].exp() * gsum;
                        }
                    });
                }
                Record::CrossEntropy {
                    logits,
                    out,
                    labels,
                    probs,
                } => {
                    let logits = *logits;
                    let out = *out;
                    let labels = labels.clone();
                    let probs = probs.clone();
                    let g = self.nodes[out.0].grad[0];
                    let n = labels.len();
                    let c = probs.len() / n;
                    let scale = g / n as f64;
                    for i in 0..n {
                        for j in 0..c {
                            let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                            self.nodes[logits.0].grad[i * c + j] +=
                                scale * (probs[i * c + j] - onehot);
                        }
                    }
                }
                Record::MaskedSoftmax { x, out, alive } => {
                    let (x, out) = (*x, *out);
                    let alive = alive.clone();
                    let go = self.nodes[out.0].grad.clone();
                    let yv = self.nodes[out.0].value.data.clone();
                    let dot: f64 = (0..go.len())
                        .filter(|&i| alive[i])
                        .map(|i| go[i] * yv[i])
                        .sum();
                    for i in 0..go.len() {
                        if alive[i] {
                            self.nodes[x.0].grad[i] += yv[i] * (go[i] - dot);
                        }
                    }
                }
                Record::NegXLogX { x, out } => {
                    let (x, out) = (*x, *out);
                    let go = self.nodes[out.0].grad.clone();
                    for (i, g) in go.iter().enumerate() {
                        let v = self.nodes[x.0].value.data[i];
                        if v > 0.0 {
                            self.nodes[x.0].grad[i] += g * (-(v.ln() + 1.0));
                        }
                    }
                }
                Record::ScaleByElement { x, w, idx, out } => {
                    let (x, w, idx, out) = (*x, *w, *idx, *out);
                    let go = self.nodes[out.0].grad.clone();
                    let c = self.nodes[w.0].value.data[idx];
                    let xv = self.nodes[x.0].value.data.clone();
                    let mut wgrad = 0.0;
                    for (i, g) in go.iter().enumerate() {
                        self.nodes[x.0].grad[i] += g * c;
                        wgrad += g * xv[i];
                    }
                    self.nodes[w.0].grad[idx] += wgrad;
                }
            }
        }
        Ok(())
    }
}

/// Masked softmax values with max-subtraction over the alive set.
pub fn masked_softmax_values(logits: &[f64], alive: &[bool]) -> Vec<f64> {
    let m = logits
        .iter()
        .zip(alive)
        .filter(|(_, &a)| a)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![0.0; logits.len()];
    let mut denom = 0.0;
    for i in 0..logits.len() {
        if alive[i] {
            let e = (logits[i] - m).exp();
            out[i] = e;
            denom += e;
        }
    }
    for v in out.iter_mut() {
        *v /= denom;
    }
    out
}

fn softmax_lanes(x: &Tensor, axis: usize, log: bool) -> Result<Tensor, TensorError> {
    if axis >= x.shape.len().max(1) {
        return Err(TensorError::BadAxis {
            axis,
            rank: x.shape.len(),
        });
    }
    if x.data.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { op: "softmax" });
    }
    let mut data = vec![0.0; x.numel()];
    let shape = if x.shape.is_empty() { vec![1] } else { x.shape.clone() };
    for_each_lane(&shape, axis, |lane| {
        let m = lane
            .iter()
            .map(|&i| x.data[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &i in lane {
            denom += (x.data[i] - m).exp();
        }
        if log {
            let lse = m + denom.ln();
            for &i in lane {
                data[i] = x.data[i] - lse;
            }
        } else {
            for &i in lane {
                data[i] = (x.data[i] - m).exp() / denom;
            }
        }
    });
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
    })
}

/// Calls `f` with the flat indices of every lane along `axis`.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let d = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut lane = vec![0usize; d];
    for o in 0..outer {
        for i in 0..inner {
            for (k, slot) in lane.iter_mut().enumerate() {
                *slot = (o * d + k) * inner + i;
            }
            f(&lane);
        }
    }
}
