//! Dense f64 tensors on a reverse-mode autodiff tape.
//!
//! All network math runs through [`Tape`]: forward methods record nodes
//! eagerly, `backward` walks the tape in reverse and accumulates gradients
//! into every `requires_grad` leaf. Convolution goes through im2col so the
//! hot loop is a plain matrix multiply.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid input shape {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: non-finite value in input")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: target value {value} outside {{0,1}}")]
    BadBinaryTarget { op: &'static str, value: f64 },
    #[error("{op}: class index {index} out of range for {classes} classes")]
    BadClassIndex {
        op: &'static str,
        index: usize,
        classes: usize,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

enum Op {
    Leaf,
    Add(TensorId, TensorId),
    /// `[N, U]` plus a `[U]` bias row-broadcast over the batch.
    AddBias(TensorId, TensorId),
    Mul(TensorId, TensorId),
    MatMul(TensorId, TensorId),
    Conv2d {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
        /// Cached im2col buffer, `[ckk, oh*ow]` per batch item.
        cols: Vec<f64>,
    },
    MaxPool2d {
        input: TensorId,
        /// Flat input index of each window maximum.
        argmax: Vec<usize>,
    },
    GlobalAvgPool(TensorId),
    Relu(TensorId),
    Sigmoid(TensorId),
    Softmax(TensorId),
    /// Concatenate along axis 1 (channels / features).
    Concat(TensorId, TensorId),
    Dropout {
        input: TensorId,
        /// Pre-scaled mask: 0 or 1/keep per element.
        mask: Vec<f64>,
    },
    Flatten(TensorId),
    Sum(TensorId),
    Mean(TensorId),
    BceLoss {
        prob: TensorId,
        targets: Vec<f64>,
    },
    CceLoss {
        probs: TensorId,
        targets: Vec<usize>,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

const CLAMP: f64 = 1e-7;

pub struct Tape {
    nodes: Vec<Node>,
    /// Persistent leaf gradients; accumulate across repeated `backward` calls.
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        self.leaf_grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<TensorId> {
        if numel(shape) != data.len() {
            return Err(TensorError::InvalidShape {
                op: "leaf",
                shape: shape.to_vec(),
                reason: format!("data length {} != product of extents", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, Op::Leaf))
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    /// Accumulated gradient of a `requires_grad` leaf, if backward has run.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.leaf_grads[id.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    fn rg(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    // ---- elementwise / linear algebra -------------------------------------

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, self.rg(&[a, b]), Op::Add(a, b)))
    }

    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 2 || bs.len() != 1 || bs[0] != xs[1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: xs,
                rhs: bs,
            });
        }
        let (n, u) = (xs[0], xs[1]);
        let mut data = self.nodes[x.0].data.clone();
        for i in 0..n {
            for j in 0..u {
                data[i * u + j] += self.nodes[bias.0].data[j];
            }
        }
        Ok(self.push(xs, data, self.rg(&[x, bias]), Op::AddBias(x, bias)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, self.rg(&[a, b]), Op::Mul(a, b)))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_nn(&self.nodes[a.0].data, &self.nodes[b.0].data, &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, self.rg(&[a, b]), Op::MatMul(a, b)))
    }

    // ---- convolution and pooling ------------------------------------------

    /// 2-D convolution, NCHW input `[n,c,h,w]`, weight `[f,c,kh,kw]`, bias `[f]`.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kh, kw) = (ws[0], ws[2], ws[3]);
        if self.shape(bias) != [f] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: self.shape(bias).to_vec(),
                rhs: vec![f],
            });
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                shape: xs,
                reason: format!("kernel {kh}x{kw} exceeds padded input"),
            });
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let ckk = c * kh * kw;
        let ohw = oh * ow;
        let mut cols = vec![0.0; n * ckk * ohw];
        for b in 0..n {
            im2col(
                &self.nodes[input.0].data[b * c * h * w..(b + 1) * c * h * w],
                &mut cols[b * ckk * ohw..(b + 1) * ckk * ohw],
                c,
                h,
                w,
                kh,
                kw,
                stride,
                pad,
                oh,
                ow,
            );
        }
        let mut out = vec![0.0; n * f * ohw];
        for b in 0..n {
            let o = &mut out[b * f * ohw..(b + 1) * f * ohw];
            for fi in 0..f {
                let bv = self.nodes[bias.0].data[fi];
                o[fi * ohw..(fi + 1) * ohw].fill(bv);
            }
            matmul_nn(
                &self.nodes[weight.0].data,
                &cols[b * ckk * ohw..(b + 1) * ckk * ohw],
                o,
                f,
                ckk,
                ohw,
            );
        }
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(
            vec![n, f, oh, ow],
            out,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                cols,
            },
        ))
    }

    /// Non-overlapping max pooling with window `size` (stride == size).
    pub fn max_pool2d(&mut self, input: TensorId, size: usize) -> Result<TensorId> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(TensorError::InvalidShape {
                op: "max_pool2d",
                shape: xs,
                reason: "expected NCHW".into(),
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h < size || w < size {
            return Err(TensorError::InvalidShape {
                op: "max_pool2d",
                shape: xs,
                reason: format!("window {size} exceeds spatial extent"),
            });
        }
        let (oh, ow) = (h / size, w / size);
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; n * c * oh * ow];
        let x = &self.nodes[input.0].data;
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut bidx = 0;
                        for di in 0..size {
                            for dj in 0..size {
                                let idx = base + (i * size + di) * w + (j * size + dj);
                                if x[idx] > best {
                                    best = x[idx];
                                    bidx = idx;
                                }
                            }
                        }
                        let o = (b * c + ch) * oh * ow + i * ow + j;
                        out[o] = best;
                        argmax[o] = bidx;
                    }
                }
            }
        }
        let rg = self.rg(&[input]);
        Ok(self.push(vec![n, c, oh, ow], out, rg, Op::MaxPool2d { input, argmax }))
    }

    pub fn global_avg_pool(&mut self, input: TensorId) -> Result<TensorId> {
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(TensorError::InvalidShape {
                op: "global_avg_pool",
                shape: xs,
                reason: "expected NCHW".into(),
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = (h * w) as f64;
        let x = &self.nodes[input.0].data;
        let mut out = vec![0.0; n * c];
        for i in 0..n * c {
            out[i] = x[i * h * w..(i + 1) * h * w].iter().sum::<f64>() / hw;
        }
        let rg = self.rg(&[input]);
        Ok(self.push(vec![n, c], out, rg, Op::GlobalAvgPool(input)))
    }

    // ---- activations ------------------------------------------------------

    pub fn relu(&mut self, input: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.nodes[input.0].data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.rg(&[input]);
        Ok(self.push(shape, data, rg, Op::Relu(input)))
    }

    pub fn sigmoid(&mut self, input: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.nodes[input.0]
            .data
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let shape = self.shape(input).to_vec();
        let rg = self.rg(&[input]);
        Ok(self.push(shape, data, rg, Op::Sigmoid(input)))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, input: TensorId) -> Result<TensorId> {
        let shape = self.shape(input).to_vec();
        let k = *shape.last().ok_or_else(|| TensorError::InvalidShape {
            op: "softmax",
            shape: shape.clone(),
            reason: "rank 0".into(),
        })?;
        let mut data = self.nodes[input.0].data.clone();
        for row in data.chunks_mut(k) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let rg = self.rg(&[input]);
        Ok(self.push(shape, data, rg, Op::Softmax(input)))
    }

    // ---- structure --------------------------------------------------------

    /// Concatenate along axis 1; shapes must agree elsewhere.
    pub fn concat(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == sb.len()
            && sa.len() >= 2
            && sa[0] == sb[0]
            && sa[2..] == sb[2..];
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: sa,
                rhs: sb,
            });
        }
        let n = sa[0];
        let inner: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1], sb[1]);
        let mut shape = sa.clone();
        shape[1] = ca + cb;
        let mut data = vec![0.0; n * (ca + cb) * inner];
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        for i in 0..n {
            data[i * (ca + cb) * inner..i * (ca + cb) * inner + ca * inner]
                .copy_from_slice(&da[i * ca * inner..(i + 1) * ca * inner]);
            data[i * (ca + cb) * inner + ca * inner..(i + 1) * (ca + cb) * inner]
                .copy_from_slice(&db[i * cb * inner..(i + 1) * cb * inner]);
        }
        Ok(self.push(shape, data, self.rg(&[a, b]), Op::Concat(a, b)))
    }

    /// Inverted dropout: train-time masking with 1/keep scaling, so eval is
    /// the identity (simply do not insert the op).
    pub fn dropout(&mut self, input: TensorId, rate: f64, rng: &mut impl Rng) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidShape {
                op: "dropout",
                shape: self.shape(input).to_vec(),
                reason: format!("rate {rate} outside [0,1)"),
            });
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.nodes[input.0].data.len())
            .map(|_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data: Vec<f64> = self.nodes[input.0]
            .data
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let shape = self.shape(input).to_vec();
        let rg = self.rg(&[input]);
        Ok(self.push(shape, data, rg, Op::Dropout { input, mask }))
    }

    /// Collapse all axes after the first: `[n, ...] -> [n, rest]`.
    pub fn flatten(&mut self, input: TensorId) -> Result<TensorId> {
        let xs = self.shape(input).to_vec();
        if xs.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "flatten",
                shape: xs,
                reason: "rank 0".into(),
            });
        }
        let rest: usize = xs[1..].iter().product();
        let data = self.nodes[input.0].data.clone();
        let rg = self.rg(&[input]);
        Ok(self.push(vec![xs[0], rest], data, rg, Op::Flatten(input)))
    }

    // ---- reductions and losses --------------------------------------------

    pub fn sum(&mut self, input: TensorId) -> Result<TensorId> {
        let s: f64 = self.nodes[input.0].data.iter().sum();
        let rg = self.rg(&[input]);
        Ok(self.push(vec![], vec![s], rg, Op::Sum(input)))
    }

    pub fn mean(&mut self, input: TensorId) -> Result<TensorId> {
        let n = self.nodes[input.0].data.len() as f64;
        let s: f64 = self.nodes[input.0].data.iter().sum::<f64>() / n;
        let rg = self.rg(&[input]);
        Ok(self.push(vec![], vec![s], rg, Op::Mean(input)))
    }

    /// Mean binary cross-entropy over a batch of probabilities.
    /// Probabilities are clamped to `[1e-7, 1-1e-7]` before the log.
    pub fn bce_loss(&mut self, prob: TensorId, targets: &[f64]) -> Result<TensorId> {
        let p = &self.nodes[prob.0].data;
        if p.len() != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_loss",
                lhs: self.shape(prob).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        for &y in targets {
            if y != 0.0 && y != 1.0 {
                return Err(TensorError::BadBinaryTarget {
                    op: "bce_loss",
                    value: y,
                });
            }
        }
        let n = p.len() as f64;
        let loss = p
            .iter()
            .zip(targets)
            .map(|(&pi, &y)| {
                let pc = pi.clamp(CLAMP, 1.0 - CLAMP);
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum::<f64>()
            / n;
        let rg = self.rg(&[prob]);
        Ok(self.push(
            vec![],
            vec![loss],
            rg,
            Op::BceLoss {
                prob,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean categorical cross-entropy: `-ln p[y]` averaged over the batch.
    pub fn cce_loss(&mut self, probs: TensorId, targets: &[usize]) -> Result<TensorId> {
        let shape = self.shape(probs).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cce_loss",
                lhs: shape,
                rhs: vec![targets.len()],
            });
        }
        let k = shape[1];
        for &y in targets {
            if y >= k {
                return Err(TensorError::BadClassIndex {
                    op: "cce_loss",
                    index: y,
                    classes: k,
                });
            }
        }
        let p = &self.nodes[probs.0].data;
        let n = targets.len() as f64;
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &y)| -p[i * k + y].clamp(CLAMP, 1.0 - CLAMP).ln())
            .sum::<f64>()
            / n;
        let rg = self.rg(&[probs]);
        Ok(self.push(
            vec![],
            vec![loss],
            rg,
            Op::CceLoss {
                probs,
                targets: targets.to_vec(),
            },
        ))
    }

    // ---- backward ---------------------------------------------------------

    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.shape(loss).is_empty() {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut g: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        g[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(go) = g[idx].take() else { continue };
            self.backprop_node(idx, &go, &mut g);
            if matches!(self.nodes[idx].op, Op::Leaf) {
                let acc = self.leaf_grads[idx]
                    .get_or_insert_with(|| vec![0.0; self.nodes[idx].data.len()]);
                for (a, v) in acc.iter_mut().zip(&go) {
                    *a += v;
                }
            }
        }
        Ok(())
    }

    fn accum(g: &mut [Option<Vec<f64>>], id: TensorId, len: usize) -> &mut Vec<f64> {
        g[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn backprop_node(&self, idx: usize, go: &[f64], g: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for src in [*a, *b] {
                    if self.nodes[src.0].requires_grad {
                        let acc = Self::accum(g, src, go.len());
                        for (x, v) in acc.iter_mut().zip(go) {
                            *x += v;
                        }
                    }
                }
            }
            Op::AddBias(x, bias) => {
                let u = node.shape[1];
                if self.nodes[x.0].requires_grad {
                    let acc = Self::accum(g, *x, go.len());
                    for (a, v) in acc.iter_mut().zip(go) {
                        *a += v;
                    }
                }
                if self.nodes[bias.0].requires_grad {
                    let acc = Self::accum(g, *bias, u);
                    for (i, v) in go.iter().enumerate() {
                        acc[i % u] += v;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let vals: Vec<f64> = go
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(v, y)| v * y)
                        .collect();
                    let acc = Self::accum(g, *a, go.len());
                    for (x, v) in acc.iter_mut().zip(vals) {
                        *x += v;
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let vals: Vec<f64> = go
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(v, x)| v * x)
                        .collect();
                    let acc = Self::accum(g, *b, go.len());
                    for (x, v) in acc.iter_mut().zip(vals) {
                        *x += v;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    matmul_nt(go, &self.nodes[b.0].data, &mut da, m, n, k);
                    let acc = Self::accum(g, *a, m * k);
                    for (x, v) in acc.iter_mut().zip(da) {
                        *x += v;
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    matmul_tn(&self.nodes[a.0].data, go, &mut db, m, k, n);
                    let acc = Self::accum(g, *b, k * n);
                    for (x, v) in acc.iter_mut().zip(db) {
                        *x += v;
                    }
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                cols,
            } => {
                let xs = &self.nodes[input.0].shape;
                let ws = &self.nodes[weight.0].shape;
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (f, kh, kw) = (ws[0], ws[2], ws[3]);
                let (oh, ow) = (node.shape[2], node.shape[3]);
                let (ckk, ohw) = (c * kh * kw, oh * ow);
                if self.nodes[weight.0].requires_grad {
                    let mut dw = vec![0.0; f * ckk];
                    for b in 0..n {
                        matmul_nt(
                            &go[b * f * ohw..(b + 1) * f * ohw],
                            &cols[b * ckk * ohw..(b + 1) * ckk * ohw],
                            &mut dw,
                            f,
                            ohw,
                            ckk,
                        );
                    }
                    let acc = Self::accum(g, *weight, f * ckk);
                    for (x, v) in acc.iter_mut().zip(dw) {
                        *x += v;
                    }
                }
                if self.nodes[bias.0].requires_grad {
                    let acc = Self::accum(g, *bias, f);
                    for b in 0..n {
                        for fi in 0..f {
                            acc[fi] += go[(b * f + fi) * ohw..(b * f + fi + 1) * ohw]
                                .iter()
                                .sum::<f64>();
                        }
                    }
                }
                if self.nodes[input.0].requires_grad {
                    let mut dx = vec![0.0; n * c * h * w];
                    let mut dcol = vec![0.0; ckk * ohw];
                    for b in 0..n {
                        dcol.fill(0.0);
                        matmul_tn(
                            &self.nodes[weight.0].data,
                            &go[b * f * ohw..(b + 1) * f * ohw],
                            &mut dcol,
                            f,
                            ckk,
                            ohw,
                        );
                        col2im(
                            &dcol,
                            &mut dx[b * c * h * w..(b + 1) * c * h * w],
                            c,
                            h,
                            w,
                            kh,
                            kw,
                            *stride,
                            *pad,
                            oh,
                            ow,
                        );
                    }
                    let acc = Self::accum(g, *input, n * c * h * w);
                    for (x, v) in acc.iter_mut().zip(dx) {
                        *x += v;
                    }
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if self.nodes[input.0].requires_grad {
                    let len = self.nodes[input.0].data.len();
                    let acc = Self::accum(g, *input, len);
                    for (o, &src) in argmax.iter().enumerate() {
                        acc[src] += go[o];
                    }
                }
            }
            Op::GlobalAvgPool(input) => {
                if self.nodes[input.0].requires_grad {
                    let xs = &self.nodes[input.0].shape;
                    let hw = xs[2] * xs[3];
                    let scale = 1.0 / hw as f64;
                    let acc = Self::accum(g, *input, self.nodes[input.0].data.len());
                    for (i, gv) in go.iter().enumerate() {
                        for a in &mut acc[i * hw..(i + 1) * hw] {
                            *a += gv * scale;
                        }
                    }
                }
            }
            Op::Relu(input) => {
                if self.nodes[input.0].requires_grad {
                    let x = &self.nodes[input.0].data;
                    let acc = Self::accum(g, *input, x.len());
                    for i in 0..x.len() {
                        // subgradient at 0 defined as 0
                        if x[i] > 0.0 {
                            acc[i] += go[i];
                        }
                    }
                }
            }
            Op::Sigmoid(input) => {
                if self.nodes[input.0].requires_grad {
                    let y = &node.data;
                    let acc = Self::accum(g, *input, y.len());
                    for i in 0..y.len() {
                        acc[i] += go[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Softmax(input) => {
                if self.nodes[input.0].requires_grad {
                    let k = *node.shape.last().unwrap();
                    let y = &node.data;
                    let acc = Self::accum(g, *input, y.len());
                    for r in 0..y.len() / k {
                        let yr = &y[r * k..(r + 1) * k];
                        let gr = &go[r * k..(r + 1) * k];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            acc[r * k + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Concat(a, b) => {
                let n = node.shape[0];
                let inner: usize = node.shape[2..].iter().product();
                let ca = self.nodes[a.0].shape[1];
                let cb = self.nodes[b.0].shape[1];
                if self.nodes[a.0].requires_grad {
                    let acc = Self::accum(g, *a, n * ca * inner);
                    for i in 0..n {
                        for j in 0..ca * inner {
                            acc[i * ca * inner + j] += go[i * (ca + cb) * inner + j];
                        }
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let acc = Self::accum(g, *b, n * cb * inner);
                    for i in 0..n {
                        for j in 0..cb * inner {
                            acc[i * cb * inner + j] += go[i * (ca + cb) * inner + ca * inner + j];
                        }
                    }
                }
            }
            Op::Dropout { input, mask } => {
                if self.nodes[input.0].requires_grad {
                    let acc = Self::accum(g, *input, mask.len());
                    for i in 0..mask.len() {
                        acc[i] += go[i] * mask[i];
                    }
                }
            }
            Op::Flatten(input) => {
                if self.nodes[input.0].requires_grad {
                    let acc = Self::accum(g, *input, go.len());
                    for (x, v) in acc.iter_mut().zip(go) {
                        *x += v;
                    }
                }
            }
            Op::Sum(input) => {
                if self.nodes[input.0].requires_grad {
                    let len = self.nodes[input.0].data.len();
                    let acc = Self::accum(g, *input, len);
                    for a in acc.iter_mut() {
                        *a += go[0];
                    }
                }
            }
            Op::Mean(input) => {
                if self.nodes[input.0].requires_grad {
                    let len = self.nodes[input.0].data.len();
                    let scale = go[0] / len as f64;
                    let acc = Self::accum(g, *input, len);
                    for a in acc.iter_mut() {
                        *a += scale;
                    }
                }
            }
            Op::BceLoss { prob, targets } => {
                if self.nodes[prob.0].requires_grad {
                    let p = &self.nodes[prob.0].data;
                    let n = p.len() as f64;
                    let acc = Self::accum(g, *prob, p.len());
                    for i in 0..p.len() {
                        // zero gradient where the clamp is active
                        if p[i] > CLAMP && p[i] < 1.0 - CLAMP {
                            let y = targets[i];
                            acc[i] += go[0] * (-(y / p[i]) + (1.0 - y) / (1.0 - p[i])) / n;
                        }
                    }
                }
            }
            Op::CceLoss { probs, targets } => {
                if self.nodes[probs.0].requires_grad {
                    let k = self.nodes[probs.0].shape[1];
                    let p = &self.nodes[probs.0].data;
                    let n = targets.len() as f64;
                    let acc = Self::accum(g, *probs, p.len());
                    for (i, &y) in targets.iter().enumerate() {
                        let v = p[i * k + y];
                        if v > CLAMP && v < 1.0 - CLAMP {
                            acc[i * k + y] += go[0] * (-1.0 / v) / n;
                        }
                    }
                }
            }
        }
    }
}

// ---- raw matmul kernels ---------------------------------------------------

/// C[m,n] += A[m,k] * B[k,n]
pub fn matmul_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// C[m,n] += A[m,k] * B[n,k]^T
fn matmul_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            c[i * n + j] += s;
        }
    }
}

/// C[m,n] += A[k,m]^T * B[k,n]
fn matmul_tn(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    cols: &mut [f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let ohw = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let out = &mut cols[row * ohw..(row + 1) * ohw];
                for i in 0..oh {
                    let ih = (i * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        out[i * ow..(i + 1) * ow].fill(0.0);
                        continue;
                    }
                    let xrow = &x[(ci * h + ih as usize) * w..(ci * h + ih as usize + 1) * w];
                    for j in 0..ow {
                        let iw = (j * stride + kj) as isize - pad as isize;
                        out[i * ow + j] = if iw < 0 || iw >= w as isize {
                            0.0
                        } else {
                            xrow[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    dx: &mut [f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let ohw = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for i in 0..oh {
                    let ih = (i * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for j in 0..ow {
                        let iw = (j * stride + kj) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        dx[(ci * h + ih as usize) * w + iw as usize] += src[i * ow + j];
                    }
                }
            }
        }
    }
}

// ---- gradient checking ----------------------------------------------------

/// Autodiff op kinds covered by [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Mul,
    MatMul,
    Conv2d,
    MaxPool2d,
    GlobalAvgPool,
    Relu,
    Sigmoid,
    Softmax,
    Concat,
    Dropout,
    Flatten,
    Sum,
    Mean,
    BceLoss,
    CceLoss,
}

/// Compare analytic gradients of `f` against central finite differences
/// (step 1e-5) and return the max relative error over all input elements,
/// with a 1e-8 floor in the denominator.
///
/// Non-scalar outputs are reduced to a scalar by a fixed random weighting so
/// the whole Jacobian is probed. `f` must be deterministic for a fixed tape
/// (stochastic ops must derive their randomness from a fixed seed).
pub fn grad_check<F>(f: &F, shapes: &[Vec<usize>], seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| (0..numel(s)).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    grad_check_at(f, shapes, &inputs, seed)
}

/// [`grad_check`] at caller-provided input values.
pub fn grad_check_at<F>(f: &F, shapes: &[Vec<usize>], inputs: &[Vec<f64>], seed: u64) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let eval = |inputs: &[Vec<f64>], want_grads: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = shapes
            .iter()
            .zip(inputs)
            .map(|(s, d)| tape.leaf(s, d.clone(), true))
            .collect::<Result<_>>()?;
        let out = f(&mut tape, &ids)?;
        let scalar = if tape.shape(out).is_empty() {
            out
        } else {
            // fixed random weighting derived from the seed
            let mut wrng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
            let w: Vec<f64> = (0..tape.value(out).len())
                .map(|_| wrng.random_range(-1.0..1.0))
                .collect();
            let wid = tape.leaf(&tape.shape(out).to_vec(), w, false)?;
            let prod = tape.mul(out, wid)?;
            tape.sum(prod)?
        };
        let value = tape.value(scalar)[0];
        let mut grads = Vec::new();
        if want_grads {
            tape.backward(scalar)?;
            for &id in &ids {
                grads.push(tape.grad(id).unwrap_or(&[]).to_vec());
            }
        }
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let step = 1e-5;
    let mut max_err: f64 = 0.0;
    let mut work: Vec<Vec<f64>> = inputs.to_vec();
    for (ti, data) in inputs.iter().enumerate() {
        for ei in 0..data.len() {
            let orig = data[ei];
            work[ti][ei] = orig + step;
            let (fp, _) = eval(&work, false)?;
            work[ti][ei] = orig - step;
            let (fm, _) = eval(&work, false)?;
            work[ti][ei] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[ti][ei];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            max_err = max_err.max((a - numeric).abs() / denom);
        }
    }
    Ok(max_err)
}

/// [`grad_check`] specialized to a named op kind with standard test shapes.
pub fn grad_check_op(kind: OpKind, shapes: &[Vec<usize>], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| (0..numel(s)).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    if kind == OpKind::Relu {
        // keep probes away from the kink at 0
        for data in &mut inputs {
            for v in data.iter_mut() {
                while v.abs() < 1e-3 {
                    *v = rng.random_range(-1.0..1.0);
                }
            }
        }
    }
    let n0 = shapes[0][0];
    let f: Box<dyn Fn(&mut Tape, &[TensorId]) -> Result<TensorId>> = match kind {
        OpKind::Add => Box::new(|t, ids| t.add(ids[0], ids[1])),
        OpKind::Mul => Box::new(|t, ids| t.mul(ids[0], ids[1])),
        OpKind::MatMul => Box::new(|t, ids| t.matmul(ids[0], ids[1])),
        OpKind::Conv2d => Box::new(|t, ids| t.conv2d(ids[0], ids[1], ids[2], 1, 1)),
        OpKind::MaxPool2d => Box::new(|t, ids| t.max_pool2d(ids[0], 2)),
        OpKind::GlobalAvgPool => Box::new(|t, ids| t.global_avg_pool(ids[0])),
        OpKind::Relu => Box::new(|t, ids| t.relu(ids[0])),
        OpKind::Sigmoid => Box::new(|t, ids| t.sigmoid(ids[0])),
        OpKind::Softmax => Box::new(|t, ids| t.softmax(ids[0])),
        OpKind::Concat => Box::new(|t, ids| t.concat(ids[0], ids[1])),
        OpKind::Dropout => Box::new(move |t, ids| {
            let mut mrng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1e995);
            t.dropout(ids[0], 0.3, &mut mrng)
        }),
        OpKind::Flatten => Box::new(|t, ids| t.flatten(ids[0])),
        OpKind::Sum => Box::new(|t, ids| t.sum(ids[0])),
        OpKind::Mean => Box::new(|t, ids| t.mean(ids[0])),
        OpKind::BceLoss => Box::new(move |t, ids| {
            let sig = t.sigmoid(ids[0])?;
            let flat = t.flatten(sig)?;
            let targets: Vec<f64> = (0..n0).map(|i| (i % 2) as f64).collect();
            t.bce_loss(flat, &targets)
        }),
        OpKind::CceLoss => Box::new(move |t, ids| {
            let sm = t.softmax(ids[0])?;
            let k = t.shape(ids[0])[1];
            let targets: Vec<usize> = (0..n0).map(|i| i % k).collect();
            t.cce_loss(sm, &targets)
        }),
    };
    grad_check_at(&f, shapes, &inputs, seed)
}
