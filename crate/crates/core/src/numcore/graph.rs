//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every builder method evaluates its node eagerly and appends it to the
//! tape. Nodes only reference earlier nodes, so walking the tape backwards
//! visits them in reverse topological order.

use serde::{Deserialize, Serialize};

use super::param::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Lower clamp applied inside every logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, pad: usize },
    Conv1d { x: NodeId, w: NodeId, b: NodeId, stride: usize },
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    MaxPool2 { x: NodeId, argmax: Vec<usize> },
    Reshape(NodeId),
    Concat(Vec<NodeId>),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    GradScale(NodeId, f64),
    CrossEntropy { p: NodeId, labels: Vec<usize> },
    MeanEntropy { p: NodeId, rows: Vec<usize> },
    BinaryCrossEntropy { p: NodeId, targets: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "parameter",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv1d { .. } => "conv1d",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::Reshape(_) => "reshape",
            Op::Concat(_) => "concat",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::GradScale(..) => "grad_scale",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::MeanEntropy { .. } => "entropy",
            Op::BinaryCrossEntropy { .. } => "binary_cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

/// Entropy of one probability row with the log clamp applied.
pub fn row_entropy(row: &[f64]) -> f64 {
    -row.iter().map(|&p| p * p.max(LOG_CLAMP).ln()).sum::<f64>()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId> {
        value.ensure_finite(op.name())?;
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Input)
    }

    /// Leaf for a stored parameter; masked weights enter with inactive
    /// positions forced to zero.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        let p = store.get(id);
        let mut value = p.value.clone();
        if let Some(mask) = &p.mask {
            for (v, &a) in value.data_mut().iter_mut().zip(mask.bits()) {
                if !a {
                    *v = 0.0;
                }
            }
        }
        self.push(value, Op::Param(id))
    }

    /// `x·Wᵀ + b` for `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.shape().len() != 2 || wv.shape().len() != 2 {
            return Err(shape_err(format!(
                "linear expects 2-D input and weight, got {:?} and {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (n, fan_in) = (xv.shape()[0], xv.shape()[1]);
        let out = wv.shape()[0];
        if wv.shape()[1] != fan_in || bv.len() != out {
            return Err(shape_err(format!(
                "linear input width {fan_in} does not fit weight {:?} / bias {:?}",
                wv.shape(),
                bv.shape()
            )));
        }
        let mut y = vec![0.0; n * out];
        gemm(n, fan_in, out, xv.data(), (fan_in as isize, 1), wv.data(), (1, fan_in as isize), &mut y, 0.0);
        for row in y.chunks_mut(out) {
            for (v, &bj) in row.iter_mut().zip(bv.data()) {
                *v += bj;
            }
        }
        self.push(Tensor::from_parts(vec![n, out], y), Op::Linear { x, w, b })
    }

    /// Stride-1 2-D convolution over `[N, C, H, W]` with `[O, C, kh, kw]` filters.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, padding: Padding) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.shape().len() != 4 || wv.shape().len() != 4 {
            return Err(shape_err("conv2d expects 4-D input and filters"));
        }
        let [n, c, h, wd] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let [o, wc, kh, kw] = [wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]];
        if wc != c || bv.len() != o {
            return Err(shape_err(format!(
                "conv2d input channels {c} do not fit filters {:?}",
                wv.shape()
            )));
        }
        let pad = match padding {
            Padding::Valid => 0,
            Padding::Same => {
                if kh != kw || kh % 2 == 0 {
                    return Err(shape_err("same padding needs square odd kernels"));
                }
                (kh - 1) / 2
            }
        };
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err("conv2d kernel larger than input"));
        }
        let geom = Conv2dGeom { c, h, w: wd, kh, kw, pad };
        let (ho, wo) = geom.out_hw();
        let spatial = ho * wo;
        let ckk = c * kh * kw;
        let mut y = vec![0.0; n * o * spatial];
        let mut cols = vec![0.0; ckk * spatial];
        let sample = c * h * wd;
        for s in 0..n {
            geom.im2col(&xv.data()[s * sample..(s + 1) * sample], &mut cols);
            let ys = &mut y[s * o * spatial..(s + 1) * o * spatial];
            gemm(o, ckk, spatial, wv.data(), (ckk as isize, 1), &cols, (spatial as isize, 1), ys, 0.0);
            for (oc, chunk) in ys.chunks_mut(spatial).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bv.data()[oc]);
            }
        }
        self.push(Tensor::from_parts(vec![n, o, ho, wo], y), Op::Conv2d { x, w, b, pad })
    }

    /// Valid 1-D convolution over `[N, C, L]` with `[O, C, k]` filters.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.shape().len() != 3 || wv.shape().len() != 3 || stride == 0 {
            return Err(shape_err("conv1d expects 3-D input/filters and stride >= 1"));
        }
        let [n, c, l] = [xv.shape()[0], xv.shape()[1], xv.shape()[2]];
        let [o, wc, k] = [wv.shape()[0], wv.shape()[1], wv.shape()[2]];
        if wc != c || bv.len() != o {
            return Err(shape_err("conv1d channels do not fit filters"));
        }
        if l < k {
            return Err(shape_err(format!("conv1d kernel {k} longer than input {l}")));
        }
        let lo = (l - k) / stride + 1;
        let mut y = vec![0.0; n * o * lo];
        let (xd, wdat) = (xv.data(), wv.data());
        for s in 0..n {
            for oc in 0..o {
                for t in 0..lo {
                    let mut acc = bv.data()[oc];
                    for ic in 0..c {
                        let xrow = &xd[(s * c + ic) * l + t * stride..];
                        let wrow = &wdat[(oc * c + ic) * k..(oc * c + ic + 1) * k];
                        acc += wrow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    y[(s * o + oc) * lo + t] = acc;
                }
            }
        }
        self.push(Tensor::from_parts(vec![n, o, lo], y), Op::Conv1d { x, w, b, stride })
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|a| 1.0 / (1.0 + (-a).exp()));
        self.push(v, Op::Sigmoid(x))
    }

    /// Row-wise softmax over a 2-D tensor.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(shape_err("softmax expects a 2-D tensor"));
        }
        let width = xv.shape()[1];
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(width) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        self.push(Tensor::from_parts(xv.shape().to_vec(), out), Op::Softmax(x))
    }

    /// 2×2 max pooling with stride 2 over `[N, C, H, W]`; odd edges are dropped.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape().len() != 4 || xv.shape()[2] < 2 || xv.shape()[3] < 2 {
            return Err(shape_err("max_pool2 expects [N, C, H>=2, W>=2]"));
        }
        let [n, c, h, w] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        let d = xv.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        self.push(Tensor::from_parts(vec![n, c, ho, wo], out), Op::MaxPool2 { x, argmax })
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push(v, Op::Reshape(x))
    }

    /// Collapses every non-batch dimension.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let shape = vec![v.rows(), v.row_len()];
        self.reshape(x, shape)
    }

    /// Column-wise concatenation of 2-D tensors sharing a row count.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(shape_err("concat of nothing"));
        }
        let rows = self.value(parts[0]).rows();
        let mut width = 0;
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 2 || v.rows() != rows {
                return Err(shape_err("concat expects 2-D parts with equal rows"));
            }
            width += v.shape()[1];
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        self.push(Tensor::from_parts(vec![rows, width], data), Op::Concat(parts.to_vec()))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(format!("add {:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        self.push(Tensor::from_parts(av.shape().to_vec(), data), Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(format!("mul {:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        self.push(Tensor::from_parts(av.shape().to_vec(), data), Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * factor);
        self.push(v, Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a))
    }

    /// Identity on the forward pass; multiplies the adjoint by `factor`.
    pub fn grad_scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let v = self.value(a).clone();
        self.push(v, Op::GradScale(a, factor))
    }

    fn check_probabilities(&self, p: NodeId, rows_needed: usize) -> Result<()> {
        let pv = self.value(p);
        if pv.shape().len() != 2 || pv.rows() != rows_needed {
            return Err(shape_err(format!(
                "expected {rows_needed} probability rows, got shape {:?}",
                pv.shape()
            )));
        }
        for i in 0..pv.rows() {
            let s: f64 = pv.row(i).iter().sum();
            if (s - 1.0).abs() > 1e-6 || pv.row(i).iter().any(|&v| v < 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "probability row {i} sums to {s}"
                )));
            }
        }
        Ok(())
    }

    /// Mean of `-ln p[true class]` with the log clamp.
    pub fn cross_entropy(&mut self, p: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.check_probabilities(p, labels.len())?;
        let pv = self.value(p);
        let classes = pv.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {classes})"
            )));
        }
        let n = labels.len() as f64;
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -pv.row(i)[y].max(LOG_CLAMP).ln())
            .sum::<f64>()
            / n;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                p,
                labels: labels.to_vec(),
            },
        )
    }

    /// Mean row entropy over the selected rows; zero when none are selected.
    pub fn mean_entropy(&mut self, p: NodeId, rows: &[usize]) -> Result<NodeId> {
        let pv = self.value(p);
        if pv.shape().len() != 2 || rows.iter().any(|&r| r >= pv.rows()) {
            return Err(shape_err("entropy rows out of range"));
        }
        self.check_probabilities(p, pv.rows())?;
        let pv = self.value(p);
        let value = if rows.is_empty() {
            0.0
        } else {
            rows.iter().map(|&r| row_entropy(pv.row(r))).sum::<f64>() / rows.len() as f64
        };
        self.push(
            Tensor::scalar(value),
            Op::MeanEntropy {
                p,
                rows: rows.to_vec(),
            },
        )
    }

    /// Mean binary cross-entropy of `[N, 1]` probabilities against 0/1 targets.
    pub fn binary_cross_entropy(&mut self, p: NodeId, targets: &[f64]) -> Result<NodeId> {
        let pv = self.value(p);
        if pv.len() != targets.len() || pv.rows() != targets.len() {
            return Err(shape_err("binary cross-entropy target count mismatch"));
        }
        let n = targets.len() as f64;
        let loss = pv
            .data()
            .iter()
            .zip(targets)
            .map(|(&q, &t)| -(t * q.max(LOG_CLAMP).ln() + (1.0 - t) * (1.0 - q).max(LOG_CLAMP).ln()))
            .sum::<f64>()
            / n;
        self.push(
            Tensor::scalar(loss),
            Op::BinaryCrossEntropy {
                p,
                targets: targets.to_vec(),
            },
        )
    }

    /// Propagates adjoints from the scalar `loss` and writes dense gradients
    /// into every trainable parameter referenced by the tape.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        self.consumed = true;
        store.zero_grad();
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj, store);
        }
        for p in store.iter() {
            p.grad.ensure_finite("backward")?;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>], store: &mut ParamStore) {
        let node = &self.nodes[i];
        let mut acc = |id: NodeId, t: Tensor| match &mut adj[id.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Input => {}
            Op::Param(pid) => {
                let p = store.get_mut(*pid);
                if p.trainable {
                    p.grad.add_assign(g);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, fan_in) = (xv.shape()[0], xv.shape()[1]);
                let out = wv.shape()[0];
                let mut dx = vec![0.0; n * fan_in];
                gemm(n, out, fan_in, g.data(), (out as isize, 1), wv.data(), (fan_in as isize, 1), &mut dx, 0.0);
                let mut dw = vec![0.0; out * fan_in];
                gemm(out, n, fan_in, g.data(), (1, out as isize), xv.data(), (fan_in as isize, 1), &mut dw, 0.0);
                let mut db = vec![0.0; out];
                for row in g.data().chunks(out) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(*x, Tensor::from_parts(xv.shape().to_vec(), dx));
                acc(*w, Tensor::from_parts(wv.shape().to_vec(), dw));
                acc(*b, Tensor::from_parts(self.value(*b).shape().to_vec(), db));
            }
            Op::Conv2d { x, w, b, pad } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let [n, c, h, wd] = [xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]];
                let [o, _, kh, kw] = [wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]];
                let geom = Conv2dGeom { c, h, w: wd, kh, kw, pad: *pad };
                let (ho, wo) = geom.out_hw();
                let spatial = ho * wo;
                let ckk = c * kh * kw;
                let sample = c * h * wd;
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                let mut db = vec![0.0; o];
                let mut cols = vec![0.0; ckk * spatial];
                let mut dcols = vec![0.0; ckk * spatial];
                for s in 0..n {
                    let gs = &g.data()[s * o * spatial..(s + 1) * o * spatial];
                    geom.im2col(&xv.data()[s * sample..(s + 1) * sample], &mut cols);
                    gemm(o, spatial, ckk, gs, (spatial as isize, 1), &cols, (1, spatial as isize), &mut dw, 1.0);
                    gemm(ckk, o, spatial, wv.data(), (1, ckk as isize), gs, (spatial as isize, 1), &mut dcols, 0.0);
                    geom.col2im(&dcols, &mut dx[s * sample..(s + 1) * sample]);
                    for (oc, chunk) in gs.chunks(spatial).enumerate() {
                        db[oc] += chunk.iter().sum::<f64>();
                    }
                }
                acc(*x, Tensor::from_parts(xv.shape().to_vec(), dx));
                acc(*w, Tensor::from_parts(wv.shape().to_vec(), dw));
                acc(*b, Tensor::from_parts(vec![o], db));
            }
            Op::Conv1d { x, w, b, stride } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let [n, c, l] = [xv.shape()[0], xv.shape()[1], xv.shape()[2]];
                let [o, _, k] = [wv.shape()[0], wv.shape()[1], wv.shape()[2]];
                let lo = g.shape()[2];
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                let mut db = vec![0.0; o];
                let (xd, wdat, gd) = (xv.data(), wv.data(), g.data());
                for s in 0..n {
                    for oc in 0..o {
                        for t in 0..lo {
                            let gv = gd[(s * o + oc) * lo + t];
                            db[oc] += gv;
                            for ic in 0..c {
                                let xoff = (s * c + ic) * l + t * stride;
                                let woff = (oc * c + ic) * k;
                                for q in 0..k {
                                    dw[woff + q] += gv * xd[xoff + q];
                                    dx[xoff + q] += gv * wdat[woff + q];
                                }
                            }
                        }
                    }
                }
                acc(*x, Tensor::from_parts(xv.shape().to_vec(), dx));
                acc(*w, Tensor::from_parts(wv.shape().to_vec(), dw));
                acc(*b, Tensor::from_parts(vec![o], db));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&a, &d)| if a > 0.0 { d } else { 0.0 })
                    .collect();
                acc(*x, Tensor::from_parts(xv.shape().to_vec(), data));
            }
            Op::Sigmoid(x) => {
                let data = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&s, &d)| d * s * (1.0 - s))
                    .collect();
                acc(*x, Tensor::from_parts(node.value.shape().to_vec(), data));
            }
            Op::Softmax(x) => {
                let width = node.value.shape()[1];
                let mut data = vec![0.0; node.value.len()];
                for ((out, p), d) in data
                    .chunks_mut(width)
                    .zip(node.value.data().chunks(width))
                    .zip(g.data().chunks(width))
                {
                    let dot: f64 = p.iter().zip(d).map(|(a, b)| a * b).sum();
                    for j in 0..width {
                        out[j] = p[j] * (d[j] - dot);
                    }
                }
                acc(*x, Tensor::from_parts(node.value.shape().to_vec(), data));
            }
            Op::MaxPool2 { x, argmax } => {
                let xv = self.value(*x);
                let mut data = vec![0.0; xv.len()];
                for (&src, &d) in argmax.iter().zip(g.data()) {
                    data[src] += d;
                }
                acc(*x, Tensor::from_parts(xv.shape().to_vec(), data));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                acc(*x, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::Concat(parts) => {
                let rows = node.value.rows();
                let width = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let pw = self.value(p).shape()[1];
                    let mut data = Vec::with_capacity(rows * pw);
                    for r in 0..rows {
                        data.extend_from_slice(&g.data()[r * width + offset..r * width + offset + pw]);
                    }
                    acc(p, Tensor::from_parts(vec![rows, pw], data));
                    offset += pw;
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = bv.data().iter().zip(g.data()).map(|(y, d)| y * d).collect();
                let db = av.data().iter().zip(g.data()).map(|(x, d)| x * d).collect();
                acc(*a, Tensor::from_parts(av.shape().to_vec(), da));
                acc(*b, Tensor::from_parts(bv.shape().to_vec(), db));
            }
            Op::Scale(a, f) => acc(*a, g.map(|d| d * f)),
            Op::GradScale(a, f) => acc(*a, g.map(|d| d * f)),
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                acc(*a, Tensor::filled(&shape, g.item()));
            }
            Op::CrossEntropy { p, labels } => {
                let pv = self.value(*p);
                let width = pv.shape()[1];
                let n = labels.len() as f64;
                let mut data = vec![0.0; pv.len()];
                for (i, &y) in labels.iter().enumerate() {
                    let q = pv.row(i)[y];
                    if q >= LOG_CLAMP {
                        data[i * width + y] = -g.item() / (n * q);
                    }
                }
                acc(*p, Tensor::from_parts(pv.shape().to_vec(), data));
            }
            Op::MeanEntropy { p, rows } => {
                let pv = self.value(*p);
                let mut data = vec![0.0; pv.len()];
                if !rows.is_empty() {
                    let width = pv.shape()[1];
                    let scale = g.item() / rows.len() as f64;
                    for &r in rows {
                        for (j, &q) in pv.row(r).iter().enumerate() {
                            let d = if q >= LOG_CLAMP { -(q.ln() + 1.0) } else { -LOG_CLAMP.ln() };
                            data[r * width + j] += scale * d;
                        }
                    }
                }
                acc(*p, Tensor::from_parts(pv.shape().to_vec(), data));
            }
            Op::BinaryCrossEntropy { p, targets } => {
                let pv = self.value(*p);
                let n = targets.len() as f64;
                let data = pv
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&q, &t)| {
                        let pos = if q >= LOG_CLAMP { -t / q } else { 0.0 };
                        let neg = if 1.0 - q >= LOG_CLAMP { (1.0 - t) / (1.0 - q) } else { 0.0 };
                        g.item() * (pos + neg) / n
                    })
                    .collect();
                acc(*p, Tensor::from_parts(pv.shape().to_vec(), data));
            }
        }
    }
}

struct Conv2dGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
}

impl Conv2dGeom {
    fn out_hw(&self) -> (usize, usize) {
        (self.h + 2 * self.pad - self.kh + 1, self.w + 2 * self.pad - self.kw + 1)
    }

    /// One sample `[C, H, W]` into columns `[C·kh·kw, Ho·Wo]`.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (ho, wo) = self.out_hw();
        let spatial = ho * wo;
        for ic in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let r = (ic * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[r * spatial..(r + 1) * spatial];
                    for i in 0..ho {
                        let si = (i + ki) as isize - self.pad as isize;
                        for j in 0..wo {
                            let sj = (j + kj) as isize - self.pad as isize;
                            dst[i * wo + j] = if si >= 0 && sj >= 0 && (si as usize) < self.h && (sj as usize) < self.w {
                                x[(ic * self.h + si as usize) * self.w + sj as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (ho, wo) = self.out_hw();
        let spatial = ho * wo;
        for ic in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let r = (ic * self.kh + ki) * self.kw + kj;
                    let src = &cols[r * spatial..(r + 1) * spatial];
                    for i in 0..ho {
                        let si = (i + ki) as isize - self.pad as isize;
                        if si < 0 || si as usize >= self.h {
                            continue;
                        }
                        for j in 0..wo {
                            let sj = (j + kj) as isize - self.pad as isize;
                            if sj >= 0 && (sj as usize) < self.w {
                                dx[(ic * self.h + si as usize) * self.w + sj as usize] += src[i * wo + j];
                            }
                        }
                    }
                }
            }
        }
    }
}
