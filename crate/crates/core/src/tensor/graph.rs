//! Define-by-run tape over [`Tensor4`] with reverse-mode gradients.
//!
//! A [`Graph`] owns a persistent parameter registry (plus normalization
//! buffers and momentum state) and a transient tape of op nodes. Ops execute
//! eagerly as they are recorded; [`Graph::backward`] walks the tape in exact
//! reverse insertion order, which is a reverse topological order because an
//! op can only consume nodes recorded before it. Gradient accumulation order
//! is therefore fixed and runs are bit-reproducible.
//!
//! Shape and registry misuse (mismatched operands, unknown ids, reading a
//! node from a cleared tape) is a programming error and panics; recoverable
//! conditions are modeled by the callers in `adapt` and `scenegen`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::dense::Tensor4;
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufId(pub(crate) usize);

/// Trainable or frozen tensor with a gradient accumulator and momentum slot.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor4,
    pub grad: Tensor4,
    pub trainable: bool,
    velocity: Vec<f64>,
}

/// Per-channel running statistic for normalization layers.
#[derive(Debug, Clone)]
pub struct Buffer {
    pub name: String,
    pub data: Vec<f64>,
}

/// Normalization statistics source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics over (N, H, W); updates running buffers.
    Batch,
    /// Stored running statistics; buffers untouched.
    Frozen,
}

/// Momentum of the running-statistics update in batch mode.
pub const BN_MOMENTUM: f64 = 0.1;

enum Op {
    Input,
    ParamRef(ParamId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScaleAdd {
        x: NodeId,
        a: NodeId,
        y: NodeId,
    },
    Affine {
        x: NodeId,
        k: f64,
    },
    Conv2d {
        x: NodeId,
        weight: ParamId,
        bias: Option<ParamId>,
        groups: usize,
        k: usize,
        pad: usize,
    },
    BatchNorm {
        x: NodeId,
        scale: ParamId,
        shift: ParamId,
        mode: BnMode,
        saved_mean: Vec<f64>,
        saved_inv_std: Vec<f64>,
    },
    AvgPool2(NodeId),
    UpsampleNearest(NodeId),
    GatherHw {
        x: NodeId,
        map: Vec<i64>,
    },
    MseLoss {
        pred: NodeId,
        target: NodeId,
    },
    Detach(NodeId),
}

struct Node {
    value: Tensor4,
    grad: Tensor4,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    params: Vec<Param>,
    buffers: Vec<Buffer>,
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    // ---- registry -------------------------------------------------------

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor4, trainable: bool) -> ParamId {
        let grad = Tensor4::zeros(value.dims());
        let velocity = vec![0.0; value.len()];
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
            trainable,
            velocity,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, data: Vec<f64>) -> BufId {
        self.buffers.push(Buffer {
            name: name.into(),
            data,
        });
        BufId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufId) -> &Buffer {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufId) -> &mut Buffer {
        &mut self.buffers[id.0]
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (BufId, &Buffer)> {
        self.buffers.iter().enumerate().map(|(i, b)| (BufId(i), b))
    }

    /// Overwrites a parameter value in place; shape must match.
    pub fn set_param_value(&mut self, id: ParamId, value: Tensor4) {
        let p = &mut self.params[id.0];
        assert_eq!(p.value.dims(), value.dims(), "param shape change");
        p.value = value;
        p.grad.fill(0.0);
        p.velocity.fill(0.0);
    }

    /// Number of scalar parameters, split as (trainable, total).
    pub fn param_counts(&self) -> (usize, usize) {
        let mut trainable = 0;
        let mut total = 0;
        for p in &self.params {
            total += p.value.len();
            if p.trainable {
                trainable += p.value.len();
            }
        }
        (trainable, total)
    }

    /// FNV-style checksum over the given params' value bits.
    pub fn params_checksum(&self, ids: &[ParamId]) -> u64 {
        let mut acc: u64 = 0xcbf2_9ce4_8422_2325;
        for &id in ids {
            acc ^= self.params[id.0].value.bit_checksum();
            acc = acc.wrapping_mul(0x0000_0100_0000_01b3);
        }
        acc
    }

    /// FNV-style checksum over the given buffers' bits.
    pub fn buffers_checksum(&self, ids: &[BufId]) -> u64 {
        let mut acc: u64 = 0xcbf2_9ce4_8422_2325;
        for &id in ids {
            for v in &self.buffers[id.0].data {
                acc ^= v.to_bits();
                acc = acc.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        acc
    }

    // ---- tape -----------------------------------------------------------

    /// Drops all tape nodes; params and buffers persist.
    pub fn clear_tape(&mut self) {
        self.nodes.clear();
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: NodeId) -> &Tensor4 {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Tensor4 {
        &self.nodes[id.0].grad
    }

    /// Scalar payload of a (1, 1, 1, 1) node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        assert!(v.is_scalar(), "node is not scalar");
        v.data()[0]
    }

    fn push(&mut self, value: Tensor4, op: Op) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite op output");
        let grad = Tensor4::zeros(value.dims());
        self.nodes.push(Node { value, grad, op });
        NodeId(self.nodes.len() - 1)
    }

    // ---- forward ops ------------------------------------------------------

    /// Leaf holding a constant; gradients stop here.
    pub fn input(&mut self, value: Tensor4) -> NodeId {
        self.push(value, Op::Input)
    }

    /// Leaf view of a parameter; backward accumulates into the param grad.
    pub fn param_node(&mut self, id: ParamId) -> NodeId {
        let value = self.params[id.0].value.clone();
        self.push(value, Op::ParamRef(id))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.nodes[x.0].value.clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let mut out = self.nodes[x.0].value.clone();
        for v in out.data_mut() {
            *v = math::sigmoid(*v);
        }
        self.push(out, Op::Sigmoid(x))
    }

    /// Elementwise sum of same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.dims(), vb.dims(), "add shape mismatch");
        let mut out = va.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(vb.data()) {
            *o += v;
        }
        self.push(out, Op::Add(a, b))
    }

    /// Elementwise product; either operand may be a scalar broadcast.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = if va.is_scalar() && !vb.is_scalar() {
            let s = va.data()[0];
            let mut out = vb.clone();
            for o in out.data_mut() {
                *o *= s;
            }
            out
        } else if vb.is_scalar() && !va.is_scalar() {
            let s = vb.data()[0];
            let mut out = va.clone();
            for o in out.data_mut() {
                *o *= s;
            }
            out
        } else {
            assert_eq!(va.dims(), vb.dims(), "mul shape mismatch");
            let mut out = va.clone();
            for (o, &v) in out.data_mut().iter_mut().zip(vb.data()) {
                *o *= v;
            }
            out
        };
        self.push(out, Op::Mul(a, b))
    }

    /// `x + a * y` with a scalar coefficient node.
    pub fn scale_add(&mut self, x: NodeId, a: NodeId, y: NodeId) -> NodeId {
        let (vx, va, vy) = (
            &self.nodes[x.0].value,
            &self.nodes[a.0].value,
            &self.nodes[y.0].value,
        );
        assert!(va.is_scalar(), "scale_add coefficient must be scalar");
        assert_eq!(vx.dims(), vy.dims(), "scale_add shape mismatch");
        let s = va.data()[0];
        let mut out = vx.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(vy.data()) {
            *o += s * v;
        }
        self.push(out, Op::ScaleAdd { x, a, y })
    }

    /// `k * x + b` with compile-time constants (not parameters).
    pub fn affine(&mut self, x: NodeId, k: f64, b: f64) -> NodeId {
        let mut out = self.nodes[x.0].value.clone();
        for v in out.data_mut() {
            *v = k * *v + b;
        }
        self.push(out, Op::Affine { x, k })
    }

    /// Same-padding stride-1 convolution; 1x1 or 3x3 kernels, groups 1
    /// (dense) or C (depthwise).
    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: ParamId,
        bias: Option<ParamId>,
        groups: usize,
    ) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let wt = &self.params[weight.0].value;
        let (n, c_in, h, w) = vx.dims();
        let (c_out, c_in_g, kh, kw) = wt.dims();
        assert_eq!(kh, kw, "square kernels only");
        assert!(kh == 1 || kh == 3, "kernel must be 1x1 or 3x3");
        assert!(
            groups == 1 || groups == c_in,
            "groups must be 1 or C (depthwise)"
        );
        assert_eq!(c_in % groups, 0, "channels not divisible by groups");
        assert_eq!(c_in_g, c_in / groups, "weight input-channel mismatch");
        assert_eq!(c_out % groups, 0, "output channels not divisible by groups");
        if let Some(b) = bias {
            assert_eq!(self.params[b.0].value.len(), c_out, "bias length");
        }
        let pad = kh / 2;

        let mut out = Tensor4::zeros((n, c_out, h, w));
        let bias_vals = bias.map(|b| self.params[b.0].value.clone());
        conv_forward(vx, wt, bias_vals.as_ref(), groups, pad, &mut out);
        self.push(
            out,
            Op::Conv2d {
                x,
                weight,
                bias,
                groups,
                k: kh,
                pad,
            },
        )
    }

    /// Per-channel normalization over (N, H, W).
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        scale: ParamId,
        shift: ParamId,
        mean_buf: BufId,
        var_buf: BufId,
        eps: f64,
        mode: BnMode,
    ) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let (n, c, h, w) = vx.dims();
        assert_eq!(self.params[scale.0].value.len(), c, "scale channels");
        assert_eq!(self.params[shift.0].value.len(), c, "shift channels");
        assert_eq!(self.buffers[mean_buf.0].data.len(), c, "mean buffer");
        assert_eq!(self.buffers[var_buf.0].data.len(), c, "var buffer");

        let slice = (n * h * w) as f64;
        let (mean, var) = match mode {
            BnMode::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let mut acc = 0.0;
                    for ni in 0..n {
                        for hi in 0..h {
                            for &v in vx.row(ni, ci, hi) {
                                acc += v;
                            }
                        }
                    }
                    let mu = acc / slice;
                    let mut acc2 = 0.0;
                    for ni in 0..n {
                        for hi in 0..h {
                            for &v in vx.row(ni, ci, hi) {
                                let d = v - mu;
                                acc2 += d * d;
                            }
                        }
                    }
                    mean[ci] = mu;
                    var[ci] = acc2 / slice;
                }
                // momentum update of the running statistics
                for ci in 0..c {
                    let rm = &mut self.buffers[mean_buf.0].data[ci];
                    *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean[ci];
                }
                for ci in 0..c {
                    let rv = &mut self.buffers[var_buf.0].data[ci];
                    *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var[ci];
                }
                (mean, var)
            }
            BnMode::Frozen => (
                self.buffers[mean_buf.0].data.clone(),
                self.buffers[var_buf.0].data.clone(),
            ),
        };

        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / math::sqrt(v + eps)).collect();
        let vx = &self.nodes[x.0].value;
        let gamma = self.params[scale.0].value.data();
        let beta = self.params[shift.0].value.data();
        let mut out = Tensor4::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                let (g, b, mu, is) = (gamma[ci], beta[ci], mean[ci], inv_std[ci]);
                for hi in 0..h {
                    let src = vx.row(ni, ci, hi);
                    let dst = out.row_mut(ni, ci, hi);
                    for (o, &v) in dst.iter_mut().zip(src) {
                        *o = g * (v - mu) * is + b;
                    }
                }
            }
        }
        self.push(
            out,
            Op::BatchNorm {
                x,
                scale,
                shift,
                mode,
                saved_mean: mean,
                saved_inv_std: inv_std,
            },
        )
    }

    /// 2x2 average pooling with stride 2; odd trailing row/col dropped.
    pub fn avgpool2(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let (n, c, h, w) = vx.dims();
        let (oh, ow) = (h / 2, w / 2);
        assert!(oh > 0 && ow > 0, "avgpool2 needs spatial dims >= 2");
        let mut out = Tensor4::zeros((n, c, oh, ow));
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..oh {
                    let top = vx.row(ni, ci, 2 * hi);
                    let bot = vx.row(ni, ci, 2 * hi + 1);
                    let dst = out.row_mut(ni, ci, hi);
                    for wi in 0..ow {
                        dst[wi] =
                            0.25 * (top[2 * wi] + top[2 * wi + 1] + bot[2 * wi] + bot[2 * wi + 1]);
                    }
                }
            }
        }
        self.push(out, Op::AvgPool2(x))
    }

    /// Nearest-neighbor resample to (target_h, target_w) with the index map
    /// `src_i = floor(i * H / target_h)`; works for up- and down-sampling.
    pub fn upsample_nearest(&mut self, x: NodeId, target_h: usize, target_w: usize) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let (n, c, h, w) = vx.dims();
        assert!(target_h > 0 && target_w > 0, "upsample target dims");
        let mut out = Tensor4::zeros((n, c, target_h, target_w));
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..target_h {
                    let src_h = hi * h / target_h;
                    let src = vx.row(ni, ci, src_h);
                    let dst = out.row_mut(ni, ci, hi);
                    for (wi, o) in dst.iter_mut().enumerate() {
                        *o = src[wi * w / target_w];
                    }
                }
            }
        }
        self.push(out, Op::UpsampleNearest(x))
    }

    /// Spatial gather with a per-batch-item index map of length
    /// `N * out_h * out_w`; entries are flat `h * W + w` source offsets or
    /// `-1` for zero fill. Shared across channels.
    pub fn gather_hw(&mut self, x: NodeId, map: Vec<i64>, out_h: usize, out_w: usize) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let (n, c, h, w) = vx.dims();
        assert_eq!(map.len(), n * out_h * out_w, "gather map length");
        let plane = h * w;
        for &m in &map {
            assert!(m >= -1 && m < plane as i64, "gather map entry out of range");
        }
        let mut out = Tensor4::zeros((n, c, out_h, out_w));
        for ni in 0..n {
            let map_n = &map[ni * out_h * out_w..(ni + 1) * out_h * out_w];
            for ci in 0..c {
                let src_base = vx.index(ni, ci, 0, 0);
                let src = &vx.data()[src_base..src_base + plane];
                let dst_base = out.index(ni, ci, 0, 0);
                let dst = &mut out.data_mut()[dst_base..dst_base + out_h * out_w];
                for (o, &m) in dst.iter_mut().zip(map_n) {
                    if m >= 0 {
                        *o = src[m as usize];
                    }
                }
            }
        }
        self.push(out, Op::GatherHw { x, map })
    }

    /// Mean squared error over all elements; returns a scalar node.
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> NodeId {
        let (vp, vt) = (&self.nodes[pred.0].value, &self.nodes[target.0].value);
        assert_eq!(vp.dims(), vt.dims(), "mse shape mismatch");
        let mut acc = 0.0;
        for (&p, &t) in vp.data().iter().zip(vt.data()) {
            let d = p - t;
            acc += d * d;
        }
        let value = Tensor4::scalar(acc / vp.len() as f64);
        self.push(value, Op::MseLoss { pred, target })
    }

    /// Value-identical tensor that terminates the gradient graph.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.clone();
        self.push(out, Op::Detach(x))
    }

    // ---- backward ---------------------------------------------------------

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Reverse-mode sweep seeded with `d loss / d loss = 1`.
    pub fn backward(&mut self, loss: NodeId) {
        assert!(
            self.nodes[loss.0].value.is_scalar(),
            "backward seed must be scalar"
        );
        self.nodes[loss.0].grad.data_mut()[0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            backward_op(node, before, &mut self.params);
        }
    }

    /// SGD with momentum over trainable params, in registration order.
    /// `v <- momentum * v + grad; value <- value - lr * v`.
    pub fn sgd_step(&mut self, lr: f64, momentum: f64) {
        for p in &mut self.params {
            if !p.trainable {
                continue;
            }
            for ((value, vel), &grad) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.velocity.iter_mut())
                .zip(p.grad.data())
            {
                *vel = momentum * *vel + grad;
                *value -= lr * *vel;
            }
        }
    }
}

fn conv_forward(
    x: &Tensor4,
    weight: &Tensor4,
    bias: Option<&Tensor4>,
    groups: usize,
    pad: usize,
    out: &mut Tensor4,
) {
    let (n, c_in, h, w) = x.dims();
    let (c_out, c_in_g, k, _) = weight.dims();
    let c_out_g = c_out / groups;
    let _ = c_in;

    for ni in 0..n {
        for g in 0..groups {
            for cog in 0..c_out_g {
                let co = g * c_out_g + cog;
                if let Some(b) = bias {
                    let bv = b.data()[co];
                    for hi in 0..h {
                        out.row_mut(ni, co, hi).fill(bv);
                    }
                }
                for cig in 0..c_in_g {
                    let ci = g * c_in_g + cig;
                    for kh in 0..k {
                        for kw in 0..k {
                            let wk = weight.at(co, cig, kh, kw);
                            if wk == 0.0 {
                                continue;
                            }
                            // output rows where ih = oh + kh - pad is valid
                            let oh_lo = pad.saturating_sub(kh);
                            let oh_hi = (h + pad).saturating_sub(kh).min(h);
                            let ow_lo = pad.saturating_sub(kw);
                            let ow_hi = (w + pad).saturating_sub(kw).min(w);
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            for oh in oh_lo..oh_hi {
                                let ih = oh + kh - pad;
                                let src_row = x.row(ni, ci, ih);
                                let src = &src_row[ow_lo + kw - pad..ow_hi + kw - pad];
                                let dst_row = out.row_mut(ni, co, oh);
                                let dst = &mut dst_row[ow_lo..ow_hi];
                                for (o, &v) in dst.iter_mut().zip(src) {
                                    *o += wk * v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn backward_op(node: &mut Node, before: &mut [Node], params: &mut [Param]) {
    let grad = &node.grad;
    match &node.op {
        Op::Input => {}
        Op::ParamRef(pid) => {
            let p = &mut params[pid.0];
            for (pg, &g) in p.grad.data_mut().iter_mut().zip(grad.data()) {
                *pg += g;
            }
        }
        Op::Relu(x) => {
            let (xv, xg) = value_grad(before, *x);
            for ((g, &v), out) in grad.data().iter().zip(xv.data()).zip(xg.data_mut()) {
                if v > 0.0 {
                    *out += *g;
                }
            }
        }
        Op::Sigmoid(x) => {
            let y = node.value.data();
            let xg = &mut before[x.0].grad;
            for ((&g, &s), out) in grad.data().iter().zip(y).zip(xg.data_mut()) {
                *out += g * s * (1.0 - s);
            }
        }
        Op::Add(a, b) => {
            accumulate(&mut before[a.0].grad, grad.data(), 1.0);
            accumulate(&mut before[b.0].grad, grad.data(), 1.0);
        }
        Op::Mul(a, b) => {
            let a_scalar = before[a.0].value.is_scalar();
            let b_scalar = before[b.0].value.is_scalar();
            if a_scalar && !b_scalar {
                let s = before[a.0].value.data()[0];
                let mut acc = 0.0;
                for (&g, &bv) in grad.data().iter().zip(before[b.0].value.data()) {
                    acc += g * bv;
                }
                before[a.0].grad.data_mut()[0] += acc;
                accumulate(&mut before[b.0].grad, grad.data(), s);
            } else if b_scalar && !a_scalar {
                let s = before[b.0].value.data()[0];
                let mut acc = 0.0;
                for (&g, &av) in grad.data().iter().zip(before[a.0].value.data()) {
                    acc += g * av;
                }
                before[b.0].grad.data_mut()[0] += acc;
                accumulate(&mut before[a.0].grad, grad.data(), s);
            } else {
                // same shape; handle a == b (squaring) via two passes
                {
                    let bv: Vec<f64> = before[b.0].value.data().to_vec();
                    let ag = &mut before[a.0].grad;
                    for ((out, &g), &v) in ag.data_mut().iter_mut().zip(grad.data()).zip(&bv) {
                        *out += g * v;
                    }
                }
                {
                    let av: Vec<f64> = before[a.0].value.data().to_vec();
                    let bg = &mut before[b.0].grad;
                    for ((out, &g), &v) in bg.data_mut().iter_mut().zip(grad.data()).zip(&av) {
                        *out += g * v;
                    }
                }
            }
        }
        Op::ScaleAdd { x, a, y } => {
            accumulate(&mut before[x.0].grad, grad.data(), 1.0);
            let s = before[a.0].value.data()[0];
            let mut acc = 0.0;
            for (&g, &yv) in grad.data().iter().zip(before[y.0].value.data()) {
                acc += g * yv;
            }
            before[a.0].grad.data_mut()[0] += acc;
            accumulate(&mut before[y.0].grad, grad.data(), s);
        }
        Op::Affine { x, k } => {
            accumulate(&mut before[x.0].grad, grad.data(), *k);
        }
        Op::Conv2d {
            x,
            weight,
            bias,
            groups,
            k,
            pad,
        } => {
            let wval = params[weight.0].value.clone();
            let xnode = &mut before[x.0];
            conv_backward(
                grad,
                &xnode.value,
                &wval,
                *groups,
                *k,
                *pad,
                &mut xnode.grad,
                weight.0,
                bias.map(|b| b.0),
                params,
            );
        }
        Op::BatchNorm {
            x,
            scale,
            shift,
            mode,
            saved_mean,
            saved_inv_std,
        } => {
            let gamma = params[scale.0].value.data().to_vec();
            let xnode = &mut before[x.0];
            bn_backward(
                grad,
                &xnode.value,
                &gamma,
                saved_mean,
                saved_inv_std,
                *mode,
                &mut xnode.grad,
                scale.0,
                shift.0,
                params,
            );
        }
        Op::AvgPool2(x) => {
            let xg = &mut before[x.0].grad;
            let (n, c, oh, ow) = node.value.dims();
            for ni in 0..n {
                for ci in 0..c {
                    for hi in 0..oh {
                        let src = grad.row(ni, ci, hi);
                        for wi in 0..ow {
                            let g = 0.25 * src[wi];
                            let i0 = xg.index(ni, ci, 2 * hi, 2 * wi);
                            let i1 = xg.index(ni, ci, 2 * hi, 2 * wi + 1);
                            let i2 = xg.index(ni, ci, 2 * hi + 1, 2 * wi);
                            let i3 = xg.index(ni, ci, 2 * hi + 1, 2 * wi + 1);
                            let data = xg.data_mut();
                            data[i0] += g;
                            data[i1] += g;
                            data[i2] += g;
                            data[i3] += g;
                        }
                    }
                }
            }
        }
        Op::UpsampleNearest(x) => {
            let (n, c, th, tw) = node.value.dims();
            let (_, _, h, w) = before[x.0].value.dims();
            let xg = &mut before[x.0].grad;
            for ni in 0..n {
                for ci in 0..c {
                    for hi in 0..th {
                        let src_h = hi * h / th;
                        let grow = grad.row(ni, ci, hi);
                        for (wi, &g) in grow.iter().enumerate() {
                            let idx = xg.index(ni, ci, src_h, wi * w / tw);
                            xg.data_mut()[idx] += g;
                        }
                    }
                }
            }
        }
        Op::GatherHw { x, map } => {
            let (n, c, oh, ow) = node.value.dims();
            let (_, _, h, w) = before[x.0].value.dims();
            let plane = h * w;
            let xg = &mut before[x.0].grad;
            for ni in 0..n {
                let map_n = &map[ni * oh * ow..(ni + 1) * oh * ow];
                for ci in 0..c {
                    let dst_base = xg.index(ni, ci, 0, 0);
                    let grad_base = grad.index(ni, ci, 0, 0);
                    let gslice = &grad.data()[grad_base..grad_base + oh * ow];
                    let dslice = &mut xg.data_mut()[dst_base..dst_base + plane];
                    for (&g, &m) in gslice.iter().zip(map_n) {
                        if m >= 0 {
                            dslice[m as usize] += g;
                        }
                    }
                }
            }
        }
        Op::MseLoss { pred, target } => {
            let g = grad.data()[0];
            let len = before[pred.0].value.len() as f64;
            let scale = 2.0 * g / len;
            let tv: Vec<f64> = before[target.0].value.data().to_vec();
            {
                let pv: Vec<f64> = before[pred.0].value.data().to_vec();
                let pg = &mut before[pred.0].grad;
                for ((out, &p), &t) in pg.data_mut().iter_mut().zip(&pv).zip(&tv) {
                    *out += scale * (p - t);
                }
            }
            {
                let pv: Vec<f64> = before[pred.0].value.data().to_vec();
                let tg = &mut before[target.0].grad;
                for ((out, &p), &t) in tg.data_mut().iter_mut().zip(&pv).zip(&tv) {
                    *out -= scale * (p - t);
                }
            }
        }
        Op::Detach(_) => {
            // gradient wall: ancestors receive exactly zero
        }
    }
}

fn value_grad(nodes: &mut [Node], id: NodeId) -> (&Tensor4, &mut Tensor4) {
    let node = &mut nodes[id.0];
    (&node.value, &mut node.grad)
}

fn accumulate(dst: &mut Tensor4, src: &[f64], scale: f64) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src) {
        *d += scale * s;
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    dy: &Tensor4,
    x: &Tensor4,
    weight: &Tensor4,
    groups: usize,
    k: usize,
    pad: usize,
    dx: &mut Tensor4,
    weight_idx: usize,
    bias: Option<usize>,
    params: &mut [Param],
) {
    let (n, _c_in, h, w) = x.dims();
    let (c_out, c_in_g, _, _) = weight.dims();
    let c_out_g = c_out / groups;

    for ni in 0..n {
        for g in 0..groups {
            for cog in 0..c_out_g {
                let co = g * c_out_g + cog;
                if let Some(bidx) = bias {
                    let mut acc = 0.0;
                    for hi in 0..h {
                        for &gv in dy.row(ni, co, hi) {
                            acc += gv;
                        }
                    }
                    params[bidx].grad.data_mut()[co] += acc;
                }
                for cig in 0..c_in_g {
                    let ci = g * c_in_g + cig;
                    for kh in 0..k {
                        for kw in 0..k {
                            let oh_lo = pad.saturating_sub(kh);
                            let oh_hi = (h + pad).saturating_sub(kh).min(h);
                            let ow_lo = pad.saturating_sub(kw);
                            let ow_hi = (w + pad).saturating_sub(kw).min(w);
                            if ow_lo >= ow_hi || oh_lo >= oh_hi {
                                continue;
                            }
                            let wk = weight.at(co, cig, kh, kw);
                            let mut wgrad = 0.0;
                            for oh in oh_lo..oh_hi {
                                let ih = oh + kh - pad;
                                let dy_row = dy.row(ni, co, oh);
                                let dyw = &dy_row[ow_lo..ow_hi];
                                let x_row = x.row(ni, ci, ih);
                                let xw = &x_row[ow_lo + kw - pad..ow_hi + kw - pad];
                                // dw accumulation: correlation of x with dy
                                for (&gv, &xv) in dyw.iter().zip(xw) {
                                    wgrad += gv * xv;
                                }
                                // dx accumulation: w_k * dy scattered back
                                if wk != 0.0 {
                                    let dx_start = dx.index(ni, ci, ih, ow_lo + kw - pad);
                                    let dxw = &mut dx.data_mut()
                                        [dx_start..dx_start + (ow_hi - ow_lo)];
                                    for (o, &gv) in dxw.iter_mut().zip(dyw) {
                                        *o += wk * gv;
                                    }
                                }
                            }
                            let widx = weight.index(co, cig, kh, kw);
                            params[weight_idx].grad.data_mut()[widx] += wgrad;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn bn_backward(
    dy: &Tensor4,
    x: &Tensor4,
    gamma: &[f64],
    mean: &[f64],
    inv_std: &[f64],
    mode: BnMode,
    dx: &mut Tensor4,
    scale_idx: usize,
    shift_idx: usize,
    params: &mut [Param],
) {
    let (n, c, h, w) = x.dims();
    let m = (n * h * w) as f64;

    for ci in 0..c {
        let (mu, is, g) = (mean[ci], inv_std[ci], gamma[ci]);
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for ni in 0..n {
            for hi in 0..h {
                let dyr = dy.row(ni, ci, hi);
                let xr = x.row(ni, ci, hi);
                for (&gv, &xv) in dyr.iter().zip(xr) {
                    sum_dy += gv;
                    sum_dy_xhat += gv * (xv - mu) * is;
                }
            }
        }
        params[scale_idx].grad.data_mut()[ci] += sum_dy_xhat;
        params[shift_idx].grad.data_mut()[ci] += sum_dy;

        match mode {
            BnMode::Batch => {
                // statistics are functions of the batch
                let mean_dy = sum_dy / m;
                let mean_dy_xhat = sum_dy_xhat / m;
                for ni in 0..n {
                    for hi in 0..h {
                        let base = dx.index(ni, ci, hi, 0);
                        for wi in 0..w {
                            let gv = dy.at(ni, ci, hi, wi);
                            let xhat = (x.at(ni, ci, hi, wi) - mu) * is;
                            dx.data_mut()[base + wi] +=
                                g * is * (gv - mean_dy - xhat * mean_dy_xhat);
                        }
                    }
                }
            }
            BnMode::Frozen => {
                // stored statistics are constants
                for ni in 0..n {
                    for hi in 0..h {
                        let base = dx.index(ni, ci, hi, 0);
                        for wi in 0..w {
                            dx.data_mut()[base + wi] += g * is * dy.at(ni, ci, hi, wi);
                        }
                    }
                }
            }
        }
    }
}
