//! Reverse-mode automatic differentiation over dense [`Tensor`]s.
//!
//! A [`Tape`] records every primitive applied during one forward pass. Nodes are appended in
//! evaluation order, so the node index is already a topological order and [`Tape::backward`]
//! only has to walk it in reverse. The tape is rebuilt for every forward pass.

use std::fmt;

use crate::error::{Error, Result};
use crate::kernels::{gemm, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
}

/// A differentiable operation defined outside this module.
///
/// `backward` receives the input values, the forward output and the gradient flowing into the
/// output; it returns one gradient per input, skipping (returning `None` for) inputs whose
/// entry in `needs` is false.
pub trait Function: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        k: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Activation {
        x: Var,
        kind: Activation,
    },
    GlobalAvgPool {
        x: Var,
    },
    ChannelMul {
        x: Var,
        s: Var,
    },
    ChannelAdd {
        x: Var,
        s: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    Custom {
        inputs: Vec<Var>,
        func: Box<dyn Function>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Dynamic computation graph for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

fn dims<const R: usize>(op: &'static str, t: &Tensor) -> Result<[usize; R]> {
    t.shape().try_into().map_err(|_| Error::Dimension {
        op,
        lhs: t.shape().to_vec(),
        rhs: vec![0; R],
    })
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn add_into(dst: &mut Option<Vec<f64>>, src: Vec<f64>) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src),
    }
}

fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (stride > 0 && padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

fn conv_transpose_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Option<usize> {
    let full = (input.checked_sub(1)? * stride + kernel).checked_sub(2 * pad)?;
    (stride > 0 && full >= 1).then_some(full)
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a leaf. Gradients are only accumulated for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// `out[n,o] = Σ_i x[n,i]·w[i,o] + b[o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let [n, i] = dims::<2>("linear", xv)?;
        let [wi, o] = dims::<2>("linear", wv)?;
        if i != wi {
            return Err(mismatch("linear", xv, wv));
        }
        if bv.shape() != [o] {
            return Err(mismatch("linear", wv, bv));
        }
        let mut out = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(bv.data());
        }
        gemm(n, i, o, xv.data(), false, wv.data(), false, 1.0, &mut out);
        let value = Tensor::new(&[n, o], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Zero-padded cross-correlation. `k` is `F×C×kh×kw`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xv, kv, bv) = (self.value(x), self.value(k), self.value(b));
        let [n, c, h, w] = dims::<4>("conv2d", xv)?;
        let [f, kc, kh, kw] = dims::<4>("conv2d", kv)?;
        if c != kc {
            return Err(mismatch("conv2d", xv, kv));
        }
        if bv.shape() != [f] {
            return Err(mismatch("conv2d", kv, bv));
        }
        let (Some(oh), Some(ow)) = (
            conv_out_extent(h, kh, stride, pad),
            conv_out_extent(w, kw, stride, pad),
        ) else {
            return Err(mismatch("conv2d", xv, kv));
        };
        let g = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            pad,
            out_h: oh,
            out_w: ow,
        };
        let plane = oh * ow;
        let mut cols = vec![0.0; g.col_rows() * plane];
        let mut out = vec![0.0; n * f * plane];
        for s in 0..n {
            g.im2col(
                &xv.data()[s * g.image_len()..(s + 1) * g.image_len()],
                &mut cols,
            );
            let dst = &mut out[s * f * plane..(s + 1) * f * plane];
            for (fi, row) in dst.chunks_mut(plane).enumerate() {
                row.fill(bv.data()[fi]);
            }
            gemm(
                f,
                g.col_rows(),
                plane,
                kv.data(),
                false,
                &cols,
                false,
                1.0,
                dst,
            );
        }
        let value = Tensor::new(&[n, f, oh, ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                k,
                b,
                stride,
                pad,
            },
            &[x, k, b],
        ))
    }

    /// Adjoint of [`conv2d`](Self::conv2d) in its input. `k` is `C×F×kh×kw`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        k: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xv, kv, bv) = (self.value(x), self.value(k), self.value(b));
        let [n, c, h, w] = dims::<4>("conv_transpose2d", xv)?;
        let [kc, f, kh, kw] = dims::<4>("conv_transpose2d", kv)?;
        if c != kc {
            return Err(mismatch("conv_transpose2d", xv, kv));
        }
        if bv.shape() != [f] {
            return Err(mismatch("conv_transpose2d", kv, bv));
        }
        let (Some(oh), Some(ow)) = (
            conv_transpose_out_extent(h, kh, stride, pad),
            conv_transpose_out_extent(w, kw, stride, pad),
        ) else {
            return Err(mismatch("conv_transpose2d", xv, kv));
        };
        // Geometry of the conv2d this operator is the adjoint of: it maps the output image back
        // onto the input grid.
        let g = ConvGeom {
            channels: f,
            height: oh,
            width: ow,
            kh,
            kw,
            stride,
            pad,
            out_h: h,
            out_w: w,
        };
        if conv_out_extent(oh, kh, stride, pad) != Some(h)
            || conv_out_extent(ow, kw, stride, pad) != Some(w)
        {
            return Err(mismatch("conv_transpose2d", xv, kv));
        }
        let in_plane = h * w;
        let mut cols = vec![0.0; g.col_rows() * in_plane];
        let mut out = vec![0.0; n * g.image_len()];
        for s in 0..n {
            let src = &xv.data()[s * c * in_plane..(s + 1) * c * in_plane];
            gemm(
                g.col_rows(),
                c,
                in_plane,
                kv.data(),
                true,
                src,
                false,
                0.0,
                &mut cols,
            );
            let dst = &mut out[s * g.image_len()..(s + 1) * g.image_len()];
            g.col2im_add(&cols, dst);
            for (fi, chan) in dst.chunks_mut(oh * ow).enumerate() {
                chan.iter_mut().for_each(|v| *v += bv.data()[fi]);
            }
        }
        let value = Tensor::new(&[n, f, oh, ow], out)?;
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                x,
                k,
                b,
                stride,
                pad,
            },
            &[x, k, b],
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let value = match kind {
            Activation::Relu => self.value(x).map(|v| v.max(0.0)),
            Activation::Silu => self.value(x).map(|v| v * sigmoid(v)),
        };
        self.push(value, Op::Activation { x, kind }, &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Silu)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    /// `N×C×H×W → N×C`, mean over each spatial plane.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = dims::<4>("global_avg_pool", xv)?;
        if h == 0 || w == 0 {
            return Err(Error::contract("global_avg_pool on an empty spatial plane"));
        }
        let data = xv
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / (h * w) as f64)
            .collect();
        let value = Tensor::new(&[n, c], data)?;
        Ok(self.push(value, Op::GlobalAvgPool { x }, &[x]))
    }

    fn channelwise(&self, op: &'static str, x: Var, s: Var) -> Result<usize> {
        let (xv, sv) = (self.value(x), self.value(s));
        let [n, c, h, w] = dims::<4>(op, xv)?;
        if sv.shape() != [n, c] {
            return Err(mismatch(op, xv, sv));
        }
        Ok(h * w)
    }

    /// `out[n,c,h,w] = x[n,c,h,w] · s[n,c]`.
    pub fn broadcast_mul_channelwise(&mut self, x: Var, s: Var) -> Result<Var> {
        let plane = self.channelwise("broadcast_mul_channelwise", x, s)?;
        let (xv, sv) = (self.value(x), self.value(s));
        let mut data = xv.data().to_vec();
        for (p, &g) in data.chunks_mut(plane).zip(sv.data()) {
            p.iter_mut().for_each(|v| *v *= g);
        }
        let value = Tensor::new(xv.shape(), data)?;
        Ok(self.push(value, Op::ChannelMul { x, s }, &[x, s]))
    }

    /// `out[n,c,h,w] = x[n,c,h,w] + s[n,c]`.
    pub fn broadcast_add_channelwise(&mut self, x: Var, s: Var) -> Result<Var> {
        let plane = self.channelwise("broadcast_add_channelwise", x, s)?;
        let (xv, sv) = (self.value(x), self.value(s));
        let mut data = xv.data().to_vec();
        for (p, &g) in data.chunks_mut(plane).zip(sv.data()) {
            p.iter_mut().for_each(|v| *v += g);
        }
        let value = Tensor::new(xv.shape(), data)?;
        Ok(self.push(value, Op::ChannelAdd { x, s }, &[x, s]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("add", av, bv));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// Concatenate two `N×C×H×W` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let [n, ca, h, w] = dims::<4>("concat_channels", av)?;
        let [nb, cb, hb, wb] = dims::<4>("concat_channels", bv)?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(mismatch("concat_channels", av, bv));
        }
        let (la, lb) = (ca * h * w, cb * h * w);
        let mut data = Vec::with_capacity(n * (la + lb));
        for s in 0..n {
            data.extend_from_slice(&av.data()[s * la..(s + 1) * la]);
            data.extend_from_slice(&bv.data()[s * lb..(s + 1) * lb]);
        }
        let value = Tensor::new(&[n, ca + cb, h, w], data)?;
        Ok(self.push(value, Op::ConcatChannels { a, b }, &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(value, Op::Sum { x }, &[x])
    }

    /// Mean of squared differences over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (pv, tv) = (self.value(pred), self.value(target));
        if pv.shape() != tv.shape() {
            return Err(mismatch("mse_loss", pv, tv));
        }
        if pv.numel() == 0 {
            return Err(Error::contract("mse_loss over zero elements"));
        }
        let sq: f64 = pv
            .data()
            .iter()
            .zip(tv.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let value = Tensor::scalar(sq / pv.numel() as f64);
        Ok(self.push(value, Op::Mse { pred, target }, &[pred, target]))
    }

    /// Record the output of an externally defined [`Function`].
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, func: Box<dyn Function>) -> Var {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                func,
            },
            inputs,
        )
    }

    /// Propagate `∂loss/∂·` to every leaf that requires a gradient.
    ///
    /// Leaf gradients accumulate across calls until [`zero_grad`](Self::zero_grad).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            for (input, gi) in self.local_grads(node, &g) {
                add_into(&mut grads[input.0], gi);
            }
        }

        for (id, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &self.nodes[id].op) {
                add_into(&mut self.nodes[id].grad, g);
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradients of one node's inputs given the gradient of its output.
    fn local_grads(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, i) = (xv.shape()[0], xv.shape()[1]);
                let o = wv.shape()[1];
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * i];
                    gemm(n, o, i, g, false, wv.data(), true, 0.0, &mut dx);
                    out.push((*x, dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; i * o];
                    gemm(i, n, o, xv.data(), true, g, false, 0.0, &mut dw);
                    out.push((*w, dw));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; o];
                    for row in g.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    out.push((*b, db));
                }
            }
            Op::Conv2d {
                x,
                k,
                b,
                stride,
                pad,
            } => {
                let (xv, kv) = (self.value(*x), self.value(*k));
                let [n, c, h, w]: [usize; 4] = xv.shape().try_into().unwrap();
                let [f, _, kh, kw]: [usize; 4] = kv.shape().try_into().unwrap();
                let [_, _, oh, ow]: [usize; 4] = node.value.shape().try_into().unwrap();
                let geom = ConvGeom {
                    channels: c,
                    height: h,
                    width: w,
                    kh,
                    kw,
                    stride: *stride,
                    pad: *pad,
                    out_h: oh,
                    out_w: ow,
                };
                let plane = oh * ow;
                let rows = geom.col_rows();
                let mut cols = vec![0.0; rows * plane];
                let mut dx = self.needs(*x).then(|| vec![0.0; xv.numel()]);
                let mut dk = self.needs(*k).then(|| vec![0.0; kv.numel()]);
                for s in 0..n {
                    let gs = &g[s * f * plane..(s + 1) * f * plane];
                    if let Some(dk) = dk.as_mut() {
                        geom.im2col(
                            &xv.data()[s * geom.image_len()..(s + 1) * geom.image_len()],
                            &mut cols,
                        );
                        gemm(f, plane, rows, gs, false, &cols, true, 1.0, dk);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(rows, f, plane, kv.data(), true, gs, false, 0.0, &mut cols);
                        geom.col2im_add(
                            &cols,
                            &mut dx[s * geom.image_len()..(s + 1) * geom.image_len()],
                        );
                    }
                }
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dk) = dk {
                    out.push((*k, dk));
                }
                if self.needs(*b) {
                    out.push((*b, channel_sums(g, n, f, plane)));
                }
            }
            Op::ConvTranspose2d {
                x,
                k,
                b,
                stride,
                pad,
            } => {
                let (xv, kv) = (self.value(*x), self.value(*k));
                let [n, c, h, w]: [usize; 4] = xv.shape().try_into().unwrap();
                let [_, f, kh, kw]: [usize; 4] = kv.shape().try_into().unwrap();
                let [_, _, oh, ow]: [usize; 4] = node.value.shape().try_into().unwrap();
                let geom = ConvGeom {
                    channels: f,
                    height: oh,
                    width: ow,
                    kh,
                    kw,
                    stride: *stride,
                    pad: *pad,
                    out_h: h,
                    out_w: w,
                };
                let in_plane = h * w;
                let rows = geom.col_rows();
                let mut cols = vec![0.0; rows * in_plane];
                let mut dx = self.needs(*x).then(|| vec![0.0; xv.numel()]);
                let mut dk = self.needs(*k).then(|| vec![0.0; kv.numel()]);
                for s in 0..n {
                    geom.im2col(
                        &g[s * geom.image_len()..(s + 1) * geom.image_len()],
                        &mut cols,
                    );
                    if let Some(dx) = dx.as_mut() {
                        let dst = &mut dx[s * c * in_plane..(s + 1) * c * in_plane];
                        gemm(c, rows, in_plane, kv.data(), false, &cols, false, 0.0, dst);
                    }
                    if let Some(dk) = dk.as_mut() {
                        let src = &xv.data()[s * c * in_plane..(s + 1) * c * in_plane];
                        gemm(c, in_plane, rows, src, false, &cols, true, 1.0, dk);
                    }
                }
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dk) = dk {
                    out.push((*k, dk));
                }
                if self.needs(*b) {
                    out.push((*b, channel_sums(g, n, f, oh * ow)));
                }
            }
            Op::Activation { x, kind } => {
                let xv = self.value(*x);
                let dx = xv
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| match kind {
                        Activation::Relu => {
                            if v > 0.0 {
                                gv
                            } else {
                                0.0
                            }
                        }
                        Activation::Silu => {
                            let s = sigmoid(v);
                            gv * s * (1.0 + v * (1.0 - s))
                        }
                    })
                    .collect();
                out.push((*x, dx));
            }
            Op::GlobalAvgPool { x } => {
                let xv = self.value(*x);
                let plane = xv.shape()[2] * xv.shape()[3];
                let mut dx = Vec::with_capacity(xv.numel());
                for &gv in g {
                    dx.extend(std::iter::repeat_n(gv / plane as f64, plane));
                }
                out.push((*x, dx));
            }
            Op::ChannelMul { x, s } => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let plane = xv.shape()[2] * xv.shape()[3];
                if self.needs(*x) {
                    let mut dx = g.to_vec();
                    for (p, &gate) in dx.chunks_mut(plane).zip(sv.data()) {
                        p.iter_mut().for_each(|v| *v *= gate);
                    }
                    out.push((*x, dx));
                }
                if self.needs(*s) {
                    let ds = xv
                        .data()
                        .chunks(plane)
                        .zip(g.chunks(plane))
                        .map(|(xp, gp)| xp.iter().zip(gp).map(|(a, b)| a * b).sum())
                        .collect();
                    out.push((*s, ds));
                }
            }
            Op::ChannelAdd { x, s } => {
                let xv = self.value(*x);
                let plane = xv.shape()[2] * xv.shape()[3];
                if self.needs(*x) {
                    out.push((*x, g.to_vec()));
                }
                if self.needs(*s) {
                    out.push((*s, g.chunks(plane).map(|p| p.iter().sum()).collect()));
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.needs(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::ConcatChannels { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = av.shape()[0];
                let (la, lb) = (av.numel() / n.max(1), bv.numel() / n.max(1));
                let mut da = Vec::with_capacity(av.numel());
                let mut db = Vec::with_capacity(bv.numel());
                for chunk in g.chunks(la + lb) {
                    da.extend_from_slice(&chunk[..la]);
                    db.extend_from_slice(&chunk[la..]);
                }
                if self.needs(*a) {
                    out.push((*a, da));
                }
                if self.needs(*b) {
                    out.push((*b, db));
                }
            }
            Op::Sum { x } => {
                out.push((*x, vec![g[0]; self.value(*x).numel()]));
            }
            Op::Mse { pred, target } => {
                let (pv, tv) = (self.value(*pred), self.value(*target));
                let scale = 2.0 * g[0] / pv.numel() as f64;
                let d: Vec<f64> = pv
                    .data()
                    .iter()
                    .zip(tv.data())
                    .map(|(p, t)| scale * (p - t))
                    .collect();
                if self.needs(*target) {
                    out.push((*target, d.iter().map(|v| -v).collect()));
                }
                if self.needs(*pred) {
                    out.push((*pred, d));
                }
            }
            Op::Custom { inputs, func } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.needs(*v)).collect();
                let grads = func.backward(&values, &node.value, g, &needs);
                for ((v, gi), need) in inputs.iter().zip(grads).zip(needs) {
                    if let (Some(gi), true) = (gi, need) {
                        out.push((*v, gi));
                    }
                }
            }
        }
        out
    }
}

fn channel_sums(g: &[f64], n: usize, f: usize, plane: usize) -> Vec<f64> {
    let mut db = vec![0.0; f];
    for s in 0..n {
        for (fi, acc) in db.iter_mut().enumerate() {
            let start = (s * f + fi) * plane;
            *acc += g[start..start + plane].iter().sum::<f64>();
        }
    }
    db
}
