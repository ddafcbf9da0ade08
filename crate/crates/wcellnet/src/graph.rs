//! Tape-based reverse-mode automatic differentiation over tensors.
//!
//! A [`Graph`] records every operation of one forward pass in execution
//! order together with the context its backward rule needs (pooling
//! argmax positions, normalization statistics). [`Graph::backward`]
//! walks the tape in exact reverse order and accumulates parameter
//! gradients into the [`ParamStore`].
//!
//! Graphs are cheap and short-lived: training builds a fresh one per
//! iteration. Construction and backward are single-threaded per graph;
//! the convolution kernels may parallelize internally across the batch
//! dimension only.

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

/// Momentum for the exponential moving average of batch statistics.
pub const BN_MOMENTUM: f32 = 0.99;
/// Numerical floor inside the normalization denominator.
pub const BN_EPS: f32 = 1e-5;

enum Op {
    Constant,
    Param(ParamId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        k: usize,
    },
    ConvTranspose2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    MaxPool2x2 {
        x: NodeId,
        argmax: Vec<u32>,
        in_len: usize,
    },
    NearestUp2 {
        x: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
        train: bool,
    },
    Relu {
        x: NodeId,
    },
    Tanh {
        x: NodeId,
    },
    Abs {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Div {
        a: NodeId,
        b: NodeId,
    },
    AddScalar {
        x: NodeId,
    },
    MulScalar {
        x: NodeId,
        c: f32,
    },
    SumAll {
        x: NodeId,
    },
    MeanAll {
        x: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    ConcatChannels {
        parts: Vec<NodeId>,
    },
    ReverseChannels {
        x: NodeId,
    },
    WindowCorr {
        x: NodeId,
        kernel: Tensor,
    },
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, false, Op::Constant)
    }

    /// A leaf bound to a stored parameter; backward accumulates into
    /// the store. Non-trainable entries enter as plain constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let p = store.get(id);
        if p.trainable {
            self.push(p.value.clone(), true, Op::Param(id))
        } else {
            self.push(p.value.clone(), false, Op::Constant)
        }
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let [n, ci, h, wd] = self.value(x).dims4()?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(Error::shape(format!("conv2d weight must be (co, ci, k, k) with odd k, got {ws:?}")));
        }
        if ws[1] != ci {
            return Err(Error::shape(format!(
                "conv2d input has {ci} channels, weight expects {}",
                ws[1]
            )));
        }
        let (co, k) = (ws[0], ws[2]);
        if self.value(b).shape() != [co] {
            return Err(Error::shape(format!("conv2d bias must be ({co},)")));
        }
        let out = kernels::conv2d_fwd(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            n,
            ci,
            h,
            wd,
            co,
            k,
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            Tensor::from_vec(&[n, co, h, wd], out)?,
            needs,
            Op::Conv2d { x, w, b, k },
        ))
    }

    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let [n, ci, h, wd] = self.value(x).dims4()?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[2] != 2 || ws[3] != 2 {
            return Err(Error::shape(format!(
                "conv_transpose2d weight must be (ci, co, 2, 2), got {ws:?}"
            )));
        }
        if ws[0] != ci {
            return Err(Error::shape(format!(
                "conv_transpose2d input has {ci} channels, weight expects {}",
                ws[0]
            )));
        }
        let co = ws[1];
        if self.value(b).shape() != [co] {
            return Err(Error::shape(format!("conv_transpose2d bias must be ({co},)")));
        }
        let out = kernels::conv_transpose2d_fwd(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            n,
            ci,
            h,
            wd,
            co,
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            Tensor::from_vec(&[n, co, 2 * h, 2 * wd], out)?,
            needs,
            Op::ConvTranspose2d { x, w, b },
        ))
    }

    pub fn maxpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!(
                "maxpool2x2 requires even spatial dims, got {h}x{w}"
            )));
        }
        let (out, argmax) = kernels::maxpool2x2_fwd(self.value(x).data(), n, c, h, w);
        let in_len = self.value(x).numel();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(&[n, c, h / 2, w / 2], out)?,
            needs,
            Op::MaxPool2x2 { x, argmax, in_len },
        ))
    }

    pub fn nearest_up2(&mut self, x: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let out = kernels::nearest_up2_fwd(self.value(x).data(), n, c, h, w);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(&[n, c, 2 * h, 2 * w], out)?,
            needs,
            Op::NearestUp2 { x },
        ))
    }

    /// Spatial batch normalization over (n, h, w) per channel.
    ///
    /// Train mode normalizes with batch statistics and folds them into
    /// the running buffers held by the store; eval mode normalizes with
    /// the running buffers (their zero-mean/unit-var initialization
    /// applies before any train step).
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        store: &mut ParamStore,
        run_mean: ParamId,
        run_var: ParamId,
        mode: Mode,
    ) -> Result<NodeId> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(format!(
                "batch_norm gamma/beta must be ({c},)"
            )));
        }
        let train = mode == Mode::Train;
        if train && n * h * w < 2 {
            return Err(Error::arg(
                "batch_norm train mode needs at least 2 values per channel",
            ));
        }
        let (mean, var) = if train {
            let (m, v) = kernels::channel_stats(self.value(x).data(), n, c, h, w);
            {
                let rm = store.value_mut(run_mean).data_mut();
                for (r, &b) in rm.iter_mut().zip(&m) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                }
                let rv = store.value_mut(run_var).data_mut();
                for (r, &b) in rv.iter_mut().zip(&v) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                }
            }
            (m, v)
        } else {
            (
                store.value(run_mean).data().to_vec(),
                store.value(run_var).data().to_vec(),
            )
        };
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();

        let plane = h * w;
        let gam = self.value(gamma).data().to_vec();
        let bet = self.value(beta).data().to_vec();
        let mut out = vec![0.0f32; n * c * plane];
        let xd = self.value(x).data();
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                let (m, is, g, bt) = (mean[ch], inv_std[ch], gam[ch], bet[ch]);
                for i in base..base + plane {
                    out[i] = (xd[i] - m) * is * g + bt;
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::from_vec(&[n, c, h, w], out)?,
            needs,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            },
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(out, needs, Op::Relu { x })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(f32::tanh);
        let needs = self.needs(x);
        self.push(out, needs, Op::Tanh { x })
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(f32::abs);
        let needs = self.needs(x);
        self.push(out, needs, Op::Abs { x })
    }

    fn binary(&mut self, a: NodeId, b: NodeId, name: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{name}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add")?;
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::from_vec(self.value(a).shape(), out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, needs, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub")?;
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::from_vec(self.value(a).shape(), out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, needs, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul")?;
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::from_vec(self.value(a).shape(), out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, needs, Op::Mul { a, b }))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "div")?;
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x / y)
            .collect();
        let t = Tensor::from_vec(self.value(a).shape(), out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, needs, Op::Div { a, b }))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f32) -> NodeId {
        let out = self.value(x).map(|v| v + c);
        let needs = self.needs(x);
        self.push(out, needs, Op::AddScalar { x })
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: f32) -> NodeId {
        let out = self.value(x).map(|v| v * c);
        let needs = self.needs(x);
        self.push(out, needs, Op::MulScalar { x, c })
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f32 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), needs, Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel();
        let s: f32 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s / n as f32), needs, Op::MeanAll { x })
    }

    /// Reinterprets the buffer under a new shape of equal element count.
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.value(x).shape(),
                shape
            )));
        }
        let t = Tensor::from_vec(shape, self.value(x).data().to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(t, needs, Op::Reshape { x }))
    }

    /// Concatenation along the channel dimension of (n, c, h, w) parts.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::arg("concat_channels of zero parts"));
        }
        let [n, _, h, w] = self.value(parts[0]).dims4()?;
        let mut channels = 0usize;
        for &p in parts {
            let [pn, pc, ph, pw] = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape(format!(
                    "concat_channels: part {:?} incompatible with {:?}",
                    self.value(p).shape(),
                    self.value(parts[0]).shape()
                )));
            }
            channels += pc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * channels * plane);
        for s in 0..n {
            for &p in parts {
                let [_, pc, ..] = self.value(p).dims4()?;
                let d = self.value(p).data();
                out.extend_from_slice(&d[s * pc * plane..(s + 1) * pc * plane]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_vec(&[n, channels, h, w], out)?,
            needs,
            Op::ConcatChannels {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Flips the channel order of an (n, c, h, w) tensor.
    pub fn reverse_channels(&mut self, x: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let t = reverse_channel_data(self.value(x).data(), n, c, h * w);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(&[n, c, h, w], t)?,
            needs,
            Op::ReverseChannels { x },
        ))
    }

    /// Depthwise valid correlation with a fixed (non-learned) kernel.
    pub fn window_corr(&mut self, x: NodeId, kernel: &Tensor) -> Result<NodeId> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let ks = kernel.shape();
        if ks.len() != 2 {
            return Err(Error::shape("window kernel must be rank 2"));
        }
        let (kh, kw) = (ks[0], ks[1]);
        if h < kh || w < kw {
            return Err(Error::shape(format!(
                "image {h}x{w} smaller than window {kh}x{kw}"
            )));
        }
        let out = kernels::depthwise_valid_corr(self.value(x).data(), kernel.data(), n * c, h, w, kh, kw);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(&[n, c, h - kh + 1, w - kw + 1], out)?,
            needs,
            Op::WindowCorr {
                x,
                kernel: kernel.clone(),
            },
        ))
    }

    /// Reverse-mode sweep from a scalar loss node. Parameter gradients
    /// are added into the store (call [`ParamStore::zero_grads`] between
    /// independent passes).
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::arg(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut grads, store);
        }
        Ok(())
    }

    fn propagate(
        &self,
        id: usize,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
        store: &mut ParamStore,
    ) {
        let acc = |grads: &mut [Option<Vec<f32>>], target: NodeId, this: &Graph, f: &mut dyn FnMut(&mut [f32])| {
            if !this.nodes[target.0].needs_grad {
                return;
            }
            let buf = grads[target.0]
                .get_or_insert_with(|| vec![0.0; this.nodes[target.0].value.numel()]);
            f(buf);
        };

        match &self.nodes[id].op {
            Op::Constant => {}
            Op::Param(pid) => store.accumulate_grad(*pid, g),
            Op::Conv2d { x, w, b, k } => {
                let [n, ci, h, wd] = self.nodes[x.0].value.dims4().unwrap();
                let co = self.nodes[b.0].value.numel();
                if self.needs(*x) {
                    let dx = kernels::conv2d_bwd_input(
                        g,
                        self.nodes[w.0].value.data(),
                        n,
                        ci,
                        h,
                        wd,
                        co,
                        *k,
                    );
                    acc(grads, *x, self, &mut |buf| add_into(buf, &dx));
                }
                if self.needs(*w) || self.needs(*b) {
                    let (dw, db) = kernels::conv2d_bwd_params(
                        self.nodes[x.0].value.data(),
                        g,
                        n,
                        ci,
                        h,
                        wd,
                        co,
                        *k,
                    );
                    acc(grads, *w, self, &mut |buf| add_into(buf, &dw));
                    acc(grads, *b, self, &mut |buf| add_into(buf, &db));
                }
            }
            Op::ConvTranspose2d { x, w, b } => {
                let [n, ci, h, wd] = self.nodes[x.0].value.dims4().unwrap();
                let co = self.nodes[b.0].value.numel();
                if self.needs(*x) {
                    let dx = kernels::conv_transpose2d_bwd_input(
                        g,
                        self.nodes[w.0].value.data(),
                        n,
                        ci,
                        h,
                        wd,
                        co,
                    );
                    acc(grads, *x, self, &mut |buf| add_into(buf, &dx));
                }
                if self.needs(*w) || self.needs(*b) {
                    let (dw, db) = kernels::conv_transpose2d_bwd_params(
                        self.nodes[x.0].value.data(),
                        g,
                        n,
                        ci,
                        h,
                        wd,
                        co,
                    );
                    acc(grads, *w, self, &mut |buf| add_into(buf, &dw));
                    acc(grads, *b, self, &mut |buf| add_into(buf, &db));
                }
            }
            Op::MaxPool2x2 { x, argmax, in_len } => {
                let dx = kernels::maxpool2x2_bwd(g, argmax, *in_len);
                acc(grads, *x, self, &mut |buf| add_into(buf, &dx));
            }
            Op::NearestUp2 { x } => {
                let [n, c, h, w] = self.nodes[x.0].value.dims4().unwrap();
                let dx = kernels::nearest_up2_bwd(g, n, c, h, w);
                acc(grads, *x, self, &mut |buf| add_into(buf, &dx));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let [n, c, h, w] = self.nodes[x.0].value.dims4().unwrap();
                let plane = h * w;
                let cnt = (n * plane) as f32;
                let xd = self.nodes[x.0].value.data();
                let gam = self.nodes[gamma.0].value.data();

                // per-channel reductions of g and g * xhat
                let mut sum_g = vec![0.0f32; c];
                let mut sum_gx = vec![0.0f32; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        let (m, is) = (mean[ch], inv_std[ch]);
                        let mut sg = 0.0f32;
                        let mut sgx = 0.0f32;
                        for i in base..base + plane {
                            let xh = (xd[i] - m) * is;
                            sg += g[i];
                            sgx += g[i] * xh;
                        }
                        sum_g[ch] += sg;
                        sum_gx[ch] += sgx;
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0f32; xd.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * plane;
                            let (m, is, gm) = (mean[ch], inv_std[ch], gam[ch]);
                            if *train {
                                let (sg, sgx) = (sum_g[ch], sum_gx[ch]);
                                for i in base..base + plane {
                                    let xh = (xd[i] - m) * is;
                                    dx[i] = gm * is / cnt * (cnt * g[i] - sg - xh * sgx);
                                }
                            } else {
                                for i in base..base + plane {
                                    dx[i] = g[i] * gm * is;
                                }
                            }
                        }
                    }
                    acc(grads, *x, self, &mut |buf| add_into(buf, &dx));
                }
                acc(grads, *gamma, self, &mut |buf| add_into(buf, &sum_gx));
                acc(grads, *beta, self, &mut |buf| add_into(buf, &sum_g));
            }
            Op::Relu { x } => {
                let xd = self.nodes[x.0].value.data();
                acc(grads, *x, self, &mut |buf| {
                    for ((b, &gv), &xv) in buf.iter_mut().zip(g).zip(xd) {
                        if xv > 0.0 {
                            *b += gv;
                        }
                    }
                });
            }
            Op::Tanh { x } => {
                let yd = self.nodes[id].value.data();
                acc(grads, *x, self, &mut |buf| {
                    for ((b, &gv), &yv) in buf.iter_mut().zip(g).zip(yd) {
                        *b += gv * (1.0 - yv * yv);
                    }
                });
            }
            Op::Abs { x } => {
                let xd = self.nodes[x.0].value.data();
                acc(grads, *x, self, &mut |buf| {
                    for ((b, &gv), &xv) in buf.iter_mut().zip(g).zip(xd) {
                        if xv > 0.0 {
                            *b += gv;
                        } else if xv < 0.0 {
                            *b -= gv;
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                acc(grads, *a, self, &mut |buf| add_into(buf, g));
                acc(grads, *b, self, &mut |buf| add_into(buf, g));
            }
            Op::Sub { a, b } => {
                acc(grads, *a, self, &mut |buf| add_into(buf, g));
                acc(grads, *b, self, &mut |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o -= gv;
                    }
                });
            }
            Op::Mul { a, b } => {
                let ad = self.nodes[a.0].value.data();
                let bd = self.nodes[b.0].value.data();
                acc(grads, *a, self, &mut |buf| {
                    for ((o, &gv), &bv) in buf.iter_mut().zip(g).zip(bd) {
                        *o += gv * bv;
                    }
                });
                acc(grads, *b, self, &mut |buf| {
                    for ((o, &gv), &av) in buf.iter_mut().zip(g).zip(ad) {
                        *o += gv * av;
                    }
                });
            }
            Op::Div { a, b } => {
                let bd = self.nodes[b.0].value.data();
                let yd = self.nodes[id].value.data();
                acc(grads, *a, self, &mut |buf| {
                    for ((o, &gv), &bv) in buf.iter_mut().zip(g).zip(bd) {
                        *o += gv / bv;
                    }
                });
                acc(grads, *b, self, &mut |buf| {
                    for (((o, &gv), &bv), &yv) in buf.iter_mut().zip(g).zip(bd).zip(yd) {
                        *o -= gv * yv / bv;
                    }
                });
            }
            Op::AddScalar { x } => {
                acc(grads, *x, self, &mut |buf| add_into(buf, g));
            }
            Op::MulScalar { x, c } => {
                acc(grads, *x, self, &mut |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += gv * c;
                    }
                });
            }
            Op::SumAll { x } => {
                let gv = g[0];
                acc(grads, *x, self, &mut |buf| {
                    for o in buf.iter_mut() {
                        *o += gv;
                    }
                });
            }
            Op::MeanAll { x } => {
                let gv = g[0] / self.nodes[x.0].value.numel() as f32;
                acc(grads, *x, self, &mut |buf| {
                    for o in buf.iter_mut() {
                        *o += gv;
                    }
                });
            }
            Op::Reshape { x } => {
                acc(grads, *x, self, &mut |buf| add_into(buf, g));
            }
            Op::ConcatChannels { parts } => {
                let [n, _, h, w] = self.nodes[id].value.dims4().unwrap();
                let plane = h * w;
                let total: usize = self.nodes[id].value.shape()[1];
                let mut offset = 0usize;
                for &p in parts {
                    let pc = self.nodes[p.0].value.shape()[1];
                    if self.needs(p) {
                        let mut dp = vec![0.0f32; n * pc * plane];
                        for s in 0..n {
                            let src = &g[(s * total + offset) * plane..(s * total + offset + pc) * plane];
                            dp[s * pc * plane..(s + 1) * pc * plane].copy_from_slice(src);
                        }
                        acc(grads, p, self, &mut |buf| add_into(buf, &dp));
                    }
                    offset += pc;
                }
            }
            Op::ReverseChannels { x } => {
                let [n, c, h, w] = self.nodes[id].value.dims4().unwrap();
                let dg = reverse_channel_data(g, n, c, h * w);
                acc(grads, *x, self, &mut |buf| add_into(buf, &dg));
            }
            Op::WindowCorr { x, kernel } => {
                let [n, c, h, w] = self.nodes[x.0].value.dims4().unwrap();
                let ks = kernel.shape();
                let dx = kernels::depthwise_valid_corr_bwd(
                    g,
                    kernel.data(),
                    n * c,
                    h,
                    w,
                    ks[0],
                    ks[1],
                );
                acc(grads, *x, self, &mut |buf| add_into(buf, &dx));
            }
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    debug_assert_eq!(dst.len(), src.len());
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn reverse_channel_data(x: &[f32], n: usize, c: usize, plane: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for s in 0..n {
        for ch in 0..c {
            let src = &x[(s * c + ch) * plane..(s * c + ch + 1) * plane];
            let dst = &mut out[(s * c + (c - 1 - ch)) * plane..(s * c + (c - ch)) * plane];
            dst.copy_from_slice(src);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.register(name, t, true).unwrap();
        (s, id)
    }

    #[test]
    fn sum_grad_is_ones() {
        let (mut store, pid) = store_with("x", Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap());
        let mut g = Graph::new();
        let x = g.param(&store, pid);
        let loss = g.sum_all(x);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(pid).data(), &[1.0; 4]);
    }

    #[test]
    fn zero_weighted_loss_gives_zero_grad() {
        let (mut store, pid) = store_with("x", Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let mut g = Graph::new();
        let x = g.param(&store, pid);
        let s = g.sum_all(x);
        let loss = g.mul_scalar(s, 0.0);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(pid).data(), &[0.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let (mut store, pid) = store_with("x", Tensor::zeros(&[2, 2]));
        let mut g = Graph::new();
        let x = g.param(&store, pid);
        assert!(g.backward(x, &mut store).is_err());
    }

    #[test]
    fn two_backwards_double_grads() {
        let (mut store, pid) = store_with("x", Tensor::from_vec(&[2], vec![3.0, 5.0]).unwrap());
        let mut g = Graph::new();
        let x = g.param(&store, pid);
        let y = g.mul(x, x).unwrap();
        let loss = g.sum_all(y);
        g.backward(loss, &mut store).unwrap();
        let first: Vec<f32> = store.grad(pid).data().to_vec();
        g.backward(loss, &mut store).unwrap();
        let second: Vec<f32> = store.grad(pid).data().to_vec();
        assert_eq!(first, vec![6.0, 10.0]);
        assert_eq!(second, vec![12.0, 20.0]);
    }

    #[test]
    fn relu_tanh_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let t = g.tanh(x);
        assert_eq!(g.value(t).data()[1], 0.0);
    }

    #[test]
    fn tanh_grad_at_zero_is_one() {
        let (mut store, pid) = store_with("x", Tensor::scalar(0.0));
        let mut g = Graph::new();
        let x = g.param(&store, pid);
        let y = g.tanh(x);
        let loss = g.sum_all(y);
        g.backward(loss, &mut store).unwrap();
        assert!((store.grad(pid).data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn reverse_is_involution_and_concat_splits() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let r = g.reverse_channels(a).unwrap();
        assert_eq!(g.value(r).data(), &[3.0, 4.0, 1.0, 2.0]);
        let rr = g.reverse_channels(r).unwrap();
        assert_eq!(g.value(rr).data(), g.value(a).data());

        let b = g.constant(Tensor::from_vec(&[1, 1, 1, 2], vec![9.0, 8.0]).unwrap());
        let cat = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.value(cat).shape(), &[1, 3, 1, 2]);
        assert_eq!(g.value(cat).data(), &[1.0, 2.0, 3.0, 4.0, 9.0, 8.0]);
        // round-trip back out
        let back = g.value(cat).slice_channels(0, 2).unwrap();
        assert_eq!(back.data(), g.value(a).data());
    }

    #[test]
    fn single_part_concat_is_identity() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(&[1, 2, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap());
        let cat = g.concat_channels(&[a]).unwrap();
        assert_eq!(g.value(cat).data(), g.value(a).data());
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[3, 1, 3, 3]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert!(g.conv2d(x, w, b).is_err());
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(g.maxpool2x2(x).is_err());
    }

    #[test]
    fn batch_norm_normalizes_and_eval_uses_running() {
        let mut store = ParamStore::new();
        let gamma = store.register("g", Tensor::full(&[1], 1.0), true).unwrap();
        let beta = store.register("b", Tensor::zeros(&[1]), true).unwrap();
        let rm = store.register("rm", Tensor::zeros(&[1]), false).unwrap();
        let rv = store.register("rv", Tensor::full(&[1], 1.0), false).unwrap();

        let data: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[1, 1, 4, 4], data).unwrap());
        let gn = g.param(&store, gamma);
        let bn = g.param(&store, beta);
        let y = g
            .batch_norm(x, gn, bn, &mut store, rm, rv, Mode::Train)
            .unwrap();
        let out = g.value(y).data();
        let mean: f32 = out.iter().sum::<f32>() / 16.0;
        let var: f32 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 16.0;
        assert!(mean.abs() < 1e-4, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "var {var}");
        // running stats moved toward the batch stats
        assert!(store.value(rm).data()[0] > 0.0);

        // gamma = 0 makes the output equal beta
        let mut store2 = ParamStore::new();
        let g0 = store2.register("g", Tensor::zeros(&[1]), true).unwrap();
        let b0 = store2.register("b", Tensor::full(&[1], 0.25), true).unwrap();
        let rm2 = store2.register("rm", Tensor::zeros(&[1]), false).unwrap();
        let rv2 = store2.register("rv", Tensor::full(&[1], 1.0), false).unwrap();
        let mut g2 = Graph::new();
        let x2 = g2.constant(Tensor::from_vec(&[1, 1, 2, 2], vec![5.0, 1.0, -2.0, 0.5]).unwrap());
        let gn2 = g2.param(&store2, g0);
        let bn2 = g2.param(&store2, b0);
        let y2 = g2
            .batch_norm(x2, gn2, bn2, &mut store2, rm2, rv2, Mode::Train)
            .unwrap();
        assert!(g2.value(y2).data().iter().all(|&v| v == 0.25));
    }
}
