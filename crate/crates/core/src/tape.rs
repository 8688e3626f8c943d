//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every op appends one node holding its forward value and the ids of its
//! inputs. [`Tape::backward`] walks the nodes once in reverse creation order,
//! so each node's output gradient is complete before its own vector-Jacobian
//! product runs. Nodes used several times (a tensor concatenated with itself,
//! a skip connection) accumulate gradient contributions by addition.

use crate::tensor::{
    self, bilinear_taps, check_conv_args, conv2d_backward, Shape4, Tensor4, UpsampleMode,
};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        x: ValueId,
        w: ValueId,
        b: ValueId,
        stride: usize,
        pad: usize,
    },
    Upsample {
        x: ValueId,
        factor: usize,
        mode: UpsampleMode,
    },
    AvgPool {
        x: ValueId,
        k: usize,
    },
    GlobalAvgPool {
        x: ValueId,
    },
    Relu {
        x: ValueId,
    },
    Sigmoid {
        x: ValueId,
    },
    ChannelSoftmax {
        x: ValueId,
    },
    ConcatChannels {
        xs: Vec<ValueId>,
    },
    SliceChannels {
        x: ValueId,
        start: usize,
        len: usize,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    Sub {
        a: ValueId,
        b: ValueId,
    },
    Mul {
        a: ValueId,
        b: ValueId,
    },
    MulChannelGate {
        x: ValueId,
        gate: ValueId,
    },
    // the shift is applied in the forward only; it drops out of the VJP
    Affine {
        x: ValueId,
        mul: f64,
    },
    Abs {
        x: ValueId,
    },
    Sum {
        x: ValueId,
    },
}

struct Node {
    value: Tensor4,
    op: Op,
}

/// Gradients produced by one backward pass, indexed by [`ValueId`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor4>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`, if `id` influenced the loss.
    pub fn get(&self, id: ValueId) -> Option<&Tensor4> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but a missing gradient is an error.
    pub fn expect(&self, id: ValueId, name: &str) -> Result<&Tensor4> {
        self.get(id)
            .ok_or_else(|| Error::MissingGradient(name.into()))
    }
}

/// Linear record of tensor ops; values live for the lifetime of the tape.
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

    fn push(&mut self, value: Tensor4, op: Op) -> ValueId {
        self.nodes.push(Node { value, op });
        ValueId(self.nodes.len() - 1)
    }

    /// Record an input tensor. Leaves have no inputs; backward stops here.
    pub fn leaf(&mut self, value: Tensor4) -> ValueId {
        self.push(value, Op::Leaf)
    }

    /// Record a 1x1x1x1 constant.
    pub fn scalar(&mut self, v: f64) -> ValueId {
        self.leaf(Tensor4::filled(Shape4::new(1, 1, 1, 1), v))
    }

    pub fn value(&self, id: ValueId) -> &Tensor4 {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: ValueId) -> Shape4 {
        self.nodes[id.0].value.shape()
    }

    // -- recorded ops -------------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: ValueId,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId> {
        check_conv_args(self.value(x), self.value(w), self.value(b), stride)?;
        let y = tensor::conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        Ok(self.push(
            y,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        ))
    }

    pub fn upsample(&mut self, x: ValueId, factor: usize, mode: UpsampleMode) -> Result<ValueId> {
        let y = tensor::upsample(self.value(x), factor, mode)?;
        Ok(self.push(y, Op::Upsample { x, factor, mode }))
    }

    pub fn avg_pool(&mut self, x: ValueId, k: usize) -> Result<ValueId> {
        let y = tensor::avg_pool(self.value(x), k)?;
        Ok(self.push(y, Op::AvgPool { x, k }))
    }

    pub fn global_avg_pool(&mut self, x: ValueId) -> ValueId {
        let y = tensor::global_avg_pool(self.value(x));
        self.push(y, Op::GlobalAvgPool { x })
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let y = tensor::relu(self.value(x));
        self.push(y, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let y = tensor::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid { x })
    }

    pub fn channel_softmax(&mut self, x: ValueId) -> Result<ValueId> {
        let y = tensor::channel_softmax(self.value(x))?;
        Ok(self.push(y, Op::ChannelSoftmax { x }))
    }

    pub fn concat_channels(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        let vals: Vec<&Tensor4> = xs.iter().map(|&id| self.value(id)).collect();
        let y = tensor::concat_channels(&vals)?;
        Ok(self.push(y, Op::ConcatChannels { xs: xs.to_vec() }))
    }

    /// The same 1-channel map stacked three times, for RGB-shaped consumers.
    pub fn replicate3(&mut self, x: ValueId) -> Result<ValueId> {
        self.concat_channels(&[x, x, x])
    }

    pub fn slice_channels(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let s = self.shape(x);
        if len == 0 || start + len > s.c {
            return Err(Error::InvalidArgument(format!(
                "slice_channels [{start}, {}) out of range for {} channels",
                start + len,
                s.c
            )));
        }
        let os = Shape4::new(s.n, len, s.h, s.w);
        let mut y = Tensor4::zeros(os);
        let plane = s.h * s.w;
        let src = self.value(x).data();
        for n in 0..s.n {
            let from = (n * s.c + start) * plane;
            let to = n * len * plane;
            y.data_mut()[to..to + len * plane].copy_from_slice(&src[from..from + len * plane]);
        }
        Ok(self.push(y, Op::SliceChannels { x, start, len }))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        Ok(self.push(y, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        Ok(self.push(y, Op::Mul { a, b }))
    }

    /// Scale each channel of `x` by gate[n, c, 0, 0] (squeeze-excite style).
    pub fn mul_channel_gate(&mut self, x: ValueId, gate: ValueId) -> Result<ValueId> {
        let s = self.shape(x);
        let gs = self.shape(gate);
        if gs != Shape4::new(s.n, s.c, 1, 1) {
            return Err(Error::ShapeMismatch {
                context: "mul_channel_gate".into(),
                expected: format!("{}x{}x1x1", s.n, s.c),
                found: gs.to_string(),
            });
        }
        let mut y = Tensor4::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                let g = self.value(gate).at(n, c, 0, 0);
                for yy in 0..s.h {
                    for xx in 0..s.w {
                        y.set(n, c, yy, xx, self.value(x).at(n, c, yy, xx) * g);
                    }
                }
            }
        }
        Ok(self.push(y, Op::MulChannelGate { x, gate }))
    }

    /// Elementwise `x * mul + add`.
    pub fn affine(&mut self, x: ValueId, mul: f64, add: f64) -> ValueId {
        let y = self.value(x).map(|v| v * mul + add);
        self.push(y, Op::Affine { x, mul })
    }

    pub fn abs(&mut self, x: ValueId) -> ValueId {
        let y = self.value(x).map(f64::abs);
        self.push(y, Op::Abs { x })
    }

    /// Sum of all entries, as a 1x1x1x1 tensor.
    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let y = Tensor4::filled(Shape4::new(1, 1, 1, 1), self.value(x).sum());
        self.push(y, Op::Sum { x })
    }

    /// Mean of all entries, as a 1x1x1x1 tensor.
    pub fn mean(&mut self, x: ValueId) -> ValueId {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.affine(s, 1.0 / n, 0.0)
    }

    // -- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Returns one gradient per reached node.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients> {
        let loss_val = self.value(loss);
        if !loss_val.is_scalar() {
            return Err(Error::NonScalarLoss(loss_val.shape().to_string()));
        }
        let mut grads: Vec<Option<Tensor4>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor4::filled(Shape4::new(1, 1, 1, 1), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.apply_vjp(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Tensor4>], id: ValueId, contrib: Tensor4) {
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(contrib.data().iter()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn apply_vjp(&self, node: usize, g: &Tensor4, grads: &mut [Option<Tensor4>]) {
        match &self.nodes[node].op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (dx, dw, db) =
                    conv2d_backward(self.value(*x), self.value(*w), *stride, *pad, g);
                Self::accumulate(grads, *x, dx);
                Self::accumulate(grads, *w, dw);
                Self::accumulate(grads, *b, db);
            }
            Op::Upsample { x, factor, mode } => {
                let s = self.shape(*x);
                let mut dx = Tensor4::zeros(s);
                let gs = g.shape();
                match mode {
                    UpsampleMode::Nearest => {
                        for n in 0..gs.n {
                            for c in 0..gs.c {
                                for oy in 0..gs.h {
                                    for ox in 0..gs.w {
                                        let i = s.idx(n, c, oy / factor, ox / factor);
                                        dx.data_mut()[i] += g.at(n, c, oy, ox);
                                    }
                                }
                            }
                        }
                    }
                    UpsampleMode::Bilinear => {
                        for n in 0..gs.n {
                            for c in 0..gs.c {
                                for oy in 0..gs.h {
                                    let (y0, y1, fy) = bilinear_taps(oy, *factor, s.h);
                                    for ox in 0..gs.w {
                                        let (x0, x1, fx) = bilinear_taps(ox, *factor, s.w);
                                        let gv = g.at(n, c, oy, ox);
                                        dx.data_mut()[s.idx(n, c, y0, x0)] +=
                                            gv * (1.0 - fy) * (1.0 - fx);
                                        dx.data_mut()[s.idx(n, c, y0, x1)] += gv * (1.0 - fy) * fx;
                                        dx.data_mut()[s.idx(n, c, y1, x0)] += gv * fy * (1.0 - fx);
                                        dx.data_mut()[s.idx(n, c, y1, x1)] += gv * fy * fx;
                                    }
                                }
                            }
                        }
                    }
                }
                Self::accumulate(grads, *x, dx);
            }
            Op::AvgPool { x, k } => {
                let s = self.shape(*x);
                let mut dx = Tensor4::zeros(s);
                let inv = 1.0 / (k * k) as f64;
                let gs = g.shape();
                for n in 0..gs.n {
                    for c in 0..gs.c {
                        for oy in 0..gs.h {
                            for ox in 0..gs.w {
                                let gv = g.at(n, c, oy, ox) * inv;
                                for dy in 0..*k {
                                    for dxx in 0..*k {
                                        let i = s.idx(n, c, oy * k + dy, ox * k + dxx);
                                        dx.data_mut()[i] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
                Self::accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool { x } => {
                let s = self.shape(*x);
                let inv = 1.0 / (s.h * s.w) as f64;
                let mut dx = Tensor4::zeros(s);
                for n in 0..s.n {
                    for c in 0..s.c {
                        let gv = g.at(n, c, 0, 0) * inv;
                        for yy in 0..s.h {
                            for xx in 0..s.w {
                                let i = s.idx(n, c, yy, xx);
                                dx.data_mut()[i] = gv;
                            }
                        }
                    }
                }
                Self::accumulate(grads, *x, dx);
            }
            Op::Relu { x } => {
                let dx = Tensor4::from_vec(
                    g.shape(),
                    self.value(*x)
                        .data()
                        .iter()
                        .zip(g.data().iter())
                        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                        .collect(),
                )
                .expect("relu grad shape");
                Self::accumulate(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                // d/dv sigmoid(v) = s (1 - s), with s the saved output
                let y = &self.nodes[node].value;
                let dx = Tensor4::from_vec(
                    g.shape(),
                    y.data()
                        .iter()
                        .zip(g.data().iter())
                        .map(|(&s, &gv)| gv * s * (1.0 - s))
                        .collect(),
                )
                .expect("sigmoid grad shape");
                Self::accumulate(grads, *x, dx);
            }
            Op::ChannelSoftmax { x } => {
                // dx_c = y_c (g_c - sum_k g_k y_k), per pixel
                let y = &self.nodes[node].value;
                let s = y.shape();
                let mut dx = Tensor4::zeros(s);
                for n in 0..s.n {
                    for yy in 0..s.h {
                        for xx in 0..s.w {
                            let mut dot = 0.0;
                            for c in 0..s.c {
                                dot += g.at(n, c, yy, xx) * y.at(n, c, yy, xx);
                            }
                            for c in 0..s.c {
                                let v = y.at(n, c, yy, xx) * (g.at(n, c, yy, xx) - dot);
                                dx.set(n, c, yy, xx, v);
                            }
                        }
                    }
                }
                Self::accumulate(grads, *x, dx);
            }
            Op::ConcatChannels { xs } => {
                let gs = g.shape();
                let plane = gs.h * gs.w;
                let mut start = 0;
                for &xid in xs {
                    let s = self.shape(xid);
                    let mut dx = Tensor4::zeros(s);
                    for n in 0..gs.n {
                        let from = (n * gs.c + start) * plane;
                        let to = n * s.c * plane;
                        dx.data_mut()[to..to + s.c * plane]
                            .copy_from_slice(&g.data()[from..from + s.c * plane]);
                    }
                    Self::accumulate(grads, xid, dx);
                    start += s.c;
                }
            }
            Op::SliceChannels { x, start, len } => {
                let s = self.shape(*x);
                let plane = s.h * s.w;
                let mut dx = Tensor4::zeros(s);
                for n in 0..s.n {
                    let to = (n * s.c + start) * plane;
                    let from = n * len * plane;
                    dx.data_mut()[to..to + len * plane]
                        .copy_from_slice(&g.data()[from..from + len * plane]);
                }
                Self::accumulate(grads, *x, dx);
            }
            Op::Add { a, b } => {
                Self::accumulate(grads, *a, g.clone());
                Self::accumulate(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                Self::accumulate(grads, *a, g.clone());
                Self::accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul { a, b } => {
                let da = g
                    .zip_map(self.value(*b), |gv, bv| gv * bv)
                    .expect("mul grad");
                let db = g
                    .zip_map(self.value(*a), |gv, av| gv * av)
                    .expect("mul grad");
                Self::accumulate(grads, *a, da);
                Self::accumulate(grads, *b, db);
            }
            Op::MulChannelGate { x, gate } => {
                let s = self.shape(*x);
                let mut dx = Tensor4::zeros(s);
                let mut dgate = Tensor4::zeros(Shape4::new(s.n, s.c, 1, 1));
                for n in 0..s.n {
                    for c in 0..s.c {
                        let gt = self.value(*gate).at(n, c, 0, 0);
                        let mut acc = 0.0;
                        for yy in 0..s.h {
                            for xx in 0..s.w {
                                let gv = g.at(n, c, yy, xx);
                                dx.set(n, c, yy, xx, gv * gt);
                                acc += gv * self.value(*x).at(n, c, yy, xx);
                            }
                        }
                        dgate.set(n, c, 0, 0, acc);
                    }
                }
                Self::accumulate(grads, *x, dx);
                Self::accumulate(grads, *gate, dgate);
            }
            Op::Affine { x, mul } => {
                Self::accumulate(grads, *x, g.map(|v| v * mul));
            }
            Op::Abs { x } => {
                // subgradient 0 at the kink
                let dx = Tensor4::from_vec(
                    g.shape(),
                    self.value(*x)
                        .data()
                        .iter()
                        .zip(g.data().iter())
                        .map(|(&v, &gv)| {
                            if v > 0.0 {
                                gv
                            } else if v < 0.0 {
                                -gv
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                )
                .expect("abs grad shape");
                Self::accumulate(grads, *x, dx);
            }
            Op::Sum { x } => {
                let s = self.shape(*x);
                Self::accumulate(grads, *x, Tensor4::filled(s, g.data()[0]));
            }
        }
    }
}
