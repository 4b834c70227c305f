//! Reverse-mode tape.
//!
//! Every operation appends one node holding its output value and enough
//! context to replay its backward rule. Parameters are leaves created before
//! `freeze_leaves`; everything appended afterwards is wiped by `reset`, so a
//! training step is: forward, backward, optimizer step, reset.

use crate::error::{Error, Result};
use crate::kernels::{self, BnSaved, ConvDims, RunningStats};
use crate::tensor::{Elem, LabelMap, Shape, Tensor};

/// Index of a node on the tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct NodeId(pub(crate) usize);

pub enum Phase {
    Train,
    Eval,
}

impl Phase {
    pub fn is_train(&self) -> bool {
        matches!(self, Phase::Train)
    }
}

enum Op<E: Elem> {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    MaxPool2 {
        input: NodeId,
        argmax: Vec<u32>,
    },
    Upsample2 {
        input: NodeId,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        saved: BnSaved<E>,
    },
    Relu {
        input: NodeId,
    },
    Sigmoid {
        input: NodeId,
    },
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    GlobalAvgPool {
        input: NodeId,
    },
    SoftmaxCe {
        logits: NodeId,
        probs: Vec<E>,
        labels: LabelMap,
        ignore: Option<u8>,
        count: usize,
    },
    /// Multiply channel c of sample n by factors[n * c_total + c].
    ScaleChannels {
        input: NodeId,
        factors: Vec<E>,
    },
    /// Broadcast-multiply by a (n, c, 1, 1) gate; gradients flow to both.
    MulGate {
        input: NodeId,
        gate: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        input: NodeId,
        factor: E,
    },
    Sum {
        input: NodeId,
    },
}

struct Node<E: Elem> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
}

pub struct Graph<E: Elem> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
    watermark: usize,
    backward_done: bool,
}

impl<E: Elem> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Graph<E> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            watermark: 0,
            backward_done: false,
        }
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> NodeId {
        debug_assert!(
            value.all_finite(),
            "non-finite value produced by op on node {}",
            self.nodes.len()
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Add a trainable leaf (parameter).
    pub fn param(&mut self, value: Tensor<E>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Add a non-trainable leaf (input data, constants).
    pub fn constant(&mut self, value: Tensor<E>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Mark the current node count as the permanent leaf section. `reset`
    /// truncates back to this point.
    pub fn freeze_leaves(&mut self) {
        self.watermark = self.nodes.len();
    }

    /// Drop everything appended after `freeze_leaves` and clear gradients.
    pub fn reset(&mut self) {
        self.nodes.truncate(self.watermark);
        self.grads.truncate(self.watermark);
        for g in &mut self.grads {
            *g = None;
        }
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Mutable access to a leaf's value (optimizer updates, checkpoint load).
    pub fn leaf_value_mut(&mut self, id: NodeId) -> &mut Tensor<E> {
        assert!(
            matches!(self.nodes[id.0].op, Op::Leaf),
            "leaf_value_mut on non-leaf node"
        );
        &mut self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[E]> {
        self.grads[id.0].as_deref()
    }

    // ---- operations ----

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let xs = self.value(input).shape();
        let ks = self.value(kernel).shape();
        let bs = self.value(bias).shape();
        if stride < 1 {
            return Err(Error::shape("conv2d", "stride must be >= 1"));
        }
        if xs.c != ks.c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels but kernel expects {}", xs.c, ks.c),
            ));
        }
        if bs.numel() != ks.n {
            return Err(Error::shape(
                "conv2d",
                format!("bias has {} values for {} output channels", bs.numel(), ks.n),
            ));
        }
        let dims = ConvDims::infer(xs, ks, stride, padding).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("kernel {}x{} larger than padded input {}x{}", ks.h, ks.w, xs.h, xs.w),
            )
        })?;
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            &dims,
        );
        let shape = Shape::new(dims.batch, dims.out_ch, dims.out_h, dims.out_w);
        let rg = self.needs_grad(&[input, kernel, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId> {
        let xs = self.value(input).shape();
        if xs.h % 2 != 0 || xs.w % 2 != 0 {
            return Err(Error::shape(
                "maxpool2",
                format!("spatial dims {}x{} must be even", xs.h, xs.w),
            ));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.value(input).data(), xs);
        let shape = Shape::new(xs.n, xs.c, xs.h / 2, xs.w / 2);
        let rg = self.needs_grad(&[input]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxPool2 { input, argmax }, rg))
    }

    pub fn upsample_nearest2(&mut self, input: NodeId) -> Result<NodeId> {
        let xs = self.value(input).shape();
        let out = kernels::upsample_nearest2_forward(self.value(input).data(), xs);
        let shape = Shape::new(xs.n, xs.c, xs.h * 2, xs.w * 2);
        let rg = self.needs_grad(&[input]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Upsample2 { input }, rg))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
            return Err(Error::shape(
                "concat_channels",
                format!("operands {sa} and {sb} differ outside the channel dim"),
            ));
        }
        let shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let plane = sa.h * sa.w;
        let mut out = Vec::with_capacity(shape.numel());
        let da = self.value(a).data();
        let db = self.value(b).data();
        for n in 0..sa.n {
            out.extend_from_slice(&da[n * sa.c * plane..(n + 1) * sa.c * plane]);
            out.extend_from_slice(&db[n * sb.c * plane..(n + 1) * sb.c * plane]);
        }
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { a, b }, rg))
    }

    pub fn batch_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        phase: &Phase,
        stats: &mut RunningStats<E>,
    ) -> Result<NodeId> {
        let xs = self.value(input).shape();
        if self.value(gamma).shape().numel() != xs.c || self.value(beta).shape().numel() != xs.c {
            return Err(Error::shape(
                "batch_norm",
                format!("gamma/beta must have {} values", xs.c),
            ));
        }
        let train = phase.is_train();
        if train && xs.n * xs.h * xs.w == 1 {
            return Err(Error::shape(
                "batch_norm",
                "batch size 1 with spatial size 1 has zero variance in train mode",
            ));
        }
        let (out, saved) = kernels::batch_norm_forward(
            self.value(input).data(),
            xs,
            self.value(gamma).data(),
            self.value(beta).data(),
            train,
            stats,
        );
        let rg = self.needs_grad(&[input, gamma, beta]);
        Ok(self.push(
            Tensor::new(xs, out)?,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out: Vec<E> = self
            .value(input)
            .data()
            .iter()
            .map(|&v| v.max(E::zero()))
            .collect();
        let shape = self.value(input).shape();
        let rg = self.needs_grad(&[input]);
        self.push(Tensor::new(shape, out).unwrap(), Op::Relu { input }, rg)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let out: Vec<E> = self
            .value(input)
            .data()
            .iter()
            .map(|&v| E::one() / (E::one() + (-v).exp()))
            .collect();
        let shape = self.value(input).shape();
        let rg = self.needs_grad(&[input]);
        self.push(Tensor::new(shape, out).unwrap(), Op::Sigmoid { input }, rg)
    }

    /// Fully connected layer on (n, c, 1, 1) vectors: y = x W^T + b.
    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.value(input).shape();
        let ws = self.value(weight).shape();
        if xs.h != 1 || xs.w != 1 {
            return Err(Error::shape(
                "dense",
                format!("input {xs} must be (n, c, 1, 1)"),
            ));
        }
        if ws.c != xs.c {
            return Err(Error::shape(
                "dense",
                format!("weight expects {} inputs, got {}", ws.c, xs.c),
            ));
        }
        if self.value(bias).shape().numel() != ws.n {
            return Err(Error::shape(
                "dense",
                format!("bias must have {} values", ws.n),
            ));
        }
        let (n, cin, cout) = (xs.n, xs.c, ws.n);
        let mut out = vec![E::zero(); n * cout];
        unsafe {
            E::gemm(
                n,
                cin,
                cout,
                E::one(),
                self.value(input).data().as_ptr(),
                cin as isize,
                1,
                self.value(weight).data().as_ptr(),
                1,
                cin as isize,
                E::zero(),
                out.as_mut_ptr(),
                cout as isize,
                1,
            );
        }
        let b = self.value(bias).data();
        for row in out.chunks_exact_mut(cout) {
            for (o, v) in row.iter_mut().enumerate() {
                *v = *v + b[o];
            }
        }
        let rg = self.needs_grad(&[input, weight, bias]);
        Ok(self.push(
            Tensor::new(Shape::new(n, cout, 1, 1), out)?,
            Op::Dense {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> NodeId {
        let xs = self.value(input).shape();
        let plane = xs.h * xs.w;
        let inv = E::one() / E::from_f64(plane as f64);
        let data = self.value(input).data();
        let mut out = Vec::with_capacity(xs.n * xs.c);
        for nc in 0..xs.n * xs.c {
            let sum: E = data[nc * plane..(nc + 1) * plane].iter().copied().sum();
            out.push(sum * inv);
        }
        let rg = self.needs_grad(&[input]);
        self.push(
            Tensor::new(Shape::new(xs.n, xs.c, 1, 1), out).unwrap(),
            Op::GlobalAvgPool { input },
            rg,
        )
    }

    /// Mean softmax cross entropy over all pixels whose label is not `ignore`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &LabelMap,
        ignore: Option<u8>,
    ) -> Result<NodeId> {
        let ls = self.value(logits).shape();
        if labels.n != ls.n || labels.h != ls.h || labels.w != ls.w {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("labels {}x{}x{} do not match logits {ls}", labels.n, labels.h, labels.w),
            ));
        }
        labels.validate(ls.c, ignore)?;
        let plane = ls.h * ls.w;
        let data = self.value(logits).data();
        let mut probs = vec![E::zero(); data.len()];
        let mut loss = E::zero();
        let mut count = 0usize;
        for n in 0..ls.n {
            for y in 0..ls.h {
                for x in 0..ls.w {
                    let pix = y * ls.w + x;
                    let mut maxv = E::neg_infinity();
                    for c in 0..ls.c {
                        maxv = maxv.max(data[(n * ls.c + c) * plane + pix]);
                    }
                    let mut denom = E::zero();
                    for c in 0..ls.c {
                        let e = (data[(n * ls.c + c) * plane + pix] - maxv).exp();
                        probs[(n * ls.c + c) * plane + pix] = e;
                        denom = denom + e;
                    }
                    for c in 0..ls.c {
                        probs[(n * ls.c + c) * plane + pix] =
                            probs[(n * ls.c + c) * plane + pix] / denom;
                    }
                    let label = labels.at(n, y, x);
                    if Some(label) == ignore {
                        continue;
                    }
                    count += 1;
                    let p = probs[(n * ls.c + label as usize) * plane + pix];
                    loss = loss - p.max(E::from_f64(1e-30)).ln();
                }
            }
        }
        if count == 0 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                "every pixel is ignored; loss undefined",
            ));
        }
        loss = loss / E::from_f64(count as f64);
        let rg = self.needs_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.clone(),
                ignore,
                count,
            },
            rg,
        ))
    }

    /// Multiply each (sample, channel) plane by a factor. `factors` has one
    /// entry per channel (broadcast over the batch) or one per sample-channel.
    pub fn scale_channels(&mut self, input: NodeId, factors: &[E]) -> Result<NodeId> {
        let xs = self.value(input).shape();
        let per_nc: Vec<E> = if factors.len() == xs.c {
            (0..xs.n * xs.c).map(|i| factors[i % xs.c]).collect()
        } else if factors.len() == xs.n * xs.c {
            factors.to_vec()
        } else {
            return Err(Error::shape(
                "scale_channels",
                format!(
                    "need {} or {} factors for shape {xs}, got {}",
                    xs.c,
                    xs.n * xs.c,
                    factors.len()
                ),
            ));
        };
        let plane = xs.h * xs.w;
        let data = self.value(input).data();
        let mut out = vec![E::zero(); data.len()];
        for nc in 0..xs.n * xs.c {
            let f = per_nc[nc];
            for i in nc * plane..(nc + 1) * plane {
                out[i] = data[i] * f;
            }
        }
        let rg = self.needs_grad(&[input]);
        Ok(self.push(
            Tensor::new(xs, out)?,
            Op::ScaleChannels {
                input,
                factors: per_nc,
            },
            rg,
        ))
    }

    /// Multiply by a per-channel gate of shape (n, c, 1, 1), broadcast over
    /// the spatial dims. Both operands receive gradients.
    pub fn mul_channel_gate(&mut self, input: NodeId, gate: NodeId) -> Result<NodeId> {
        let xs = self.value(input).shape();
        let gs = self.value(gate).shape();
        if gs.n != xs.n || gs.c != xs.c || gs.h != 1 || gs.w != 1 {
            return Err(Error::shape(
                "mul_channel_gate",
                format!("gate {gs} must be ({}, {}, 1, 1)", xs.n, xs.c),
            ));
        }
        let plane = xs.h * xs.w;
        let data = self.value(input).data();
        let g = self.value(gate).data();
        let mut out = vec![E::zero(); data.len()];
        for nc in 0..xs.n * xs.c {
            for i in nc * plane..(nc + 1) * plane {
                out[i] = data[i] * g[nc];
            }
        }
        let rg = self.needs_grad(&[input, gate]);
        Ok(self.push(Tensor::new(xs, out)?, Op::MulGate { input, gate }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape("add", format!("{sa} vs {sb}")));
        }
        let out: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Tensor::new(sa, out)?, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape("mul", format!("{sa} vs {sb}")));
        }
        let out: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Tensor::new(sa, out)?, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, input: NodeId, factor: E) -> NodeId {
        let shape = self.value(input).shape();
        let out: Vec<E> = self.value(input).data().iter().map(|&v| v * factor).collect();
        let rg = self.needs_grad(&[input]);
        self.push(
            Tensor::new(shape, out).unwrap(),
            Op::Scale { input, factor },
            rg,
        )
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let total: E = self.value(input).data().iter().copied().sum();
        let rg = self.needs_grad(&[input]);
        self.push(Tensor::scalar(total), Op::Sum { input }, rg)
    }

    // ---- backward ----

    /// Accumulate gradients for every `requires_grad` node reachable from
    /// `loss`. Unreached `requires_grad` nodes receive zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Tape(
                "backward already ran on this tape; call reset first".into(),
            ));
        }
        if !self.value(loss).shape().is_scalar() {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got {}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            // nothing reachable is trainable; still zero-fill leaf grads below
        } else {
            self.grads[loss.0] = Some(vec![E::one()]);
        }

        for id in (0..=loss.0).rev() {
            if self.grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = self.grads[id].take().unwrap();
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }

        for id in 0..self.nodes.len() {
            if self.nodes[id].requires_grad && self.grads[id].is_none() {
                self.grads[id] = Some(vec![E::zero(); self.nodes[id].value.shape().numel()]);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, target: NodeId, contribution: Vec<E>) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut self.grads[target.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e = *e + c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&mut self, id: usize, g: &[E]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let (input, kernel, bias) = (*input, *kernel, *bias);
                let dims = ConvDims::infer(
                    self.value(input).shape(),
                    self.value(kernel).shape(),
                    *stride,
                    *padding,
                )
                .unwrap();
                let grads = kernels::conv2d_backward(
                    self.value(input).data(),
                    self.value(kernel).data(),
                    g,
                    &dims,
                );
                self.accumulate(input, grads.input);
                self.accumulate(kernel, grads.kernel);
                self.accumulate(bias, grads.bias);
            }
            Op::MaxPool2 { input, argmax } => {
                let input = *input;
                let grad_in =
                    kernels::maxpool2_backward(g, argmax, self.value(input).shape().numel());
                self.accumulate(input, grad_in);
            }
            Op::Upsample2 { input } => {
                let input = *input;
                let grad_in = kernels::upsample_nearest2_backward(g, self.value(input).shape());
                self.accumulate(input, grad_in);
            }
            Op::Concat { a, b } => {
                let (a, b) = (*a, *b);
                let sa = self.value(a).shape();
                let sb = self.value(b).shape();
                let plane = sa.h * sa.w;
                let mut ga = vec![E::zero(); sa.numel()];
                let mut gb = vec![E::zero(); sb.numel()];
                let stride_out = (sa.c + sb.c) * plane;
                for n in 0..sa.n {
                    let base = n * stride_out;
                    ga[n * sa.c * plane..(n + 1) * sa.c * plane]
                        .copy_from_slice(&g[base..base + sa.c * plane]);
                    gb[n * sb.c * plane..(n + 1) * sb.c * plane]
                        .copy_from_slice(&g[base + sa.c * plane..base + stride_out]);
                }
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
            } => {
                let (input, gamma, beta) = (*input, *gamma, *beta);
                let grads = kernels::batch_norm_backward(
                    self.value(input).data(),
                    self.value(input).shape(),
                    self.value(gamma).data(),
                    saved,
                    g,
                );
                self.accumulate(input, grads.input);
                self.accumulate(gamma, grads.gamma);
                self.accumulate(beta, grads.beta);
            }
            Op::Relu { input } => {
                let input = *input;
                let x = self.value(input).data();
                let grad_in: Vec<E> = x
                    .iter()
                    .zip(g)
                    .map(|(&v, &gy)| if v > E::zero() { gy } else { E::zero() })
                    .collect();
                self.accumulate(input, grad_in);
            }
            Op::Sigmoid { input } => {
                let input = *input;
                let y = self.nodes[id].value.data();
                let grad_in: Vec<E> = y
                    .iter()
                    .zip(g)
                    .map(|(&v, &gy)| gy * v * (E::one() - v))
                    .collect();
                self.accumulate(input, grad_in);
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let xs = self.value(input).shape();
                let ws = self.value(weight).shape();
                let (n, cin, cout) = (xs.n, xs.c, ws.n);
                let mut gx = vec![E::zero(); n * cin];
                let mut gw = vec![E::zero(); cout * cin];
                let mut gb = vec![E::zero(); cout];
                unsafe {
                    // gx(n, cin) = g(n, cout) * W(cout, cin)
                    E::gemm(
                        n,
                        cout,
                        cin,
                        E::one(),
                        g.as_ptr(),
                        cout as isize,
                        1,
                        self.value(weight).data().as_ptr(),
                        cin as isize,
                        1,
                        E::zero(),
                        gx.as_mut_ptr(),
                        cin as isize,
                        1,
                    );
                    // gw(cout, cin) = g(n, cout)^T * x(n, cin)
                    E::gemm(
                        cout,
                        n,
                        cin,
                        E::one(),
                        g.as_ptr(),
                        1,
                        cout as isize,
                        self.value(input).data().as_ptr(),
                        cin as isize,
                        1,
                        E::zero(),
                        gw.as_mut_ptr(),
                        cin as isize,
                        1,
                    );
                }
                for row in g.chunks_exact(cout) {
                    for (o, &v) in row.iter().enumerate() {
                        gb[o] = gb[o] + v;
                    }
                }
                self.accumulate(input, gx);
                self.accumulate(weight, gw);
                self.accumulate(bias, gb);
            }
            Op::GlobalAvgPool { input } => {
                let input = *input;
                let xs = self.value(input).shape();
                let plane = xs.h * xs.w;
                let inv = E::one() / E::from_f64(plane as f64);
                let mut grad_in = vec![E::zero(); xs.numel()];
                for nc in 0..xs.n * xs.c {
                    let gv = g[nc] * inv;
                    for slot in grad_in[nc * plane..(nc + 1) * plane].iter_mut() {
                        *slot = gv;
                    }
                }
                self.accumulate(input, grad_in);
            }
            Op::SoftmaxCe {
                logits,
                probs,
                labels,
                ignore,
                count,
            } => {
                let logits_id = *logits;
                let ls = self.value(logits_id).shape();
                let plane = ls.h * ls.w;
                let scale = g[0] / E::from_f64(*count as f64);
                let mut grad_in = vec![E::zero(); probs.len()];
                for n in 0..ls.n {
                    for y in 0..ls.h {
                        for x in 0..ls.w {
                            let label = labels.at(n, y, x);
                            if Some(label) == *ignore {
                                continue;
                            }
                            let pix = y * ls.w + x;
                            for c in 0..ls.c {
                                let i = (n * ls.c + c) * plane + pix;
                                let indicator = if c == label as usize {
                                    E::one()
                                } else {
                                    E::zero()
                                };
                                grad_in[i] = (probs[i] - indicator) * scale;
                            }
                        }
                    }
                }
                self.accumulate(logits_id, grad_in);
            }
            Op::ScaleChannels { input, factors } => {
                let input = *input;
                let xs = self.value(input).shape();
                let plane = xs.h * xs.w;
                let mut grad_in = vec![E::zero(); xs.numel()];
                for nc in 0..xs.n * xs.c {
                    let f = factors[nc];
                    for i in nc * plane..(nc + 1) * plane {
                        grad_in[i] = g[i] * f;
                    }
                }
                self.accumulate(input, grad_in);
            }
            Op::MulGate { input, gate } => {
                let (input, gate) = (*input, *gate);
                let xs = self.value(input).shape();
                let plane = xs.h * xs.w;
                let x = self.value(input).data();
                let gt = self.value(gate).data();
                let mut gx = vec![E::zero(); xs.numel()];
                let mut gg = vec![E::zero(); xs.n * xs.c];
                for nc in 0..xs.n * xs.c {
                    let mut acc = E::zero();
                    for i in nc * plane..(nc + 1) * plane {
                        gx[i] = g[i] * gt[nc];
                        acc = acc + g[i] * x[i];
                    }
                    gg[nc] = acc;
                }
                self.accumulate(input, gx);
                self.accumulate(gate, gg);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g.to_vec());
                self.accumulate(b, g.to_vec());
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let ga: Vec<E> = g
                    .iter()
                    .zip(self.value(b).data())
                    .map(|(&gy, &y)| gy * y)
                    .collect();
                let gb: Vec<E> = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(&gy, &x)| gy * x)
                    .collect();
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Scale { input, factor } => {
                let (input, factor) = (*input, *factor);
                let grad_in: Vec<E> = g.iter().map(|&gy| gy * factor).collect();
                self.accumulate(input, grad_in);
            }
            Op::Sum { input } => {
                let input = *input;
                let grad_in = vec![g[0]; self.value(input).shape().numel()];
                self.accumulate(input, grad_in);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_dims(dims, data).unwrap()
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 3, 3], vec![1.0; 9]));
        let k = g.constant(t(&[1, 1, 1, 1], vec![1.0]));
        let b = g.constant(t(&[1], vec![0.0]));
        let y = g.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[1.0; 9]);
        assert_eq!(g.value(y).shape(), Shape::new(1, 1, 3, 3));
    }

    #[test]
    fn zero_kernel_conv_emits_bias() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 4, 4], (0..32).map(|v| v as f64).collect()));
        let k = g.constant(t(&[3, 2, 3, 3], vec![0.0; 54]));
        let b = g.constant(t(&[3], vec![1.5, -2.0, 0.25]));
        let y = g.conv2d(x, k, b, 1, 1).unwrap();
        let out = g.value(y);
        for co in 0..3 {
            for i in 0..16 {
                assert_eq!(out.data()[co * 16 + i], [1.5, -2.0, 0.25][co]);
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t(&[1, 3, 4, 4], vec![0.0; 48]));
        let k = g.constant(t(&[2, 2, 3, 3], vec![0.0; 36]));
        let b = g.constant(t(&[2], vec![0.0; 2]));
        let err = g.conv2d(x, k, b, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("3 channels") && msg.contains("expects 2"), "{msg}");
    }

    #[test]
    fn maxpool_single_window() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t(&[1, 1, 3, 4], vec![0.0; 12]));
        assert!(g.maxpool2(x).is_err());
    }

    #[test]
    fn maxpool_constant_routes_one_grad_per_window() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 1, 4, 4], vec![2.5; 16]));
        g.freeze_leaves();
        let y = g.maxpool2(x).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        let gx = g.grad(x).unwrap();
        assert_eq!(gx.iter().filter(|&&v| v == 1.0).count(), 4);
        assert_eq!(gx.iter().filter(|&&v| v == 0.0).count(), 12);
        // first element of each window takes the tie
        assert_eq!(gx[0], 1.0);
        assert_eq!(gx[2], 1.0);
    }

    #[test]
    fn upsample_block_replicates() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.upsample_nearest2(x).unwrap();
        assert_eq!(
            g.value(y).data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn upsample_grad_is_four() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 1, 2, 2], vec![0.5, -1.0, 2.0, 3.0]));
        g.freeze_leaves();
        let y = g.upsample_nearest2(x).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0; 4]);
    }

    #[test]
    fn concat_shapes_and_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 2, 4, 4], vec![1.0; 32]));
        let b = g.constant(t(&[1, 3, 4, 4], vec![2.0; 48]));
        let y = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(y).shape(), Shape::new(1, 5, 4, 4));

        let empty = g.constant(t(&[1, 0, 4, 4], vec![]));
        let same = g.concat_channels(a, empty).unwrap();
        assert_eq!(g.value(same).data(), g.value(a).data());
    }

    #[test]
    fn concat_backward_splits_ones() {
        let mut g = Graph::new();
        let a = g.param(t(&[2, 2, 2, 2], vec![0.1; 16]));
        let b = g.param(t(&[2, 1, 2, 2], vec![0.2; 8]));
        g.freeze_leaves();
        let y = g.concat_channels(a, b).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0; 16]);
        assert_eq!(g.grad(b).unwrap(), &[1.0; 8]);
    }

    #[test]
    fn relu_and_sigmoid_definitions() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3], vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).item(), 0.5);
    }

    #[test]
    fn global_avg_pool_means() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.global_avg_pool(x);
        assert_eq!(g.value(y).item(), 2.5);
    }

    #[test]
    fn uniform_logits_loss_is_ln_c() {
        let mut g = Graph::new();
        for classes in [2usize, 3, 5] {
            let x = g.constant(Tensor::new(
                Shape::new(1, classes, 2, 2),
                vec![0.7; classes * 4],
            ).unwrap());
            let labels = LabelMap::new(1, 2, 2, vec![0, 1, 0, 1]).unwrap();
            let loss = g.softmax_cross_entropy(x, &labels, None).unwrap();
            let expect = (classes as f64).ln();
            assert!((g.value(loss).item() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_logits_loss_vanishes() {
        let mut g = Graph::new();
        let mut logits = vec![0.0; 2 * 4];
        for pix in 0..4 {
            logits[pix] = 50.0; // class 0 dominant
        }
        let x = g.constant(t(&[1, 2, 2, 2], logits));
        let labels = LabelMap::new(1, 2, 2, vec![0; 4]).unwrap();
        let loss = g.softmax_cross_entropy(x, &labels, None).unwrap();
        assert!(g.value(loss).item() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_per_pixel_recomputation() {
        let mut g = Graph::new();
        let data = vec![0.3, -0.7, 1.2, 0.05, -0.4, 0.9, -1.3, 0.6];
        let x = g.constant(t(&[1, 2, 2, 2], data.clone()));
        let labels = LabelMap::new(1, 2, 2, vec![0, 1, 1, 0]).unwrap();
        let loss = g.softmax_cross_entropy(x, &labels, None).unwrap();

        let mut expect = 0.0;
        for pix in 0..4 {
            let (a, b) = (data[pix], data[4 + pix]);
            let m = a.max(b);
            let denom = (a - m).exp() + (b - m).exp();
            let label = [0usize, 1, 1, 0][pix];
            let logit = if label == 0 { a } else { b };
            expect -= ((logit - m).exp() / denom).ln();
        }
        expect /= 4.0;
        assert!((g.value(loss).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t(&[1, 2, 2, 2], vec![0.0; 8]));
        let labels = LabelMap::new(1, 2, 2, vec![0, 1, 2, 0]).unwrap();
        assert!(g.softmax_cross_entropy(x, &labels, None).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]));
        g.freeze_leaves();
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_square_sum_is_two_x() {
        let mut g = Graph::new();
        let data = vec![1.0, -2.0, 3.0, 0.5];
        let x = g.param(t(&[4], data.clone()));
        g.freeze_leaves();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        let expect: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.grad(x).unwrap(), expect.as_slice());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 2], vec![1.0; 4]));
        g.freeze_leaves();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn second_backward_without_reset_errors() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        g.freeze_leaves();
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert!(g.backward(loss).is_err());
        g.reset();
        let loss = g.sum(x);
        assert!(g.backward(loss).is_ok());
    }

    #[test]
    fn unreached_param_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let unused = g.param(t(&[3], vec![1.0, 2.0, 3.0]));
        g.freeze_leaves();
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(unused).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn reset_truncates_to_leaves() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], vec![1.0, 2.0]));
        g.freeze_leaves();
        let y = g.scale(x, 3.0);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.len(), 3);
        g.reset();
        assert_eq!(g.len(), 1);
        assert!(g.grad(x).is_none());
    }
}
