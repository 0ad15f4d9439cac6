//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output and whatever it needs
//! for the backward sweep. Operands always precede their consumers, so one
//! reverse pass over the node list visits nodes in a valid topological order.

use crate::error::{Error, Result};
use crate::tensor_core::conv::{self, ConvGeometry};
use crate::tensor_core::tensor::Tensor;

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.9;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
        cols: Vec<f32>,
    },
    TransposeConv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    SoftmaxChannels(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Affine {
        x: Var,
        scale: f32,
    },
    ConcatChannels {
        a: Var,
        b: Var,
        split: usize,
    },
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Sum(Var),
    Dot {
        x: Var,
        weights: Vec<f64>,
    },
    Mse {
        a: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient for `v`; zeros when it is unreachable.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn need_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(format!(
            "{what} expects rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn add_into(slot: &mut Option<Vec<f32>>, g: Vec<f32>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
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

    /// Hash of every piecewise-linear switch on the tape: which ReLU inputs
    /// are positive and which entry each max-pool window selected. Two
    /// forward passes with equal patterns lie on the same linear piece.
    pub fn switch_pattern(&self) -> u64 {
        let mut h = crate::rng::fnv1a("");
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x100_0000_01b3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.nodes[x.0].value.data() {
                        mix(u64::from(v > 0.0));
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.iter().for_each(|&i| mix(u64::from(i) + 2)),
                _ => {}
            }
        }
        h
    }

    /// A trainable leaf; backward produces a gradient for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// A constant leaf; gradients still flow through ops that consume it,
    /// but none is accumulated for the constant itself.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// 2-D cross-correlation of a `[C_in, H, W]` input with `[C_out, C_in, kh, kw]` kernels.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x), self.value(w), self.value(b));
        need_rank(xs, 3, "conv2d input")?;
        need_rank(ws, 4, "conv2d kernels")?;
        let (cout, cin, kh, kw) = (ws.shape()[0], ws.shape()[1], ws.shape()[2], ws.shape()[3]);
        if cin != xs.shape()[0] {
            return Err(Error::shape(format!(
                "conv2d kernels expect {cin} input channels, input has {}",
                xs.shape()[0]
            )));
        }
        if bs.len() != cout {
            return Err(Error::shape(format!("conv2d bias length {} != {cout}", bs.len())));
        }
        let geom = ConvGeometry::forward(cin, xs.shape()[1], xs.shape()[2], kh, kw, stride, padding)?;
        let (out, cols) = conv::conv2d_forward(xs.data(), ws.data(), bs.data(), cout, &geom);
        let value = Tensor::new(vec![cout, geom.out_h, geom.out_w], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(value, rg, Op::Conv2d { x, w, b, geom, cols }))
    }

    /// Transposed convolution (the adjoint of [`Tape::conv2d`] with the same kernel).
    /// Kernels are `[C_in, C_out, kh, kw]`; output extent is `(H-1)·stride - 2·padding + kh`.
    pub fn transpose_conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x), self.value(w), self.value(b));
        need_rank(xs, 3, "transpose_conv2d input")?;
        need_rank(ws, 4, "transpose_conv2d kernels")?;
        let (cin, cout, kh, kw) = (ws.shape()[0], ws.shape()[1], ws.shape()[2], ws.shape()[3]);
        if cin != xs.shape()[0] {
            return Err(Error::shape(format!(
                "transpose_conv2d kernels expect {cin} input channels, input has {}",
                xs.shape()[0]
            )));
        }
        if bs.len() != cout {
            return Err(Error::shape(format!(
                "transpose_conv2d bias length {} != {cout}",
                bs.len()
            )));
        }
        let geom =
            ConvGeometry::transposed(cout, xs.shape()[1], xs.shape()[2], kh, kw, stride, padding)?;
        let out = conv::transpose_conv2d_forward(xs.data(), ws.data(), bs.data(), cin, &geom);
        let value = Tensor::new(vec![cout, geom.height, geom.width], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(value, rg, Op::TransposeConv2d { x, w, b, geom }))
    }

    /// Max pooling; ties route the gradient to the lowest linear index.
    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let xs = self.value(x);
        need_rank(xs, 3, "maxpool2d input")?;
        let (c, h, w) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
        if window == 0 || stride == 0 || window > h || window > w {
            return Err(Error::shape(format!(
                "maxpool window {window} (stride {stride}) does not fit {h}x{w}"
            )));
        }
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;
        let data = xs.data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for ky in 0..window {
                        for kx in 0..window {
                            let i = (ch * h + oy * stride + ky) * w + ox * stride + kx;
                            if data[i] > best || (ky == 0 && kx == 0) {
                                best = data[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i as u32);
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::MaxPool { x, argmax }))
    }

    /// Per-channel batch normalisation of a `[C, H, W]` input (batch size 1,
    /// so statistics run over spatial positions). Train mode updates `stats`.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: BnMode,
    ) -> Result<Var> {
        let xs = self.value(x);
        need_rank(xs, 3, "batchnorm2d input")?;
        let c = xs.shape()[0];
        let plane = xs.shape()[1] * xs.shape()[2];
        if plane == 0 {
            return Err(Error::shape("batchnorm2d on zero spatial size"));
        }
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape(format!(
                "batchnorm2d gamma/beta must have {c} entries"
            )));
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::shape(format!("running stats must have {c} entries")));
        }
        let data = xs.data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0f64; data.len()];
        let mut inv_std = vec![0.0f64; c];
        let mut out = vec![0.0f32; data.len()];
        for ch in 0..c {
            let xc = &data[ch * plane..(ch + 1) * plane];
            let (mean, var) = match mode {
                BnMode::Train => {
                    let mean = xc.iter().map(|&v| f64::from(v)).sum::<f64>() / plane as f64;
                    let var = xc
                        .iter()
                        .map(|&v| (f64::from(v) - mean).powi(2))
                        .sum::<f64>()
                        / plane as f64;
                    stats.mean[ch] = (BATCHNORM_MOMENTUM * f64::from(stats.mean[ch])
                        + (1.0 - BATCHNORM_MOMENTUM) * mean) as f32;
                    stats.var[ch] = (BATCHNORM_MOMENTUM * f64::from(stats.var[ch])
                        + (1.0 - BATCHNORM_MOMENTUM) * var) as f32;
                    (mean, var)
                }
                BnMode::Eval => (f64::from(stats.mean[ch]), f64::from(stats.var[ch])),
            };
            let is = 1.0 / (var + BATCHNORM_EPS).sqrt();
            inv_std[ch] = is;
            for i in 0..plane {
                let h = (f64::from(xc[i]) - mean) * is;
                xhat[ch * plane + i] = h;
                out[ch * plane + i] = (f64::from(g[ch]) * h + f64::from(bt[ch])) as f32;
            }
        }
        let value = Tensor::new(xs.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        let op = match mode {
            BnMode::Train => Op::BatchNormTrain { x, gamma, beta, xhat, inv_std },
            BnMode::Eval => Op::BatchNormEval { x, gamma, beta, xhat, inv_std },
        };
        Ok(self.push(value, rg, op))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| {
            let v = f64::from(v);
            let s = if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            };
            s as f32
        });
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Sigmoid(x))
    }

    /// Softmax across axis 0 at every position of the trailing axes.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let (c, positions) = channel_layout(xs.shape());
        let probs = softmax_columns(xs.data(), c, positions);
        let value = Tensor::new(xs.shape().to_vec(), conv::narrow(&probs)).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::SoftmaxChannels(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, op))
    }

    /// Multiply by a constant scalar.
    pub fn scale(&mut self, x: Var, scale: f32) -> Var {
        let value = self.value(x).map(|v| v * scale);
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Affine { x, scale })
    }

    /// Concatenate two `[C, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        need_rank(av, 3, "concat")?;
        need_rank(bv, 3, "concat")?;
        if av.shape()[1..] != bv.shape()[1..] {
            return Err(Error::shape(format!(
                "concat spatial mismatch {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let split = av.shape()[0];
        let shape = vec![split + bv.shape()[0], av.shape()[1], av.shape()[2]];
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::ConcatChannels { a, b, split }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Fully connected layer on a flattened input: `w` is `[k, n]`, `b` is `[k]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x), self.value(w), self.value(b));
        need_rank(ws, 2, "linear weights")?;
        let (k, n) = (ws.shape()[0], ws.shape()[1]);
        if xs.len() != n || bs.len() != k {
            return Err(Error::shape(format!(
                "linear: input {} / bias {} vs weights {k}x{n}",
                xs.len(),
                bs.len()
            )));
        }
        let mut out = bs.data().iter().map(|&v| f64::from(v)).collect::<Vec<_>>();
        conv::gemm(k, n, 1, &conv::widen(ws.data()), false, &conv::widen(xs.data()), false, 1.0, &mut out);
        let value = Tensor::new(vec![k], conv::narrow(&out))?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(value, rg, Op::Linear { x, w, b }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum_f64() as f32);
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Sum(x))
    }

    /// Inner product with constant weights, accumulated in `f64`.
    pub fn dot(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        let xs = self.value(x);
        if xs.len() != weights.len() {
            return Err(Error::shape(format!(
                "dot: {:?} vs {:?}",
                xs.shape(),
                weights.shape()
            )));
        }
        let value = Tensor::scalar(xs.dot_f64(weights) as f32);
        let rg = self.rg(&[x]);
        let weights = conv::widen(weights.data());
        Ok(self.push(value, rg, Op::Dot { x, weights }))
    }

    /// Mean squared error between two equally shaped tensors.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (a, b) = (self.value(pred), self.value(target));
        if a.shape() != b.shape() {
            return Err(Error::shape(format!(
                "mse_loss: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let n = a.len() as f64;
        let loss = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
            .sum::<f64>()
            / n;
        let rg = self.rg(&[pred, target]);
        Ok(self.push(Tensor::scalar(loss as f32), rg, Op::Mse { a: pred, b: target }))
    }

    /// Mean cross-entropy of softmax over axis 0. `logits` is `[k]` (one label)
    /// or `[k, ...]` with one label per trailing position.
    pub fn cross_entropy_loss(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let xs = self.value(logits);
        let (k, positions) = channel_layout(xs.shape());
        if labels.len() != positions {
            return Err(Error::shape(format!(
                "cross_entropy: {} labels for {positions} positions",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidLabel {
                label: bad,
                classes: k,
            });
        }
        let data = xs.data();
        let probs = softmax_columns(data, k, positions);
        let mut total = 0.0f64;
        for (p, &l) in labels.iter().enumerate() {
            let col = |c: usize| f64::from(data[c * positions + p]);
            let m = (0..k).map(col).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..k).map(|c| (col(c) - m).exp()).sum::<f64>().ln();
            total += lse - col(l);
        }
        let loss = total / positions as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss as f32),
            rg,
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_with(loss, Tensor::scalar(1.0))
    }

    /// Reverse sweep seeded with an arbitrary upstream gradient for `output`.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(output).shape() {
            return Err(Error::shape(format!(
                "seed {:?} does not match output {:?}",
                seed.shape(),
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.into_data());
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Gradient of `output` (seeded by `seed`) with respect to arbitrary
    /// nodes, including intermediate ones.
    pub fn backward_to_inputs(&self, output: Var, seed: Tensor, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.into_data());
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(wrt
            .iter()
            .map(|v| match &grads[v.0] {
                Some(g) => Tensor::new(self.value(*v).shape().to_vec(), g.clone()).expect("shape"),
                None => Tensor::zeros(self.value(*v).shape()),
            })
            .collect())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, dy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, cols } => {
                let need = [self.wants(*x), self.wants(*w), self.wants(*b)];
                let cout = self.value(*w).shape()[0];
                let (dx, dw, db) =
                    conv::conv2d_backward(dy, self.value(*w).data(), cols, cout, geom, need);
                if let Some(g) = dx {
                    add_into(&mut grads[x.0], g);
                }
                if let Some(g) = dw {
                    add_into(&mut grads[w.0], g);
                }
                if let Some(g) = db {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::TransposeConv2d { x, w, b, geom } => {
                let need = [self.wants(*x), self.wants(*w), self.wants(*b)];
                let cin = self.value(*w).shape()[0];
                let (dx, dw, db) = conv::transpose_conv2d_backward(
                    dy,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    cin,
                    geom,
                    need,
                );
                if let Some(g) = dx {
                    add_into(&mut grads[x.0], g);
                }
                if let Some(g) = dw {
                    add_into(&mut grads[w.0], g);
                }
                if let Some(g) = db {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.wants(*x) {
                    let mut g = vec![0.0f32; self.value(*x).len()];
                    for (&i, &d) in argmax.iter().zip(dy) {
                        g[i as usize] += d;
                    }
                    add_into(&mut grads[x.0], g);
                }
            }
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std }
            | Op::BatchNormEval { x, gamma, beta, xhat, inv_std } => {
                let train = matches!(node.op, Op::BatchNormTrain { .. });
                let c = inv_std.len();
                let plane = dy.len() / c;
                let gm = self.value(*gamma).data();
                let mut dx = vec![0.0f32; dy.len()];
                let mut dg = vec![0.0f32; c];
                let mut db = vec![0.0f32; c];
                for ch in 0..c {
                    let r = ch * plane..(ch + 1) * plane;
                    let dyc = &dy[r.clone()];
                    let hc = &xhat[r.clone()];
                    let sum_dy: f64 = dyc.iter().map(|&v| f64::from(v)).sum();
                    let sum_dyh: f64 = dyc.iter().zip(hc).map(|(&d, &h)| f64::from(d) * h).sum();
                    dg[ch] = sum_dyh as f32;
                    db[ch] = sum_dy as f32;
                    let scale = f64::from(gm[ch]) * inv_std[ch];
                    let (mean_dy, mean_dyh) = (sum_dy / plane as f64, sum_dyh / plane as f64);
                    for (o, (&d, &h)) in dx[r].iter_mut().zip(dyc.iter().zip(hc)) {
                        let d = f64::from(d);
                        *o = if train {
                            (scale * (d - mean_dy - h * mean_dyh)) as f32
                        } else {
                            (scale * d) as f32
                        };
                    }
                }
                if self.wants(*x) {
                    add_into(&mut grads[x.0], dx);
                }
                if self.wants(*gamma) {
                    add_into(&mut grads[gamma.0], dg);
                }
                if self.wants(*beta) {
                    add_into(&mut grads[beta.0], db);
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let xs = self.value(*x).data();
                    let g = dy
                        .iter()
                        .zip(xs)
                        .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                        .collect();
                    add_into(&mut grads[x.0], g);
                }
            }
            Op::Sigmoid(x) => {
                if self.wants(*x) {
                    let ys = node.value.data();
                    let g = dy
                        .iter()
                        .zip(ys)
                        .map(|(&d, &y)| (f64::from(d) * f64::from(y) * (1.0 - f64::from(y))) as f32)
                        .collect();
                    add_into(&mut grads[x.0], g);
                }
            }
            Op::SoftmaxChannels(x) => {
                if self.wants(*x) {
                    let ys = node.value.data();
                    let (c, positions) = channel_layout(node.value.shape());
                    let mut g = vec![0.0f32; ys.len()];
                    for p in 0..positions {
                        let dot: f64 = (0..c)
                            .map(|k| f64::from(ys[k * positions + p]) * f64::from(dy[k * positions + p]))
                            .sum();
                        for k in 0..c {
                            let i = k * positions + p;
                            g[i] = (f64::from(ys[i]) * (f64::from(dy[i]) - dot)) as f32;
                        }
                    }
                    add_into(&mut grads[x.0], g);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], dy.to_vec());
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], dy.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], dy.to_vec());
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], dy.iter().map(|d| -d).collect());
                }
            }
            Op::Affine { x, scale } => {
                if self.wants(*x) {
                    add_into(&mut grads[x.0], dy.iter().map(|d| d * scale).collect());
                }
            }
            Op::ConcatChannels { a, b, split } => {
                let plane: usize = node.value.shape()[1..].iter().product();
                let (da, db) = dy.split_at(split * plane);
                if self.wants(*a) {
                    add_into(&mut grads[a.0], da.to_vec());
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], db.to_vec());
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    add_into(&mut grads[x.0], dy.to_vec());
                }
            }
            Op::Linear { x, w, b } => {
                let ws = self.value(*w);
                let (k, n) = (ws.shape()[0], ws.shape()[1]);
                let dyw = conv::widen(dy);
                if self.wants(*x) {
                    let mut dx = vec![0.0f64; n];
                    conv::gemm(n, k, 1, &conv::widen(ws.data()), true, &dyw, false, 0.0, &mut dx);
                    add_into(&mut grads[x.0], conv::narrow(&dx));
                }
                if self.wants(*w) {
                    let xs = self.value(*x).data();
                    let mut dw = vec![0.0f32; k * n];
                    for (r, &d) in dyw.iter().enumerate() {
                        for (o, &v) in dw[r * n..(r + 1) * n].iter_mut().zip(xs) {
                            *o = (d * f64::from(v)) as f32;
                        }
                    }
                    add_into(&mut grads[w.0], dw);
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], dy.to_vec());
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    add_into(&mut grads[x.0], vec![dy[0]; self.value(*x).len()]);
                }
            }
            Op::Dot { x, weights } => {
                if self.wants(*x) {
                    let d = f64::from(dy[0]);
                    add_into(&mut grads[x.0], weights.iter().map(|&w| (w * d) as f32).collect());
                }
            }
            Op::Mse { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let k = 2.0 * f64::from(dy[0]) / av.len() as f64;
                let g: Vec<f32> = av
                    .iter()
                    .zip(bv)
                    .map(|(&x, &y)| (k * (f64::from(x) - f64::from(y))) as f32)
                    .collect();
                if self.wants(*b) {
                    add_into(&mut grads[b.0], g.iter().map(|v| -v).collect());
                }
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
            }
            Op::CrossEntropy { logits, probs, labels } => {
                if self.wants(*logits) {
                    let positions = labels.len();
                    let scale = f64::from(dy[0]) / positions as f64;
                    let mut g: Vec<f32> = probs.iter().map(|&p| (p * scale) as f32).collect();
                    for (p, &l) in labels.iter().enumerate() {
                        let i = l * positions + p;
                        g[i] = ((probs[i] - 1.0) * scale) as f32;
                    }
                    add_into(&mut grads[logits.0], g);
                }
            }
        }
    }
}

/// (channels, positions) for a tensor whose axis 0 is the class/channel axis.
fn channel_layout(shape: &[usize]) -> (usize, usize) {
    let c = shape[0];
    let positions = shape[1..].iter().product::<usize>().max(1);
    (c, positions)
}

fn softmax_columns(data: &[f32], c: usize, positions: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; data.len()];
    for p in 0..positions {
        let m = (0..c)
            .map(|k| f64::from(data[k * positions + p]))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for k in 0..c {
            let e = (f64::from(data[k * positions + p]) - m).exp();
            out[k * positions + p] = e;
            z += e;
        }
        for k in 0..c {
            out[k * positions + p] /= z;
        }
    }
    out
}
