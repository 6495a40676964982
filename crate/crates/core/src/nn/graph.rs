//! Reverse-mode automatic differentiation over rank-4 tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its output
//! value and whatever it needs for the backward pass. [`Graph::backward`]
//! walks the tape once in reverse.

use super::conv::{conv_backward, conv_forward, ConvGeom};
use super::float::Float;
use super::tensor::{Shape, Tensor};
use crate::error::{ensure, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Convolution hyper-parameters (stride is always 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    /// Padding that keeps spatial dims for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        ConvSpec {
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }
}

enum Op<T> {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat(Vec<Var>),
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample2(Var),
    GlobalAvg(Var),
    GlobalMax {
        input: Var,
        argmax: Vec<u32>,
    },
    ChannelMean(Var),
    ChannelMax {
        input: Var,
        argmax: Vec<u32>,
    },
    MeanAll(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance (for running-stat updates).
    pub var_unbiased: Vec<T>,
}

/// Normalization source for [`Graph::batch_norm`].
pub enum BnMode<'a, T> {
    /// Normalize with the batch's own statistics.
    Batch { eps: T },
    /// Normalize with stored running statistics.
    Running { mean: &'a [T], var: &'a [T], eps: T },
}

/// The tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by [`Var`].
pub struct Gradients<T>(Vec<Option<Tensor<T>>>);

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.0.get_mut(v.0).and_then(|g| g.take())
    }
}

fn broadcast_shape(a: Shape, b: Shape) -> Option<Shape> {
    let d = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some(Shape::new(
        d(a.batch, b.batch)?,
        d(a.channels, b.channels)?,
        d(a.height, b.height)?,
        d(a.width, b.width)?,
    ))
}

/// Strides of `s` seen through a broadcast to a larger shape (0 on size-1 dims).
fn broadcast_strides(s: Shape) -> [usize; 4] {
    let w = if s.width == 1 { 0 } else { 1 };
    let h = if s.height == 1 { 0 } else { s.width };
    let c = if s.channels == 1 { 0 } else { s.plane() };
    let n = if s.batch == 1 { 0 } else { s.channels * s.plane() };
    [n, c, h, w]
}

/// Visit every output index with the matching offsets into two broadcast operands.
fn for_each_broadcast(out: Shape, a: Shape, b: Shape, mut f: impl FnMut(usize, usize, usize)) {
    let sa = broadcast_strides(a);
    let sb = broadcast_strides(b);
    let mut o = 0;
    for n in 0..out.batch {
        for c in 0..out.channels {
            for y in 0..out.height {
                let ba = n * sa[0] + c * sa[1] + y * sa[2];
                let bb = n * sb[0] + c * sb[1] + y * sb[2];
                for x in 0..out.width {
                    f(o, ba + x * sa[3], bb + x * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

/// Source taps for 2x bilinear upsampling with half-pixel centers.
fn upsample_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let frac = src - i0 as f64;
            (i0, i1, frac)
        })
        .collect()
}

fn accumulate<T: Float>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        ensure!(
            ws.height == ws.width && ws.height >= 1,
            "convolution kernels must be square, got {ws}"
        );
        ensure!(
            ws.channels == xs.channels,
            "convolution expects {} input channels, got {}",
            ws.channels,
            xs.channels
        );
        if let Some(b) = bias {
            ensure!(
                self.shape(b).len() == ws.batch,
                "bias length must equal output channels"
            );
        }
        let geom = ConvGeom {
            cin: xs.channels,
            cout: ws.batch,
            height: xs.height,
            width: xs.width,
            kernel: ws.height,
            padding: spec.padding,
            dilation: spec.dilation.max(1),
        };
        ensure!(
            xs.height + 2 * geom.padding > geom.dilation * (geom.kernel - 1)
                && xs.width + 2 * geom.padding > geom.dilation * (geom.kernel - 1),
            "convolution kernel larger than padded input {xs}"
        );
        let out = conv_forward(
            self.value(input).data(),
            xs.batch,
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let shape = Shape::new(xs.batch, geom.cout, geom.out_height(), geom.out_width());
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Tensor::from_vec(shape, out)?,
            Op::Conv {
                input,
                weight,
                bias,
                geom,
            },
            needs,
        ))
    }

    /// Batch normalization with affine `gamma`/`beta` of shape `(1, C, 1, 1)`.
    /// Returns batch statistics when normalizing with them.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let s = self.shape(input);
        let c = s.channels;
        ensure!(
            self.shape(gamma).len() == c && self.shape(beta).len() == c,
            "batch norm affine parameters must have {c} entries"
        );
        let plane = s.plane();
        let count = s.batch * plane;
        let x = self.value(input).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let (eps, batch_stats) = match mode {
            BnMode::Batch { eps } => {
                ensure!(count > 0, "batch norm over an empty batch");
                let inv = T::one() / T::lit(count as f64);
                for ch in 0..c {
                    let mut sum = T::zero();
                    for n in 0..s.batch {
                        let start = (n * c + ch) * plane;
                        sum += x[start..start + plane].iter().copied().sum::<T>();
                    }
                    let m = sum * inv;
                    let mut sq = T::zero();
                    for n in 0..s.batch {
                        let start = (n * c + ch) * plane;
                        for &v in &x[start..start + plane] {
                            let d = v - m;
                            sq += d * d;
                        }
                    }
                    mean[ch] = m;
                    var[ch] = sq * inv;
                }
                (eps, true)
            }
            BnMode::Running { mean: rm, var: rv, eps } => {
                ensure!(rm.len() == c && rv.len() == c, "running statistics size mismatch");
                mean.copy_from_slice(rm);
                var.copy_from_slice(rv);
                (eps, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); s.len()];
        let mut out = vec![T::zero(); s.len()];
        for n in 0..s.batch {
            for ch in 0..c {
                let start = (n * c + ch) * plane;
                let (m, is, gg, bb) = (mean[ch], inv_std[ch], g[ch], b[ch]);
                for i in start..start + plane {
                    let h = (x[i] - m) * is;
                    xhat[i] = h;
                    out[i] = gg * h + bb;
                }
            }
        }
        let stats = batch_stats.then(|| {
            let corr = if count > 1 {
                T::lit(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            BatchStats {
                mean: mean.clone(),
                var_unbiased: var.iter().map(|&v| v * corr).collect(),
            }
        });
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let v = self.push(
            Tensor::from_vec(s, out)?,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            needs,
        );
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        let needs = self.needs(x);
        self.push(out, Op::Sigmoid(x), needs)
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb)
            .ok_or_else(|| crate::Error::Validation(format!("cannot broadcast {sa} with {sb}")))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); out_shape.len()];
        if sa == sb {
            for ((o, x), y) in out.iter_mut().zip(va).zip(vb) {
                *o = f(*x, *y);
            }
        } else {
            for_each_broadcast(out_shape, sa, sb, |o, ia, ib| out[o] = f(va[ia], vb[ib]));
        }
        Tensor::from_vec(out_shape, out)
    }

    /// Elementwise sum with size-1 broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    /// Elementwise product with size-1 broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let out = self.value(x).map(|v| v * k);
        let needs = self.needs(x);
        self.push(out, Op::Scale(x, k), needs)
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), "concat of zero tensors");
        let first = self.shape(parts[0]);
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            ensure!(
                s.batch == first.batch && s.height == first.height && s.width == first.width,
                "concat needs matching batch/spatial dims, got {s} and {first}"
            );
            channels += s.channels;
        }
        let shape = first.with_channels(channels);
        let mut out = Vec::with_capacity(shape.len());
        for n in 0..first.batch {
            for &p in parts {
                out.extend_from_slice(self.value(p).item(n));
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Concat(parts.to_vec()), needs))
    }

    /// 2x2 max pooling with stride 2.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        ensure!(
            s.height >= 2 && s.width >= 2,
            "max pooling needs at least 2x2 inputs, got {s}"
        );
        let (oh, ow) = (s.height / 2, s.width / 2);
        let shape = Shape::new(s.batch, s.channels, oh, ow);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(shape.len());
        let mut argmax = Vec::with_capacity(shape.len());
        for nc in 0..s.batch * s.channels {
            let base = nc * s.plane();
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * s.width + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * s.width + 2 * ox + dx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::MaxPool2 { input: x, argmax }, needs))
    }

    /// 2x bilinear upsampling with half-pixel centers and edge clamping.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let shape = Shape::new(s.batch, s.channels, 2 * s.height, 2 * s.width);
        let ty = upsample_taps(s.height);
        let tx = upsample_taps(s.width);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); shape.len()];
        let ow = shape.width;
        for nc in 0..s.batch * s.channels {
            let sp = &src[nc * s.plane()..(nc + 1) * s.plane()];
            let dp = &mut out[nc * shape.plane()..(nc + 1) * shape.plane()];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::lit(fy);
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = T::lit(fx);
                    let top = sp[y0 * s.width + x0] * (T::one() - fx) + sp[y0 * s.width + x1] * fx;
                    let bot = sp[y1 * s.width + x0] * (T::one() - fx) + sp[y1 * s.width + x1] * fx;
                    dp[oy * ow + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Upsample2(x), needs))
    }

    /// Spatial mean per channel, `(B, C, H, W) -> (B, C, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let t = self.value(x);
        let inv = T::one() / T::lit(s.plane() as f64);
        let out: Vec<T> = (0..s.batch * s.channels)
            .map(|nc| {
                t.data()[nc * s.plane()..(nc + 1) * s.plane()]
                    .iter()
                    .copied()
                    .sum::<T>()
                    * inv
            })
            .collect();
        let shape = Shape::new(s.batch, s.channels, 1, 1);
        let needs = self.needs(x);
        self.push(Tensor::from_vec(shape, out).expect("shape"), Op::GlobalAvg(x), needs)
    }

    /// Spatial max per channel, `(B, C, H, W) -> (B, C, 1, 1)`.
    pub fn global_max_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(s.batch * s.channels);
        let mut argmax = Vec::with_capacity(s.batch * s.channels);
        for nc in 0..s.batch * s.channels {
            let base = nc * s.plane();
            let mut best = base;
            for i in base..base + s.plane() {
                if d[i] > d[best] {
                    best = i;
                }
            }
            out.push(d[best]);
            argmax.push(best as u32);
        }
        let shape = Shape::new(s.batch, s.channels, 1, 1);
        let needs = self.needs(x);
        self.push(
            Tensor::from_vec(shape, out).expect("shape"),
            Op::GlobalMax { input: x, argmax },
            needs,
        )
    }

    /// Mean over channels, `(B, C, H, W) -> (B, 1, H, W)`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let t = self.value(x);
        let inv = T::one() / T::lit(s.channels as f64);
        let shape = s.with_channels(1);
        let mut out = vec![T::zero(); shape.len()];
        for n in 0..s.batch {
            let o = &mut out[n * s.plane()..(n + 1) * s.plane()];
            for c in 0..s.channels {
                for (a, b) in o.iter_mut().zip(t.plane(n, c)) {
                    *a += *b;
                }
            }
            o.iter_mut().for_each(|v| *v = *v * inv);
        }
        let needs = self.needs(x);
        self.push(Tensor::from_vec(shape, out).expect("shape"), Op::ChannelMean(x), needs)
    }

    /// Max over channels, `(B, C, H, W) -> (B, 1, H, W)`.
    pub fn channel_max(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let t = self.value(x);
        let shape = s.with_channels(1);
        let mut out = vec![T::neg_infinity(); shape.len()];
        let mut argmax = vec![0u32; shape.len()];
        for n in 0..s.batch {
            for c in 0..s.channels {
                let base = t.index(n, c, 0, 0);
                for (p, &v) in t.plane(n, c).iter().enumerate() {
                    let o = n * s.plane() + p;
                    if v > out[o] {
                        out[o] = v;
                        argmax[o] = (base + p) as u32;
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            Tensor::from_vec(shape, out).expect("shape"),
            Op::ChannelMax { input: x, argmax },
            needs,
        )
    }

    /// Mean of all elements as a `(1, 1, 1, 1)` tensor.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let m = self.value(x).mean();
        let needs = self.needs(x);
        self.push(Tensor::full(Shape::new(1, 1, 1, 1), m), Op::MeanAll(x), needs)
    }

    /// Back-propagate `seed` (the gradient of some scalar w.r.t. `output`).
    pub fn backward(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        ensure!(
            seed.shape() == self.shape(output),
            "seed gradient {} does not match output {}",
            seed.shape(),
            self.shape(output)
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Gradients(grads))
    }

    fn backward_node(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                input,
                weight,
                bias,
                geom,
            } => {
                let xs = self.shape(*input);
                let need_in = self.needs(*input);
                let (dx, dw, db) = conv_backward(
                    self.value(*input).data(),
                    xs.batch,
                    self.value(*weight).data(),
                    dy.data(),
                    geom,
                    need_in,
                );
                if let Some(dx) = dx {
                    accumulate(&mut grads[input.0], Tensor::from_vec(xs, dx).expect("shape"));
                }
                if self.needs(*weight) {
                    let ws = self.shape(*weight);
                    accumulate(&mut grads[weight.0], Tensor::from_vec(ws, dw).expect("shape"));
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let bs = self.shape(*b);
                        accumulate(&mut grads[b.0], Tensor::from_vec(bs, db).expect("shape"));
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = out_shape;
                let c = s.channels;
                let plane = s.plane();
                let count = T::lit((s.batch * plane) as f64);
                let g = self.value(*gamma).data();
                let d = dy.data();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for n in 0..s.batch {
                    for ch in 0..c {
                        let start = (n * c + ch) * plane;
                        for i in start..start + plane {
                            sum_dy[ch] += d[i];
                            sum_dy_xhat[ch] += d[i] * xhat[i];
                        }
                    }
                }
                if self.needs(*input) {
                    let mut dx = vec![T::zero(); s.len()];
                    for n in 0..s.batch {
                        for ch in 0..c {
                            let start = (n * c + ch) * plane;
                            let k = g[ch] * inv_std[ch];
                            if *batch_stats {
                                let mdy = sum_dy[ch] / count;
                                let mdyx = sum_dy_xhat[ch] / count;
                                for i in start..start + plane {
                                    dx[i] = k * (d[i] - mdy - xhat[i] * mdyx);
                                }
                            } else {
                                for i in start..start + plane {
                                    dx[i] = k * d[i];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[input.0], Tensor::from_vec(s, dx).expect("shape"));
                }
                let ps = self.shape(*gamma);
                if self.needs(*gamma) {
                    accumulate(&mut grads[gamma.0], Tensor::from_vec(ps, sum_dy_xhat).expect("shape"));
                }
                if self.needs(*beta) {
                    accumulate(&mut grads[beta.0], Tensor::from_vec(ps, sum_dy).expect("shape"));
                }
            }
            Op::Relu(x) => {
                let v = self.value(*x).data();
                let dx: Vec<T> = dy
                    .data()
                    .iter()
                    .zip(v)
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                accumulate(&mut grads[x.0], Tensor::from_vec(out_shape, dx).expect("shape"));
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let dx: Vec<T> = dy.data().iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)).collect();
                accumulate(&mut grads[x.0], Tensor::from_vec(out_shape, dx).expect("shape"));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        let g = reduce_to(dy, self.shape(v));
                        accumulate(&mut grads[v.0], g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let g = self.mul_grad(dy, *a, *b);
                    accumulate(&mut grads[a.0], g);
                }
                if self.needs(*b) {
                    let g = self.mul_grad(dy, *b, *a);
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::Scale(x, k) => {
                accumulate(&mut grads[x.0], dy.map(|g| g * *k));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p);
                    if self.needs(p) {
                        let mut g = Vec::with_capacity(ps.len());
                        let item_len = ps.channels * ps.plane();
                        for n in 0..ps.batch {
                            let start = n * out_shape.channels * out_shape.plane() + offset;
                            g.extend_from_slice(&dy.data()[start..start + item_len]);
                        }
                        accumulate(&mut grads[p.0], Tensor::from_vec(ps, g).expect("shape"));
                    }
                    offset += ps.channels * ps.plane();
                }
            }
            Op::MaxPool2 { input, argmax } | Op::GlobalMax { input, argmax } | Op::ChannelMax { input, argmax } => {
                let xs = self.shape(*input);
                let mut dx = vec![T::zero(); xs.len()];
                for (g, &i) in dy.data().iter().zip(argmax) {
                    dx[i as usize] += *g;
                }
                accumulate(&mut grads[input.0], Tensor::from_vec(xs, dx).expect("shape"));
            }
            Op::Upsample2(x) => {
                let s = self.shape(*x);
                let ty = upsample_taps(s.height);
                let tx = upsample_taps(s.width);
                let mut dx = vec![T::zero(); s.len()];
                let ow = out_shape.width;
                for nc in 0..s.batch * s.channels {
                    let gp = &dy.data()[nc * out_shape.plane()..(nc + 1) * out_shape.plane()];
                    let dp = &mut dx[nc * s.plane()..(nc + 1) * s.plane()];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        let fy = T::lit(fy);
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let fx = T::lit(fx);
                            let g = gp[oy * ow + ox];
                            let gt = g * (T::one() - fy);
                            let gb = g * fy;
                            dp[y0 * s.width + x0] += gt * (T::one() - fx);
                            dp[y0 * s.width + x1] += gt * fx;
                            dp[y1 * s.width + x0] += gb * (T::one() - fx);
                            dp[y1 * s.width + x1] += gb * fx;
                        }
                    }
                }
                accumulate(&mut grads[x.0], Tensor::from_vec(s, dx).expect("shape"));
            }
            Op::GlobalAvg(x) => {
                let s = self.shape(*x);
                let inv = T::one() / T::lit(s.plane() as f64);
                let mut dx = Vec::with_capacity(s.len());
                for &g in dy.data() {
                    dx.extend(std::iter::repeat(g * inv).take(s.plane()));
                }
                accumulate(&mut grads[x.0], Tensor::from_vec(s, dx).expect("shape"));
            }
            Op::ChannelMean(x) => {
                let s = self.shape(*x);
                let inv = T::one() / T::lit(s.channels as f64);
                let mut dx = Vec::with_capacity(s.len());
                for n in 0..s.batch {
                    let gp = dy.plane(n, 0);
                    for _ in 0..s.channels {
                        dx.extend(gp.iter().map(|&g| g * inv));
                    }
                }
                accumulate(&mut grads[x.0], Tensor::from_vec(s, dx).expect("shape"));
            }
            Op::MeanAll(x) => {
                let s = self.shape(*x);
                let g = dy.data()[0] / T::lit(s.len() as f64);
                accumulate(&mut grads[x.0], Tensor::full(s, g));
            }
        }
    }

    /// Gradient of a broadcast product w.r.t. `target`, reduced to its shape.
    fn mul_grad(&self, dy: &Tensor<T>, target: Var, other: Var) -> Tensor<T> {
        let ts = self.shape(target);
        let os = self.shape(other);
        let ov = self.value(other).data();
        let out = dy.shape();
        if ts == out && os == out {
            let d: Vec<T> = dy.data().iter().zip(ov).map(|(&g, &o)| g * o).collect();
            return Tensor::from_vec(ts, d).expect("shape");
        }
        let mut acc = vec![T::zero(); ts.len()];
        let g = dy.data();
        for_each_broadcast(out, ts, os, |o, it, io| acc[it] += g[o] * ov[io]);
        Tensor::from_vec(ts, acc).expect("shape")
    }
}

/// Sum `dy` down to `target` shape (undoing broadcasting).
fn reduce_to<T: Float>(dy: &Tensor<T>, target: Shape) -> Tensor<T> {
    let out = dy.shape();
    if target == out {
        return dy.clone();
    }
    let mut acc = vec![T::zero(); target.len()];
    let g = dy.data();
    for_each_broadcast(out, target, target, |o, it, _| acc[it] += g[o]);
    Tensor::from_vec(target, acc).expect("shape")
}
