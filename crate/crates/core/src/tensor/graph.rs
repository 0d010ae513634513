use super::kernels::{col2im, gemm, im2col, ConvGeom, Mat};
use super::{Param, Tensor};
use crate::error::{Error, Result};
use crate::quant::quantize_scalar;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running statistics for a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    MulConst(Var, Vec<f32>),
    Sum(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeom,
        cols: Vec<f32>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        training: bool,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    ChannelAffine {
        x: Var,
        matrix: Tensor,
    },
    Quantize {
        x: Var,
        lo: f32,
        hi: f32,
    },
    Narrow {
        x: Var,
        start: usize,
    },
    Concat(Vec<Var>),
    WeightedSum {
        terms: Vec<Var>,
        weights: Var,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// A single forward pass worth of recorded operations.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and the backward pass is a reverse scan.
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, p: &Param) -> Var {
        self.leaf(p.value.clone(), true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
            .expect("same length");
        let rg = self.rg(&[a]);
        self.push(out, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        self.unary(a, |v| v * c, Op::Scale(a, c))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        if self.value(a).shape() != c.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul_const",
                left: self.value(a).shape().to_vec(),
                right: c.shape().to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(c.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(c.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::MulConst(a, c.data().to_vec())))
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let k = self.constant(Tensor::full(self.value(a).shape(), c));
        self.add(a, k).expect("same shape")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f32;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::Reshape(a)))
    }

    /// Flattens `(n, ...)` to `(n, prod(...))`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape();
        let n = *shape
            .first()
            .ok_or_else(|| Error::invalid("flatten of a scalar"))?;
        let rest: usize = shape[1..].iter().product();
        self.reshape(a, &[n, rest])
    }

    /// Cross-correlation of `input (n, c, h, w)` with `weight (o, c, kh, kw)`.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        };
        let (n, c, h, wd) = x.dims4().map_err(|_| mismatch())?;
        let (o, wc, kh, kw) = w.dims4().map_err(|_| mismatch())?;
        if wc != c || stride == 0 || h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(mismatch());
        }
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (wd + 2 * padding - kw) / stride + 1,
        };
        let (rows, ncol) = (geom.rows(), geom.cols());
        let mut cols = vec![0.0; n * rows * ncol];
        let mut out = vec![0.0; n * o * ncol];
        for b in 0..n {
            let img = &x.data()[b * c * h * wd..(b + 1) * c * h * wd];
            let col = &mut cols[b * rows * ncol..(b + 1) * rows * ncol];
            im2col(img, &geom, col);
            gemm(
                o,
                rows,
                ncol,
                1.0,
                w.data(),
                Mat::row_major(rows),
                col,
                Mat::row_major(ncol),
                0.0,
                &mut out[b * o * ncol..(b + 1) * o * ncol],
                Mat::row_major(ncol),
            );
        }
        let out = Tensor::new(vec![n, o, geom.oh, geom.ow], out)?;
        if !self.requires_grad(weight) {
            cols = Vec::new();
        }
        let rg = self.rg(&[input, weight]);
        Ok(self.push(
            out,
            rg,
            Op::Conv2d {
                input,
                weight,
                geom,
                cols,
            },
        ))
    }

    /// Per-channel batch normalization of a rank-4 tensor.
    ///
    /// In training mode the batch statistics normalize the input and are
    /// folded into `stats`; otherwise the running statistics are used.
    pub fn batch_norm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats,
        training: bool,
    ) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        for p in [gamma, beta] {
            if self.value(p).len() != c {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm2d",
                    left: x.shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::invalid(format!(
                "batch_norm2d: running stats sized {} for {c} channels",
                stats.mean.len()
            )));
        }
        let hw = h * w;
        let m = n * hw;
        let (mean, var) = if training {
            let mut mean = vec![0.0f32; c];
            let mut var = vec![0.0f32; c];
            for ch in 0..c {
                let mut s = 0.0f32;
                for b in 0..n {
                    s += x.data()[(b * c + ch) * hw..][..hw].iter().sum::<f32>();
                }
                let mu = s / m as f32;
                let mut v = 0.0f32;
                for b in 0..n {
                    v += x.data()[(b * c + ch) * hw..][..hw]
                        .iter()
                        .map(|&t| (t - mu) * (t - mu))
                        .sum::<f32>();
                }
                mean[ch] = mu;
                var[ch] = v / m as f32;
            }
            let unbias = if m > 1 { m as f32 / (m - 1) as f32 } else { 1.0 };
            for ch in 0..c {
                stats.mean[ch] = (1.0 - stats.momentum) * stats.mean[ch] + stats.momentum * mean[ch];
                stats.var[ch] =
                    (1.0 - stats.momentum) * stats.var[ch] + stats.momentum * var[ch] * unbias;
            }
            (mean, var)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + stats.eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (x.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = xh * g[ch] + bt[ch];
                }
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(&[input, gamma, beta]);
        Ok(self.push(
            out,
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    /// Non-overlapping `k x k` max pooling.
    pub fn max_pool2d(&mut self, input: Var, k: usize) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        if k == 0 || h < k || w < k {
            return Err(Error::invalid(format!(
                "max_pool2d: window {k} does not fit shape {:?}",
                x.shape()
            )));
        }
        let (oh, ow) = (h / k, w / k);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = base + (oy * k + dy) * w + ox * k + dx;
                            if x.data()[i] > x.data()[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(x.data()[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, rg, Op::MaxPool { input, argmax }))
    }

    /// `x (n, in) @ w (out, in)^T + b (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let ok = xv.rank() == 2
            && wv.rank() == 2
            && xv.shape()[1] == wv.shape()[1]
            && bv.len() == wv.shape()[0];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: xv.shape().to_vec(),
                right: wv.shape().to_vec(),
            });
        }
        let (n, din, dout) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
        let mut out: Vec<f32> = (0..n).flat_map(|_| bv.data().iter().copied()).collect();
        gemm(
            n,
            din,
            dout,
            1.0,
            xv.data(),
            Mat::row_major(din),
            wv.data(),
            Mat::transposed(din),
            1.0,
            &mut out,
            Mat::row_major(dout),
        );
        let out = Tensor::new(vec![n, dout], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, rg, Op::Linear { x, w, b }))
    }

    fn last_axis(&self, a: Var, op: &'static str) -> Result<usize> {
        let k = self.value(a).shape().last().copied().unwrap_or(0);
        if k == 0 {
            return Err(Error::invalid(format!("{op} over an empty axis")));
        }
        Ok(k)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let k = self.last_axis(a, "softmax")?;
        let x = self.value(a);
        let data = x.data().chunks(k).flat_map(super::softmax_slice).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::Softmax(a)))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let k = self.last_axis(a, "log_softmax")?;
        let x = self.value(a);
        let data = x
            .data()
            .chunks(k)
            .flat_map(|row| {
                let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
                let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f32>().ln();
                row.iter().map(move |&v| v - lse)
            })
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::LogSoftmax(a)))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f32::ln, Op::Log(a))
    }

    /// Mixes channels of a rank-4 tensor with a constant `(out, in)` matrix:
    /// `y[:, o] = sum_i matrix[o, i] * (x[:, i] - pre[i]) + post[o]`.
    pub fn channel_affine(
        &mut self,
        x: Var,
        matrix: &Tensor,
        pre: Option<&[f32]>,
        post: Option<&[f32]>,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4()?;
        let (dout, din) = match matrix.shape() {
            [o, i] => (*o, *i),
            _ => (0, usize::MAX),
        };
        let bad_shift = pre.is_some_and(|p| p.len() != c) || post.is_some_and(|p| p.len() != dout);
        if din != c || bad_shift {
            return Err(Error::ShapeMismatch {
                op: "channel_affine",
                left: xv.shape().to_vec(),
                right: matrix.shape().to_vec(),
            });
        }
        let hw = h * w;
        let mut out = vec![0.0; n * dout * hw];
        let mut shifted = vec![0.0; c * hw];
        for b in 0..n {
            let img = &xv.data()[b * c * hw..(b + 1) * c * hw];
            let src: &[f32] = match pre {
                Some(p) => {
                    for ch in 0..c {
                        for (d, s) in shifted[ch * hw..(ch + 1) * hw]
                            .iter_mut()
                            .zip(&img[ch * hw..(ch + 1) * hw])
                        {
                            *d = s - p[ch];
                        }
                    }
                    &shifted
                }
                None => img,
            };
            let dst = &mut out[b * dout * hw..(b + 1) * dout * hw];
            if let Some(p) = post {
                for o in 0..dout {
                    dst[o * hw..(o + 1) * hw].fill(p[o]);
                }
            }
            gemm(
                dout,
                c,
                hw,
                1.0,
                matrix.data(),
                Mat::row_major(c),
                src,
                Mat::row_major(hw),
                if post.is_some() { 1.0 } else { 0.0 },
                dst,
                Mat::row_major(hw),
            );
        }
        let out = Tensor::new(vec![n, dout, h, w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            rg,
            Op::ChannelAffine {
                x,
                matrix: matrix.clone(),
            },
        ))
    }

    /// Uniform fake quantization onto `2^bits` levels of `[lo, hi]`, with a
    /// straight-through gradient inside the clamp range.
    pub fn quantize(&mut self, x: Var, lo: f32, hi: f32, bits: u32) -> Result<Var> {
        if !(1..=24).contains(&bits) {
            return Err(Error::invalid(format!("quantize: bit width {bits} out of range")));
        }
        if !(lo < hi) {
            return Err(Error::invalid(format!("quantize: empty range [{lo}, {hi}]")));
        }
        Ok(self.unary(
            x,
            |v| quantize_scalar(v, lo, hi, bits),
            Op::Quantize { x, lo, hi },
        ))
    }

    /// Channels `start..start + len` of a rank-4 tensor.
    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).narrow_channels(start, len)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::Narrow { x, start }))
    }

    /// Concatenation of rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_channels of nothing"))?;
        let (n, _, h, w) = self.value(*first).dims4()?;
        let mut total = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    left: self.value(*first).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
            total += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for b in 0..n {
            for &p in parts {
                let pc = self.value(p).shape()[1];
                out.extend_from_slice(&self.value(p).data()[b * pc * hw..(b + 1) * pc * hw]);
            }
        }
        let out = Tensor::new(vec![n, total, h, w], out)?;
        let rg = self.rg(parts);
        Ok(self.push(out, rg, Op::Concat(parts.to_vec())))
    }

    /// `sum_i weights[i] * terms[i]` for equally shaped terms and a rank-1
    /// weight vector.
    pub fn weighted_sum(&mut self, terms: &[Var], weights: Var) -> Result<Var> {
        let wv = self.value(weights);
        if terms.is_empty() || wv.len() != terms.len() {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                left: vec![terms.len()],
                right: wv.shape().to_vec(),
            });
        }
        for &t in &terms[1..] {
            self.same_shape("weighted_sum", terms[0], t)?;
        }
        let mut out = vec![0.0; self.value(terms[0]).len()];
        for (&t, &wgt) in terms.iter().zip(wv.data()) {
            for (o, v) in out.iter_mut().zip(self.value(t).data()) {
                *o += wgt * v;
            }
        }
        let out = Tensor::new(self.value(terms[0]).shape().to_vec(), out)?;
        let mut inputs = terms.to_vec();
        inputs.push(weights);
        let rg = self.rg(&inputs);
        Ok(self.push(
            out,
            rg,
            Op::WeightedSum {
                terms: terms.to_vec(),
                weights,
            },
        ))
    }

    fn accumulate(&mut self, v: Var, g: Vec<f32>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                    *a += b;
                }
            }
            None => {
                node.grad = Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"));
            }
        }
    }

    /// Reverse-mode sweep from a scalar `loss`, filling the gradient of every
    /// node that requires one and is reachable from it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let shape = self.value(loss).shape().to_vec();
        self.nodes[loss.0].grad = Some(Tensor::full(&shape, 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_op(i, &op, grad.data());
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn backward_op(&mut self, i: usize, op: &Op, dy: &[f32]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, dy.to_vec());
                self.accumulate(*b, dy.to_vec());
            }
            Op::Mul(a, b) => {
                let ga = dy.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                let gb = dy.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Scale(a, c) => self.accumulate(*a, dy.iter().map(|g| g * c).collect()),
            Op::MulConst(a, c) => self.accumulate(*a, dy.iter().zip(c).map(|(g, k)| g * k).collect()),
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(*a, vec![dy[0]; n]);
            }
            Op::Reshape(a) => self.accumulate(*a, dy.to_vec()),
            Op::Conv2d {
                input,
                weight,
                geom,
                cols,
            } => self.conv2d_backward(*input, *weight, geom, cols, dy),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let (n, c, h, w) = self.value(*input).dims4().expect("rank 4");
                let hw = h * w;
                let m = (n * hw) as f32;
                let mut sum_dy = vec![0.0f32; c];
                let mut sum_dy_xhat = vec![0.0f32; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for k in base..base + hw {
                            sum_dy[ch] += dy[k];
                            sum_dy_xhat[ch] += dy[k] * xhat[k];
                        }
                    }
                }
                if self.requires_grad(*input) {
                    let g = self.value(*gamma).data().to_vec();
                    let mut dx = vec![0.0; dy.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            let k0 = g[ch] * inv_std[ch];
                            for k in base..base + hw {
                                dx[k] = if *training {
                                    k0 / m * (m * dy[k] - sum_dy[ch] - xhat[k] * sum_dy_xhat[ch])
                                } else {
                                    k0 * dy[k]
                                };
                            }
                        }
                    }
                    self.accumulate(*input, dx);
                }
                self.accumulate(*gamma, sum_dy_xhat);
                self.accumulate(*beta, sum_dy);
            }
            Op::Relu(a) => {
                let g = dy
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(*a, g);
            }
            Op::MaxPool { input, argmax } => {
                let mut g = vec![0.0; self.value(*input).len()];
                for (&k, d) in argmax.iter().zip(dy) {
                    g[k] += d;
                }
                self.accumulate(*input, g);
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, din, dout) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; n * din];
                    gemm(n, dout, din, 1.0, dy, Mat::row_major(dout), wv.data(), Mat::row_major(din), 0.0, &mut dx, Mat::row_major(din));
                    self.accumulate(*x, dx);
                }
                if self.requires_grad(*w) {
                    let xv = self.value(*x);
                    let mut dw = vec![0.0; dout * din];
                    gemm(dout, n, din, 1.0, dy, Mat::transposed(dout), xv.data(), Mat::row_major(din), 0.0, &mut dw, Mat::row_major(din));
                    self.accumulate(*w, dw);
                }
                let mut db = vec![0.0; dout];
                for row in dy.chunks(dout) {
                    for (d, g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                self.accumulate(*b, db);
            }
            Op::Softmax(a) => {
                let y = &self.nodes[i].value;
                let k = *y.shape().last().expect("nonempty");
                let g = y
                    .data()
                    .chunks(k)
                    .zip(dy.chunks(k))
                    .flat_map(|(yr, gr)| {
                        let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        yr.iter().zip(gr).map(move |(yv, gv)| yv * (gv - dot))
                    })
                    .collect();
                self.accumulate(*a, g);
            }
            Op::LogSoftmax(a) => {
                let y = &self.nodes[i].value;
                let k = *y.shape().last().expect("nonempty");
                let g = y
                    .data()
                    .chunks(k)
                    .zip(dy.chunks(k))
                    .flat_map(|(yr, gr)| {
                        let s: f32 = gr.iter().sum();
                        yr.iter().zip(gr).map(move |(yv, gv)| gv - yv.exp() * s)
                    })
                    .collect();
                self.accumulate(*a, g);
            }
            Op::Log(a) => {
                let g = dy.iter().zip(self.value(*a).data()).map(|(g, x)| g / x).collect();
                self.accumulate(*a, g);
            }
            Op::ChannelAffine { x, matrix } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("rank 4");
                let dout = matrix.shape()[0];
                let hw = h * w;
                let mut dx = vec![0.0; n * c * hw];
                for b in 0..n {
                    gemm(
                        c,
                        dout,
                        hw,
                        1.0,
                        matrix.data(),
                        Mat::transposed(c),
                        &dy[b * dout * hw..(b + 1) * dout * hw],
                        Mat::row_major(hw),
                        0.0,
                        &mut dx[b * c * hw..(b + 1) * c * hw],
                        Mat::row_major(hw),
                    );
                }
                self.accumulate(*x, dx);
            }
            Op::Quantize { x, lo, hi } => {
                let g = dy
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, v)| if *v >= *lo && *v <= *hi { *g } else { 0.0 })
                    .collect();
                self.accumulate(*x, g);
            }
            Op::Narrow { x, start } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("rank 4");
                let len = self.nodes[i].value.shape()[1];
                let hw = h * w;
                let mut g = vec![0.0; n * c * hw];
                for b in 0..n {
                    g[(b * c + start) * hw..(b * c + start + len) * hw]
                        .copy_from_slice(&dy[b * len * hw..(b + 1) * len * hw]);
                }
                self.accumulate(*x, g);
            }
            Op::Concat(parts) => {
                let (n, total, h, w) = self.nodes[i].value.dims4().expect("rank 4");
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    if self.requires_grad(p) {
                        let mut g = Vec::with_capacity(n * pc * hw);
                        for b in 0..n {
                            g.extend_from_slice(&dy[(b * total + offset) * hw..][..pc * hw]);
                        }
                        self.accumulate(p, g);
                    }
                    offset += pc;
                }
            }
            Op::WeightedSum { terms, weights } => {
                let wv = self.value(*weights).data().to_vec();
                let mut dw = vec![0.0; terms.len()];
                for (k, &t) in terms.iter().enumerate() {
                    dw[k] = self.value(t).data().iter().zip(dy).map(|(a, b)| a * b).sum();
                }
                for (&t, &wk) in terms.iter().zip(&wv) {
                    if self.requires_grad(t) {
                        self.accumulate(t, dy.iter().map(|g| g * wk).collect());
                    }
                }
                self.accumulate(*weights, dw);
            }
        }
    }

    fn conv2d_backward(&mut self, input: Var, weight: Var, geom: &ConvGeom, cols: &[f32], dy: &[f32]) {
        let n = self.value(input).shape()[0];
        let o = self.value(weight).shape()[0];
        let (rows, ncol) = (geom.rows(), geom.cols());
        if self.requires_grad(weight) {
            let mut dw = vec![0.0; o * rows];
            for b in 0..n {
                gemm(
                    o,
                    ncol,
                    rows,
                    1.0,
                    &dy[b * o * ncol..(b + 1) * o * ncol],
                    Mat::row_major(ncol),
                    &cols[b * rows * ncol..(b + 1) * rows * ncol],
                    Mat::transposed(ncol),
                    1.0,
                    &mut dw,
                    Mat::row_major(rows),
                );
            }
            self.accumulate(weight, dw);
        }
        if self.requires_grad(input) {
            let img_len = geom.c * geom.h * geom.w;
            let mut dx = vec![0.0; n * img_len];
            let mut dcols = vec![0.0; rows * ncol];
            let wd = self.value(weight).data();
            for b in 0..n {
                gemm(
                    rows,
                    o,
                    ncol,
                    1.0,
                    wd,
                    Mat::transposed(rows),
                    &dy[b * o * ncol..(b + 1) * o * ncol],
                    Mat::row_major(ncol),
                    0.0,
                    &mut dcols,
                    Mat::row_major(ncol),
                );
                col2im(&dcols, geom, &mut dx[b * img_len..(b + 1) * img_len]);
            }
            self.accumulate(input, dx);
        }
    }
}
