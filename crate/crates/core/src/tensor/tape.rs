use super::kernels::{self, BatchNormSaved, ConvGeometry, NORM_EPS};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Broadcast patterns accepted by [`Tape::mul`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum MulPattern {
    Same,
    /// `[N,C,1,1] x [N,C,H,W]`
    PerChannel,
    /// `[N,1,H,W] x [N,C,H,W]`
    PerPixel,
}

enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geo: ConvGeometry },
    MaxPool { input: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    ChannelAvgPool(Var),
    Linear { input: Var, weight: Var, bias: Option<Var> },
    MatMulNt { a: Var, b: Var },
    Sigmoid(Var),
    Relu(Var),
    Mul { a: Var, b: Var, pattern: MulPattern },
    Add(Var, Var),
    Affine { input: Var, scale: f64 },
    Ln(Var),
    BatchNorm { input: Var, gamma: Var, beta: Var, saved: BatchNormSaved },
    BatchNormEval { input: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    L2Normalize { input: Var, norms: Vec<f64> },
    Softmax { input: Var, tau: f64 },
    LogSoftmax { input: Var, tau: f64 },
    Gather { input: Var, flat: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SliceRows { input: Var, start: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of differentiable operations.
///
/// Nodes are appended as operations execute, so inputs always precede the
/// nodes that consume them and the reverse pass is a single backward sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("temperature must be positive, got {tau}")))
    }
}

fn rows_cols(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(Error::shape(format!("{what} needs a rank-2 input, got {shape:?}"))),
    }
}

fn nchw(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match *shape {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::shape(format!("{what} needs a rank-4 input, got {shape:?}"))),
    }
}

fn softmax_row(logits: &[f64], tau: f64, out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = ((l - max) / tau).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Smallest `|x|` over every ReLU input recorded so far (infinite when
    /// there are none). Finite differences with a step below this margin
    /// never straddle a kink.
    pub fn relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(input) => Some(self.value(input)),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|x| x.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced on tape");
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Record a leaf. Gradients are only reported for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        groups: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geo = ConvGeometry::infer(
            self.value(input).shape(),
            self.value(weight).shape(),
            groups,
            stride,
            padding,
        )?;
        if let Some(b) = bias {
            if self.value(b).shape() != [geo.out_channels] {
                return Err(Error::shape(format!(
                    "conv2d bias must be [{}], got {:?}",
                    geo.out_channels,
                    self.value(b).shape()
                )));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &geo,
        );
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(out, Op::Conv2d { input, weight, bias, geo }, &inputs))
    }

    pub fn max_pool2d(&mut self, input: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let (out, argmax) = kernels::max_pool2d_forward(self.value(input), kernel, stride, padding)?;
        Ok(self.push(out, Op::MaxPool { input, argmax }, &[input]))
    }

    /// `[N,C,H,W] -> [N,C]`, mean over spatial positions.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = nchw(self.value(input).shape(), "global_avg_pool")?;
        let plane = h * w;
        let x = self.value(input).data();
        let data = (0..n * c)
            .map(|p| x[p * plane..(p + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        let out = Tensor::new(vec![n, c], data)?;
        Ok(self.push(out, Op::GlobalAvgPool(input), &[input]))
    }

    /// `[N,C,H,W] -> [N,1,H,W]`, mean over channels.
    pub fn channel_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = nchw(self.value(input).shape(), "channel_avg_pool")?;
        let plane = h * w;
        let x = self.value(input).data();
        let mut data = vec![0.0; n * plane];
        for b in 0..n {
            let dst = &mut data[b * plane..(b + 1) * plane];
            for ch in 0..c {
                for (d, s) in dst.iter_mut().zip(&x[(b * c + ch) * plane..][..plane]) {
                    *d += s;
                }
            }
            for d in dst.iter_mut() {
                *d /= c as f64;
            }
        }
        let out = Tensor::new(vec![n, 1, h, w], data)?;
        Ok(self.push(out, Op::ChannelAvgPool(input), &[input]))
    }

    /// `x W^T + b` for `x: [N,D_in]`, `W: [D_out,D_in]`, `b: [D_out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (n, d_in) = rows_cols(self.value(input).shape(), "linear")?;
        let (d_out, w_in) = rows_cols(self.value(weight).shape(), "linear weight")?;
        if w_in != d_in {
            return Err(Error::shape(format!("linear: input width {d_in}, weight expects {w_in}")));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [d_out] {
                return Err(Error::shape(format!("linear bias must be [{d_out}]")));
            }
        }
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let mut data = vec![0.0; n * d_out];
        for i in 0..n {
            let xr = &x[i * d_in..(i + 1) * d_in];
            for o in 0..d_out {
                let wr = &w[o * d_in..(o + 1) * d_in];
                let mut acc = bias.map_or(0.0, |b| self.value(b).data()[o]);
                for (a, b) in xr.iter().zip(wr) {
                    acc += a * b;
                }
                data[i * d_out + o] = acc;
            }
        }
        let out = Tensor::new(vec![n, d_out], data)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(out, Op::Linear { input, weight, bias }, &inputs))
    }

    /// `a b^T` for `a: [N,D]`, `b: [K,D]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = rows_cols(self.value(a).shape(), "matmul_nt")?;
        let (k, d2) = rows_cols(self.value(b).shape(), "matmul_nt")?;
        if d != d2 {
            return Err(Error::shape(format!("matmul_nt: inner extents {d} vs {d2}")));
        }
        let x = self.value(a).data();
        let y = self.value(b).data();
        let mut data = vec![0.0; n * k];
        for i in 0..n {
            let xr = &x[i * d..(i + 1) * d];
            for j in 0..k {
                data[i * k + j] = super::dot(xr, &y[j * d..(j + 1) * d]);
            }
        }
        let out = Tensor::new(vec![n, k], data)?;
        Ok(self.push(out, Op::MatMulNt { a, b }, &[a, b]))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let v = self.value(input);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| sigmoid(x)).collect())
            .expect("same shape");
        self.push(out, Op::Sigmoid(input), &[input])
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let v = self.value(input);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x.max(0.0)).collect())
            .expect("same shape");
        self.push(out, Op::Relu(input), &[input])
    }

    /// Elementwise product. `a` may be `[N,C,1,1]` or `[N,1,H,W]` against a
    /// `[N,C,H,W]` `b`; any other mismatch is a shape error.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        let pattern = if sa == sb {
            MulPattern::Same
        } else {
            match (sa, sb) {
                ([n, c, 1, 1], [n2, c2, _, _]) if n == n2 && c == c2 => MulPattern::PerChannel,
                ([n, 1, h, w], [n2, _, h2, w2]) if n == n2 && h == h2 && w == w2 => {
                    MulPattern::PerPixel
                }
                _ => {
                    return Err(Error::shape(format!("mul: cannot broadcast {sa:?} against {sb:?}")))
                }
            }
        };
        let av = self.value(a).data();
        let bt = self.value(b);
        let out = match pattern {
            MulPattern::Same => Tensor::from_fn(bt.shape(), |i| av[i] * bt.data()[i]),
            MulPattern::PerChannel => {
                let plane = sb[2] * sb[3];
                Tensor::from_fn(bt.shape(), |i| av[i / plane] * bt.data()[i])
            }
            MulPattern::PerPixel => {
                let (c, plane) = (sb[1], sb[2] * sb[3]);
                Tensor::from_fn(bt.shape(), |i| {
                    let n = i / (c * plane);
                    av[n * plane + i % plane] * bt.data()[i]
                })
            }
        };
        Ok(self.push(out, Op::Mul { a, b, pattern }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!("add: {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let out = Tensor::from_fn(ta.shape(), |i| ta.data()[i] + tb.data()[i]);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, input: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(input);
        let out = Tensor::from_fn(v.shape(), |i| scale * v.data()[i] + shift);
        self.push(out, Op::Affine { input, scale }, &[input])
    }

    /// Natural log; arguments below `f64::MIN_POSITIVE` are clamped.
    pub fn ln(&mut self, input: Var) -> Var {
        let v = self.value(input);
        let out = Tensor::from_fn(v.shape(), |i| v.data()[i].max(f64::MIN_POSITIVE).ln());
        self.push(out, Op::Ln(input), &[input])
    }

    /// Training-mode batch norm over `[N,C,H,W]`. Returns the output and the
    /// batch mean and (biased) variance per channel.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (out, saved) = kernels::batch_norm_train_forward(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            eps,
        )?;
        let (mean, var) = (saved.mean.clone(), saved.var.clone());
        let v = self.push(out, Op::BatchNorm { input, gamma, beta, saved }, &[input, gamma, beta]);
        Ok((v, mean, var))
    }

    /// Eval-mode batch norm with frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let [_, c, h, w] = nchw(self.value(input).shape(), "batchnorm2d")?;
        if self.value(gamma).shape() != [c]
            || self.value(beta).shape() != [c]
            || running_mean.len() != c
            || running_var.len() != c
        {
            return Err(Error::shape(format!("batchnorm2d parameters must all have {c} channels")));
        }
        let plane = h * w;
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mean = running_mean.to_vec();
        let (x, gm, bt) = (self.value(input), self.value(gamma), self.value(beta));
        let mut data = x.data().to_vec();
        for (p, values) in data.chunks_mut(plane).enumerate() {
            let ch = p % c;
            let (gain, m, s, shift) = (gm.data()[ch], mean[ch], inv_std[ch], bt.data()[ch]);
            for v in values.iter_mut() {
                *v = gain * (*v - m) * s + shift;
            }
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::BatchNormEval { input, gamma, beta, mean, inv_std }, &[input, gamma, beta]))
    }

    pub fn l2_normalize_rows(&mut self, input: Var) -> Result<Var> {
        let (n, d) = rows_cols(self.value(input).shape(), "l2_normalize_rows")?;
        let x = self.value(input).data();
        let norms: Vec<f64> = (0..n)
            .map(|i| x[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::from_fn(&[n, d], |i| x[i] / norms[i / d].max(NORM_EPS));
        Ok(self.push(out, Op::L2Normalize { input, norms }, &[input]))
    }

    /// Row-wise `softmax(x / tau)`, computed with max subtraction.
    pub fn softmax_rows(&mut self, input: Var, tau: f64) -> Result<Var> {
        check_tau(tau)?;
        let (n, k) = rows_cols(self.value(input).shape(), "softmax_rows")?;
        let x = self.value(input).data();
        let mut data = vec![0.0; n * k];
        for i in 0..n {
            softmax_row(&x[i * k..(i + 1) * k], tau, &mut data[i * k..(i + 1) * k]);
        }
        let out = Tensor::new(vec![n, k], data)?;
        Ok(self.push(out, Op::Softmax { input, tau }, &[input]))
    }

    /// Row-wise `log softmax(x / tau)`.
    pub fn log_softmax_rows(&mut self, input: Var, tau: f64) -> Result<Var> {
        check_tau(tau)?;
        let (n, k) = rows_cols(self.value(input).shape(), "log_softmax_rows")?;
        let x = self.value(input).data();
        let mut data = vec![0.0; n * k];
        for i in 0..n {
            let row = &x[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|l| ((l - max) / tau).exp()).sum::<f64>().ln();
            for (o, l) in data[i * k..(i + 1) * k].iter_mut().zip(row) {
                *o = (l - max) / tau - lse;
            }
        }
        let out = Tensor::new(vec![n, k], data)?;
        Ok(self.push(out, Op::LogSoftmax { input, tau }, &[input]))
    }

    /// Pick `(row, col)` entries of a rank-2 value into a rank-1 result.
    pub fn gather(&mut self, input: Var, picks: &[(usize, usize)]) -> Result<Var> {
        let (n, k) = rows_cols(self.value(input).shape(), "gather")?;
        if picks.is_empty() {
            return Err(Error::usage("gather needs at least one index"));
        }
        let mut flat = Vec::with_capacity(picks.len());
        for &(r, c) in picks {
            if r >= n || c >= k {
                return Err(Error::shape(format!("gather index ({r},{c}) outside [{n},{k}]")));
            }
            flat.push(r * k + c);
        }
        let x = self.value(input).data();
        let out = Tensor::new(vec![flat.len()], flat.iter().map(|&i| x[i]).collect())?;
        Ok(self.push(out, Op::Gather { input, flat }, &[input]))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(input), &[input])
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let v = self.value(input);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(input), &[input])
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(input), &[input]))
    }

    /// Rows `[start, end)` along the leading axis.
    pub fn slice_rows(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(input);
        let lead = *v.shape().first().ok_or_else(|| Error::shape("slice_rows on a scalar"))?;
        if start >= end || end > lead {
            return Err(Error::shape(format!("slice_rows {start}..{end} outside 0..{lead}")));
        }
        let inner: usize = v.shape()[1..].iter().product();
        let mut shape = v.shape().to_vec();
        shape[0] = end - start;
        let out = Tensor::new(shape, v.data()[start * inner..end * inner].to_vec())?;
        Ok(self.push(out, Op::SliceRows { input, start }, &[input]))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::usage("backward on an empty tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        // keep only leaves that asked for gradients
        for (idx, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.needs_grad) {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.needs(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += v;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let shaped = |like: &Tensor, data: Vec<f64>| Tensor::new(like.shape().to_vec(), data).expect("grad shape");
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geo } => {
                let cg = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    g,
                    geo,
                    self.needs(*input),
                );
                if let Some(gi) = cg.input {
                    self.accumulate(grads, *input, gi);
                }
                self.accumulate(grads, *weight, cg.weight);
                if let Some(b) = bias {
                    self.accumulate(grads, *b, cg.bias);
                }
            }
            Op::MaxPool { input, argmax } => {
                let x = self.value(*input);
                let mut gx = vec![0.0; x.len()];
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += g.data()[o];
                }
                self.accumulate(grads, *input, shaped(x, gx));
            }
            Op::GlobalAvgPool(input) => {
                let x = self.value(*input);
                let plane = x.shape()[2] * x.shape()[3];
                let gx = (0..x.len()).map(|i| g.data()[i / plane] / plane as f64).collect();
                self.accumulate(grads, *input, shaped(x, gx));
            }
            Op::ChannelAvgPool(input) => {
                let x = self.value(*input);
                let [_, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
                let plane = h * w;
                let gx = (0..x.len())
                    .map(|i| g.data()[(i / (c * plane)) * plane + i % plane] / c as f64)
                    .collect();
                self.accumulate(grads, *input, shaped(x, gx));
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, d_in) = (x.shape()[0], x.shape()[1]);
                let d_out = w.shape()[0];
                let gd = g.data();
                if self.needs(*input) {
                    let mut gx = vec![0.0; n * d_in];
                    for i in 0..n {
                        for o in 0..d_out {
                            let go = gd[i * d_out + o];
                            let wr = &w.data()[o * d_in..(o + 1) * d_in];
                            for (dst, wv) in gx[i * d_in..(i + 1) * d_in].iter_mut().zip(wr) {
                                *dst += go * wv;
                            }
                        }
                    }
                    self.accumulate(grads, *input, shaped(x, gx));
                }
                if self.needs(*weight) {
                    let mut gw = vec![0.0; d_out * d_in];
                    for i in 0..n {
                        let xr = &x.data()[i * d_in..(i + 1) * d_in];
                        for o in 0..d_out {
                            let go = gd[i * d_out + o];
                            for (dst, xv) in gw[o * d_in..(o + 1) * d_in].iter_mut().zip(xr) {
                                *dst += go * xv;
                            }
                        }
                    }
                    self.accumulate(grads, *weight, shaped(w, gw));
                }
                if let Some(b) = bias {
                    let gb = (0..d_out).map(|o| (0..n).map(|i| gd[i * d_out + o]).sum()).collect();
                    self.accumulate(grads, *b, shaped(self.value(*b), gb));
                }
            }
            Op::MatMulNt { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, d) = (ta.shape()[0], ta.shape()[1]);
                let k = tb.shape()[0];
                let gd = g.data();
                if self.needs(*a) {
                    let mut ga = vec![0.0; n * d];
                    for i in 0..n {
                        for j in 0..k {
                            let go = gd[i * k + j];
                            for (dst, bv) in ga[i * d..(i + 1) * d].iter_mut().zip(tb.row(j)) {
                                *dst += go * bv;
                            }
                        }
                    }
                    self.accumulate(grads, *a, shaped(ta, ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; k * d];
                    for i in 0..n {
                        for j in 0..k {
                            let go = gd[i * k + j];
                            for (dst, av) in gb[j * d..(j + 1) * d].iter_mut().zip(ta.row(i)) {
                                *dst += go * av;
                            }
                        }
                    }
                    self.accumulate(grads, *b, shaped(tb, gb));
                }
            }
            Op::Sigmoid(input) => {
                let gx = (0..out.len())
                    .map(|i| {
                        let s = out.data()[i];
                        g.data()[i] * s * (1.0 - s)
                    })
                    .collect();
                self.accumulate(grads, *input, shaped(out, gx));
            }
            Op::Relu(input) => {
                let x = self.value(*input);
                let gx = (0..x.len())
                    .map(|i| if x.data()[i] > 0.0 { g.data()[i] } else { 0.0 })
                    .collect();
                self.accumulate(grads, *input, shaped(x, gx));
            }
            Op::Mul { a, b, pattern } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let gd = g.data();
                let sb = tb.shape();
                let a_index = |i: usize| -> usize {
                    match pattern {
                        MulPattern::Same => i,
                        MulPattern::PerChannel => i / (sb[2] * sb[3]),
                        MulPattern::PerPixel => {
                            let plane = sb[2] * sb[3];
                            (i / (sb[1] * plane)) * plane + i % plane
                        }
                    }
                };
                if self.needs(*a) {
                    let mut ga = vec![0.0; ta.len()];
                    for i in 0..tb.len() {
                        ga[a_index(i)] += gd[i] * tb.data()[i];
                    }
                    self.accumulate(grads, *a, shaped(ta, ga));
                }
                if self.needs(*b) {
                    let gb = (0..tb.len()).map(|i| gd[i] * ta.data()[a_index(i)]).collect();
                    self.accumulate(grads, *b, shaped(tb, gb));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Affine { input, scale } => {
                let gx = g.data().iter().map(|v| v * scale).collect();
                self.accumulate(grads, *input, shaped(g, gx));
            }
            Op::Ln(input) => {
                let x = self.value(*input);
                let gx = (0..x.len())
                    .map(|i| g.data()[i] / x.data()[i].max(f64::MIN_POSITIVE))
                    .collect();
                self.accumulate(grads, *input, shaped(x, gx));
            }
            Op::BatchNorm { input, gamma, beta, saved } => {
                let (gx, gg, gb) = kernels::batch_norm_train_backward(
                    self.value(*input).shape(),
                    self.value(*gamma),
                    saved,
                    g,
                );
                self.accumulate(grads, *input, gx);
                self.accumulate(grads, *gamma, gg);
                self.accumulate(grads, *beta, gb);
            }
            Op::BatchNormEval { input, gamma, beta, mean, inv_std } => {
                let x = self.value(*input);
                let c = x.shape()[1];
                let plane = x.shape()[2] * x.shape()[3];
                let gm = self.value(*gamma).data();
                let gd = g.data();
                let gx = (0..x.len()).map(|i| gd[i] * gm[(i / plane) % c] * inv_std[(i / plane) % c]).collect();
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for i in 0..x.len() {
                    let ch = (i / plane) % c;
                    gg[ch] += gd[i] * (x.data()[i] - mean[ch]) * inv_std[ch];
                    gb[ch] += gd[i];
                }
                self.accumulate(grads, *input, shaped(x, gx));
                self.accumulate(grads, *gamma, Tensor::new(vec![c], gg).expect("grad shape"));
                self.accumulate(grads, *beta, Tensor::new(vec![c], gb).expect("grad shape"));
            }
            Op::L2Normalize { input, norms } => {
                let (n, d) = (out.shape()[0], out.shape()[1]);
                let mut gx = vec![0.0; n * d];
                for i in 0..n {
                    let y = &out.data()[i * d..(i + 1) * d];
                    let gy = &g.data()[i * d..(i + 1) * d];
                    let norm = norms[i];
                    if norm > NORM_EPS {
                        let proj = super::dot(y, gy);
                        for j in 0..d {
                            gx[i * d + j] = (gy[j] - y[j] * proj) / norm;
                        }
                    } else {
                        for j in 0..d {
                            gx[i * d + j] = gy[j] / NORM_EPS;
                        }
                    }
                }
                self.accumulate(grads, *input, shaped(out, gx));
            }
            Op::Softmax { input, tau } => {
                let (n, k) = (out.shape()[0], out.shape()[1]);
                let mut gx = vec![0.0; n * k];
                for i in 0..n {
                    let p = &out.data()[i * k..(i + 1) * k];
                    let gp = &g.data()[i * k..(i + 1) * k];
                    let inner = super::dot(p, gp);
                    for j in 0..k {
                        gx[i * k + j] = p[j] * (gp[j] - inner) / tau;
                    }
                }
                self.accumulate(grads, *input, shaped(out, gx));
            }
            Op::LogSoftmax { input, tau } => {
                let (n, k) = (out.shape()[0], out.shape()[1]);
                let mut gx = vec![0.0; n * k];
                for i in 0..n {
                    let lp = &out.data()[i * k..(i + 1) * k];
                    let gl = &g.data()[i * k..(i + 1) * k];
                    let total: f64 = gl.iter().sum();
                    for j in 0..k {
                        gx[i * k + j] = (gl[j] - lp[j].exp() * total) / tau;
                    }
                }
                self.accumulate(grads, *input, shaped(out, gx));
            }
            Op::Gather { input, flat } => {
                let x = self.value(*input);
                let mut gx = vec![0.0; x.len()];
                for (o, &src) in flat.iter().enumerate() {
                    gx[src] += g.data()[o];
                }
                self.accumulate(grads, *input, shaped(x, gx));
            }
            Op::Sum(input) => {
                let x = self.value(*input);
                self.accumulate(grads, *input, Tensor::full(x.shape(), g.item()));
            }
            Op::Mean(input) => {
                let x = self.value(*input);
                self.accumulate(grads, *input, Tensor::full(x.shape(), g.item() / x.len() as f64));
            }
            Op::Reshape(input) => {
                let x = self.value(*input);
                self.accumulate(grads, *input, shaped(x, g.data().to_vec()));
            }
            Op::SliceRows { input, start } => {
                let x = self.value(*input);
                let inner: usize = x.shape()[1..].iter().product();
                let mut gx = vec![0.0; x.len()];
                gx[start * inner..start * inner + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *input, shaped(x, gx));
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_loss_has_unit_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let grads = tape.backward(x).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 1.0);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0), true);
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).item(), 0.5);
        let grads = tape.backward(y).unwrap();
        assert!((grads.get(x).unwrap().item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_backward_is_usage_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
        assert!(matches!(Tape::new().backward(Var(0)), Err(Error::Usage(_))));
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap(), true);
        let a = tape.sigmoid(x);
        let b = tape.sigmoid(x);
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum(s);
        let twice = tape.backward(loss).unwrap().get(x).unwrap().clone();

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap(), true);
        let a = tape.sigmoid(x);
        let loss = tape.sum(a);
        let once = tape.backward(loss).unwrap().get(x).unwrap().clone();
        for (t, o) in twice.data().iter().zip(once.data()) {
            assert!((t - 2.0 * o).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap(), true);
        let y = tape.relu(x);
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn mul_rejects_other_broadcasts() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 2, 3, 1]));
        let b = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        assert!(matches!(tape.mul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(tape.softmax_rows(a, 0.0), Err(Error::Config(_))));
        assert!(matches!(tape.log_softmax_rows(a, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn softmax_known_values() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let p = tape.softmax_rows(a, 1.0).unwrap();
        let v = tape.value(p).data();
        assert!((v[0] - 0.73106).abs() < 1e-5 && (v[1] - 0.26894).abs() < 1e-5);
        let u = tape.constant(Tensor::full(&[1, 5], 3.7));
        let p = tape.softmax_rows(u, 0.05).unwrap();
        assert!(tape.value(p).data().iter().all(|x| (x - 0.2).abs() < 1e-15));
    }

    #[test]
    fn tape_nodes_are_topologically_ordered() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0), true);
        let y = tape.sigmoid(x);
        let z = tape.affine(y, 2.0, 0.0);
        assert!(x.index() < y.index() && y.index() < z.index());
    }
}
