//! Tape-based reverse-mode automatic differentiation over tensors.
//!
//! A `Graph` records one forward pass; each op stores its operand node ids
//! and whatever it needs to replay the chain rule. `backward` walks the
//! tape in reverse with fresh per-pass adjoints and then adds them into the
//! persistent per-node gradients, so calling it twice without zeroing
//! doubles every gradient exactly. Accumulation order is the recording
//! order, which keeps sequential runs bitwise deterministic.

use crate::error::{Error, Result};
use crate::tensor::{
    bilinear_sample, conv2d, conv2d_grad_input, conv2d_grad_weights, group_index, reduce_moments,
    Axes, KernelWeights, Shape, Tensor,
};

/// Handle to a node in a `Graph`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

struct OpRecord {
    out: usize,
    op: Op,
}

enum Op {
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, k: f64 },
    Conv2d { input: usize, weights: usize, groups: usize, stride: usize, pad: usize },
    DeformConv { input: usize, offsets: usize, modulation: usize, weights: usize },
    GridSample { input: usize, offsets: usize },
    ConcatC { a: usize, b: usize },
    SliceC { a: usize, start: usize },
    Sigmoid { a: usize },
    Relu { a: usize },
    Gelu { a: usize },
    MomentNorm { a: usize, axes: Axes, inv_std: Tensor },
    RmsNormC { a: usize, eps: f64 },
    ChannelAffineConst { a: usize, scale: Vec<f64> },
    ChannelAffineParam { a: usize, gamma: usize, beta: usize },
    MaxPool3x3s2 { a: usize, argmax: Vec<u32> },
    GlobalAvgPool { a: usize },
    Linear { a: usize, w: usize, b: usize },
    SumAll { a: usize },
    PickLogit { a: usize, sample: usize, class: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, softmax: Tensor },
}

/// Recording tape plus node storage for one forward/backward cycle.
#[derive(Default)]
pub struct Graph {
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    requires: Vec<bool>,
    ops: Vec<OpRecord>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push_node(&mut self, value: Tensor, requires: bool) -> Var {
        let id = self.values.len();
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.requires.push(requires);
        Var { id }
    }

    fn push_op(&mut self, value: Tensor, requires: bool, op: Op) -> Var {
        let out = self.push_node(value, requires);
        self.ops.push(OpRecord { out: out.id, op });
        out
    }

    /// Register an input node. Only requires-grad leaves (and nodes derived
    /// from them) accumulate gradient.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_node(value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.id]
    }

    pub fn grad(&self, v: Var) -> &Tensor {
        &self.grads[v.id]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.id]
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.values[v.id].data()[0]
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.iter_mut() {
            g.data_mut().fill(0.0);
        }
    }

    fn req1(&self, a: Var) -> bool {
        self.requires[a.id]
    }

    fn req2(&self, a: Var, b: Var) -> bool {
        self.requires[a.id] || self.requires[b.id]
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.values[a.id].add(&self.values[b.id])?;
        Ok(self.push_op(value, self.req2(a, b), Op::Add { a: a.id, b: b.id }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.values[a.id].mul(&self.values[b.id])?;
        Ok(self.push_op(value, self.req2(a, b), Op::Mul { a: a.id, b: b.id }))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.values[a.id].scale(k);
        self.push_op(value, self.req1(a), Op::Scale { a: a.id, k })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.values[a.id].map(sigmoid);
        self.push_op(value, self.req1(a), Op::Sigmoid { a: a.id })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.values[a.id].map(|x| if x > 0.0 { x } else { 0.0 });
        self.push_op(value, self.req1(a), Op::Relu { a: a.id })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.values[a.id].map(gelu);
        self.push_op(value, self.req1(a), Op::Gelu { a: a.id })
    }

    // ---- convolution family ----

    pub fn conv2d(&mut self, input: Var, weights: Var, groups: usize, stride: usize, pad: usize) -> Result<Var> {
        let kw = KernelWeights::new(self.values[weights.id].clone(), groups)?;
        let value = conv2d(&self.values[input.id], &kw, stride, pad)?;
        Ok(self.push_op(
            value,
            self.req2(input, weights),
            Op::Conv2d { input: input.id, weights: weights.id, groups, stride, pad },
        ))
    }

    /// Modulated deformable 3x3 convolution, stride 1, pad 1.
    ///
    /// `offsets` carries 2K = 18 channels of (dy, dx) pairs in k-major
    /// order; `modulation` carries K = 9 per-tap gates. Differentiable in
    /// all four operands.
    pub fn deform_conv2d(&mut self, input: Var, offsets: Var, modulation: Var, weights: Var) -> Result<Var> {
        let s = self.values[input.id].shape();
        let os = self.values[offsets.id].shape();
        let ms = self.values[modulation.id].shape();
        let ws = self.values[weights.id].shape();
        if ws.c != s.c || ws.h != 3 || ws.w != 3 {
            return Err(Error::Shape(format!(
                "deform_conv2d weights {ws} incompatible with input {s} (want (c_out, {}, 3, 3))",
                s.c
            )));
        }
        if os != Shape::new(s.n, 18, s.h, s.w) || ms != Shape::new(s.n, 9, s.h, s.w) {
            return Err(Error::Shape(format!(
                "deform_conv2d offsets {os} / modulation {ms} incompatible with input {s}"
            )));
        }
        let value = deform_forward(
            &self.values[input.id],
            &self.values[offsets.id],
            &self.values[modulation.id],
            &self.values[weights.id],
        );
        let requires = self.req2(input, offsets) || self.req2(modulation, weights);
        Ok(self.push_op(
            value,
            requires,
            Op::DeformConv {
                input: input.id,
                offsets: offsets.id,
                modulation: modulation.id,
                weights: weights.id,
            },
        ))
    }

    /// Bilinear resampling of each channel at (identity + offsets) grid
    /// positions; `offsets` has 2 channels (dy, dx).
    pub fn grid_sample(&mut self, input: Var, offsets: Var) -> Result<Var> {
        let s = self.values[input.id].shape();
        let os = self.values[offsets.id].shape();
        if os != Shape::new(s.n, 2, s.h, s.w) {
            return Err(Error::Shape(format!(
                "grid_sample offsets {os} incompatible with input {s} (want (n, 2, h, w))"
            )));
        }
        let input_t = &self.values[input.id];
        let off_t = &self.values[offsets.id];
        let mut out = Tensor::zeros(s);
        for n in 0..s.n {
            for y in 0..s.h {
                for x in 0..s.w {
                    let sy = y as f64 + off_t.at(n, 0, y, x);
                    let sx = x as f64 + off_t.at(n, 1, y, x);
                    for c in 0..s.c {
                        *out.at_mut(n, c, y, x) = bilinear_sample(input_t, sy, sx, n, c);
                    }
                }
            }
        }
        Ok(self.push_op(
            out,
            self.req2(input, offsets),
            Op::GridSample { input: input.id, offsets: offsets.id },
        ))
    }

    // ---- channel plumbing ----

    pub fn concat_c(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.values[a.id].shape();
        let sb = self.values[b.id].shape();
        if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
            return Err(Error::Shape(format!("concat_c on mismatched shapes {sa} vs {sb}")));
        }
        let out_shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let mut out = Tensor::zeros(out_shape);
        for n in 0..sa.n {
            for c in 0..sa.c {
                out.plane_mut(n, c).copy_from_slice(self.values[a.id].plane(n, c));
            }
            for c in 0..sb.c {
                out.plane_mut(n, sa.c + c).copy_from_slice(self.values[b.id].plane(n, c));
            }
        }
        Ok(self.push_op(out, self.req2(a, b), Op::ConcatC { a: a.id, b: b.id }))
    }

    pub fn slice_c(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.values[a.id].shape();
        if start >= end || end > s.c {
            return Err(Error::Shape(format!(
                "slice_c [{start}, {end}) out of range for {} channels",
                s.c
            )));
        }
        let out_shape = Shape::new(s.n, end - start, s.h, s.w);
        let mut out = Tensor::zeros(out_shape);
        for n in 0..s.n {
            for c in start..end {
                out.plane_mut(n, c - start).copy_from_slice(self.values[a.id].plane(n, c));
            }
        }
        Ok(self.push_op(out, self.req1(a), Op::SliceC { a: a.id, start }))
    }

    // ---- normalization ----

    /// (x - mean) / sqrt(var + eps) with population moments over `axes`.
    pub fn moment_norm(&mut self, a: Var, axes: Axes, eps: f64) -> Result<Var> {
        let (mean, var) = reduce_moments(&self.values[a.id], axes)?;
        let inv_std = var.map(|v| 1.0 / (v + eps).sqrt());
        let s = self.values[a.id].shape();
        let mut out = Tensor::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..s.h {
                    for x in 0..s.w {
                        let gi = group_index(&mean, axes, n, c, y, x);
                        *out.at_mut(n, c, y, x) =
                            (self.values[a.id].at(n, c, y, x) - mean.data()[gi]) * inv_std.data()[gi];
                    }
                }
            }
        }
        Ok(self.push_op(out, self.req1(a), Op::MomentNorm { a: a.id, axes, inv_std }))
    }

    /// x / (rms(x) + eps) with the rms over channels at each (n, y, x).
    pub fn rms_norm_c(&mut self, a: Var, eps: f64) -> Var {
        let s = self.values[a.id].shape();
        let mut out = Tensor::zeros(s);
        for n in 0..s.n {
            for y in 0..s.h {
                for x in 0..s.w {
                    let mut sq = 0.0;
                    for c in 0..s.c {
                        let v = self.values[a.id].at(n, c, y, x);
                        sq += v * v;
                    }
                    let denom = (sq / s.c as f64).sqrt() + eps;
                    for c in 0..s.c {
                        *out.at_mut(n, c, y, x) = self.values[a.id].at(n, c, y, x) / denom;
                    }
                }
            }
        }
        self.push_op(out, self.req1(a), Op::RmsNormC { a: a.id, eps })
    }

    /// y = x * scale[c] + shift[c] with constant (non-differentiable)
    /// per-channel coefficients. Used for eval-mode batch norm.
    pub fn channel_affine_const(&mut self, a: Var, scale: Vec<f64>, shift: Vec<f64>) -> Result<Var> {
        let s = self.values[a.id].shape();
        if scale.len() != s.c || shift.len() != s.c {
            return Err(Error::Shape(format!(
                "channel_affine_const expects {} coefficients, got {}/{}",
                s.c,
                scale.len(),
                shift.len()
            )));
        }
        let mut out = Tensor::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                let (sc, sh) = (scale[c], shift[c]);
                for (o, i) in out.plane_mut(n, c).iter_mut().zip(self.values[a.id].plane(n, c)) {
                    *o = i * sc + sh;
                }
            }
        }
        Ok(self.push_op(out, self.req1(a), Op::ChannelAffineConst { a: a.id, scale }))
    }

    /// y = x * gamma[c] + beta[c] with trainable per-channel parameters,
    /// gamma and beta shaped (1, c, 1, 1).
    pub fn channel_affine_param(&mut self, a: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.values[a.id].shape();
        let expect = Shape::new(1, s.c, 1, 1);
        if self.values[gamma.id].shape() != expect || self.values[beta.id].shape() != expect {
            return Err(Error::Shape(format!(
                "channel_affine_param gamma/beta must be {expect}"
            )));
        }
        let mut out = Tensor::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                let g = self.values[gamma.id].data()[c];
                let b = self.values[beta.id].data()[c];
                for (o, i) in out.plane_mut(n, c).iter_mut().zip(self.values[a.id].plane(n, c)) {
                    *o = i * g + b;
                }
            }
        }
        let requires = self.req2(a, gamma) || self.req1(beta);
        Ok(self.push_op(
            out,
            requires,
            Op::ChannelAffineParam { a: a.id, gamma: gamma.id, beta: beta.id },
        ))
    }

    // ---- pooling / head ----

    /// 3x3 max pool, stride 2, pad 1; padding cells never win the max.
    pub fn max_pool_3x3s2(&mut self, a: Var) -> Result<Var> {
        let s = self.values[a.id].shape();
        if s.h < 2 || s.w < 2 {
            return Err(Error::Shape(format!("max pool input {s} too small")));
        }
        let oh = (s.h + 1) / 2;
        let ow = (s.w + 1) / 2;
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
        let mut argmax = vec![0u32; out.numel()];
        let mut oi = 0;
        for n in 0..s.n {
            for c in 0..s.c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let iy = (oy as i64) * 2 + ky - 1;
                                let ix = (ox as i64) * 2 + kx - 1;
                                if iy < 0 || ix < 0 || iy >= s.h as i64 || ix >= s.w as i64 {
                                    continue;
                                }
                                let idx = self.values[a.id].idx(n, c, iy as usize, ix as usize);
                                let v = self.values[a.id].data()[idx];
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                        out.data_mut()[oi] = best;
                        argmax[oi] = best_idx as u32;
                        oi += 1;
                    }
                }
            }
        }
        Ok(self.push_op(out, self.req1(a), Op::MaxPool3x3s2 { a: a.id, argmax }))
    }

    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let s = self.values[a.id].shape();
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
        let hw = (s.h * s.w) as f64;
        for n in 0..s.n {
            for c in 0..s.c {
                let sum: f64 = self.values[a.id].plane(n, c).iter().sum();
                *out.at_mut(n, c, 0, 0) = sum / hw;
            }
        }
        self.push_op(out, self.req1(a), Op::GlobalAvgPool { a: a.id })
    }

    /// Fully connected head: logits = W x + b for input (n, features, 1, 1),
    /// W (classes, features, 1, 1), b (1, classes, 1, 1).
    pub fn linear(&mut self, a: Var, w: Var, b: Var) -> Result<Var> {
        let s = self.values[a.id].shape();
        let ws = self.values[w.id].shape();
        let bs = self.values[b.id].shape();
        if s.h != 1 || s.w != 1 {
            return Err(Error::Shape(format!("linear input must be (n, f, 1, 1), got {s}")));
        }
        if ws.c != s.c || ws.h != 1 || ws.w != 1 || bs != Shape::new(1, ws.n, 1, 1) {
            return Err(Error::Shape(format!(
                "linear weights {ws} / bias {bs} incompatible with input {s}"
            )));
        }
        let (classes, feat) = (ws.n, ws.c);
        let mut out = Tensor::zeros(Shape::new(s.n, classes, 1, 1));
        for n in 0..s.n {
            let xrow = &self.values[a.id].data()[n * feat..(n + 1) * feat];
            for cls in 0..classes {
                let wrow = &self.values[w.id].data()[cls * feat..(cls + 1) * feat];
                let mut acc = self.values[b.id].data()[cls];
                for f in 0..feat {
                    acc += wrow[f] * xrow[f];
                }
                *out.at_mut(n, cls, 0, 0) = acc;
            }
        }
        let requires = self.req2(a, w) || self.req1(b);
        Ok(self.push_op(out, requires, Op::Linear { a: a.id, w: w.id, b: b.id }))
    }

    // ---- scalar reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.values[a.id].sum());
        self.push_op(value, self.req1(a), Op::SumAll { a: a.id })
    }

    /// Select one logit as a scalar node (gradCAM seed).
    pub fn pick_logit(&mut self, a: Var, sample: usize, class: usize) -> Result<Var> {
        let s = self.values[a.id].shape();
        if sample >= s.n || class >= s.c {
            return Err(Error::Shape(format!(
                "pick_logit ({sample}, {class}) out of range for {s}"
            )));
        }
        let value = Tensor::scalar(self.values[a.id].at(sample, class, 0, 0));
        Ok(self.push_op(value, self.req1(a), Op::PickLogit { a: a.id, sample, class }))
    }

    /// Mean softmax cross-entropy over the batch; logits (n, classes, 1, 1).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.values[logits.id].shape();
        if s.h != 1 || s.w != 1 {
            return Err(Error::Shape(format!("cross_entropy logits must be (n, classes, 1, 1), got {s}")));
        }
        if targets.len() != s.n {
            return Err(Error::Shape(format!(
                "cross_entropy got {} targets for batch of {}",
                targets.len(),
                s.n
            )));
        }
        let classes = s.c;
        let mut softmax = Tensor::zeros(s);
        let mut loss = 0.0;
        for (n, &t) in targets.iter().enumerate() {
            if t >= classes {
                return Err(Error::InvalidArg(format!("target {t} >= {classes} classes")));
            }
            let row = &self.values[logits.id].data()[n * classes..(n + 1) * classes];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|&l| (l - m).exp()).sum();
            let lse = m + sum_exp.ln();
            loss += lse - row[t];
            for c in 0..classes {
                softmax.data_mut()[n * classes + c] = (row[c] - lse).exp();
            }
        }
        let value = Tensor::scalar(loss / s.n as f64);
        Ok(self.push_op(
            value,
            self.req1(logits),
            Op::CrossEntropy { logits: logits.id, targets: targets.to_vec(), softmax },
        ))
    }

    // ---- backward ----

    /// Accumulate d(loss)/d(node) into every requires-grad node reachable
    /// from `loss`, which must be scalar-shaped.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.values[loss.id].shape().is_scalar() {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got {}",
                self.values[loss.id].shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.values.len()).map(|_| None).collect();
        adj[loss.id] = Some(Tensor::scalar(1.0));
        for rec in self.ops.iter().rev() {
            if !self.requires[rec.out] {
                continue;
            }
            let dout = match adj[rec.out].take() {
                Some(d) => d,
                None => continue,
            };
            self.apply_backward(&rec.op, rec.out, &dout, &mut adj);
            adj[rec.out] = Some(dout);
        }
        for (i, a) in adj.into_iter().enumerate() {
            if self.requires[i] {
                if let Some(a) = a {
                    for (g, d) in self.grads[i].data_mut().iter_mut().zip(a.data()) {
                        *g += d;
                    }
                }
            }
        }
        Ok(())
    }

    fn apply_backward(&self, op: &Op, out: usize, dout: &Tensor, adj: &mut [Option<Tensor>]) {
        let acc = |adj: &mut [Option<Tensor>], id: usize, t: Tensor| {
            match &mut adj[id] {
                Some(existing) => {
                    for (e, v) in existing.data_mut().iter_mut().zip(t.data()) {
                        *e += v;
                    }
                }
                slot => *slot = Some(t),
            }
        };
        match op {
            Op::Add { a, b } => {
                if self.requires[*a] {
                    acc(adj, *a, dout.clone());
                }
                if self.requires[*b] {
                    acc(adj, *b, dout.clone());
                }
            }
            Op::Mul { a, b } => {
                if self.requires[*a] {
                    acc(adj, *a, dout.mul(&self.values[*b]).unwrap());
                }
                if self.requires[*b] {
                    acc(adj, *b, dout.mul(&self.values[*a]).unwrap());
                }
            }
            Op::Scale { a, k } => {
                if self.requires[*a] {
                    acc(adj, *a, dout.scale(*k));
                }
            }
            Op::Conv2d { input, weights, groups, stride, pad } => {
                let kw = KernelWeights::new(self.values[*weights].clone(), *groups).unwrap();
                if self.requires[*input] {
                    let g = conv2d_grad_input(dout, &kw, *stride, *pad, self.values[*input].shape());
                    acc(adj, *input, g);
                }
                if self.requires[*weights] {
                    let g = conv2d_grad_weights(dout, &self.values[*input], &kw, *stride, *pad);
                    acc(adj, *weights, g);
                }
            }
            Op::DeformConv { input, offsets, modulation, weights } => {
                let grads = deform_backward(
                    dout,
                    &self.values[*input],
                    &self.values[*offsets],
                    &self.values[*modulation],
                    &self.values[*weights],
                );
                if self.requires[*input] {
                    acc(adj, *input, grads.0);
                }
                if self.requires[*offsets] {
                    acc(adj, *offsets, grads.1);
                }
                if self.requires[*modulation] {
                    acc(adj, *modulation, grads.2);
                }
                if self.requires[*weights] {
                    acc(adj, *weights, grads.3);
                }
            }
            Op::GridSample { input, offsets } => {
                let (di, doff) = grid_sample_backward(dout, &self.values[*input], &self.values[*offsets]);
                if self.requires[*input] {
                    acc(adj, *input, di);
                }
                if self.requires[*offsets] {
                    acc(adj, *offsets, doff);
                }
            }
            Op::ConcatC { a, b } => {
                let sa = self.values[*a].shape();
                let sb = self.values[*b].shape();
                if self.requires[*a] {
                    let mut da = Tensor::zeros(sa);
                    for n in 0..sa.n {
                        for c in 0..sa.c {
                            da.plane_mut(n, c).copy_from_slice(dout.plane(n, c));
                        }
                    }
                    acc(adj, *a, da);
                }
                if self.requires[*b] {
                    let mut db = Tensor::zeros(sb);
                    for n in 0..sb.n {
                        for c in 0..sb.c {
                            db.plane_mut(n, c).copy_from_slice(dout.plane(n, sa.c + c));
                        }
                    }
                    acc(adj, *b, db);
                }
            }
            Op::SliceC { a, start } => {
                if self.requires[*a] {
                    let sa = self.values[*a].shape();
                    let so = dout.shape();
                    let mut da = Tensor::zeros(sa);
                    for n in 0..so.n {
                        for c in 0..so.c {
                            da.plane_mut(n, start + c).copy_from_slice(dout.plane(n, c));
                        }
                    }
                    acc(adj, *a, da);
                }
            }
            Op::Sigmoid { a } => {
                if self.requires[*a] {
                    let y = &self.values[out];
                    let g = dout.zip_map(y, |d, y| d * y * (1.0 - y)).unwrap();
                    acc(adj, *a, g);
                }
            }
            Op::Relu { a } => {
                if self.requires[*a] {
                    let g = dout.zip_map(&self.values[*a], |d, x| if x > 0.0 { d } else { 0.0 }).unwrap();
                    acc(adj, *a, g);
                }
            }
            Op::Gelu { a } => {
                if self.requires[*a] {
                    let g = dout.zip_map(&self.values[*a], |d, x| d * gelu_grad(x)).unwrap();
                    acc(adj, *a, g);
                }
            }
            Op::MomentNorm { a, axes, inv_std } => {
                if self.requires[*a] {
                    acc(adj, *a, moment_norm_backward(dout, &self.values[out], *axes, inv_std));
                }
            }
            Op::RmsNormC { a, eps } => {
                if self.requires[*a] {
                    acc(adj, *a, rms_norm_backward(dout, &self.values[*a], *eps));
                }
            }
            Op::ChannelAffineConst { a, scale } => {
                if self.requires[*a] {
                    let s = dout.shape();
                    let mut da = Tensor::zeros(s);
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let k = scale[c];
                            for (o, d) in da.plane_mut(n, c).iter_mut().zip(dout.plane(n, c)) {
                                *o = d * k;
                            }
                        }
                    }
                    acc(adj, *a, da);
                }
            }
            Op::ChannelAffineParam { a, gamma, beta } => {
                let s = dout.shape();
                if self.requires[*a] {
                    let mut da = Tensor::zeros(s);
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let g = self.values[*gamma].data()[c];
                            for (o, d) in da.plane_mut(n, c).iter_mut().zip(dout.plane(n, c)) {
                                *o = d * g;
                            }
                        }
                    }
                    acc(adj, *a, da);
                }
                if self.requires[*gamma] {
                    let mut dg = Tensor::zeros(Shape::new(1, s.c, 1, 1));
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let sum: f64 = dout
                                .plane(n, c)
                                .iter()
                                .zip(self.values[*a].plane(n, c))
                                .map(|(d, x)| d * x)
                                .sum();
                            dg.data_mut()[c] += sum;
                        }
                    }
                    acc(adj, *gamma, dg);
                }
                if self.requires[*beta] {
                    let mut db = Tensor::zeros(Shape::new(1, s.c, 1, 1));
                    for n in 0..s.n {
                        for c in 0..s.c {
                            db.data_mut()[c] += dout.plane(n, c).iter().sum::<f64>();
                        }
                    }
                    acc(adj, *beta, db);
                }
            }
            Op::MaxPool3x3s2 { a, argmax } => {
                if self.requires[*a] {
                    let mut da = Tensor::zeros(self.values[*a].shape());
                    for (oi, &ii) in argmax.iter().enumerate() {
                        da.data_mut()[ii as usize] += dout.data()[oi];
                    }
                    acc(adj, *a, da);
                }
            }
            Op::GlobalAvgPool { a } => {
                if self.requires[*a] {
                    let s = self.values[*a].shape();
                    let hw = (s.h * s.w) as f64;
                    let mut da = Tensor::zeros(s);
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let d = dout.at(n, c, 0, 0) / hw;
                            da.plane_mut(n, c).fill(d);
                        }
                    }
                    acc(adj, *a, da);
                }
            }
            Op::Linear { a, w, b } => {
                let s = self.values[*a].shape();
                let feat = s.c;
                let classes = self.values[*w].shape().n;
                if self.requires[*a] {
                    let mut da = Tensor::zeros(s);
                    for n in 0..s.n {
                        for cls in 0..classes {
                            let d = dout.at(n, cls, 0, 0);
                            let wrow = &self.values[*w].data()[cls * feat..(cls + 1) * feat];
                            for f in 0..feat {
                                da.data_mut()[n * feat + f] += d * wrow[f];
                            }
                        }
                    }
                    acc(adj, *a, da);
                }
                if self.requires[*w] {
                    let mut dw = Tensor::zeros(self.values[*w].shape());
                    for n in 0..s.n {
                        let xrow = &self.values[*a].data()[n * feat..(n + 1) * feat];
                        for cls in 0..classes {
                            let d = dout.at(n, cls, 0, 0);
                            let dwrow = &mut dw.data_mut()[cls * feat..(cls + 1) * feat];
                            for f in 0..feat {
                                dwrow[f] += d * xrow[f];
                            }
                        }
                    }
                    acc(adj, *w, dw);
                }
                if self.requires[*b] {
                    let mut db = Tensor::zeros(Shape::new(1, classes, 1, 1));
                    for n in 0..s.n {
                        for cls in 0..classes {
                            db.data_mut()[cls] += dout.at(n, cls, 0, 0);
                        }
                    }
                    acc(adj, *b, db);
                }
            }
            Op::SumAll { a } => {
                if self.requires[*a] {
                    acc(adj, *a, Tensor::full(self.values[*a].shape(), dout.data()[0]));
                }
            }
            Op::PickLogit { a, sample, class } => {
                if self.requires[*a] {
                    let mut da = Tensor::zeros(self.values[*a].shape());
                    *da.at_mut(*sample, *class, 0, 0) = dout.data()[0];
                    acc(adj, *a, da);
                }
            }
            Op::CrossEntropy { logits, targets, softmax } => {
                if self.requires[*logits] {
                    let s = self.values[*logits].shape();
                    let d = dout.data()[0] / s.n as f64;
                    let mut dl = softmax.scale(d);
                    for (n, &t) in targets.iter().enumerate() {
                        *dl.at_mut(n, t, 0, 0) -= d;
                    }
                    acc(adj, *logits, dl);
                }
            }
        }
    }
}

// ---- elementwise math ----

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const FRAC_1_SQRT_2PI: f64 = 0.3989422804014327;

/// Exact Gaussian-CDF GELU: x * Phi(x).
#[inline]
pub fn gelu(x: f64) -> f64 {
    x * 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let phi_pdf = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
    phi_cdf + x * phi_pdf
}

// ---- deformable convolution kernels ----

const TAPS: usize = 9;

#[inline]
fn tap_delta(k: usize) -> (f64, f64) {
    ((k / 3) as f64 - 1.0, (k % 3) as f64 - 1.0)
}

fn deform_forward(input: &Tensor, offsets: &Tensor, modulation: &Tensor, weights: &Tensor) -> Tensor {
    let s = input.shape();
    let c_out = weights.shape().n;
    let (h, w) = (s.h, s.w);
    let hw = h * w;
    let krows = s.c * TAPS;
    let mut out = Tensor::zeros(Shape::new(s.n, c_out, h, w));
    let mut cols = vec![0.0; krows * hw];
    for n in 0..s.n {
        for k in 0..TAPS {
            let (ky, kx) = tap_delta(k);
            let offy = offsets.plane(n, 2 * k);
            let offx = offsets.plane(n, 2 * k + 1);
            let m = modulation.plane(n, k);
            for ci in 0..s.c {
                let plane = input.plane(n, ci);
                let row = &mut cols[(ci * TAPS + k) * hw..(ci * TAPS + k + 1) * hw];
                let mut p = 0;
                for y in 0..h {
                    for x in 0..w {
                        let sy = y as f64 + ky + offy[p];
                        let sx = x as f64 + kx + offx[p];
                        row[p] = m[p] * crate::tensor::sample_plane_pub(plane, h, w, sy, sx);
                        p += 1;
                    }
                }
            }
        }
        let dst_start = out.idx(n, 0, 0, 0);
        let dst = &mut out.data_mut()[dst_start..dst_start + c_out * hw];
        crate::tensor::gemm_acc(weights.data(), c_out, krows, &cols, hw, dst);
    }
    out
}

#[allow(clippy::type_complexity)]
fn deform_backward(
    dout: &Tensor,
    input: &Tensor,
    offsets: &Tensor,
    modulation: &Tensor,
    weights: &Tensor,
) -> (Tensor, Tensor, Tensor, Tensor) {
    let s = input.shape();
    let c_out = weights.shape().n;
    let (h, w) = (s.h, s.w);
    let hw = h * w;
    let krows = s.c * TAPS;

    let mut dinput = Tensor::zeros(s);
    let mut doffsets = Tensor::zeros(offsets.shape());
    let mut dmod = Tensor::zeros(modulation.shape());
    let mut dweights = Tensor::zeros(weights.shape());

    // W^T for the column-gradient GEMM.
    let mut wt = vec![0.0; krows * c_out];
    for co in 0..c_out {
        for r in 0..krows {
            wt[r * c_out + co] = weights.data()[co * krows + r];
        }
    }

    let mut cols = vec![0.0; krows * hw];
    let mut gcols = vec![0.0; krows * hw];
    for n in 0..s.n {
        // Rebuild modulated sample columns for the weight gradient.
        for k in 0..TAPS {
            let (ky, kx) = tap_delta(k);
            let offy = offsets.plane(n, 2 * k);
            let offx = offsets.plane(n, 2 * k + 1);
            let m = modulation.plane(n, k);
            for ci in 0..s.c {
                let plane = input.plane(n, ci);
                let row = &mut cols[(ci * TAPS + k) * hw..(ci * TAPS + k + 1) * hw];
                let mut p = 0;
                for y in 0..h {
                    for x in 0..w {
                        let sy = y as f64 + ky + offy[p];
                        let sx = x as f64 + kx + offx[p];
                        row[p] = m[p] * crate::tensor::sample_plane_pub(plane, h, w, sy, sx);
                        p += 1;
                    }
                }
            }
        }
        let dout_start = dout.idx(n, 0, 0, 0);
        let dout_n = &dout.data()[dout_start..dout_start + c_out * hw];
        crate::tensor::gemm_abt_acc(dout_n, c_out, hw, &cols, krows, dweights.data_mut());

        // gcols = W^T * dOut, the gradient flowing into each (ci, k) sample.
        gcols.fill(0.0);
        crate::tensor::gemm_acc(&wt, krows, c_out, dout_n, hw, &mut gcols);

        for k in 0..TAPS {
            let (ky, kx) = tap_delta(k);
            let offy = offsets.plane(n, 2 * k);
            let offx = offsets.plane(n, 2 * k + 1);
            let m = modulation.plane(n, k);
            let mut dm_row = vec![0.0; hw];
            let mut dy_row = vec![0.0; hw];
            let mut dx_row = vec![0.0; hw];
            for ci in 0..s.c {
                let plane = input.plane(n, ci);
                let grow = &gcols[(ci * TAPS + k) * hw..(ci * TAPS + k + 1) * hw];
                let dplane = dinput.plane_mut(n, ci);
                let mut p = 0;
                for y in 0..h {
                    for x in 0..w {
                        let g = grow[p];
                        if g != 0.0 {
                            let sy = y as f64 + ky + offy[p];
                            let sx = x as f64 + kx + offx[p];
                            let (v, gy, gx) =
                                crate::tensor::sample_plane_with_grad_pub(plane, h, w, sy, sx);
                            dm_row[p] += g * v;
                            let gm = g * m[p];
                            dy_row[p] += gm * gy;
                            dx_row[p] += gm * gx;
                            crate::tensor::scatter_plane_pub(dplane, h, w, sy, sx, gm);
                        }
                        p += 1;
                    }
                }
            }
            for (d, v) in dmod.plane_mut(n, k).iter_mut().zip(&dm_row) {
                *d += v;
            }
            for (d, v) in doffsets.plane_mut(n, 2 * k).iter_mut().zip(&dy_row) {
                *d += v;
            }
            for (d, v) in doffsets.plane_mut(n, 2 * k + 1).iter_mut().zip(&dx_row) {
                *d += v;
            }
        }
    }
    (dinput, doffsets, dmod, dweights)
}

fn grid_sample_backward(dout: &Tensor, input: &Tensor, offsets: &Tensor) -> (Tensor, Tensor) {
    let s = input.shape();
    let mut dinput = Tensor::zeros(s);
    let mut doffsets = Tensor::zeros(offsets.shape());
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let sy = y as f64 + offsets.at(n, 0, y, x);
                let sx = x as f64 + offsets.at(n, 1, y, x);
                let mut acc_y = 0.0;
                let mut acc_x = 0.0;
                for c in 0..s.c {
                    let g = dout.at(n, c, y, x);
                    if g != 0.0 {
                        let plane = input.plane(n, c);
                        let (_, gy, gx) =
                            crate::tensor::sample_plane_with_grad_pub(plane, s.h, s.w, sy, sx);
                        acc_y += g * gy;
                        acc_x += g * gx;
                        let dplane = dinput.plane_mut(n, c);
                        crate::tensor::scatter_plane_pub(dplane, s.h, s.w, sy, sx, g);
                    }
                }
                *doffsets.at_mut(n, 0, y, x) += acc_y;
                *doffsets.at_mut(n, 1, y, x) += acc_x;
            }
        }
    }
    (dinput, doffsets)
}

// ---- normalization backward rules ----

fn moment_norm_backward(dout: &Tensor, y: &Tensor, axes: Axes, inv_std: &Tensor) -> Tensor {
    let s = y.shape();
    let count = (s.numel() / inv_std.numel()) as f64;
    let mut sum_d = Tensor::zeros(inv_std.shape());
    let mut sum_dy = Tensor::zeros(inv_std.shape());
    for n in 0..s.n {
        for c in 0..s.c {
            for yy in 0..s.h {
                for x in 0..s.w {
                    let gi = group_index(&sum_d, axes, n, c, yy, x);
                    let d = dout.at(n, c, yy, x);
                    sum_d.data_mut()[gi] += d;
                    sum_dy.data_mut()[gi] += d * y.at(n, c, yy, x);
                }
            }
        }
    }
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            for yy in 0..s.h {
                for x in 0..s.w {
                    let gi = group_index(&sum_d, axes, n, c, yy, x);
                    let d = dout.at(n, c, yy, x);
                    let m_d = sum_d.data()[gi] / count;
                    let m_dy = sum_dy.data()[gi] / count;
                    *dx.at_mut(n, c, yy, x) =
                        inv_std.data()[gi] * (d - m_d - y.at(n, c, yy, x) * m_dy);
                }
            }
        }
    }
    dx
}

fn rms_norm_backward(dout: &Tensor, x: &Tensor, eps: f64) -> Tensor {
    let s = x.shape();
    let cf = s.c as f64;
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n {
        for yy in 0..s.h {
            for xx in 0..s.w {
                let mut sq = 0.0;
                let mut dot = 0.0;
                for c in 0..s.c {
                    let v = x.at(n, c, yy, xx);
                    sq += v * v;
                    dot += dout.at(n, c, yy, xx) * v;
                }
                let r = (sq / cf).sqrt();
                let denom = r + eps;
                for c in 0..s.c {
                    let d = dout.at(n, c, yy, xx);
                    let mut g = d / denom;
                    if r > 0.0 {
                        g -= dot * x.at(n, c, yy, xx) / (cf * r * denom * denom);
                    }
                    *dx.at_mut(n, c, yy, xx) = g;
                }
            }
        }
    }
    dx
}

// ---- finite-difference verifier ----

#[derive(Clone, Copy, Debug)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Compare the autodiff gradient of a scalar-valued build against central
/// finite differences at `point`. Passes iff the worst relative error
/// (against max(|analytic|, |numeric|, 1e-8)) stays below 1e-3.
pub fn finite_diff_check<F>(build: F, point: &Tensor, epsilon: f64) -> Result<FdReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::InvalidArg(format!("epsilon {epsilon} outside (0, 1e-2]")));
    }
    let mut g = Graph::new();
    let x = g.leaf(point.clone(), true);
    let loss = build(&mut g, x)?;
    if !g.value(loss).shape().is_scalar() {
        return Err(Error::Shape("finite_diff_check: build must yield a scalar".into()));
    }
    g.backward(loss)?;
    let analytic = g.grad(x).clone();

    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(t.clone(), false);
        let loss = build(&mut g, x)?;
        Ok(g.scalar_value(loss))
    };

    let mut max_rel_err: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - epsilon;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * epsilon);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        max_rel_err = max_rel_err.max(rel);
    }
    Ok(FdReport { max_rel_err, pass: max_rel_err < 1e-3 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn identity_grad_is_one() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.5), true);
        // y = x via a no-op sum over the scalar.
        let y = g.sum_all(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).data(), &[1.0]);
    }

    #[test]
    fn square_grad_is_2x() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.mul(x, x).unwrap();
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).data(), &[6.0]);
    }

    #[test]
    fn sigmoid_grad_at_zero_is_quarter() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(Shape::new(1, 2, 3, 4)), true);
        let y = g.sigmoid(x);
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert!(g.grad(x).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn backward_twice_doubles_gradients() {
        let mut rng = Rng::seed_from(21);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::random_uniform(Shape::new(1, 2, 3, 3), -1.0, 1.0, &mut rng), true);
        let y = g.gelu(x);
        let z = g.mul(y, y).unwrap();
        let loss = g.sum_all(z);
        g.backward(loss).unwrap();
        let once = g.grad(x).clone();
        g.backward(loss).unwrap();
        let twice = g.grad(x).clone();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn detached_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0), true);
        let w = g.leaf(Tensor::scalar(5.0), false);
        let y = g.mul(x, w).unwrap();
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).data(), &[0.0]);
        assert_eq!(g.grad(x).data(), &[5.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.5), true);
        let a = g.scale(x, 2.0);
        let b = g.scale(x, 3.0);
        let y = g.add(a, b).unwrap();
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).data(), &[5.0]);
    }

    #[test]
    fn fd_check_passes_for_sum_of_squares() {
        let mut rng = Rng::seed_from(31);
        let point = Tensor::random_uniform(Shape::new(1, 3, 4, 4), -1.0, 1.0, &mut rng);
        let report = finite_diff_check(
            |g, x| {
                let y = g.mul(x, x)?;
                Ok(g.sum_all(y))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(report.pass);
        assert!(report.max_rel_err < 1e-6, "err {}", report.max_rel_err);
    }

    #[test]
    fn fd_check_passes_for_constant_function() {
        let point = Tensor::full(Shape::new(1, 1, 2, 2), 0.7);
        let report = finite_diff_check(
            |g, _x| {
                let c = g.constant(Tensor::scalar(4.0));
                Ok(g.sum_all(c))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(report.pass);
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn fd_check_detects_corrupted_backward() {
        // sum(x * detach(x)) evaluates as sum(x^2) but its recorded
        // backward credits only one factor, so autodiff yields x where
        // the true gradient is 2x.
        let mut rng = Rng::seed_from(32);
        let point = Tensor::random_uniform(Shape::new(1, 1, 2, 2), 0.5, 1.5, &mut rng);
        let report = finite_diff_check(
            |g, x| {
                let frozen = g.constant(g.value(x).clone());
                let y = g.mul(x, frozen)?;
                Ok(g.sum_all(y))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(!report.pass);
    }

    #[test]
    fn fd_check_rejects_bad_epsilon() {
        let point = Tensor::scalar(1.0);
        assert!(finite_diff_check(|g, x| Ok(g.sum_all(x)), &point, 0.0).is_err());
        assert!(finite_diff_check(|g, x| Ok(g.sum_all(x)), &point, 0.5).is_err());
    }

    #[test]
    fn cross_entropy_grad_is_softmax_minus_onehot() {
        let mut g = Graph::new();
        let logits = g.leaf(
            Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![1.0, 2.0, 0.5]).unwrap(),
            true,
        );
        let loss = g.cross_entropy(logits, &[1]).unwrap();
        g.backward(loss).unwrap();
        let z: Vec<f64> = [1.0f64, 2.0, 0.5].to_vec();
        let m = 2.0;
        let exps: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (c, &e) in exps.iter().enumerate() {
            let expect = e / sum - if c == 1 { 1.0 } else { 0.0 };
            assert!((g.grad(logits).data()[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_op_fd() {
        let mut rng = Rng::seed_from(33);
        let point = Tensor::random_uniform(Shape::new(1, 2, 5, 5), -1.0, 1.0, &mut rng);
        let w = Tensor::random_uniform(Shape::new(3, 2, 3, 3), -0.5, 0.5, &mut rng);
        let proj = Tensor::random_uniform(Shape::new(1, 3, 5, 5), -1.0, 1.0, &mut rng);
        let report = finite_diff_check(
            |g, x| {
                let wv = g.constant(w.clone());
                let y = g.conv2d(x, wv, 1, 1, 1)?;
                let p = g.constant(proj.clone());
                let z = g.mul(y, p)?;
                Ok(g.sum_all(z))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(report.pass, "err {}", report.max_rel_err);
    }

    #[test]
    fn max_pool_shapes_and_values() {
        let mut g = Graph::new();
        // Monotone ramp; window maxima are the bottom-right valid cells.
        let x = g.leaf(
            Tensor::from_vec(Shape::new(1, 1, 4, 4), (0..16).map(|i| i as f64).collect()).unwrap(),
            true,
        );
        let y = g.max_pool_3x3s2(x).unwrap();
        assert_eq!(g.value(y).shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(g.value(y).data(), &[5.0, 7.0, 13.0, 15.0]);
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        let grads = g.grad(x);
        assert_eq!(grads.data()[5], 1.0);
        assert_eq!(grads.data()[15], 1.0);
        assert_eq!(grads.data()[0], 0.0);
    }

    #[test]
    fn global_avg_pool_of_constant() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(Shape::new(2, 3, 4, 4), 7.0), false);
        let y = g.global_avg_pool(x);
        assert_eq!(g.value(y).shape(), Shape::new(2, 3, 1, 1));
        assert!(g.value(y).data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(3.0) - 2.99595).abs() < 1e-4);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
