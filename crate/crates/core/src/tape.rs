//! Reverse-mode automatic differentiation over rank-4 tensors.
//!
//! A `Tape` records every operator application in topological order; each
//! node keeps its forward value plus whatever context the backward pass
//! needs (pooling argmax indices, normalization statistics, attention
//! softmax weights). `backward` walks the nodes in reverse, summing gradient
//! contributions at fan-out. A tape is confined to one logical thread;
//! independent tapes may run concurrently.

use crate::error::{Error, Result};
use crate::kernels::attention;
use crate::kernels::conv::{self, ConvSpec};
use crate::kernels::norm::{self, NormCtx};
use crate::kernels::pool::{self, PoolSpec};
use crate::kernels::resize;
use crate::scalar::{stable_sigmoid, Scalar};
use crate::shape::Shape;
use crate::tensor::Tensor;

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S: Scalar> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        spec: PoolSpec,
    },
    Bilinear {
        x: Var,
    },
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        training: bool,
        ctx: NormCtx<S>,
    },
    GroupNorm {
        x: Var,
        scale: Var,
        shift: Var,
        groups: usize,
        ctx: NormCtx<S>,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    FlattenTokens {
        x: Var,
    },
    UnflattenTokens {
        x: Var,
    },
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        heads: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        weights: Vec<S>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Div {
        a: Var,
        b: Var,
    },
    Neg {
        x: Var,
    },
    Abs {
        x: Var,
    },
    Scale {
        x: Var,
        c: S,
    },
    AddConst {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    /// Stable binary cross-entropy on logits against a constant target,
    /// contracted with a constant per-pixel coefficient.
    WeightedBce {
        logits: Var,
        target: Tensor<S>,
        coeff: Tensor<S>,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Tape<S> {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor. Gradients are tracked through it when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that never receives a gradient (targets, weight maps, fixed
    /// filter banks).
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        self.grads.get(v.0).and_then(|g| {
            g.as_ref()
                .map(|data| Tensor::from_vec(self.nodes[v.0].value.shape(), data.clone()).unwrap())
        })
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_unary(&mut self, x: Var, value: Tensor<S>, op: Op<S>) -> Var {
        let rg = self.requires(x);
        self.push(value, op, rg)
    }

    // ---- operators -------------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let bv = bias.map(|b| self.value(b).clone());
        let (out, os) = conv::forward(
            xv.data(),
            xv.shape(),
            wv.data(),
            wv.shape(),
            bv.as_ref().map(|t| t.data()),
            &spec,
        )?;
        let rg =
            self.requires(x) || self.requires(w) || bias.map(|b| self.requires(b)).unwrap_or(false);
        Ok(self.push(
            Tensor::from_vec(os, out)?,
            Op::Conv2d { x, w, bias, spec },
            rg,
        ))
    }

    pub fn max_pool2d(
        &mut self,
        x: Var,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xv = self.value(x).clone();
        let spec = PoolSpec {
            kernel,
            stride,
            padding,
        };
        let (out, os, argmax) = pool::max_forward(xv.data(), xv.shape(), &spec)?;
        Ok(self.push_unary(x, Tensor::from_vec(os, out)?, Op::MaxPool { x, argmax }))
    }

    pub fn avg_pool2d(
        &mut self,
        x: Var,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xv = self.value(x).clone();
        let spec = PoolSpec {
            kernel,
            stride,
            padding,
        };
        let (out, os) = pool::avg_forward(xv.data(), xv.shape(), &spec)?;
        Ok(self.push_unary(x, Tensor::from_vec(os, out)?, Op::AvgPool { x, spec }))
    }

    /// Bilinear upsampling by an integer factor >= 2, half-pixel centers.
    pub fn bilinear_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 2 {
            return Err(Error::arg("bilinear", "factor must be >= 2"));
        }
        let xv = self.value(x).clone();
        let s = xv.shape();
        let (out, os) = resize::bilinear_forward(xv.data(), s, s.h * factor, s.w * factor)?;
        Ok(self.push_unary(x, Tensor::from_vec(os, out)?, Op::Bilinear { x }))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        running_mean: &mut [S],
        running_var: &mut [S],
        momentum: f64,
        eps: f64,
        training: bool,
    ) -> Result<Var> {
        let xv = self.value(x).clone();
        let sc = self.value(scale).clone();
        let sh = self.value(shift).clone();
        let (out, ctx) = if training {
            norm::batch_forward_train(
                xv.data(),
                xv.shape(),
                sc.data(),
                sh.data(),
                running_mean,
                running_var,
                momentum,
                eps,
            )?
        } else {
            norm::batch_forward_eval(
                xv.data(),
                xv.shape(),
                sc.data(),
                sh.data(),
                running_mean,
                running_var,
                eps,
            )?
        };
        let rg = self.requires(x) || self.requires(scale) || self.requires(shift);
        Ok(self.push(
            Tensor::from_vec(xv.shape(), out)?,
            Op::BatchNorm {
                x,
                scale,
                shift,
                training,
                ctx,
            },
            rg,
        ))
    }

    pub fn group_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        groups: usize,
        eps: f64,
    ) -> Result<Var> {
        let xv = self.value(x).clone();
        let sc = self.value(scale).clone();
        let sh = self.value(shift).clone();
        let (out, ctx) =
            norm::group_forward(xv.data(), xv.shape(), sc.data(), sh.data(), groups, eps)?;
        let rg = self.requires(x) || self.requires(scale) || self.requires(shift);
        Ok(self.push(
            Tensor::from_vec(xv.shape(), out)?,
            Op::GroupNorm {
                x,
                scale,
                shift,
                groups,
                ctx,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.maximum(S::ZERO));
        self.push_unary(x, out, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(stable_sigmoid);
        self.push_unary(x, out, Op::Sigmoid { x })
    }

    /// Channel-axis concatenation; inputs must agree on batch and space.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::arg("concat", "empty input list"));
        }
        let first = self.shape(xs[0]);
        let mut channels = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.n != first.n || s.h != first.h || s.w != first.w {
                return Err(Error::shape("concat", first, s));
            }
            channels += s.c;
        }
        let os = Shape::new(first.n, channels, first.h, first.w);
        let mut out = Vec::with_capacity(os.numel());
        for b in 0..os.n {
            for &v in xs {
                let t = self.value(v);
                let s = t.shape();
                let base = s.index(b, 0, 0, 0);
                out.extend_from_slice(&t.data()[base..base + s.c * s.h * s.w]);
            }
        }
        let rg = xs.iter().any(|&v| self.requires(v));
        Ok(self.push(
            Tensor::from_vec(os, out)?,
            Op::Concat { xs: xs.to_vec() },
            rg,
        ))
    }

    /// Contiguous channel slice [start, start+len).
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x).clone();
        let s = xv.shape();
        if start + len > s.c || len == 0 {
            return Err(Error::arg(
                "slice_channels",
                format!("slice {start}..{} out of {} channels", start + len, s.c),
            ));
        }
        let os = Shape::new(s.n, len, s.h, s.w);
        let mut out = Vec::with_capacity(os.numel());
        for b in 0..s.n {
            let base = s.index(b, start, 0, 0);
            out.extend_from_slice(&xv.data()[base..base + len * s.h * s.w]);
        }
        Ok(self.push_unary(
            x,
            Tensor::from_vec(os, out)?,
            Op::SliceChannels { x, start },
        ))
    }

    /// (B, C, H, W) -> (B, 1, H*W, C): one token per spatial site.
    pub fn flatten_tokens(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x).clone();
        let s = xv.shape();
        let os = Shape::new(s.n, 1, s.h * s.w, s.c);
        let mut out = vec![S::ZERO; os.numel()];
        for b in 0..s.n {
            for c in 0..s.c {
                for y in 0..s.h {
                    for xw in 0..s.w {
                        out[os.index(b, 0, y * s.w + xw, c)] = xv.at(b, c, y, xw);
                    }
                }
            }
        }
        Ok(self.push_unary(x, Tensor::from_vec(os, out)?, Op::FlattenTokens { x }))
    }

    /// (B, 1, H*W, C) -> (B, C, H, W); inverse of `flatten_tokens`.
    pub fn unflatten_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xv = self.value(x).clone();
        let s = xv.shape();
        if s.c != 1 || s.h != h * w {
            return Err(Error::arg(
                "unflatten_tokens",
                format!("shape {s} does not hold {h}x{w} tokens"),
            ));
        }
        let os = Shape::new(s.n, s.w, h, w);
        let mut out = vec![S::ZERO; os.numel()];
        for b in 0..s.n {
            for c in 0..os.c {
                for y in 0..h {
                    for xw in 0..w {
                        out[os.index(b, c, y, xw)] = xv.at(b, 0, y * w + xw, c);
                    }
                }
            }
        }
        Ok(self.push_unary(x, Tensor::from_vec(os, out)?, Op::UnflattenTokens { x }))
    }

    /// (B, 1, N, C) -> (B, heads, N, C/heads).
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let xv = self.value(x).clone();
        let s = xv.shape();
        if s.c != 1 || !s.w.is_multiple_of(heads) {
            return Err(Error::arg(
                "split_heads",
                format!("cannot split {s} into {heads} heads"),
            ));
        }
        if heads == 1 {
            return Ok(self.push_unary(x, xv, Op::SplitHeads { x, heads }));
        }
        let dh = s.w / heads;
        let os = Shape::new(s.n, heads, s.h, dh);
        let mut out = vec![S::ZERO; os.numel()];
        for b in 0..s.n {
            for h in 0..heads {
                for t in 0..s.h {
                    for d in 0..dh {
                        out[os.index(b, h, t, d)] = xv.at(b, 0, t, h * dh + d);
                    }
                }
            }
        }
        Ok(self.push_unary(x, Tensor::from_vec(os, out)?, Op::SplitHeads { x, heads }))
    }

    /// (B, heads, N, Dh) -> (B, 1, N, heads*Dh); inverse of `split_heads`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x).clone();
        let s = xv.shape();
        let heads = s.c;
        if heads == 1 {
            return Ok(self.push_unary(x, xv, Op::MergeHeads { x, heads }));
        }
        let os = Shape::new(s.n, 1, s.h, s.c * s.w);
        let mut out = vec![S::ZERO; os.numel()];
        for b in 0..s.n {
            for h in 0..heads {
                for t in 0..s.h {
                    for d in 0..s.w {
                        out[os.index(b, 0, t, h * s.w + d)] = xv.at(b, h, t, d);
                    }
                }
            }
        }
        Ok(self.push_unary(x, Tensor::from_vec(os, out)?, Op::MergeHeads { x, heads }))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let qv = self.value(q).clone();
        let kv = self.value(k).clone();
        let vv = self.value(v).clone();
        let (out, os, weights) = attention::forward(
            qv.data(),
            qv.shape(),
            kv.data(),
            kv.shape(),
            vv.data(),
            vv.shape(),
        )?;
        let rg = self.requires(q) || self.requires(k) || self.requires(v);
        Ok(self.push(
            Tensor::from_vec(os, out)?,
            Op::Attention { q, k, v, weights },
            rg,
        ))
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || sb.numel() == 1 {
            Ok(sa)
        } else if sa.numel() == 1 {
            Ok(sb)
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    fn elementwise(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        let os = self.binary_shapes(op_name, a, b)?;
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out: Vec<S> = if av.shape() == bv.shape() {
            av.data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else if bv.numel() == 1 {
            let y = bv.item();
            av.data().iter().map(|&x| f(x, y)).collect()
        } else {
            let x = av.item();
            bv.data().iter().map(|&y| f(x, y)).collect()
        };
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::from_vec(os, out)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("div", a, b, |x, y| x / y, Op::Div { a, b })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| -v);
        self.push_unary(x, out, Op::Neg { x })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs());
        self.push_unary(x, out, Op::Abs { x })
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push_unary(x, out, Op::Scale { x, c })
    }

    pub fn add_const(&mut self, x: Var, c: S) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push_unary(x, out, Op::AddConst { x })
    }

    /// Sum of every element, as a 1x1x1x1 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push_unary(x, out, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let out = Tensor::scalar(self.value(x).sum() / S::from_usize(n));
        self.push_unary(x, out, Op::Mean { x })
    }

    /// sum(coeff * bce_with_logits(logits, target)) in one numerically stable
    /// node: per element, max(z,0) - z*t + ln(1 + exp(-|z|)).
    pub fn weighted_bce_with_logits(
        &mut self,
        logits: Var,
        target: &Tensor<S>,
        coeff: &Tensor<S>,
    ) -> Result<Var> {
        let zv = self.value(logits).clone();
        if zv.shape() != target.shape() || zv.shape() != coeff.shape() {
            return Err(Error::shape("weighted_bce", zv.shape(), target.shape()));
        }
        let mut acc = S::ZERO;
        for ((&z, &t), &c) in zv.data().iter().zip(target.data()).zip(coeff.data()) {
            let l = z.maximum(S::ZERO) - z * t + (-z.abs()).exp().ln_1p();
            acc += c * l;
        }
        let rg = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(acc),
            Op::WeightedBce {
                logits,
                target: target.clone(),
                coeff: coeff.clone(),
            },
            rg,
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from a scalar loss. Populates gradients for every node
    /// that transitively requires a gradient; fan-out contributions sum.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::arg("backward", "loss is not on this tape"));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::arg(
                "backward",
                format!(
                    "loss must be scalar, got shape {}",
                    self.nodes[loss.0].value.shape()
                ),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![S::ONE]);

        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            let contributions = self.node_backward(i, &g);
            self.grads[i] = Some(g);
            for (var, contrib) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut self.grads[var.0] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a += *c;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[S]) -> Vec<(Var, Vec<S>)> {
        let node = &self.nodes[i];
        let os = node.value.shape();
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, bias, spec } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let mut out = Vec::with_capacity(3);
                if self.requires(*x) {
                    out.push((
                        *x,
                        conv::backward_input(g, os, xv.shape(), wv.data(), wv.shape(), spec),
                    ));
                }
                if self.requires(*w) {
                    out.push((
                        *w,
                        conv::backward_kernel(g, os, xv.data(), xv.shape(), wv.shape(), spec),
                    ));
                }
                if let Some(b) = bias {
                    if self.requires(*b) {
                        out.push((*b, conv::backward_bias(g, os)));
                    }
                }
                out
            }
            Op::MaxPool { x, argmax } => {
                vec![(*x, pool::max_backward(g, self.shape(*x), argmax))]
            }
            Op::AvgPool { x, spec } => {
                vec![(*x, pool::avg_backward(g, os, self.shape(*x), spec))]
            }
            Op::Bilinear { x } => {
                vec![(*x, resize::bilinear_backward(g, os, self.shape(*x)))]
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                training,
                ctx,
            } => {
                let xv = self.value(*x);
                let sc = self.value(*scale);
                let (dx, dscale, dshift) = if *training {
                    norm::batch_backward_train(g, xv.data(), xv.shape(), sc.data(), ctx)
                } else {
                    norm::batch_backward_eval(g, xv.data(), xv.shape(), sc.data(), ctx)
                };
                vec![(*x, dx), (*scale, dscale), (*shift, dshift)]
            }
            Op::GroupNorm {
                x,
                scale,
                shift,
                groups,
                ctx,
            } => {
                let xv = self.value(*x);
                let sc = self.value(*scale);
                let (dx, dscale, dshift) =
                    norm::group_backward(g, xv.data(), xv.shape(), sc.data(), *groups, ctx);
                vec![(*x, dx), (*scale, dscale), (*shift, dshift)]
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let dx = g
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| if v > S::ZERO { gv } else { S::ZERO })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Sigmoid { x } => {
                let dx = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &s)| gv * s * (S::ONE - s))
                    .collect();
                vec![(*x, dx)]
            }
            Op::Concat { xs } => {
                let mut out = Vec::with_capacity(xs.len());
                let mut offset = 0;
                for &v in xs {
                    let s = self.shape(v);
                    let mut dv = vec![S::ZERO; s.numel()];
                    for b in 0..os.n {
                        let src = os.index(b, offset, 0, 0);
                        let dst = s.index(b, 0, 0, 0);
                        let span = s.c * s.h * s.w;
                        dv[dst..dst + span].copy_from_slice(&g[src..src + span]);
                    }
                    offset += s.c;
                    out.push((v, dv));
                }
                out
            }
            Op::SliceChannels { x, start } => {
                let s = self.shape(*x);
                let mut dx = vec![S::ZERO; s.numel()];
                for b in 0..os.n {
                    let dst = s.index(b, *start, 0, 0);
                    let src = os.index(b, 0, 0, 0);
                    let span = os.c * os.h * os.w;
                    dx[dst..dst + span].copy_from_slice(&g[src..src + span]);
                }
                vec![(*x, dx)]
            }
            Op::FlattenTokens { x } => {
                let s = self.shape(*x);
                let mut dx = vec![S::ZERO; s.numel()];
                for b in 0..s.n {
                    for c in 0..s.c {
                        for y in 0..s.h {
                            for xw in 0..s.w {
                                dx[s.index(b, c, y, xw)] = g[os.index(b, 0, y * s.w + xw, c)];
                            }
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::UnflattenTokens { x } => {
                let s = self.shape(*x);
                let mut dx = vec![S::ZERO; s.numel()];
                for b in 0..os.n {
                    for c in 0..os.c {
                        for y in 0..os.h {
                            for xw in 0..os.w {
                                dx[s.index(b, 0, y * os.w + xw, c)] = g[os.index(b, c, y, xw)];
                            }
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::SplitHeads { x, heads } => {
                let s = self.shape(*x);
                if *heads == 1 {
                    return vec![(*x, g.to_vec())];
                }
                let mut dx = vec![S::ZERO; s.numel()];
                let dh = os.w;
                for b in 0..os.n {
                    for h in 0..*heads {
                        for t in 0..os.h {
                            for d in 0..dh {
                                dx[s.index(b, 0, t, h * dh + d)] = g[os.index(b, h, t, d)];
                            }
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::MergeHeads { x, heads } => {
                let s = self.shape(*x);
                if *heads == 1 {
                    return vec![(*x, g.to_vec())];
                }
                let mut dx = vec![S::ZERO; s.numel()];
                for b in 0..s.n {
                    for h in 0..*heads {
                        for t in 0..s.h {
                            for d in 0..s.w {
                                dx[s.index(b, h, t, d)] = g[os.index(b, 0, t, h * s.w + d)];
                            }
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Attention { q, k, v, weights } => {
                let qv = self.value(*q);
                let kv = self.value(*k);
                let vv = self.value(*v);
                let (dq, dk, dv) = attention::backward(
                    g,
                    os,
                    qv.data(),
                    qv.shape(),
                    kv.data(),
                    kv.shape(),
                    vv.data(),
                    vv.shape(),
                    weights,
                );
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
            Op::Add { a, b } => {
                vec![
                    (*a, self.reduce_to(*a, g, os)),
                    (*b, self.reduce_to(*b, g, os)),
                ]
            }
            Op::Sub { a, b } => {
                let neg: Vec<S> = g.iter().map(|&v| -v).collect();
                vec![
                    (*a, self.reduce_to(*a, g, os)),
                    (*b, self.reduce_to(*b, &neg, os)),
                ]
            }
            Op::Mul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let da = self.mul_grad(g, bv, os);
                let db = self.mul_grad(g, av, os);
                vec![
                    (*a, self.reduce_to(*a, &da, os)),
                    (*b, self.reduce_to(*b, &db, os)),
                ]
            }
            Op::Div { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let numel = os.numel();
                let mut da = vec![S::ZERO; numel];
                let mut db = vec![S::ZERO; numel];
                for i in 0..numel {
                    let x = Self::broadcast_at(av, i);
                    let y = Self::broadcast_at(bv, i);
                    da[i] = g[i] / y;
                    db[i] = -g[i] * x / (y * y);
                }
                vec![
                    (*a, self.reduce_to(*a, &da, os)),
                    (*b, self.reduce_to(*b, &db, os)),
                ]
            }
            Op::Neg { x } => vec![(*x, g.iter().map(|&v| -v).collect())],
            Op::Abs { x } => {
                let xv = self.value(*x);
                let dx = g
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| {
                        if v > S::ZERO {
                            gv
                        } else if v < S::ZERO {
                            -gv
                        } else {
                            S::ZERO
                        }
                    })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Scale { x, c } => vec![(*x, g.iter().map(|&v| v * *c).collect())],
            Op::AddConst { x } => vec![(*x, g.to_vec())],
            Op::Sum { x } => {
                let n = self.shape(*x).numel();
                vec![(*x, vec![g[0]; n])]
            }
            Op::Mean { x } => {
                let n = self.shape(*x).numel();
                vec![(*x, vec![g[0] / S::from_usize(n); n])]
            }
            Op::WeightedBce {
                logits,
                target,
                coeff,
            } => {
                let zv = self.value(*logits);
                let dz = zv
                    .data()
                    .iter()
                    .zip(target.data())
                    .zip(coeff.data())
                    .map(|((&z, &t), &c)| g[0] * c * (stable_sigmoid(z) - t))
                    .collect();
                vec![(*logits, dz)]
            }
        }
    }

    #[inline]
    fn broadcast_at(t: &Tensor<S>, i: usize) -> S {
        if t.numel() == 1 {
            t.data()[0]
        } else {
            t.data()[i]
        }
    }

    fn mul_grad(&self, g: &[S], other: &Tensor<S>, _os: Shape) -> Vec<S> {
        if other.numel() == 1 {
            let y = other.item();
            g.iter().map(|&v| v * y).collect()
        } else {
            g.iter().zip(other.data()).map(|(&v, &y)| v * y).collect()
        }
    }

    /// Collapse a full-shape gradient back onto a scalar operand.
    fn reduce_to(&self, target: Var, g: &[S], _os: Shape) -> Vec<S> {
        let ts = self.shape(target);
        if ts.numel() == g.len() {
            g.to_vec()
        } else {
            debug_assert_eq!(ts.numel(), 1);
            vec![g.iter().copied().sum()]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            Tensor::from_vec(Shape::new(1, 1, 2, 3), vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap(),
            true,
        );
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        let gx = tape.grad(x).unwrap();
        assert!(gx.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn grad_of_sum_of_squares_is_two_x() {
        let mut tape = Tape::<f64>::new();
        let data = vec![1.0, -2.0, 3.0, 0.25];
        let x = tape.leaf(
            Tensor::from_vec(Shape::new(1, 1, 2, 2), data.clone()).unwrap(),
            true,
        );
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        let gx = tape.grad(x).unwrap();
        for (g, v) in gx.data().iter().zip(&data) {
            assert!((g - 2.0 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn fanout_gradients_accumulate() {
        // loss = sum(x + x) => grad 2 everywhere
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(Shape::new(1, 1, 2, 2)), true);
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(Shape::new(1, 1, 2, 2)), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn backward_rejects_foreign_var() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(Shape::scalar()), true);
        let _ = x;
        assert!(tape.backward(Var(99)).is_err());
    }

    #[test]
    fn sigmoid_symmetry_identity() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = vec![-3.0, -0.5, 0.0, 0.7, 12.0, -20.0];
        let x = tape.leaf(
            Tensor::from_vec(Shape::new(1, 1, 1, 6), data.clone()).unwrap(),
            false,
        );
        let nx = tape.neg(x);
        let a = tape.sigmoid(x);
        let b = tape.sigmoid(nx);
        let s = tape.add(a, b).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(
            Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap(),
            false,
        );
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(Shape::scalar()), false);
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).item(), 0.5);
    }

    #[test]
    fn concat_round_trips_through_slices() {
        let mut tape = Tape::<f64>::new();
        let a_t = Tensor::from_fn(Shape::new(2, 2, 3, 3), |b, c, y, x| {
            (b * 100 + c * 10 + y + x) as f64
        });
        let b_t = Tensor::from_fn(Shape::new(2, 3, 3, 3), |b, c, y, x| {
            -((b * 100 + c * 10 + y + x) as f64)
        });
        let a = tape.leaf(a_t.clone(), true);
        let b = tape.leaf(b_t.clone(), true);
        let cat = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.shape(cat), Shape::new(2, 5, 3, 3));
        let sa = tape.slice_channels(cat, 0, 2).unwrap();
        let sb = tape.slice_channels(cat, 2, 3).unwrap();
        assert_eq!(tape.value(sa), &a_t);
        assert_eq!(tape.value(sb), &b_t);
    }

    #[test]
    fn concat_backward_splits_ones() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::ones(Shape::new(1, 2, 2, 2)), true);
        let b = tape.leaf(Tensor::ones(Shape::new(1, 3, 2, 2)), true);
        let cat = tape.concat(&[a, b]).unwrap();
        let loss = tape.sum(cat);
        tape.backward(loss).unwrap();
        let ga = tape.grad(a).unwrap();
        let gb = tape.grad(b).unwrap();
        assert_eq!(ga.shape(), Shape::new(1, 2, 2, 2));
        assert_eq!(gb.shape(), Shape::new(1, 3, 2, 2));
        assert!(ga.data().iter().chain(gb.data()).all(|&v| v == 1.0));
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::ones(Shape::new(1, 1, 2, 2)), false);
        let b = tape.leaf(Tensor::ones(Shape::new(1, 1, 3, 3)), false);
        assert!(tape.concat(&[a, b]).is_err());
    }

    #[test]
    fn token_round_trip_is_exact() {
        let mut tape = Tape::<f64>::new();
        let t = Tensor::from_fn(Shape::new(2, 3, 4, 5), |b, c, y, x| {
            (b * 1000 + c * 100 + y * 10 + x) as f64
        });
        let x = tape.leaf(t.clone(), false);
        let tok = tape.flatten_tokens(x).unwrap();
        assert_eq!(tape.shape(tok), Shape::new(2, 1, 20, 3));
        let back = tape.unflatten_tokens(tok, 4, 5).unwrap();
        assert_eq!(tape.value(back), &t);
    }

    #[test]
    fn head_split_round_trip() {
        let mut tape = Tape::<f64>::new();
        let t = Tensor::from_fn(Shape::new(1, 1, 6, 8), |_, _, y, x| (y * 8 + x) as f64);
        let x = tape.leaf(t.clone(), false);
        let split = tape.split_heads(x, 4).unwrap();
        assert_eq!(tape.shape(split), Shape::new(1, 4, 6, 2));
        let merged = tape.merge_heads(split).unwrap();
        assert_eq!(tape.value(merged), &t);
    }

    #[test]
    fn scalar_broadcast_div_backward() {
        // loss = sum(x / s) with s scalar: dx = 1/s, ds = -sum(x)/s^2
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![2.0, 4.0, 6.0]).unwrap(),
            true,
        );
        let s = tape.leaf(Tensor::scalar(2.0), true);
        let y = tape.div(x, s).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert!(tape
            .grad(x)
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v - 0.5).abs() < 1e-12));
        let gs = tape.grad(s).unwrap().item();
        assert!((gs - (-3.0)).abs() < 1e-12, "{gs}");
    }
}
