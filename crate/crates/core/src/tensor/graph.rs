use super::kernels::{col2im, gemm, im2col, ConvGeom, Layout};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with the supplied running statistics.
    Eval,
}

/// Per-channel statistics of one batch-norm evaluation in train mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance over `N*H*W`.
    pub var: Vec<T>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

enum Op<T> {
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeom,
        batch: usize,
        cout: usize,
        cols: Vec<T>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu {
        input: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: Var,
        window: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    ChannelScale {
        input: Var,
        scale: Var,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
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
    Scale {
        input: Var,
        factor: T,
    },
    Sum {
        input: Var,
    },
    Reshape {
        input: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    is_leaf: bool,
    op: Option<Op<T>>,
}

/// Ordered record of differentiable operations.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order. [`Graph::backward`] walks it once in reverse and then
/// clears the graph.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    cleared: bool,
    checked: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            cleared: false,
            checked: false,
        }
    }

    /// A graph that rejects any op producing NaN or infinity.
    pub fn checked() -> Self {
        Graph {
            checked: true,
            ..Self::new()
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            is_leaf: true,
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn live(&self) -> Result<()> {
        if self.cleared {
            Err(Error::GraphCleared)
        } else {
            Ok(())
        }
    }

    fn push(&mut self, name: &str, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        if self.checked {
            value.check_finite(name)?;
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            is_leaf: false,
            op: requires_grad.then_some(op),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Cross-correlation of `[N, Cin, H, W]` with `[Cout, Cin, Kh, Kw]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        self.live()?;
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let span_h = (h + 2 * padding).checked_sub(kh);
        let span_w = (w + 2 * padding).checked_sub(kw);
        let (span_h, span_w) = match (span_h, span_w) {
            (Some(a), Some(b)) if a % stride == 0 && b % stride == 0 => (a, b),
            _ => return Err(Error::shape("conv2d", &xs, &ws)),
        };
        let geom = ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            hout: span_h / stride + 1,
            wout: span_w / stride + 1,
        };
        let (patch, area) = (geom.patch(), geom.out_area());
        let record = self.requires_grad(input) || self.requires_grad(weight);

        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let mut out = vec![T::zero(); n * cout * area];
        let mut cols = vec![T::zero(); if record { n * patch * area } else { patch * area }];
        for i in 0..n {
            let c = if record {
                &mut cols[i * patch * area..(i + 1) * patch * area]
            } else {
                &mut cols[..]
            };
            im2col(&x[i * cin * h * w..(i + 1) * cin * h * w], &geom, c);
            gemm(
                wt,
                Layout::row_major(cout, patch),
                c,
                Layout::row_major(patch, area),
                &mut out[i * cout * area..(i + 1) * cout * area],
                Layout::row_major(cout, area),
                false,
            );
        }
        let value = Tensor::new([n, cout, geom.hout, geom.wout], out)?;
        self.push(
            "conv2d",
            value,
            &[input, weight],
            Op::Conv2d {
                input,
                weight,
                geom,
                batch: n,
                cout,
                cols: if record { cols } else { Vec::new() },
            },
        )
    }

    /// `input [N, D] * weight [D, K] + bias [K]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        self.live()?;
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape("linear", &xs, &ws));
        }
        if bs.iter().product::<usize>() != ws[1] {
            return Err(Error::shape("linear bias", &ws, &bs));
        }
        let (n, d, k) = (xs[0], xs[1], ws[1]);
        let mut out = Vec::with_capacity(n * k);
        let b = self.value(bias).data();
        for _ in 0..n {
            out.extend_from_slice(b);
        }
        gemm(
            self.value(input).data(),
            Layout::row_major(n, d),
            self.value(weight).data(),
            Layout::row_major(d, k),
            &mut out,
            Layout::row_major(n, k),
            true,
        );
        let value = Tensor::new([n, k], out)?;
        self.push(
            "linear",
            value,
            &[input, weight, bias],
            Op::Linear { input, weight, bias },
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.live()?;
        let x = self.value(input);
        let value = Tensor::new(
            x.shape().to_vec(),
            x.data()
                .iter()
                .map(|&v| if v > T::zero() { v } else { T::zero() })
                .collect(),
        )?;
        self.push("relu", value, &[input], Op::Relu { input })
    }

    /// Non-overlapping pooling with a square `window`.
    pub fn pool2d(&mut self, input: Var, kind: PoolKind, window: usize) -> Result<Var> {
        self.live()?;
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 || window == 0 || !xs[2].is_multiple_of(window) || !xs[3].is_multiple_of(window) {
            return Err(Error::shape("pool2d", &xs, &[window, window]));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / window, w / window);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::new();
        let inv = T::one() / T::of((window * window) as f64);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    match kind {
                        PoolKind::Max => {
                            let mut best = base + oy * window * w + ox * window;
                            for dy in 0..window {
                                for dx in 0..window {
                                    let idx = base + (oy * window + dy) * w + ox * window + dx;
                                    // strict comparison keeps the lowest index on ties
                                    if x[idx] > x[best] {
                                        best = idx;
                                    }
                                }
                            }
                            out.push(x[best]);
                            argmax.push(best);
                        }
                        PoolKind::Avg => {
                            let mut acc = T::zero();
                            for dy in 0..window {
                                for dx in 0..window {
                                    acc = acc + x[base + (oy * window + dy) * w + ox * window + dx];
                                }
                            }
                            out.push(acc * inv);
                        }
                    }
                }
            }
        }
        let value = Tensor::new([n, c, ho, wo], out)?;
        let op = match kind {
            PoolKind::Max => Op::MaxPool { input, argmax },
            PoolKind::Avg => Op::AvgPool { input, window },
        };
        self.push("pool2d", value, &[input], op)
    }

    /// Batch normalization over `[N, C, H, W]`.
    ///
    /// `running` supplies `(mean, var)` for eval mode. In train mode the batch
    /// statistics are returned so the caller can fold them into its running
    /// estimates; the graph never mutates them.
    pub fn batch_norm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: (&[T], &[T]),
        mode: BatchNormMode,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        self.live()?;
        if eps <= T::zero() {
            return Err(Error::InvalidArgument("batch norm eps must be > 0".into()));
        }
        let xs = self.shape(input).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("batch_norm2d", &xs, self.shape(gamma)));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let gs = self.shape(gamma).to_vec();
        let bs = self.shape(beta).to_vec();
        if gs != [c] || bs != [c] || running.0.len() != c || running.1.len() != c {
            return Err(Error::shape("batch_norm2d", &xs, &gs));
        }
        let area = h * w;
        let count = n * area;
        if mode == BatchNormMode::Train && count == 0 {
            return Err(Error::EmptyDataset);
        }
        let x = self.value(input).data();
        let (mean, var) = match mode {
            BatchNormMode::Train => {
                // statistics accumulate in f64 so a constant channel has exactly zero variance
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let plane = |i: usize| &x[(i * c + ch) * area..(i * c + ch + 1) * area];
                    let mut acc = 0.0f64;
                    for i in 0..n {
                        acc += plane(i).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum::<f64>();
                    }
                    let m = acc / count as f64;
                    let mut sq = 0.0f64;
                    for i in 0..n {
                        sq += plane(i)
                            .iter()
                            .map(|v| {
                                let d = v.to_f64().unwrap_or(f64::NAN) - m;
                                d * d
                            })
                            .sum::<f64>();
                    }
                    mean[ch] = T::of(m);
                    var[ch] = T::of(sq / count as f64);
                }
                (mean, var)
            }
            BatchNormMode::Eval => (running.0.to_vec(), running.1.to_vec()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * area;
                for j in off..off + area {
                    xhat[j] = (x[j] - mean[ch]) * inv_std[ch];
                    out[j] = g[ch] * xhat[j] + b[ch];
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        let stats = (mode == BatchNormMode::Train).then_some(BatchStats { mean, var, count });
        let var_out = self.push(
            "batch_norm2d",
            value,
            &[input, gamma, beta],
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == BatchNormMode::Train,
            },
        )?;
        Ok((var_out, stats))
    }

    /// Scales channel `c` (axis 1) of `input` by `scale[c]`.
    pub fn channel_scale(&mut self, input: Var, scale: Var) -> Result<Var> {
        self.live()?;
        let xs = self.shape(input).to_vec();
        let ss = self.shape(scale).to_vec();
        if xs.len() < 2 || ss.iter().product::<usize>() != xs[1] {
            return Err(Error::shape("channel_scale", &xs, &ss));
        }
        let c = xs[1];
        let inner: usize = xs[2..].iter().product();
        let s = self.value(scale).data();
        let out: Vec<T> = self
            .value(input)
            .data()
            .iter()
            .enumerate()
            .map(|(j, &v)| v * s[(j / inner) % c])
            .collect();
        let value = Tensor::new(xs, out)?;
        self.push(
            "channel_scale",
            value,
            &[input, scale],
            Op::ChannelScale { input, scale },
        )
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.live()?;
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::shape("softmax_cross_entropy", &ls, &[labels.len()]));
        }
        let (n, k) = (ls[0], ls[1]);
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut loss = 0.0f64;
        for i in 0..n {
            let row = &z[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp();
                denom = denom + *p;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p = *p / denom;
            }
            loss += (denom.ln() - (row[labels[i]] - max)).to_f64().unwrap_or(f64::NAN);
        }
        let value = Tensor::scalar(T::of(loss / n as f64));
        self.push(
            "softmax_cross_entropy",
            value,
            &[logits],
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        )
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.live()?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", value, &[a, b], Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", value, &[a, b], Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, &[a, b], Op::Mul { a, b })
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        self.live()?;
        let x = self.value(input);
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v * factor).collect())?;
        self.push("scale", value, &[input], Op::Scale { input, factor })
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        self.live()?;
        let total = T::of(sum_f64(self.value(input).data()));
        self.push("sum", Tensor::scalar(total), &[input], Op::Sum { input })
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let n = self.value(input).len();
        let s = self.sum(input)?;
        self.scale(s, T::one() / T::of(n as f64))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        self.live()?;
        let value = self.value(input).clone().reshape(shape.to_vec())?;
        self.push("reshape", value, &[input], Op::Reshape { input })
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        let rest: usize = s[1..].iter().product();
        let n = s[0];
        self.reshape(input, &[n, rest])
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Returns gradients for every leaf created with `requires_grad`, then
    /// clears the graph; any further use reports [`Error::GraphCleared`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.live()?;
        let shape = self.shape(loss).to_vec();
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.is_leaf {
                grads[id] = Some(dy);
                continue;
            }
            let Some(op) = &node.op else { continue };
            self.backward_op(op, &node.value, &dy, &mut grads);
        }

        let mut out = Vec::with_capacity(self.nodes.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            out.push(match (node.is_leaf && node.requires_grad, g) {
                (true, Some(g)) => Some(Tensor::new(node.value.shape().to_vec(), g)?),
                (true, None) => Some(Tensor::zeros(node.value.shape().to_vec())),
                _ => None,
            });
        }
        self.nodes.clear();
        self.cleared = true;
        Ok(Gradients { grads: out })
    }

    fn backward_op(&self, op: &Op<T>, out: &Tensor<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Conv2d {
                input,
                weight,
                geom,
                batch,
                cout,
                cols,
            } => {
                let (patch, area) = (geom.patch(), geom.out_area());
                let img = geom.cin * geom.h * geom.w;
                if needs(*weight) {
                    let dw = grad_slot(grads, *weight, cout * patch);
                    for i in 0..*batch {
                        gemm(
                            &dy[i * cout * area..(i + 1) * cout * area],
                            Layout::row_major(*cout, area),
                            &cols[i * patch * area..(i + 1) * patch * area],
                            Layout::row_major(patch, area).t(),
                            dw,
                            Layout::row_major(*cout, patch),
                            true,
                        );
                    }
                }
                if needs(*input) {
                    let w = self.nodes[weight.0].value.data();
                    let mut dcols = vec![T::zero(); patch * area];
                    let dx = grad_slot(grads, *input, batch * img);
                    for i in 0..*batch {
                        gemm(
                            w,
                            Layout::row_major(*cout, patch).t(),
                            &dy[i * cout * area..(i + 1) * cout * area],
                            Layout::row_major(*cout, area),
                            &mut dcols,
                            Layout::row_major(patch, area),
                            false,
                        );
                        col2im(&dcols, geom, &mut dx[i * img..(i + 1) * img]);
                    }
                }
            }
            Op::Linear { input, weight, bias } => {
                let xs = self.nodes[input.0].value.shape();
                let (n, d) = (xs[0], xs[1]);
                let k = out.shape()[1];
                if needs(*input) {
                    let w = self.nodes[weight.0].value.data();
                    let dx = grad_slot(grads, *input, n * d);
                    gemm(
                        dy,
                        Layout::row_major(n, k),
                        w,
                        Layout::row_major(d, k).t(),
                        dx,
                        Layout::row_major(n, d),
                        true,
                    );
                }
                if needs(*weight) {
                    let x = self.nodes[input.0].value.data();
                    let dw = grad_slot(grads, *weight, d * k);
                    gemm(
                        x,
                        Layout::row_major(n, d).t(),
                        dy,
                        Layout::row_major(n, k),
                        dw,
                        Layout::row_major(d, k),
                        true,
                    );
                }
                if needs(*bias) {
                    let db = grad_slot(grads, *bias, k);
                    for row in dy.chunks(k) {
                        for (g, &v) in db.iter_mut().zip(row) {
                            *g = *g + v;
                        }
                    }
                }
            }
            Op::Relu { input } => {
                let x = self.nodes[input.0].value.data();
                let dx = grad_slot(grads, *input, x.len());
                for ((g, &v), &d) in dx.iter_mut().zip(x).zip(dy) {
                    if v > T::zero() {
                        *g = *g + d;
                    }
                }
            }
            Op::MaxPool { input, argmax } => {
                let len = self.nodes[input.0].value.len();
                let dx = grad_slot(grads, *input, len);
                for (&idx, &d) in argmax.iter().zip(dy) {
                    dx[idx] = dx[idx] + d;
                }
            }
            Op::AvgPool { input, window } => {
                let xs = self.nodes[input.0].value.shape().to_vec();
                let (h, w) = (xs[2], xs[3]);
                let (ho, wo) = (h / window, w / window);
                let inv = T::one() / T::of((window * window) as f64);
                let dx = grad_slot(grads, *input, xs.iter().product());
                for plane in 0..xs[0] * xs[1] {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let d = dy[(plane * ho + oy) * wo + ox] * inv;
                            for dyy in 0..*window {
                                for dxx in 0..*window {
                                    let idx = plane * h * w + (oy * window + dyy) * w + ox * window + dxx;
                                    dx[idx] = dx[idx] + d;
                                }
                            }
                        }
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let xs = self.nodes[input.0].value.shape().to_vec();
                let (n, c) = (xs[0], xs[1]);
                let area = xs[2] * xs[3];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * area;
                        for j in off..off + area {
                            dgamma[ch] = dgamma[ch] + dy[j] * xhat[j];
                            dbeta[ch] = dbeta[ch] + dy[j];
                        }
                    }
                }
                if needs(*input) {
                    let g = self.nodes[gamma.0].value.data();
                    let m = T::of((n * area) as f64);
                    let dx = grad_slot(grads, *input, n * c * area);
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * area;
                            let scale = g[ch] * inv_std[ch];
                            for j in off..off + area {
                                let v = if *train {
                                    scale * (dy[j] - dbeta[ch] / m - xhat[j] * dgamma[ch] / m)
                                } else {
                                    scale * dy[j]
                                };
                                dx[j] = dx[j] + v;
                            }
                        }
                    }
                }
                if needs(*gamma) {
                    accumulate(grad_slot(grads, *gamma, c), &dgamma);
                }
                if needs(*beta) {
                    accumulate(grad_slot(grads, *beta, c), &dbeta);
                }
            }
            Op::ChannelScale { input, scale } => {
                let xs = self.nodes[input.0].value.shape().to_vec();
                let c = xs[1];
                let inner: usize = xs[2..].iter().product();
                let x = self.nodes[input.0].value.data();
                let s = self.nodes[scale.0].value.data();
                if needs(*input) {
                    let dx = grad_slot(grads, *input, x.len());
                    for (j, (g, &d)) in dx.iter_mut().zip(dy).enumerate() {
                        *g = *g + d * s[(j / inner) % c];
                    }
                }
                if needs(*scale) {
                    let ds = grad_slot(grads, *scale, c);
                    for (j, (&v, &d)) in x.iter().zip(dy).enumerate() {
                        let ch = (j / inner) % c;
                        ds[ch] = ds[ch] + v * d;
                    }
                }
            }
            Op::SoftmaxCe { logits, probs, labels } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = dy[0] / T::of(n as f64);
                let dz = grad_slot(grads, *logits, n * k);
                for i in 0..n {
                    for j in 0..k {
                        let target = if j == labels[i] { T::one() } else { T::zero() };
                        dz[i * k + j] = dz[i * k + j] + (probs[i * k + j] - target) * scale;
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if needs(v) {
                        accumulate(grad_slot(grads, v, dy.len()), dy);
                    }
                }
            }
            Op::Sub { a, b } => {
                if needs(*a) {
                    accumulate(grad_slot(grads, *a, dy.len()), dy);
                }
                if needs(*b) {
                    let db = grad_slot(grads, *b, dy.len());
                    for (g, &d) in db.iter_mut().zip(dy) {
                        *g = *g - d;
                    }
                }
            }
            Op::Mul { a, b } => {
                let va = self.nodes[a.0].value.data().to_vec();
                let vb = self.nodes[b.0].value.data().to_vec();
                if needs(*a) {
                    let da = grad_slot(grads, *a, dy.len());
                    for ((g, &d), &y) in da.iter_mut().zip(dy).zip(&vb) {
                        *g = *g + d * y;
                    }
                }
                if needs(*b) {
                    let db = grad_slot(grads, *b, dy.len());
                    for ((g, &d), &x) in db.iter_mut().zip(dy).zip(&va) {
                        *g = *g + d * x;
                    }
                }
            }
            Op::Scale { input, factor } => {
                let dx = grad_slot(grads, *input, dy.len());
                for (g, &d) in dx.iter_mut().zip(dy) {
                    *g = *g + d * *factor;
                }
            }
            Op::Sum { input } => {
                let len = self.nodes[input.0].value.len();
                let dx = grad_slot(grads, *input, len);
                for g in dx.iter_mut() {
                    *g = *g + dy[0];
                }
            }
            Op::Reshape { input } => {
                accumulate(grad_slot(grads, *input, dy.len()), dy);
            }
        }
    }
}

/// Reductions to a scalar accumulate in f64; the order is fixed, so results
/// stay bit-reproducible.
fn sum_f64<T: Real>(values: &[T]) -> f64 {
    values.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum()
}

fn grad_slot<T: Real>(grads: &mut [Option<Vec<T>>], var: Var, len: usize) -> &mut [T] {
    grads[var.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn accumulate<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}
