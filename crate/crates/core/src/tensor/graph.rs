use super::kernels::{self, AxisPlan, Window};
use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvGeometry {
            stride,
            padding,
            ..Default::default()
        }
    }

    pub fn dilated(dilation: usize, padding: usize) -> Self {
        ConvGeometry {
            dilation,
            padding,
            ..Default::default()
        }
    }

    pub fn with_groups(self, groups: usize) -> Self {
        ConvGeometry { groups, ..self }
    }

    /// Output extent along one axis, or `None` when the window does not fit.
    pub fn output_len(&self, input: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train { eps: f64 },
    /// Normalize with fixed (running) statistics.
    Eval {
        mean: &'a [f64],
        var: &'a [f64],
        eps: f64,
    },
}

/// Per-channel statistics of one training-mode batch-norm call. `var` is the
/// biased (population) variance used for normalization, so eval mode
/// reproduces training-mode outputs when the running averages have settled.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Resize {
        x: Var,
        ys: AxisPlan,
        xs: AxisPlan,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        coef: Vec<f64>,
        labels: Vec<u8>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Concat(_) => "concat_channels",
            Op::Slice { .. } => "slice_channels",
            Op::Resize { .. } => "resize_bilinear",
            Op::Sum(_) => "sum",
            Op::CrossEntropy { .. } => "weighted_cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Eagerly evaluated computation record. Every operation computes its value
/// immediately and appends a node; [`Graph::backward`] walks the nodes in
/// reverse once.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
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

    /// Records an input tensor. Gradients are tracked iff the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Gradient accumulated for `v` by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Smallest `|x|` over the inputs of every recorded ReLU, i.e. how close
    /// the graph sits to a kink. `None` without ReLUs.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => self.nodes[x.0].value.data().iter().map(|v| v.abs()).reduce(f64::min),
                _ => None,
            })
            .reduce(f64::min)
    }

    /// The earliest recorded node holding a NaN or infinity, with its op name.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .position(|n| !n.value.is_finite())
            .map(|i| (i, self.nodes[i].op.name()))
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.clear_grad();
        value.set_requires_grad(requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = b {
            let s = self.shape(b);
            if s.numel() != channels || s.c != channels {
                return Err(Error::shape(op, format!("bias {s:?} for {channels} output channels")));
            }
        }
        Ok(())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if geom.stride == 0 || geom.dilation == 0 || geom.groups == 0 {
            return Err(Error::Config(format!("conv2d geometry {geom:?} has a zero factor")));
        }
        if ws.h != ws.w {
            return Err(Error::shape("conv2d", format!("non-square kernel {ws:?}")));
        }
        if !xs.c.is_multiple_of(geom.groups) || !ws.n.is_multiple_of(geom.groups) {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "channels (in {}, out {}) not divisible by groups {}",
                    xs.c, ws.n, geom.groups
                ),
            ));
        }
        let cg_in = xs.c / geom.groups;
        if ws.c != cg_in {
            return Err(Error::shape(
                "conv2d",
                format!("input channels: kernel expects {} per group, input has {}", ws.c, cg_in),
            ));
        }
        self.check_bias("conv2d", b, ws.n)?;
        let k = ws.h;
        let (oh, ow) = match (geom.output_len(xs.h, k), geom.output_len(xs.w, k)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::Config(format!(
                    "conv2d output size is not positive for input {xs:?}, k={k}, {geom:?}"
                )))
            }
        };
        let win = Window {
            channels: cg_in,
            in_h: xs.h,
            in_w: xs.w,
            k,
            stride: geom.stride,
            padding: geom.padding,
            dilation: geom.dilation,
            out_h: oh,
            out_w: ow,
        };
        let cg_out = ws.n / geom.groups;
        let out_shape = Shape::new(xs.n, ws.n, oh, ow);
        let mut out = vec![0.0; out_shape.numel()];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let (rows, p) = (win.rows(), win.cols());
        let mut cols = vec![0.0; rows * p];
        for n in 0..xs.n {
            for g in 0..geom.groups {
                let src = &xv[(n * xs.c + g * cg_in) * xs.plane()..][..cg_in * xs.plane()];
                kernels::im2col(src, &win, &mut cols);
                let wg = &wv[g * cg_out * rows..(g + 1) * cg_out * rows];
                let dst = &mut out[(n * ws.n + g * cg_out) * p..][..cg_out * p];
                kernels::gemm_acc(wg, &cols, dst, cg_out, rows, p);
            }
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), out_shape);
        }
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.rg(&[b]));
        Ok(self.push(Tensor::from_vec(out_shape, out)?, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Transposed convolution with weight layout (C_in, C_out, k, k).
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if stride == 0 {
            return Err(Error::Config("conv_transpose2d stride must be positive".into()));
        }
        if ws.h != ws.w {
            return Err(Error::shape("conv_transpose2d", format!("non-square kernel {ws:?}")));
        }
        if ws.n != xs.c {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input channels: kernel expects {}, input has {}", ws.n, xs.c),
            ));
        }
        self.check_bias("conv_transpose2d", b, ws.c)?;
        let k = ws.h;
        let out_len = |len: usize| ((len - 1) * stride + k).checked_sub(2 * padding).filter(|&v| v >= 1);
        let (oh, ow) = match (out_len(xs.h), out_len(xs.w)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::Config(format!(
                    "conv_transpose2d output size is not positive for input {xs:?}, k={k}, s={stride}, p={padding}"
                )))
            }
        };
        let cout = ws.c;
        let win = Window {
            channels: cout,
            in_h: oh,
            in_w: ow,
            k,
            stride,
            padding,
            dilation: 1,
            out_h: xs.h,
            out_w: xs.w,
        };
        let out_shape = Shape::new(xs.n, cout, oh, ow);
        let mut out = vec![0.0; out_shape.numel()];
        let wv = self.value(w).data();
        let (rows, p) = (win.rows(), win.cols());
        let mut cols = vec![0.0; rows * p];
        for n in 0..xs.n {
            cols.fill(0.0);
            kernels::gemm_tn_acc(wv, self.value(x).sample(n), &mut cols, xs.c, rows, p);
            let dst = &mut out[n * cout * oh * ow..(n + 1) * cout * oh * ow];
            kernels::col2im(&cols, &win, dst);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), out_shape);
        }
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.rg(&[b]));
        Ok(self.push(
            Tensor::from_vec(out_shape, out)?,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                padding,
            },
            rg,
        ))
    }

    /// Per-channel normalization over (N, H, W) followed by an affine map.
    /// Returns the batch statistics in training mode so the caller can update
    /// its running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.shape(x);
        let c = xs.c;
        for (what, v) in [("scale", scale), ("shift", shift)] {
            let s = self.shape(v);
            if s.numel() != c {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{what} has {} entries for {c} channels", s.numel()),
                ));
            }
        }
        let plane = xs.plane();
        let m = (xs.n * plane) as f64;
        let xv = self.value(x).data();
        let (mean, var, eps, train) = match mode {
            BatchNormMode::Train { eps } => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for n in 0..xs.n {
                        s += xv[(n * c + ch) * plane..][..plane].iter().sum::<f64>();
                    }
                    let mu = s / m;
                    let mut q = 0.0;
                    for n in 0..xs.n {
                        q += xv[(n * c + ch) * plane..][..plane]
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = q / m;
                }
                (mean, var, eps, true)
            }
            BatchNormMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape(
                        "batch_norm",
                        format!("running statistics for {} channels, input has {c}", mean.len()),
                    ));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        if eps < 0.0 {
            return Err(Error::Config(format!("batch_norm eps {eps} is negative")));
        }
        // NaN variance propagates so the loss diagnostic can find its source.
        if let Some(ch) = var.iter().position(|&v| v + eps <= 0.0) {
            return Err(Error::Numeric(format!(
                "batch_norm channel {ch} has zero variance and eps = {eps}"
            )));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let sc = self.value(scale).data();
        let sh = self.value(shift).data();
        let mut xhat = vec![0.0; xs.numel()];
        let mut out = vec![0.0; xs.numel()];
        for n in 0..xs.n {
            for ch in 0..c {
                let base = (n * c + ch) * plane;
                for i in base..base + plane {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = sc[ch] * h + sh[ch];
                }
            }
        }
        let stats = train.then(|| BatchStats {
            var: var.clone(),
            mean,
        });
        let rg = self.rg(&[x, scale, shift]);
        let v = self.push(
            Tensor::from_vec(xs, out)?,
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                train,
            },
            rg,
        );
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v = 0.0;
            }
        });
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Relu(x), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Sigmoid(x), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut t = self.value(a).clone();
        for (o, v) in t.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let mut t = self.value(a).clone();
        for (o, v) in t.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
        let s0 = self.shape(first);
        let mut c = 0;
        for &v in xs {
            let s = self.shape(v);
            if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
                return Err(Error::shape("concat_channels", format!("{s:?} vs {s0:?}")));
            }
            c += s.c;
        }
        let out_shape = s0.with_channels(c);
        let mut out = Vec::with_capacity(out_shape.numel());
        for n in 0..s0.n {
            for &v in xs {
                out.extend_from_slice(self.value(v).sample(n));
            }
        }
        let rg = self.rg(xs);
        Ok(self.push(Tensor::from_vec(out_shape, out)?, Op::Concat(xs.to_vec()), rg))
    }

    /// Channels `start..start + len` of `x`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if len == 0 || start + len > s.c {
            return Err(Error::shape(
                "slice_channels",
                format!("range {start}..{} outside {} channels", start + len, s.c),
            ));
        }
        let plane = s.plane();
        let mut out = Vec::with_capacity(s.n * len * plane);
        for n in 0..s.n {
            out.extend_from_slice(&self.value(x).sample(n)[start * plane..(start + len) * plane]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(s.with_channels(len), out)?, Op::Slice { x, start }, rg))
    }

    /// Bilinear resize with half-pixel (align-corners = false) sampling.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::Config(format!("resize target {out_h}x{out_w} is empty")));
        }
        let s = self.shape(x);
        let ys = AxisPlan::new(s.h, out_h);
        let xs = AxisPlan::new(s.w, out_w);
        let out_shape = s.with_spatial(out_h, out_w);
        let mut out = vec![0.0; out_shape.numel()];
        let src = self.value(x).data();
        for (i, dst) in out.chunks_mut(out_h * out_w).enumerate() {
            kernels::resize_plane(&src[i * s.plane()..(i + 1) * s.plane()], s.w, &ys, &xs, dst);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(out_shape, out)?, Op::Resize { x, ys, xs }, rg))
    }

    /// Sum of all elements as a (1, 1, 1, 1) tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::Sum(x), rg))
    }

    /// Class-weighted softmax cross-entropy, reduced as a weighted mean over
    /// contributing pixels. `labels` holds one class index per pixel in
    /// (N, H, W) order; pixels equal to `ignore` contribute nothing.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[u8],
        weights: &[f64],
        ignore: Option<u8>,
    ) -> Result<Var> {
        let s = self.shape(logits);
        let plane = s.plane();
        if labels.len() != s.n * plane {
            return Err(Error::shape(
                "weighted_cross_entropy",
                format!("{} labels for logits {s:?}", labels.len()),
            ));
        }
        if weights.len() != s.c {
            return Err(Error::shape(
                "weighted_cross_entropy",
                format!("{} class weights for {} classes", weights.len(), s.c),
            ));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; s.numel()];
        let mut coef = vec![0.0; labels.len()];
        let mut total = 0.0;
        let mut weight_sum = 0.0;
        for n in 0..s.n {
            for p in 0..plane {
                let t = labels[n * plane + p];
                if Some(t) == ignore {
                    continue;
                }
                if t as usize >= s.c {
                    return Err(Error::Data(format!(
                        "label {t} at (n={n}, y={}, x={}) is outside 0..{}",
                        p / s.w,
                        p % s.w,
                        s.c
                    )));
                }
                let at = |c: usize| (n * s.c + c) * plane + p;
                let max = (0..s.c).map(|c| z[at(c)]).fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = (0..s.c).map(|c| (z[at(c)] - max).exp()).sum();
                let lse = max + denom.ln();
                for c in 0..s.c {
                    probs[at(c)] = (z[at(c)] - max).exp() / denom;
                }
                let w = weights[t as usize];
                total += w * (lse - z[at(t as usize)]);
                weight_sum += w;
                coef[n * plane + p] = w;
            }
        }
        let loss = if weight_sum > 0.0 {
            coef.iter_mut().for_each(|c| *c /= weight_sum);
            total / weight_sum
        } else {
            0.0
        };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                coef,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Usage("backward already ran on this graph".into()));
        }
        if self.shape(loss) != Shape::SCALAR {
            return Err(Error::Usage(format!(
                "backward needs a (1, 1, 1, 1) loss, got {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop(i, &op, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.shape().numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop(&mut self, i: usize, op: &Op, g: &[f64]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => self.conv2d_backward(*x, *w, *b, *geom, g),
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                padding,
            } => self.conv_transpose2d_backward(i, *x, *w, *b, *stride, *padding, g),
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                train,
            } => {
                let s = self.shape(*x);
                let (c, plane) = (s.c, s.plane());
                let m = (s.n * plane) as f64;
                let mut dscale = vec![0.0; c];
                let mut dshift = vec![0.0; c];
                for n in 0..s.n {
                    for ch in 0..c {
                        let base = (n * c + ch) * plane;
                        for j in base..base + plane {
                            dscale[ch] += g[j] * xhat[j];
                            dshift[ch] += g[j];
                        }
                    }
                }
                let sc = self.value(*scale).data().to_vec();
                if let Some(dx) = self.acc(*x) {
                    for n in 0..s.n {
                        for ch in 0..c {
                            let base = (n * c + ch) * plane;
                            let k = sc[ch] * inv_std[ch];
                            for j in base..base + plane {
                                dx[j] += if *train {
                                    k * (g[j] - dshift[ch] / m - xhat[j] * dscale[ch] / m)
                                } else {
                                    k * g[j]
                                };
                            }
                        }
                    }
                }
                if let Some(d) = self.acc(*scale) {
                    d.iter_mut().zip(&dscale).for_each(|(a, b)| *a += b);
                }
                if let Some(d) = self.acc(*shift) {
                    d.iter_mut().zip(&dshift).for_each(|(a, b)| *a += b);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data().to_vec();
                if let Some(dx) = self.acc(*x) {
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(&xv) {
                        if v > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.data().to_vec();
                if let Some(dx) = self.acc(*x) {
                    for ((d, &gv), &s) in dx.iter_mut().zip(g).zip(&y) {
                        *d += gv * s * (1.0 - s);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.acc(v) {
                        d.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                if let Some(d) = self.acc(*a) {
                    for ((d, gv), o) in d.iter_mut().zip(g).zip(&bv) {
                        *d += gv * o;
                    }
                }
                if let Some(d) = self.acc(*b) {
                    for ((d, gv), o) in d.iter_mut().zip(g).zip(&av) {
                        *d += gv * o;
                    }
                }
            }
            Op::Concat(xs) => {
                let n_batch = self.shape(xs[0]).n;
                let total: usize = g.len() / n_batch;
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v).c * self.shape(v).plane();
                    if let Some(d) = self.acc(v) {
                        for n in 0..n_batch {
                            let src = &g[n * total + offset..][..len];
                            d[n * len..(n + 1) * len]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, start } => {
                let s = self.shape(*x);
                let plane = s.plane();
                let len = g.len() / s.n;
                if let Some(d) = self.acc(*x) {
                    for n in 0..s.n {
                        let dst = &mut d[(n * s.c + start) * plane..][..len];
                        dst.iter_mut()
                            .zip(&g[n * len..(n + 1) * len])
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Resize { x, ys, xs } => {
                let s = self.shape(*x);
                let out_plane = ys.lo.len() * xs.lo.len();
                if let Some(d) = self.acc(*x) {
                    for (k, go) in g.chunks(out_plane).enumerate() {
                        let gi = &mut d[k * s.plane()..(k + 1) * s.plane()];
                        kernels::resize_plane_backward(go, s.w, ys, xs, gi);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(d) = self.acc(*x) {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                coef,
                labels,
            } => {
                let s = self.shape(*logits);
                let plane = s.plane();
                if let Some(d) = self.acc(*logits) {
                    for n in 0..s.n {
                        for p in 0..plane {
                            let k = coef[n * plane + p];
                            if k == 0.0 {
                                continue;
                            }
                            let t = labels[n * plane + p] as usize;
                            for c in 0..s.c {
                                let j = (n * s.c + c) * plane + p;
                                let onehot = if c == t { 1.0 } else { 0.0 };
                                d[j] += g[0] * k * (probs[j] - onehot);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn conv2d_backward(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry, g: &[f64]) {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let k = ws.h;
        let cg_in = xs.c / geom.groups;
        let cg_out = ws.n / geom.groups;
        let (oh, ow) = (
            geom.output_len(xs.h, k).unwrap_or(0),
            geom.output_len(xs.w, k).unwrap_or(0),
        );
        let win = Window {
            channels: cg_in,
            in_h: xs.h,
            in_w: xs.w,
            k,
            stride: geom.stride,
            padding: geom.padding,
            dilation: geom.dilation,
            out_h: oh,
            out_w: ow,
        };
        let (rows, p) = (win.rows(), win.cols());
        let need_x = self.nodes[x.0].requires_grad;
        let need_w = self.nodes[w.0].requires_grad;
        let xv = self.value(x).data().to_vec();
        let wv = self.value(w).data().to_vec();
        let mut dw = vec![0.0; if need_w { ws.numel() } else { 0 }];
        let mut dx = vec![0.0; if need_x { xs.numel() } else { 0 }];
        let mut cols = vec![0.0; rows * p];
        let mut dcols = vec![0.0; rows * p];
        for n in 0..xs.n {
            for grp in 0..geom.groups {
                let x_off = (n * xs.c + grp * cg_in) * xs.plane();
                let gy = &g[(n * ws.n + grp * cg_out) * p..][..cg_out * p];
                let w_rng = grp * cg_out * rows..(grp + 1) * cg_out * rows;
                if need_w {
                    kernels::im2col(&xv[x_off..x_off + cg_in * xs.plane()], &win, &mut cols);
                    kernels::gemm_nt_acc(gy, &cols, &mut dw[w_rng.clone()], cg_out, rows, p);
                }
                if need_x {
                    dcols.fill(0.0);
                    kernels::gemm_tn_acc(&wv[w_rng], gy, &mut dcols, cg_out, rows, p);
                    kernels::col2im(&dcols, &win, &mut dx[x_off..x_off + cg_in * xs.plane()]);
                }
            }
        }
        if let Some(d) = self.acc(x) {
            d.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
        }
        if let Some(d) = self.acc(w) {
            d.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
        }
        if let Some(b) = b {
            let db = channel_sums(g, Shape::new(xs.n, ws.n, oh, ow));
            if let Some(d) = self.acc(b) {
                d.iter_mut().zip(&db).for_each(|(a, b)| *a += b);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_transpose2d_backward(
        &mut self,
        i: usize,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        g: &[f64],
    ) {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let out = self.nodes[i].value.shape();
        let cout = ws.c;
        let win = Window {
            channels: cout,
            in_h: out.h,
            in_w: out.w,
            k: ws.h,
            stride,
            padding,
            dilation: 1,
            out_h: xs.h,
            out_w: xs.w,
        };
        let (rows, p) = (win.rows(), win.cols());
        let need_x = self.nodes[x.0].requires_grad;
        let need_w = self.nodes[w.0].requires_grad;
        let xv = self.value(x).data().to_vec();
        let wv = self.value(w).data().to_vec();
        let mut dw = vec![0.0; if need_w { ws.numel() } else { 0 }];
        let mut dx = vec![0.0; if need_x { xs.numel() } else { 0 }];
        let mut dcols = vec![0.0; rows * p];
        let out_len = cout * out.plane();
        let in_len = xs.c * xs.plane();
        for n in 0..xs.n {
            kernels::im2col(&g[n * out_len..(n + 1) * out_len], &win, &mut dcols);
            if need_x {
                kernels::gemm_acc(&wv, &dcols, &mut dx[n * in_len..(n + 1) * in_len], xs.c, rows, p);
            }
            if need_w {
                kernels::gemm_nt_acc(&xv[n * in_len..(n + 1) * in_len], &dcols, &mut dw, xs.c, rows, p);
            }
        }
        if let Some(d) = self.acc(x) {
            d.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
        }
        if let Some(d) = self.acc(w) {
            d.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
        }
        if let Some(b) = b {
            let db = channel_sums(g, out);
            if let Some(d) = self.acc(b) {
                d.iter_mut().zip(&db).for_each(|(a, b)| *a += b);
            }
        }
    }
}

pub(crate) fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], shape: Shape) {
    let plane = shape.plane();
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[i % shape.c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums(g: &[f64], shape: Shape) -> Vec<f64> {
    let mut sums = vec![0.0; shape.c];
    for (i, chunk) in g.chunks(shape.plane()).enumerate() {
        sums[i % shape.c] += chunk.iter().sum::<f64>();
    }
    sums
}
