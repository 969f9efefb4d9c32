//! Minimal define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it executes; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients into the leaves that
//! were created with `requires_grad`. The tape is rebuilt for every forward
//! pass. All arithmetic is `f64`.

mod kernels;
mod optim;

pub use optim::{adam_step, cosine_lr, AdamState, CosineSchedule};

use kernels::{bilinear_taps, col2im, depthwise_plane, depthwise_plane_backward, gemm, im2col, ConvGeom};

use crate::error::{Error, Result};

/// Dense row-major n-dimensional array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    fn nchw(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: vec![0, 0, 0, 0],
            }),
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    Depthwise {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    InstanceNorm {
        input: Var,
        inv_std: Vec<f64>,
    },
    Resize(Var),
    Concat(Vec<Var>),
    AvgPool(Var),
    MulChannel {
        input: Var,
        gate: Var,
    },
    Crop(Var),
    Sum(Var),
    L1 {
        pred: Var,
        target: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Operation tape.
#[derive(Debug, Default)]
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
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Accumulated gradient of a leaf (`None` before any backward pass).
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape.clone(),
            data: g.clone(),
        })
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if let Some(i) = value.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("output of {name}"),
                location: format!("flat index {i} of shape {:?}", value.shape),
            });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Conv2d { input, kernel, .. } | Op::Depthwise { input, kernel, .. } => {
                self.requires(*input) || self.requires(*kernel)
            }
            Op::ChannelBias { input, bias: b } => self.requires(*input) || self.requires(*b),
            Op::Add(a, b) | Op::Mul(a, b) => self.requires(*a) || self.requires(*b),
            Op::MulChannel { input, gate } => self.requires(*input) || self.requires(*gate),
            Op::L1 { pred, target } => self.requires(*pred) || self.requires(*target),
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Sigmoid(a)
            | Op::Resize(a)
            | Op::AvgPool(a)
            | Op::Crop(a)
            | Op::Sum(a) => self.requires(*a),
            Op::InstanceNorm { input, .. } => self.requires(*input),
            Op::Concat(vs) => vs.iter().any(|v| self.requires(*v)),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn conv_geom(
        &self,
        input: Var,
        kernel_shape: &[usize],
        stride: usize,
        padding: usize,
        depthwise: bool,
        op: &'static str,
    ) -> Result<ConvGeom> {
        let [_, c, h, w] = self.value(input).nchw(op)?;
        let mismatch = || Error::ShapeMismatch {
            op,
            lhs: self.shape(input).to_vec(),
            rhs: kernel_shape.to_vec(),
        };
        let &[o, ci, kh, kw] = kernel_shape else {
            return Err(mismatch());
        };
        let channels_ok = if depthwise { o == c && ci == 1 } else { ci == c };
        if !channels_ok || stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(mismatch());
        }
        Ok(ConvGeom {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        })
    }

    /// 2D cross-correlation, input `[N, C, H, W]`, kernel `[O, C, kh, kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let kshape = self.shape(kernel).to_vec();
        let geom = self.conv_geom(input, &kshape, stride, padding, false, "conv2d")?;
        let n = self.shape(input)[0];
        let o = kshape[0];
        let x = &self.value(input).data;
        let k = &self.value(kernel).data;
        let (pl, ol) = (geom.patch_len(), geom.out_len());
        let in_len = geom.channels * geom.height * geom.width;
        let mut out = vec![0.0; n * o * ol];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; pl * ol] };
        for b in 0..n {
            let xb = &x[b * in_len..(b + 1) * in_len];
            let src: &[f64] = if geom.is_pointwise() {
                xb
            } else {
                im2col(xb, &geom, &mut cols);
                &cols
            };
            gemm(o, pl, ol, k, false, src, false, 0.0, &mut out[b * o * ol..(b + 1) * o * ol]);
        }
        let value = Tensor::new(vec![n, o, geom.out_h, geom.out_w], out)?;
        self.push(value, Op::Conv2d { input, kernel, geom }, "conv2d")
    }

    /// Per-channel convolution; kernel `[C, 1, kh, kw]`.
    pub fn depthwise_conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let kshape = self.shape(kernel).to_vec();
        let geom = self.conv_geom(input, &kshape, stride, padding, true, "depthwise_conv2d")?;
        let n = self.shape(input)[0];
        let c = geom.channels;
        let (hw, ol, kl) = (geom.height * geom.width, geom.out_len(), geom.kh * geom.kw);
        let x = &self.value(input).data;
        let k = &self.value(kernel).data;
        let mut out = vec![0.0; n * c * ol];
        for b in 0..n {
            for ch in 0..c {
                let plane = (b * c + ch) * hw;
                depthwise_plane(
                    &x[plane..plane + hw],
                    &k[ch * kl..(ch + 1) * kl],
                    &geom,
                    &mut out[(b * c + ch) * ol..(b * c + ch + 1) * ol],
                );
            }
        }
        let value = Tensor::new(vec![n, c, geom.out_h, geom.out_w], out)?;
        self.push(value, Op::Depthwise { input, kernel, geom }, "depthwise_conv2d")
    }

    /// Channel mixing with a `[O, C, 1, 1]` kernel.
    pub fn pointwise_conv2d(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let ks = self.shape(kernel);
        if ks.len() != 4 || ks[2] != 1 || ks[3] != 1 {
            return Err(Error::ShapeMismatch {
                op: "pointwise_conv2d",
                lhs: self.shape(input).to_vec(),
                rhs: ks.to_vec(),
            });
        }
        self.conv2d(input, kernel, 1, 0)
    }

    /// Adds a `[C]` bias to every spatial location of `[N, C, H, W]`.
    pub fn add_channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).nchw("add_channel_bias")?;
        if self.shape(bias) != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_channel_bias",
                lhs: self.shape(input).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let bv = &self.value(bias).data;
        let mut out = self.value(input).data.clone();
        for (i, chunk) in out.chunks_mut(h * w).enumerate() {
            let b = bv[i % c];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        self.push(value, Op::ChannelBias { input, bias }, "add_channel_bias")
    }

    fn check_same(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn map(&mut self, a: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(value, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect(),
        };
        self.push(value, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect(),
        };
        self.push(value, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map(a, Op::Scale(a, s), "scale", |v| v * s)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a), "relu", |v| v.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.map(a, Op::LeakyRelu(a, slope), "leaky_relu", |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid(a), "sigmoid", sigmoid)
    }

    /// Per-(sample, channel) normalization to zero mean and unit variance.
    pub fn instance_norm(&mut self, input: Var, eps: f64) -> Result<Var> {
        let [n, c, h, w] = self.value(input).nchw("instance_norm")?;
        let hw = h * w;
        if hw < 2 {
            return Err(Error::invalid(format!("instance_norm needs H*W >= 2, got {h}x{w}")));
        }
        let x = &self.value(input).data;
        let mut out = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(n * c);
        for (src, dst) in x.chunks(hw).zip(out.chunks_mut(hw)) {
            let mean = src.iter().sum::<f64>() / hw as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
            inv_std.push(is);
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        self.push(value, Op::InstanceNorm { input, inv_std }, "instance_norm")
    }

    /// Bilinear resampling (align_corners = false).
    pub fn bilinear_resize(&mut self, input: Var, new_h: usize, new_w: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(input).nchw("bilinear_resize")?;
        if new_h == 0 || new_w == 0 {
            return Err(Error::invalid("bilinear_resize target dims must be >= 1"));
        }
        let x = &self.value(input).data;
        let mut out = vec![0.0; n * c * new_h * new_w];
        let xt: Vec<_> = (0..new_w).map(|i| bilinear_taps(i, w, new_w)).collect();
        for (src, dst) in x.chunks(h * w).zip(out.chunks_mut(new_h * new_w)) {
            for oy in 0..new_h {
                let (y0, y1, ly) = bilinear_taps(oy, h, new_h);
                for (ox, &(x0, x1, lx)) in xt.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                    let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                    dst[oy * new_w + ox] = top * (1.0 - ly) + bot * ly;
                }
            }
        }
        let value = Tensor::new(vec![n, c, new_h, new_w], out)?;
        self.push(value, Op::Resize(input), "bilinear_resize")
    }

    /// Concatenates `[N, C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]).nchw("concat_channels")?;
        let mut total_c = 0;
        for &p in parts {
            let [n, c, h, w] = self.value(p).nchw("concat_channels")?;
            if n != first[0] || h != first[2] || w != first[3] {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            total_c += c;
        }
        let [n, _, h, w] = first;
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape[1];
                out.extend_from_slice(&t.data[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let value = Tensor::new(vec![n, total_c, h, w], out)?;
        self.push(value, Op::Concat(parts.to_vec()), "concat_channels")
    }

    /// Spatial mean, `[N, C, H, W] -> [N, C, 1, 1]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).nchw("global_avg_pool")?;
        let hw = (h * w) as f64;
        let data = self.value(input).data.chunks(h * w).map(|ch| ch.iter().sum::<f64>() / hw).collect();
        let value = Tensor::new(vec![n, c, 1, 1], data)?;
        self.push(value, Op::AvgPool(input), "global_avg_pool")
    }

    /// Multiplies every channel of `[N, C, H, W]` by a `[N, C, 1, 1]` gate.
    pub fn mul_channel(&mut self, input: Var, gate: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(input).nchw("mul_channel")?;
        if self.shape(gate) != [n, c, 1, 1] {
            return Err(Error::ShapeMismatch {
                op: "mul_channel",
                lhs: self.shape(input).to_vec(),
                rhs: self.shape(gate).to_vec(),
            });
        }
        let gv = &self.value(gate).data;
        let mut out = self.value(input).data.clone();
        for (i, chunk) in out.chunks_mut(h * w).enumerate() {
            chunk.iter_mut().for_each(|v| *v *= gv[i]);
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        self.push(value, Op::MulChannel { input, gate }, "mul_channel")
    }

    /// Keeps the top-left `h x w` window.
    pub fn crop(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        let [n, c, ih, iw] = self.value(input).nchw("crop")?;
        if h > ih || w > iw {
            return Err(Error::invalid(format!("crop {h}x{w} larger than {ih}x{iw}")));
        }
        let x = &self.value(input).data;
        let mut out = Vec::with_capacity(n * c * h * w);
        for plane in x.chunks(ih * iw) {
            for y in 0..h {
                out.extend_from_slice(&plane[y * iw..y * iw + w]);
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        self.push(value, Op::Crop(input), "crop")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.check_same(pred, target, "l1_loss")?;
        let (p, t) = (self.value(pred), self.value(target));
        let n = p.data.len().max(1) as f64;
        let s = p.data.iter().zip(&t.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
        self.push(Tensor::scalar(s), Op::L1 { pred, target }, "l1_loss")
    }

    /// Reverse pass from a scalar root, accumulating into leaf gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.data.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad && !matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            self.backward_node(i, g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        if matches!(self.nodes[i].op, Op::Leaf) {
            let node = &mut self.nodes[i];
            if node.requires_grad {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                    None => node.grad = Some(g),
                }
            }
            return;
        }
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.data.len()]);
            f(slot);
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => unreachable!(),
            Op::Conv2d { input, kernel, geom } => {
                let (input, kernel, geom) = (*input, *kernel, *geom);
                let n = val(input).shape[0];
                let o = val(kernel).shape[0];
                let (pl, ol) = (geom.patch_len(), geom.out_len());
                let in_len = geom.channels * geom.height * geom.width;
                let x = &val(input).data;
                let k = &val(kernel).data;
                let want_x = wants(input);
                let want_k = wants(kernel);
                let mut cols = vec![0.0; pl * ol];
                let mut dk = if want_k { vec![0.0; o * pl] } else { Vec::new() };
                let mut dx = if want_x { vec![0.0; n * in_len] } else { Vec::new() };
                for b in 0..n {
                    let dy = &g[b * o * ol..(b + 1) * o * ol];
                    let xb = &x[b * in_len..(b + 1) * in_len];
                    if want_k {
                        let src: &[f64] = if geom.is_pointwise() {
                            xb
                        } else {
                            im2col(xb, &geom, &mut cols);
                            &cols
                        };
                        gemm(o, ol, pl, dy, false, src, true, 1.0, &mut dk);
                    }
                    if want_x {
                        let dxb = &mut dx[b * in_len..(b + 1) * in_len];
                        if geom.is_pointwise() {
                            gemm(pl, o, ol, k, true, dy, false, 1.0, dxb);
                        } else {
                            gemm(pl, o, ol, k, true, dy, false, 0.0, &mut cols);
                            col2im(&cols, &geom, dxb);
                        }
                    }
                }
                if want_k {
                    acc(kernel, &mut |s| s.iter_mut().zip(&dk).for_each(|(a, d)| *a += d));
                }
                if want_x {
                    acc(input, &mut |s| s.iter_mut().zip(&dx).for_each(|(a, d)| *a += d));
                }
            }
            Op::Depthwise { input, kernel, geom } => {
                let (input, kernel, geom) = (*input, *kernel, *geom);
                let n = val(input).shape[0];
                let c = geom.channels;
                let (hw, ol, kl) = (geom.height * geom.width, geom.out_len(), geom.kh * geom.kw);
                let x = &val(input).data;
                let k = &val(kernel).data;
                let mut dx = if wants(input) { vec![0.0; x.len()] } else { Vec::new() };
                let mut dk = if wants(kernel) { vec![0.0; k.len()] } else { Vec::new() };
                for b in 0..n {
                    for ch in 0..c {
                        let p = (b * c + ch) * hw;
                        let dxp = if dx.is_empty() { None } else { Some(&mut dx[p..p + hw]) };
                        let dkp = if dk.is_empty() { None } else { Some(&mut dk[ch * kl..(ch + 1) * kl]) };
                        depthwise_plane_backward(
                            &x[p..p + hw],
                            &k[ch * kl..(ch + 1) * kl],
                            &geom,
                            &g[(b * c + ch) * ol..(b * c + ch + 1) * ol],
                            dxp,
                            dkp,
                        );
                    }
                }
                if !dx.is_empty() {
                    acc(input, &mut |s| s.iter_mut().zip(&dx).for_each(|(a, d)| *a += d));
                }
                if !dk.is_empty() {
                    acc(kernel, &mut |s| s.iter_mut().zip(&dk).for_each(|(a, d)| *a += d));
                }
            }
            Op::ChannelBias { input, bias } => {
                let (input, bias) = (*input, *bias);
                let [_, c, h, w] = [out.shape[0], out.shape[1], out.shape[2], out.shape[3]];
                acc(input, &mut |s| s.iter_mut().zip(&g).for_each(|(a, d)| *a += d));
                acc(bias, &mut |s| {
                    for (idx, chunk) in g.chunks(h * w).enumerate() {
                        s[idx % c] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                acc(a, &mut |s| s.iter_mut().zip(&g).for_each(|(x, d)| *x += d));
                acc(b, &mut |s| s.iter_mut().zip(&g).for_each(|(x, d)| *x += d));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let (av, bv) = (&val(a).data, &val(b).data);
                acc(a, &mut |s| {
                    for ((x, d), y) in s.iter_mut().zip(&g).zip(bv) {
                        *x += d * y;
                    }
                });
                acc(b, &mut |s| {
                    for ((x, d), y) in s.iter_mut().zip(&g).zip(av) {
                        *x += d * y;
                    }
                });
            }
            Op::Scale(a, k) => {
                let (a, k) = (*a, *k);
                acc(a, &mut |s| s.iter_mut().zip(&g).for_each(|(x, d)| *x += d * k));
            }
            Op::Relu(a) => {
                let a = *a;
                let xv = &val(a).data;
                acc(a, &mut |s| {
                    for ((x, d), v) in s.iter_mut().zip(&g).zip(xv) {
                        if *v > 0.0 {
                            *x += d;
                        }
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let (a, slope) = (*a, *slope);
                let xv = &val(a).data;
                acc(a, &mut |s| {
                    for ((x, d), v) in s.iter_mut().zip(&g).zip(xv) {
                        *x += if *v > 0.0 { *d } else { d * slope };
                    }
                });
            }
            Op::Sigmoid(a) => {
                let a = *a;
                acc(a, &mut |s| {
                    for ((x, d), y) in s.iter_mut().zip(&g).zip(&out.data) {
                        *x += d * y * (1.0 - y);
                    }
                });
            }
            Op::InstanceNorm { input, inv_std } => {
                let input = *input;
                let hw = out.shape[2] * out.shape[3];
                acc(input, &mut |s| {
                    for (((sx, dy), y), is) in s.chunks_mut(hw).zip(g.chunks(hw)).zip(out.data.chunks(hw)).zip(inv_std) {
                        let mean_dy = dy.iter().sum::<f64>() / hw as f64;
                        let mean_dyy = dy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / hw as f64;
                        for ((x, d), yv) in sx.iter_mut().zip(dy).zip(y) {
                            *x += is * (d - mean_dy - yv * mean_dyy);
                        }
                    }
                });
            }
            Op::Resize(input) => {
                let input = *input;
                let (h, w) = (val(input).shape[2], val(input).shape[3]);
                let (nh, nw) = (out.shape[2], out.shape[3]);
                let xt: Vec<_> = (0..nw).map(|i| bilinear_taps(i, w, nw)).collect();
                acc(input, &mut |s| {
                    for (dst, dy) in s.chunks_mut(h * w).zip(g.chunks(nh * nw)) {
                        for oy in 0..nh {
                            let (y0, y1, ly) = bilinear_taps(oy, h, nh);
                            for (ox, &(x0, x1, lx)) in xt.iter().enumerate() {
                                let d = dy[oy * nw + ox];
                                dst[y0 * w + x0] += d * (1.0 - ly) * (1.0 - lx);
                                dst[y0 * w + x1] += d * (1.0 - ly) * lx;
                                dst[y1 * w + x0] += d * ly * (1.0 - lx);
                                dst[y1 * w + x1] += d * ly * lx;
                            }
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let (n, hw) = (out.shape[0], out.shape[2] * out.shape[3]);
                let total_c = out.shape[1];
                let mut offset = 0;
                for &p in parts.clone().iter() {
                    let c = val(p).shape[1];
                    acc(p, &mut |s| {
                        for b in 0..n {
                            let src = &g[(b * total_c + offset) * hw..(b * total_c + offset + c) * hw];
                            let dst = &mut s[b * c * hw..(b + 1) * c * hw];
                            dst.iter_mut().zip(src).for_each(|(x, d)| *x += d);
                        }
                    });
                    offset += c;
                }
            }
            Op::AvgPool(input) => {
                let input = *input;
                let hw = val(input).shape[2] * val(input).shape[3];
                acc(input, &mut |s| {
                    for (chunk, d) in s.chunks_mut(hw).zip(&g) {
                        let v = d / hw as f64;
                        chunk.iter_mut().for_each(|x| *x += v);
                    }
                });
            }
            Op::MulChannel { input, gate } => {
                let (input, gate) = (*input, *gate);
                let hw = out.shape[2] * out.shape[3];
                let (xv, gv) = (&val(input).data, &val(gate).data);
                acc(input, &mut |s| {
                    for ((chunk, dy), gg) in s.chunks_mut(hw).zip(g.chunks(hw)).zip(gv) {
                        chunk.iter_mut().zip(dy).for_each(|(x, d)| *x += d * gg);
                    }
                });
                acc(gate, &mut |s| {
                    for ((sg, dy), x) in s.iter_mut().zip(g.chunks(hw)).zip(xv.chunks(hw)) {
                        *sg += dy.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::Crop(input) => {
                let input = *input;
                let (ih, iw) = (val(input).shape[2], val(input).shape[3]);
                let (h, w) = (out.shape[2], out.shape[3]);
                acc(input, &mut |s| {
                    for (dst, dy) in s.chunks_mut(ih * iw).zip(g.chunks(h * w)) {
                        for y in 0..h {
                            let row = &mut dst[y * iw..y * iw + w];
                            row.iter_mut().zip(&dy[y * w..(y + 1) * w]).for_each(|(x, d)| *x += d);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let a = *a;
                let d = g[0];
                acc(a, &mut |s| s.iter_mut().for_each(|x| *x += d));
            }
            Op::L1 { pred, target } => {
                let (pred, target) = (*pred, *target);
                let (p, t) = (&val(pred).data, &val(target).data);
                let k = g[0] / p.len().max(1) as f64;
                let sign = |a: f64, b: f64| {
                    if a > b {
                        1.0
                    } else if a < b {
                        -1.0
                    } else {
                        0.0
                    }
                };
                acc(pred, &mut |s| {
                    for ((x, a), b) in s.iter_mut().zip(p).zip(t) {
                        *x += k * sign(*a, *b);
                    }
                });
                acc(target, &mut |s| {
                    for ((x, a), b) in s.iter_mut().zip(p).zip(t) {
                        *x -= k * sign(*a, *b);
                    }
                });
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
