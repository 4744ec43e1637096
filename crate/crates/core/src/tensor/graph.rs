use super::kernels::{self, ConvGeometry};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Self(i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, T),
    Square(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sum(Var),
    Mean(Var),
    L1Distance(Var, Var),
    MatMul {
        lhs: Var,
        rhs: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    SliceChannels {
        input: Var,
        start: usize,
    },
    AvgDownsample(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    // `geom` describes the forward convolution whose adjoint this op is:
    // its "input" is our output image and its "output" grid is our input.
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        in_channels: usize,
    },
    InstanceNorm {
        input: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Append-only record of operations. Node order is a topological order.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n.op, Op::Leaf)).count()
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op, &[a])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), f);
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(
            a,
            |x| if x > T::zero() { x } else { x * slope },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a).mean();
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Mean absolute difference, a scalar.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1_distance", a, b)?;
        let n = T::lit(self.value(a).len() as f64);
        let s: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y).abs())
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::L1Distance(a, b), &[a, b]))
    }

    /// Sum of scalar (or equal-shape) vars; errors on an empty list.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::shape("add_all", "no inputs"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = match self.shape(a) {
            &[m, k] => (m, k),
            s => return Err(Error::shape("matmul", format!("lhs must be 2-D, got {s:?}"))),
        };
        let n = match self.shape(b) {
            &[kb, n] if kb == k => n,
            s => {
                return Err(Error::shape(
                    "matmul",
                    format!("rhs {s:?} incompatible with lhs {m}×{k}"),
                ))
            }
        };
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                lhs: a,
                rhs: b,
                m,
                k,
                n,
            },
            &[a, b],
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = match self.shape(a) {
            &[r, c] => (r, c),
            s => return Err(Error::shape("transpose", format!("expected 2-D, got {s:?}"))),
        };
        let src = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(&[c, r], out)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    pub fn channel_concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat_channels(&tensors)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    pub fn slice_channels(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(a).slice_channels(start, end)?;
        Ok(self.push(value, Op::SliceChannels { input: a, start }, &[a]))
    }

    /// 2×2 mean pooling; halves H and W.
    pub fn average_downsample(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).chw()?;
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "average_downsample",
                format!("spatial size {h}×{w} must be even and non-zero"),
            ));
        }
        let data = kernels::avg_downsample(self.value(a).data(), c, h, w);
        let value = Tensor::new(&[c, h / 2, w / 2], data)?;
        Ok(self.push(value, Op::AvgDownsample(a), &[a]))
    }

    fn check_bias(&self, op: &'static str, bias: Option<Var>, c_out: usize) -> Result<()> {
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::shape(
                    op,
                    format!("bias {:?} for {c_out} output channels", self.shape(b)),
                ));
            }
        }
        Ok(())
    }

    fn add_bias(&self, out: &mut [T], bias: Option<Var>, c_out: usize) {
        if let Some(b) = bias {
            let plane = out.len() / c_out;
            for (c, &bv) in self.value(b).data().iter().enumerate() {
                out[c * plane..(c + 1) * plane]
                    .iter_mut()
                    .for_each(|x| *x = *x + bv);
            }
        }
    }

    /// Zero-padded 2-D convolution. `weight` is `C_out×C_in×k×k`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (c_in, h, w) = self.value(input).chw()?;
        let (c_out, k) = match self.shape(weight) {
            &[co, ci, kh, kw] if ci == c_in && kh == kw => (co, kh),
            s => {
                return Err(Error::shape(
                    "conv2d",
                    format!("weight {s:?} incompatible with {c_in}-channel input"),
                ))
            }
        };
        self.check_bias("conv2d", bias, c_out)?;
        if k == 0 || spec.stride == 0 || h + 2 * spec.padding < k || w + 2 * spec.padding < k {
            return Err(Error::Contract(format!(
                "conv2d: kernel {k}, stride {}, padding {} invalid for {h}×{w}",
                spec.stride, spec.padding
            )));
        }
        let geom = ConvGeometry {
            channels: c_in,
            height: h,
            width: w,
            kernel: k,
            stride: spec.stride,
            padding: spec.padding,
            out_height: (h + 2 * spec.padding - k) / spec.stride + 1,
            out_width: (w + 2 * spec.padding - k) / spec.stride + 1,
        };
        let cols = kernels::im2col(self.value(input).data(), &geom);
        let mut out = vec![T::zero(); c_out * geom.col_cols()];
        T::gemm(
            c_out,
            geom.col_rows(),
            geom.col_cols(),
            self.value(weight).data(),
            false,
            &cols,
            false,
            &mut out,
            false,
        );
        self.add_bias(&mut out, bias, c_out);
        let value = Tensor::new(&[c_out, geom.out_height, geom.out_width], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &inputs,
        ))
    }

    /// Transposed convolution (adjoint of [`Graph::conv2d`]). `weight` is
    /// `C_in×C_out×k×k`; output side is `(H−1)·stride − 2·padding + k`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    ) -> Result<Var> {
        let (c_in, h, w) = self.value(input).chw()?;
        let (c_out, k) = match self.shape(weight) {
            &[ci, co, kh, kw] if ci == c_in && kh == kw => (co, kh),
            s => {
                return Err(Error::shape(
                    "conv_transpose2d",
                    format!("weight {s:?} incompatible with {c_in}-channel input"),
                ))
            }
        };
        self.check_bias("conv_transpose2d", bias, c_out)?;
        let span_h = (h.max(1) - 1) * spec.stride + k;
        let span_w = (w.max(1) - 1) * spec.stride + k;
        if k == 0 || spec.stride == 0 || h == 0 || w == 0 || span_h <= 2 * spec.padding || span_w <= 2 * spec.padding {
            return Err(Error::Contract(format!(
                "conv_transpose2d: kernel {k}, stride {}, padding {} invalid for {h}×{w}",
                spec.stride, spec.padding
            )));
        }
        let geom = ConvGeometry {
            channels: c_out,
            height: span_h - 2 * spec.padding,
            width: span_w - 2 * spec.padding,
            kernel: k,
            stride: spec.stride,
            padding: spec.padding,
            out_height: h,
            out_width: w,
        };
        let mut cols = vec![T::zero(); geom.col_rows() * geom.col_cols()];
        T::gemm(
            geom.col_rows(),
            c_in,
            h * w,
            self.value(weight).data(),
            true,
            self.value(input).data(),
            false,
            &mut cols,
            false,
        );
        let mut out = kernels::col2im(&cols, &geom);
        self.add_bias(&mut out, bias, c_out);
        let value = Tensor::new(&[c_out, geom.height, geom.width], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
                in_channels: c_in,
            },
            &inputs,
        ))
    }

    /// Per-channel normalisation to zero mean / unit variance followed by a
    /// learned affine transform.
    pub fn instance_norm(&mut self, input: Var, scale: Var, shift: Var, eps: T) -> Result<Var> {
        let (c, h, w) = self.value(input).chw()?;
        if h * w < 2 {
            return Err(Error::Contract(format!(
                "instance_norm needs at least 2 positions per channel, got {h}×{w}"
            )));
        }
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return Err(Error::shape(
                "instance_norm",
                format!(
                    "affine {:?}/{:?} for {c} channels",
                    self.shape(scale),
                    self.shape(shift)
                ),
            ));
        }
        let n = h * w;
        let nf = T::lit(n as f64);
        let x = self.value(input).data();
        let (g, b) = (self.value(scale).data(), self.value(shift).data());
        let mut xhat = Vec::with_capacity(c * n);
        let mut inv_std = Vec::with_capacity(c);
        let mut out = Vec::with_capacity(c * n);
        for ch in 0..c {
            let plane = &x[ch * n..(ch + 1) * n];
            let mu = plane.iter().copied().sum::<T>() / nf;
            let var = plane.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for &v in plane {
                let xh = (v - mu) * inv;
                xhat.push(xh);
                out.push(xh * g[ch] + b[ch]);
            }
        }
        let value = Tensor::new(&[c, h, w], out)?;
        Ok(self.push(
            value,
            Op::InstanceNorm {
                input,
                scale,
                shift,
                xhat,
                inv_std,
            },
            &[input, scale, shift],
        ))
    }

    /// Fails with [`Error::NonFinite`] if `v` holds NaN or ±Inf.
    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Reverse-mode sweep from a scalar `loss`. Leaf gradients accumulate
    /// across calls; interior gradients are recomputed each call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let seed = Tensor::full(self.shape(loss), T::one());
        self.accumulate(loss.0, seed.into_data());
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            for (v, buf) in self.backward_rule(i, g.data()) {
                if self.nodes[v.0].requires_grad {
                    self.accumulate(v.0, buf);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, idx: usize, buf: Vec<T>) {
        let node = &mut self.nodes[idx];
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(buf) {
                    *a = *a + b;
                }
            }
            None => {
                let shape = node.value.shape().to_vec();
                node.grad = Some(Tensor::new(&shape, buf).expect("gradient shape"));
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_rule(&self, idx: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&x| -x).collect())],
            Op::Mul(a, b) => vec![
                (*a, zip_map(g, val(*b), |x, y| x * y)),
                (*b, zip_map(g, val(*a), |x, y| x * y)),
            ],
            Op::AddScalar(a) => vec![(*a, g.to_vec())],
            Op::Scale(a, c) => vec![(*a, g.iter().map(|&x| x * *c).collect())],
            Op::Square(a) => {
                let two = T::lit(2.0);
                vec![(*a, zip_map(g, val(*a), |gx, x| gx * two * x))]
            }
            Op::Relu(a) => vec![(
                *a,
                zip_map(g, val(*a), |gx, x| if x > T::zero() { gx } else { T::zero() }),
            )],
            Op::LeakyRelu(a, s) => vec![(
                *a,
                zip_map(g, val(*a), |gx, x| if x > T::zero() { gx } else { gx * *s }),
            )],
            Op::Tanh(a) => vec![(
                *a,
                zip_map(g, node.value.data(), |gx, y| gx * (T::one() - y * y)),
            )],
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::Mean(a) => {
                let n = val(*a).len();
                vec![(*a, vec![g[0] / T::lit(n as f64); n])]
            }
            Op::L1Distance(a, b) => {
                let n = T::lit(val(*a).len() as f64);
                let da: Vec<T> = zip_map(val(*a), val(*b), |x, y| {
                    let d = x - y;
                    let s = if d > T::zero() {
                        T::one()
                    } else if d < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    s * g[0] / n
                });
                let db = da.iter().map(|&x| -x).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::MatMul { lhs, rhs, m, k, n } => {
                let mut out = Vec::new();
                if self.needs(*lhs) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(*m, *n, *k, g, false, val(*rhs), true, &mut da, false);
                    out.push((*lhs, da));
                }
                if self.needs(*rhs) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(*k, *m, *n, val(*lhs), true, g, false, &mut db, false);
                    out.push((*rhs, db));
                }
                out
            }
            Op::Transpose(a) => {
                // node value is c×r; input is r×c
                let (c, r) = (node.value.shape()[0], node.value.shape()[1]);
                let mut da = vec![T::zero(); r * c];
                for j in 0..c {
                    for i in 0..r {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                vec![(*a, da)]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Concat(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let len = val(p).len();
                        let piece = g[offset..offset + len].to_vec();
                        offset += len;
                        (p, piece)
                    })
                    .collect()
            }
            Op::SliceChannels { input, start } => {
                let (_, h, w) = self.nodes[input.0].value.chw().expect("rank-3");
                let mut da = vec![T::zero(); val(*input).len()];
                let off = start * h * w;
                da[off..off + g.len()].copy_from_slice(g);
                vec![(*input, da)]
            }
            Op::AvgDownsample(a) => {
                let (c, h, w) = self.nodes[a.0].value.chw().expect("rank-3");
                vec![(*a, kernels::avg_downsample_backward(g, c, h, w))]
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let c_out = node.value.shape()[0];
                let mut out = Vec::new();
                if self.needs(*weight) {
                    let cols = kernels::im2col(val(*input), geom);
                    let mut dw = vec![T::zero(); c_out * geom.col_rows()];
                    T::gemm(
                        c_out,
                        geom.col_cols(),
                        geom.col_rows(),
                        g,
                        false,
                        &cols,
                        true,
                        &mut dw,
                        false,
                    );
                    out.push((*weight, dw));
                }
                if self.needs(*input) {
                    let mut dcols = vec![T::zero(); geom.col_rows() * geom.col_cols()];
                    T::gemm(
                        geom.col_rows(),
                        c_out,
                        geom.col_cols(),
                        val(*weight),
                        true,
                        g,
                        false,
                        &mut dcols,
                        false,
                    );
                    out.push((*input, kernels::col2im(&dcols, geom)));
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        out.push((*b, channel_sums(g, c_out)));
                    }
                }
                out
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
                in_channels,
            } => {
                let c_out = geom.channels;
                let hw_in = geom.col_cols();
                let dcols = kernels::im2col(g, geom);
                let mut out = Vec::new();
                if self.needs(*input) {
                    let mut dx = vec![T::zero(); in_channels * hw_in];
                    T::gemm(
                        *in_channels,
                        geom.col_rows(),
                        hw_in,
                        val(*weight),
                        false,
                        &dcols,
                        false,
                        &mut dx,
                        false,
                    );
                    out.push((*input, dx));
                }
                if self.needs(*weight) {
                    let mut dw = vec![T::zero(); in_channels * geom.col_rows()];
                    T::gemm(
                        *in_channels,
                        hw_in,
                        geom.col_rows(),
                        val(*input),
                        false,
                        &dcols,
                        true,
                        &mut dw,
                        false,
                    );
                    out.push((*weight, dw));
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        out.push((*b, channel_sums(g, c_out)));
                    }
                }
                out
            }
            Op::InstanceNorm {
                input,
                scale,
                shift,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let n = g.len() / c;
                let nf = T::lit(n as f64);
                let gamma = val(*scale);
                let mut dx = vec![T::zero(); g.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ch in 0..c {
                    let gs = &g[ch * n..(ch + 1) * n];
                    let xs = &xhat[ch * n..(ch + 1) * n];
                    let mut sum_dxh = T::zero();
                    let mut sum_dxh_xh = T::zero();
                    for (&gy, &xh) in gs.iter().zip(xs) {
                        dgamma[ch] = dgamma[ch] + gy * xh;
                        dbeta[ch] = dbeta[ch] + gy;
                        let dxh = gy * gamma[ch];
                        sum_dxh = sum_dxh + dxh;
                        sum_dxh_xh = sum_dxh_xh + dxh * xh;
                    }
                    let k = inv_std[ch] / nf;
                    for i in 0..n {
                        let dxh = gs[i] * gamma[ch];
                        dx[ch * n + i] = k * (nf * dxh - sum_dxh - xs[i] * sum_dxh_xh);
                    }
                }
                vec![(*input, dx), (*scale, dgamma), (*shift, dbeta)]
            }
        }
    }
}

fn channel_sums<T: Scalar>(g: &[T], channels: usize) -> Vec<T> {
    let plane = g.len() / channels;
    (0..channels)
        .map(|c| g[c * plane..(c + 1) * plane].iter().copied().sum())
        .collect()
}
