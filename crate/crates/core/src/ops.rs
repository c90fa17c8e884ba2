//! Forward and backward kernels for the layers used by the network.
//!
//! Convolutions lower each sample to an im2col matrix and run one GEMM per
//! sample, so results never depend on batch composition.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Geometry of a 2-D convolution. `dilation` is the atrous rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    /// Stride-1 convolution whose output keeps the input's spatial size
    /// (odd kernels only): padding = dilation * (k - 1) / 2.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: 1,
            dilation,
            padding: dilation * (kernel - 1) / 2,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::same(in_channels, out_channels, 1, 1)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel.0, self.kernel.1]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.fan_in() + self.out_channels
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.kernel.0 == 0
            || self.kernel.1 == 0
            || self.stride == 0
            || self.dilation == 0
        {
            return Err(Error::InvalidArgument(format!("degenerate conv spec {self:?}")));
        }
        Ok(())
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let axis = |len: usize, k: usize| -> Result<usize> {
            let extent = self.dilation * (k - 1) + 1;
            let padded = len + 2 * self.padding;
            if extent > padded {
                return Err(Error::Shape(format!(
                    "kernel extent {extent} exceeds padded input {padded}"
                )));
            }
            Ok((padded - extent) / self.stride + 1)
        };
        Ok((axis(h, self.kernel.0)?, axis(w, self.kernel.1)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c = a * b + beta * c` for row-major strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every index touched is within the slices given the strides and
    // extents checked by the callers; `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeom {
    spec: Conv2dSpec,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.spec.fan_in()
    }

    fn pixels(&self) -> usize {
        self.oh * self.ow
    }

    fn is_identity_lowering(&self) -> bool {
        let s = &self.spec;
        s.kernel == (1, 1) && s.stride == 1 && s.padding == 0
    }

    /// Source coordinate along one axis, or `None` inside the zero padding.
    #[inline]
    fn source(&self, out: usize, tap: usize, len: usize) -> Option<usize> {
        let pos = (out * self.spec.stride + tap * self.spec.dilation) as isize - self.spec.padding as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (kh, kw) = self.spec.kernel;
        let p = self.pixels();
        for c in 0..self.spec.in_channels {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..kh {
                for j in 0..kw {
                    let row = &mut cols[((c * kh + i) * kw + j) * p..][..p];
                    for oy in 0..self.oh {
                        let dst = &mut row[oy * self.ow..(oy + 1) * self.ow];
                        match self.source(oy, i, self.h) {
                            None => dst.fill(0.0),
                            Some(sy) => {
                                let src = &plane[sy * self.w..(sy + 1) * self.w];
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    *d = self.source(ox, j, self.w).map_or(0.0, |sx| src[sx]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (kh, kw) = self.spec.kernel;
        let p = self.pixels();
        for c in 0..self.spec.in_channels {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..kh {
                for j in 0..kw {
                    let row = &cols[((c * kh + i) * kw + j) * p..][..p];
                    for oy in 0..self.oh {
                        let Some(sy) = self.source(oy, i, self.h) else { continue };
                        for ox in 0..self.ow {
                            if let Some(sx) = self.source(ox, j, self.w) {
                                plane[sy * self.w + sx] += row[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom(input: &Tensor, weights: &Tensor, bias: &Tensor, spec: &Conv2dSpec) -> Result<(usize, ConvGeom)> {
    let [n, c, h, w] = input.dims4()?;
    if c != spec.in_channels {
        return Err(Error::Shape(format!(
            "conv2d expects {} input channels, got {c}",
            spec.in_channels
        )));
    }
    if weights.shape() != spec.weight_shape() {
        return Err(Error::Shape(format!(
            "conv2d weights {:?}, expected {:?}",
            weights.shape(),
            spec.weight_shape()
        )));
    }
    if bias.shape() != [spec.out_channels] {
        return Err(Error::Shape(format!(
            "conv2d bias {:?}, expected [{}]",
            bias.shape(),
            spec.out_channels
        )));
    }
    let (oh, ow) = spec.output_size(h, w)?;
    Ok((
        n,
        ConvGeom {
            spec: *spec,
            h,
            w,
            oh,
            ow,
        },
    ))
}

fn conv2d_forward(input: &Tensor, weights: &Tensor, bias: &Tensor, spec: &Conv2dSpec) -> Result<Tensor> {
    let (n, geom) = conv_geom(input, weights, bias, spec)?;
    let (o, rows, p) = (spec.out_channels, geom.rows(), geom.pixels());
    let in_stride = spec.in_channels * geom.h * geom.w;
    let mut out = vec![0.0; n * o * p];
    let mut cols = if geom.is_identity_lowering() {
        Vec::new()
    } else {
        vec![0.0; rows * p]
    };
    for s in 0..n {
        let x = &input.data()[s * in_stride..(s + 1) * in_stride];
        let lowered: &[f64] = if geom.is_identity_lowering() {
            x
        } else {
            geom.im2col(x, &mut cols);
            &cols
        };
        let y = &mut out[s * o * p..(s + 1) * o * p];
        for (oc, row) in y.chunks_exact_mut(p).enumerate() {
            row.fill(bias.data()[oc]);
        }
        gemm(o, rows, p, weights.data(), (rows, 1), lowered, (p, 1), 1.0, y);
    }
    Ok(Tensor::from_parts(vec![n, o, geom.oh, geom.ow], out))
}

fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    spec: &Conv2dSpec,
    grad: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let (n, geom) = conv_geom(input, weights, bias, spec)?;
    let (o, rows, p) = (spec.out_channels, geom.rows(), geom.pixels());
    let in_stride = spec.in_channels * geom.h * geom.w;
    let mut dx = needs[0].then(|| vec![0.0; input.numel()]);
    let mut dw = needs[1].then(|| vec![0.0; weights.numel()]);
    let mut db = needs[2].then(|| vec![0.0; o]);
    let identity = geom.is_identity_lowering();
    let mut cols = vec![0.0; if identity { 0 } else { rows * p }];
    let mut dcols = vec![0.0; if dx.is_some() && !identity { rows * p } else { 0 }];

    for s in 0..n {
        let dy = &grad.data()[s * o * p..(s + 1) * o * p];
        if let Some(db) = db.as_mut() {
            for (oc, row) in dy.chunks_exact(p).enumerate() {
                db[oc] += row.iter().sum::<f64>();
            }
        }
        let x = &input.data()[s * in_stride..(s + 1) * in_stride];
        if let Some(dw) = dw.as_mut() {
            let lowered: &[f64] = if identity {
                x
            } else {
                geom.im2col(x, &mut cols);
                &cols
            };
            // dW += dY . cols^T
            gemm(o, p, rows, dy, (p, 1), lowered, (1, p), 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dx = &mut dx[s * in_stride..(s + 1) * in_stride];
            if identity {
                // dX = W^T . dY, written straight into the input gradient.
                gemm(rows, o, p, weights.data(), (1, rows), dy, (p, 1), 1.0, dx);
            } else {
                gemm(rows, o, p, weights.data(), (1, rows), dy, (p, 1), 0.0, &mut dcols);
                geom.col2im(&dcols, dx);
            }
        }
    }
    Ok(vec![
        dx.map(|d| Tensor::from_parts(input.shape().to_vec(), d)),
        dw.map(|d| Tensor::from_parts(weights.shape().to_vec(), d)),
        db.map(|d| Tensor::from_parts(vec![o], d)),
    ])
}

/// Per-axis interpolation table: (lower index, upper index, upper weight).
fn bilinear_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Bilinear resize of a plain `[N,C,H,W]` tensor outside any graph.
pub fn resize_bilinear(input: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4()?;
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::InvalidArgument(format!("resize target {target:?}")));
    }
    if (th, tw) == (h, w) {
        return Ok(input.clone());
    }
    let ys = bilinear_axis(h, th);
    let xs = bilinear_axis(w, tw);
    let mut out = Vec::with_capacity(n * c * th * tw);
    for plane in input.data().chunks_exact(h * w) {
        for &(y0, y1, ly) in &ys {
            for &(x0, x1, lx) in &xs {
                let top = (1.0 - lx) * plane[y0 * w + x0] + lx * plane[y0 * w + x1];
                let bottom = (1.0 - lx) * plane[y1 * w + x0] + lx * plane[y1 * w + x1];
                out.push((1.0 - ly) * top + ly * bottom);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, th, tw], out))
}

fn resize_backward(input: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let [_, _, h, w] = input.dims4()?;
    let [_, _, th, tw] = grad.dims4()?;
    if (th, tw) == (h, w) {
        return Ok(grad.clone());
    }
    let ys = bilinear_axis(h, th);
    let xs = bilinear_axis(w, tw);
    let mut dx = vec![0.0; input.numel()];
    for (plane, g) in dx.chunks_exact_mut(h * w).zip(grad.data().chunks_exact(th * tw)) {
        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                let v = g[oy * tw + ox];
                plane[y0 * w + x0] += (1.0 - ly) * (1.0 - lx) * v;
                plane[y0 * w + x1] += (1.0 - ly) * lx * v;
                plane[y1 * w + x0] += ly * (1.0 - lx) * v;
                plane[y1 * w + x1] += ly * lx * v;
            }
        }
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), dx))
}

/// Graph operation record; holds whatever the backward pass needs beyond
/// the input and output values.
pub(crate) enum Op {
    Conv2d(Conv2dSpec),
    Activation(Activation),
    GlobalAvgPool,
    Resize,
    Concat(Vec<usize>),
    Dense,
    SoftmaxCrossEntropy { probs: Vec<f64>, labels: Vec<usize> },
    GateMul,
    Pick(usize),
    Sum,
    Square,
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Conv2d(_) => "conv2d",
            Op::Activation(Activation::Relu) => "relu",
            Op::Activation(Activation::Sigmoid) => "sigmoid",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Resize => "resize_bilinear",
            Op::Concat(_) => "concat_channels",
            Op::Dense => "dense",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::GateMul => "gate_mul",
            Op::Pick(_) => "pick",
            Op::Sum => "sum",
            Op::Square => "square",
        }
    }

    pub(crate) fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let zip_map = |a: &Tensor, f: &dyn Fn(f64, f64) -> f64| {
            Tensor::from_parts(
                a.shape().to_vec(),
                a.data().iter().zip(grad.data()).map(|(&x, &g)| f(x, g)).collect(),
            )
        };
        Ok(match self {
            Op::Conv2d(spec) => return conv2d_backward(inputs[0], inputs[1], inputs[2], spec, grad, needs),
            Op::Activation(Activation::Relu) => {
                vec![Some(zip_map(inputs[0], &|x, g| if x > 0.0 { g } else { 0.0 }))]
            }
            Op::Activation(Activation::Sigmoid) => {
                vec![Some(zip_map(output, &|s, g| g * s * (1.0 - s)))]
            }
            Op::GlobalAvgPool => {
                let [_, _, h, w] = inputs[0].dims4()?;
                let scale = 1.0 / (h * w) as f64;
                let data = grad
                    .data()
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g * scale, h * w))
                    .collect();
                vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), data))]
            }
            Op::Resize => vec![Some(resize_backward(inputs[0], grad)?)],
            Op::Concat(sizes) => {
                let n = grad.shape()[0];
                let inner: usize = grad.shape()[2..].iter().product();
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                sizes
                    .iter()
                    .zip(inputs)
                    .zip(needs)
                    .map(|((&c, input), &need)| {
                        let start = offset;
                        offset += c;
                        need.then(|| {
                            let mut data = Vec::with_capacity(n * c * inner);
                            for s in 0..n {
                                let base = (s * total + start) * inner;
                                data.extend_from_slice(&grad.data()[base..base + c * inner]);
                            }
                            Tensor::from_parts(input.shape().to_vec(), data)
                        })
                    })
                    .collect()
            }
            Op::Dense => {
                let (x, w) = (inputs[0], inputs[1]);
                let (n, d) = (x.shape()[0], x.shape()[1]);
                let k = w.shape()[0];
                let g = grad.data();
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; n * d];
                    for r in 0..n {
                        for j in 0..k {
                            let gj = g[r * k + j];
                            for (acc, &wv) in dx[r * d..(r + 1) * d].iter_mut().zip(&w.data()[j * d..(j + 1) * d]) {
                                *acc += gj * wv;
                            }
                        }
                    }
                    Tensor::from_parts(vec![n, d], dx)
                });
                let dw = needs[1].then(|| {
                    let mut dw = vec![0.0; k * d];
                    for r in 0..n {
                        for j in 0..k {
                            let gj = g[r * k + j];
                            for (acc, &xv) in dw[j * d..(j + 1) * d].iter_mut().zip(&x.data()[r * d..(r + 1) * d]) {
                                *acc += gj * xv;
                            }
                        }
                    }
                    Tensor::from_parts(vec![k, d], dw)
                });
                let db = needs[2].then(|| {
                    let mut db = vec![0.0; k];
                    for row in g.chunks_exact(k) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    Tensor::from_parts(vec![k], db)
                });
                vec![dx, dw, db]
            }
            Op::SoftmaxCrossEntropy { probs, labels } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = grad.data()[0] / n as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &label) in labels.iter().enumerate() {
                    d[r * k + label] -= scale;
                }
                vec![Some(Tensor::from_parts(vec![n, k], d))]
            }
            Op::GateMul => {
                let (x, m) = (inputs[0], inputs[1]);
                let [n, c, h, w] = x.dims4()?;
                let plane = h * w;
                let g = grad.data();
                let dx = needs[0].then(|| {
                    let mut dx = Vec::with_capacity(x.numel());
                    for s in 0..n {
                        let gate = &m.data()[s * plane..(s + 1) * plane];
                        for ch in 0..c {
                            let base = (s * c + ch) * plane;
                            dx.extend(g[base..base + plane].iter().zip(gate).map(|(gv, mv)| gv * mv));
                        }
                    }
                    Tensor::from_parts(x.shape().to_vec(), dx)
                });
                let dm = needs[1].then(|| {
                    let mut dm = vec![0.0; m.numel()];
                    for s in 0..n {
                        let acc = &mut dm[s * plane..(s + 1) * plane];
                        for ch in 0..c {
                            let base = (s * c + ch) * plane;
                            for ((a, gv), xv) in acc
                                .iter_mut()
                                .zip(&g[base..base + plane])
                                .zip(&x.data()[base..base + plane])
                            {
                                *a += gv * xv;
                            }
                        }
                    }
                    Tensor::from_parts(m.shape().to_vec(), dm)
                });
                vec![dx, dm]
            }
            Op::Pick(index) => {
                let mut d = Tensor::zeros(inputs[0].shape().to_vec());
                d.data_mut()[*index] = grad.data()[0];
                vec![Some(d)]
            }
            Op::Sum => vec![Some(Tensor::full(inputs[0].shape().to_vec(), grad.data()[0]))],
            Op::Square => vec![Some(zip_map(inputs[0], &|x, g| 2.0 * x * g))],
        })
    }
}

impl Graph {
    /// Cross-correlation with zero padding, stride and input dilation.
    /// `input` is `[N,C,H,W]`, `weights` `[O,C,kh,kw]`, `bias` `[O]`.
    pub fn conv2d(&mut self, input: Var, weights: Var, bias: Var, spec: Conv2dSpec) -> Result<Var> {
        let out = conv2d_forward(self.value(input), self.value(weights), self.value(bias), &spec)?;
        self.push(Op::Conv2d(spec), &[input, weights, bias], out)
    }

    pub fn pointwise(&mut self, input: Var, kind: Activation) -> Result<Var> {
        let f: fn(f64) -> f64 = match kind {
            Activation::Relu => |v| v.max(0.0),
            Activation::Sigmoid => sigmoid,
        };
        let out = self.value(input).map(f);
        self.push(Op::Activation(kind), &[input], out)
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.pointwise(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.pointwise(input, Activation::Sigmoid)
    }

    /// `[N,C,H,W] -> [N,C]` plane means.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims4()?;
        let scale = (h * w) as f64;
        let data = x
            .data()
            .chunks_exact(h * w)
            .map(|p| p.iter().sum::<f64>() / scale)
            .collect();
        let out = Tensor::from_parts(vec![n, c], data);
        self.push(Op::GlobalAvgPool, &[input], out)
    }

    /// Bilinear resize with half-pixel centres (align-corners false).
    pub fn resize_bilinear(&mut self, input: Var, target: (usize, usize)) -> Result<Var> {
        let out = resize_bilinear(self.value(input), target)?;
        self.push(Op::Resize, &[input], out)
    }

    /// Concatenation along axis 1. All inputs must agree on every other axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .map(|&v| self.value(v))
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        if first.rank() < 2 {
            return Err(Error::Shape(format!("concat needs rank >= 2, got {:?}", first.shape())));
        }
        let n = first.shape()[0];
        let rest = first.shape()[2..].to_vec();
        let inner: usize = rest.iter().product();
        let mut sizes = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != first.rank() || s[0] != n || s[2..] != rest[..] {
                return Err(Error::Shape(format!(
                    "concat: {:?} incompatible with {:?}",
                    s,
                    first.shape()
                )));
            }
            sizes.push(s[1]);
        }
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(n * total * inner);
        for sample in 0..n {
            for (&v, &c) in inputs.iter().zip(&sizes) {
                let d = self.value(v).data();
                data.extend_from_slice(&d[sample * c * inner..(sample + 1) * c * inner]);
            }
        }
        let mut shape = vec![n, total];
        shape.extend(rest);
        let out = Tensor::from_parts(shape, data);
        self.push(Op::Concat(sizes), inputs, out)
    }

    /// `input . weights^T + bias` with `input [N,D]`, `weights [K,D]`, `bias [K]`.
    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weights), self.value(bias));
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || b.shape() != [ws[0]] {
            return Err(Error::Shape(format!(
                "dense: input {xs:?}, weights {ws:?}, bias {:?}",
                b.shape()
            )));
        }
        let (n, d, k) = (xs[0], xs[1], ws[0]);
        let mut out = Vec::with_capacity(n * k);
        for row in x.data().chunks_exact(d) {
            for (j, wrow) in w.data().chunks_exact(d).enumerate() {
                out.push(b.data()[j] + row.iter().zip(wrow).map(|(a, c)| a * c).sum::<f64>());
            }
        }
        let out = Tensor::from_parts(vec![n, k], out);
        self.push(Op::Dense, &[input, weights, bias], out)
    }

    /// Mean negative log-softmax of the labelled class; a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let s = x.shape();
        if s.len() != 2 || s[0] != labels.len() || labels.is_empty() {
            return Err(Error::Shape(format!(
                "cross entropy: logits {s:?} with {} labels",
                labels.len()
            )));
        }
        let k = s[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let mut probs = Vec::with_capacity(x.numel());
        let mut loss = 0.0;
        for (row, &label) in x.data().chunks_exact(k).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_denom = denom.ln();
            loss -= row[label] - max - log_denom;
            probs.extend(row.iter().map(|v| (v - max).exp() / denom));
        }
        let out = Tensor::scalar(loss / labels.len() as f64);
        let op = Op::SoftmaxCrossEntropy {
            probs,
            labels: labels.to_vec(),
        };
        self.push(op, &[logits], out)
    }

    /// `input [N,C,H,W]` multiplied by `gate [N,1,H,W]` broadcast over channels.
    pub fn gate_mul(&mut self, input: Var, gate: Var) -> Result<Var> {
        let (x, m) = (self.value(input), self.value(gate));
        let [n, c, h, w] = x.dims4()?;
        if m.shape() != [n, 1, h, w] {
            return Err(Error::Shape(format!(
                "gate {:?} does not broadcast over {:?}",
                m.shape(),
                x.shape()
            )));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(x.numel());
        for s in 0..n {
            let g = &m.data()[s * plane..(s + 1) * plane];
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                out.extend(x.data()[base..base + plane].iter().zip(g).map(|(a, b)| a * b));
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        self.push(Op::GateMul, &[input, gate], out)
    }

    /// The single element at `index` (row-major multi-index) as a scalar.
    pub fn pick(&mut self, input: Var, index: &[usize]) -> Result<Var> {
        let x = self.value(input);
        if index.len() != x.rank() || index.iter().zip(x.shape()).any(|(i, d)| i >= d) {
            return Err(Error::Shape(format!("index {index:?} outside {:?}", x.shape())));
        }
        let flat = index.iter().zip(x.shape()).fold(0, |acc, (i, d)| acc * d + i);
        let out = Tensor::scalar(x.data()[flat]);
        self.push(Op::Pick(flat), &[input], out)
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(input).sum());
        self.push(Op::Sum, &[input], out)
    }

    pub fn square(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input).map(|v| v * v);
        self.push(Op::Square, &[input], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(f: impl FnOnce(&mut Graph) -> Result<Var>) -> Tensor {
        let mut g = Graph::new();
        let v = f(&mut g).unwrap();
        g.value(v).clone()
    }

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn conv_sum_of_ones() {
        let out = run(|g| {
            let x = g.constant(Tensor::ones([1, 1, 3, 3]))?;
            let w = g.constant(Tensor::ones([1, 1, 3, 3]))?;
            let b = g.constant(Tensor::zeros([1]))?;
            g.conv2d(x, w, b, Conv2dSpec::same(1, 1, 3, 1))
        });
        assert_eq!(out.shape(), &[1, 1, 3, 3]);
        assert_eq!(out.at(&[0, 0, 1, 1]), 9.0);
        assert_eq!(out.at(&[0, 0, 0, 0]), 4.0);
    }

    #[test]
    fn delta_kernel_is_identity_at_every_dilation() {
        let input: Vec<f64> = (0..2 * 7 * 6).map(|i| (i as f64 * 0.37).sin()).collect();
        let input = t(&[1, 2, 7, 6], input);
        for dilation in 1..=5 {
            let mut w = vec![0.0; 2 * 2 * 9];
            w[4] = 1.0; // out 0 <- in 0 centre
            w[3 * 9 + 4] = 1.0; // out 1 <- in 1 centre
            let out = run(|g| {
                let x = g.constant(input.clone())?;
                let w = g.constant(t(&[2, 2, 3, 3], w))?;
                let b = g.constant(Tensor::zeros([2]))?;
                g.conv2d(x, w, b, Conv2dSpec::same(2, 2, 3, dilation))
            });
            assert_eq!(out, input, "dilation {dilation}");
        }
    }

    #[test]
    fn same_padding_preserves_size() {
        for dilation in 1..=8 {
            for k in [1, 3, 5] {
                let spec = Conv2dSpec::same(1, 1, k, dilation);
                if spec.output_size(9, 4).is_ok() {
                    assert_eq!(spec.output_size(9, 4).unwrap(), (9, 4));
                }
            }
            assert_eq!(Conv2dSpec::same(1, 1, 3, dilation).output_size(1, 1).unwrap(), (1, 1));
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones([1, 2, 4, 4])).unwrap();
        let w = g.constant(Tensor::ones([1, 1, 3, 3])).unwrap();
        let b = g.constant(Tensor::zeros([1])).unwrap();
        assert!(g.conv2d(x, w, b, Conv2dSpec::same(1, 1, 3, 1)).is_err());
        let spec = Conv2dSpec {
            in_channels: 2,
            out_channels: 1,
            kernel: (3, 3),
            stride: 1,
            dilation: 3,
            padding: 0,
        };
        let w2 = g.constant(Tensor::ones([1, 2, 3, 3])).unwrap();
        assert!(g.conv2d(x, w2, b, spec).is_err());
    }

    #[test]
    fn strided_output_size() {
        let spec = Conv2dSpec {
            in_channels: 1,
            out_channels: 1,
            kernel: (3, 3),
            stride: 2,
            dilation: 1,
            padding: 1,
        };
        assert_eq!(spec.output_size(64, 64).unwrap(), (32, 32));
        assert_eq!(spec.output_size(2, 2).unwrap(), (1, 1));
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let out = run(|g| {
            let x = g.constant(t(&[3], vec![-1.0, 0.0, 2.0]))?;
            g.relu(x)
        });
        assert_eq!(out.data(), &[0.0, 0.0, 2.0]);
        let out = run(|g| {
            let x = g.constant(t(&[1], vec![0.0]))?;
            g.sigmoid(x)
        });
        assert_eq!(out.data(), &[0.5]);
    }

    #[test]
    fn sigmoid_symmetry() {
        for i in -50..50 {
            let x = i as f64 * 0.731;
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn global_avg_pool_means() {
        let mut data = vec![5.0; 9];
        data.extend([1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0, 2.5]);
        let out = run(|g| {
            let x = g.constant(t(&[1, 2, 3, 3], data))?;
            g.global_avg_pool(x)
        });
        assert_eq!(out.data()[0], 5.0);
        let out = run(|g| {
            let x = g.constant(t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]))?;
            g.global_avg_pool(x)
        });
        assert_eq!(out.data(), &[2.5]);

        let mut g = Graph::new();
        let x = g.input(Tensor::ones([2, 3, 4, 5])).unwrap();
        let p = g.global_avg_pool(x).unwrap();
        let s = g.sum(p).unwrap();
        let gx = g.backward(s).unwrap().wrt(x);
        assert!(gx.data().iter().all(|&v| v == 1.0 / 20.0));
    }

    #[test]
    fn resize_identity_and_constant() {
        let x = t(&[1, 2, 3, 2], (0..12).map(|i| i as f64 * 1.3).collect());
        let out = run(|g| {
            let v = g.constant(x.clone())?;
            g.resize_bilinear(v, (3, 2))
        });
        assert_eq!(out, x);
        for target in [(1, 1), (5, 7), (2, 9)] {
            let out = run(|g| {
                let v = g.constant(Tensor::full([1, 1, 3, 4], 0.7))?;
                g.resize_bilinear(v, target)
            });
            assert!(out.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        }
    }

    #[test]
    fn resize_hand_computed() {
        // Torch-convention reference for a 2x2 ramp upsampled to 4x4.
        let out = run(|g| {
            let v = g.constant(t(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]))?;
            g.resize_bilinear(v, (4, 4))
        });
        let expected = [
            0.0, 0.25, 0.75, 1.0, 0.5, 0.75, 1.25, 1.5, 1.5, 1.75, 2.25, 2.5, 2.0, 2.25, 2.75, 3.0,
        ];
        assert_eq!(out.data(), &expected);
    }

    #[test]
    fn concat_layout_and_sum() {
        let a = t(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t(&[1, 3, 1, 2], vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        let out = run(|g| {
            let a = g.constant(a.clone())?;
            let b = g.constant(b.clone())?;
            g.concat_channels(&[a, b])
        });
        assert_eq!(out.shape(), &[1, 5, 1, 2]);
        assert_eq!(&out.data()[..4], a.data());
        assert_eq!(out.sum(), a.sum() + b.sum());
        let single = run(|g| {
            let a = g.constant(a.clone())?;
            g.concat_channels(&[a])
        });
        assert_eq!(single, a);

        let mut g = Graph::new();
        let a = g.constant(Tensor::ones([1, 2, 2, 2])).unwrap();
        let b = g.constant(Tensor::ones([1, 2, 3, 2])).unwrap();
        assert!(g.concat_channels(&[a, b]).is_err());
    }

    #[test]
    fn dense_identity_and_bias() {
        let x = t(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        let out = run(|g| {
            let xv = g.constant(x.clone())?;
            let w = g.constant(t(&[3, 3], eye))?;
            let b = g.constant(Tensor::zeros([3]))?;
            g.dense(xv, w, b)
        });
        assert_eq!(out, x);
        let out = run(|g| {
            let xv = g.constant(x.clone())?;
            let w = g.constant(Tensor::zeros([2, 3]))?;
            let b = g.constant(t(&[2], vec![0.3, -1.0]))?;
            g.dense(xv, w, b)
        });
        assert_eq!(out.data(), &[0.3, -1.0, 0.3, -1.0]);
    }

    #[test]
    fn cross_entropy_values() {
        let out = run(|g| {
            let x = g.constant(t(&[1, 2], vec![0.0, 0.0]))?;
            g.softmax_cross_entropy(x, &[0])
        });
        assert!((out.data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        let out = run(|g| {
            let x = g.constant(t(&[1, 2], vec![1000.0, 0.0]))?;
            g.softmax_cross_entropy(x, &[0])
        });
        assert!(out.data()[0].is_finite() && out.data()[0].abs() < 1e-12);

        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([1, 2])).unwrap();
        assert!(matches!(
            g.softmax_cross_entropy(x, &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let logits = t(&[2, 3], vec![0.2, -1.0, 0.5, 1.5, 0.0, -0.3]);
        let labels = [2, 0];
        let mut g = Graph::new();
        let x = g.input(logits.clone()).unwrap();
        let l = g.softmax_cross_entropy(x, &labels).unwrap();
        let gx = g.backward(l).unwrap().wrt(x);
        for (r, &label) in labels.iter().enumerate() {
            let row = &logits.data()[r * 3..r * 3 + 3];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for (c, v) in row.iter().enumerate() {
                let onehot = if c == label { 1.0 } else { 0.0 };
                let expected = (v.exp() / z - onehot) / 2.0;
                assert!((gx.data()[r * 3 + c] - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gate_mul_broadcasts() {
        let out = run(|g| {
            let x = g.constant(t(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]))?;
            let m = g.constant(t(&[1, 1, 1, 2], vec![0.5, 0.25]))?;
            g.gate_mul(x, m)
        });
        assert_eq!(out.data(), &[0.5, 0.5, 1.5, 1.0]);
    }

    #[test]
    fn pick_selects_element() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 2], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let p = g.pick(x, &[1, 0]).unwrap();
        assert_eq!(g.value(p).data(), &[3.0]);
        let gx = g.backward(p).unwrap().wrt(x);
        assert_eq!(gx.data(), &[0.0, 0.0, 1.0, 0.0]);
    }
}
