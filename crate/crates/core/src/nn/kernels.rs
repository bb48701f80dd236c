//! Forward and backward kernels for the fixed layer set.
//!
//! Every kernel is a pure function over [`Tensor`]s or flat slices. Backward
//! kernels take the upstream gradient and return (or accumulate into) the
//! gradients of every input.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::scene::Point;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.1;

pub fn leaky_relu(x: &[f64], alpha: f64) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { alpha * v }).collect()
}

pub fn leaky_relu_backward(x: &[f64], alpha: f64, grad_out: &[f64]) -> Vec<f64> {
    x.iter().zip(grad_out).map(|(&v, &g)| if v > 0.0 { g } else { alpha * g }).collect()
}

fn fc_dims(input: &Tensor, weights: &Tensor, bias: Option<&Tensor>) -> Result<(usize, usize, usize)> {
    let [out, inner] = weights.shape() else {
        return Err(Error::Shape(format!("weights must be 2-D, got {:?}", weights.shape())));
    };
    let rows = match input.shape() {
        [n] if n == inner => 1,
        [r, n] if n == inner => *r,
        s => return Err(Error::Shape(format!("input {s:?} does not match weights {:?}", weights.shape()))),
    };
    if let Some(b) = bias {
        if b.shape() != [*out] {
            return Err(Error::Shape(format!("bias {:?} does not match {out} outputs", b.shape())));
        }
    }
    Ok((rows, *inner, *out))
}

/// `y = W x + b` for `x` of shape `[in]` or a batch `[rows, in]`; `W` is `[out, in]`.
pub fn fully_connected(input: &Tensor, weights: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (rows, inner, out) = fc_dims(input, weights, bias)?;
    let mut y = vec![0.0; rows * out];
    linear_rows(input.data(), weights.data(), bias.map(Tensor::data), rows, inner, out, &mut y);
    let shape = if input.shape().len() == 1 { vec![out] } else { vec![rows, out] };
    Ok(Tensor::raw(shape, y))
}

/// Dot product with four independent partial sums.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn linear_rows(
    x: &[f64],
    w: &[f64],
    b: Option<&[f64]>,
    rows: usize,
    inner: usize,
    out: usize,
    y: &mut [f64],
) {
    for r in 0..rows {
        let xr = &x[r * inner..(r + 1) * inner];
        for o in 0..out {
            let wo = &w[o * inner..(o + 1) * inner];
            y[r * out + o] = b.map_or(0.0, |b| b[o]) + dot(wo, xr);
        }
    }
}

/// Accumulates input, weight, and bias gradients of a batched linear map.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_rows_backward(
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    rows: usize,
    inner: usize,
    out: usize,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    if let Some(dx) = dx {
        for r in 0..rows {
            let g = &grad_out[r * out..(r + 1) * out];
            let dxr = &mut dx[r * inner..(r + 1) * inner];
            for (o, &go) in g.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                let wo = &w[o * inner..(o + 1) * inner];
                for (d, a) in dxr.iter_mut().zip(wo) {
                    *d += go * a;
                }
            }
        }
    }
    if let Some(dw) = dw {
        for r in 0..rows {
            let g = &grad_out[r * out..(r + 1) * out];
            let xr = &x[r * inner..(r + 1) * inner];
            for (o, &go) in g.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                let dwo = &mut dw[o * inner..(o + 1) * inner];
                for (d, c) in dwo.iter_mut().zip(xr) {
                    *d += go * c;
                }
            }
        }
    }
    if let Some(db) = db {
        for r in 0..rows {
            for (d, g) in db.iter_mut().zip(&grad_out[r * out..(r + 1) * out]) {
                *d += g;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FcGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn fully_connected_backward(input: &Tensor, weights: &Tensor, grad_out: &Tensor) -> Result<FcGrads> {
    let (rows, inner, out) = fc_dims(input, weights, None)?;
    if grad_out.len() != rows * out {
        return Err(Error::Shape(format!("grad_out has {} values, expected {}", grad_out.len(), rows * out)));
    }
    let mut dx = Tensor::zeros(input.shape());
    let mut dw = Tensor::zeros(weights.shape());
    let mut db = Tensor::zeros(&[out]);
    linear_rows_backward(
        input.data(),
        weights.data(),
        grad_out.data(),
        rows,
        inner,
        out,
        Some(dx.data_mut()),
        Some(dw.data_mut()),
        Some(db.data_mut()),
    );
    Ok(FcGrads { input: dx, weights: dw, bias: db })
}

/// Geometry of a 2-D convolution over a `[channels, height, width]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    pub fn infer(input: &[usize], kernels: &[usize], stride: (usize, usize), padding: (usize, usize)) -> Result<Self> {
        let ([c, h, w], [o, kc, kh, kw]) = (input, kernels) else {
            return Err(Error::Shape(format!("conv2d expects [C,H,W] input and [O,C,kh,kw] kernels, got {input:?} and {kernels:?}")));
        };
        if c != kc {
            return Err(Error::Shape(format!("input has {c} channels, kernels expect {kc}")));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        if *kh > h + 2 * padding.0 || *kw > w + 2 * padding.1 {
            return Err(Error::Shape(format!("kernel {kh}x{kw} exceeds padded input {h}x{w}")));
        }
        Ok(Self {
            in_channels: *c,
            height: *h,
            width: *w,
            out_channels: *o,
            kernel: (*kh, *kw),
            stride,
            padding,
        })
    }

    pub fn output_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.padding.0 - self.kernel.0) / self.stride.0 + 1,
            (self.width + 2 * self.padding.1 - self.kernel.1) / self.stride.1 + 1,
        )
    }

    /// Visits every (output index, input index, kernel index) contributing triple.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = self.output_hw();
        let (kh, kw) = self.kernel;
        for o in 0..self.out_channels {
            for r in 0..oh {
                for c in 0..ow {
                    let out_idx = (o * oh + r) * ow + c;
                    for ch in 0..self.in_channels {
                        for i in 0..kh {
                            let y = (r * self.stride.0 + i) as isize - self.padding.0 as isize;
                            if y < 0 || y as usize >= self.height {
                                continue;
                            }
                            for j in 0..kw {
                                let x = (c * self.stride.1 + j) as isize - self.padding.1 as isize;
                                if x < 0 || x as usize >= self.width {
                                    continue;
                                }
                                let in_idx = (ch * self.height + y as usize) * self.width + x as usize;
                                let k_idx = ((o * self.in_channels + ch) * kh + i) * kw + j;
                                f(out_idx, in_idx, k_idx);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `[C,H,W]` input with `[O,C,kh,kw]` kernels plus per-filter bias.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    bias: Option<&Tensor>,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor> {
    let geo = ConvGeometry::infer(input.shape(), kernels.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [geo.out_channels] {
            return Err(Error::Shape(format!("conv bias {:?} for {} filters", b.shape(), geo.out_channels)));
        }
    }
    let (oh, ow) = geo.output_hw();
    let mut out = vec![0.0; geo.out_channels * oh * ow];
    if let Some(b) = bias {
        for (o, chunk) in out.chunks_mut(oh * ow).enumerate() {
            chunk.iter_mut().for_each(|v| *v = b.data()[o]);
        }
    }
    let (x, k) = (input.data(), kernels.data());
    geo.for_each_tap(|oi, ii, ki| out[oi] += x[ii] * k[ki]);
    Ok(Tensor::raw(vec![geo.out_channels, oh, ow], out))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernels: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<ConvGrads> {
    let geo = ConvGeometry::infer(input.shape(), kernels.shape(), stride, padding)?;
    let (oh, ow) = geo.output_hw();
    if grad_out.len() != geo.out_channels * oh * ow {
        return Err(Error::Shape("conv grad_out size mismatch".into()));
    }
    let mut dx = Tensor::zeros(input.shape());
    let mut dk = Tensor::zeros(kernels.shape());
    let mut db = Tensor::zeros(&[geo.out_channels]);
    conv2d_accumulate_backward(&geo, input.data(), kernels.data(), grad_out.data(), Some(dx.data_mut()), dk.data_mut(), db.data_mut());
    Ok(ConvGrads { input: dx, kernels: dk, bias: db })
}

pub(crate) fn conv2d_accumulate_backward(
    geo: &ConvGeometry,
    x: &[f64],
    k: &[f64],
    g: &[f64],
    mut dx: Option<&mut [f64]>,
    dk: &mut [f64],
    db: &mut [f64],
) {
    let (oh, ow) = geo.output_hw();
    for (o, chunk) in g.chunks(oh * ow).enumerate() {
        db[o] += chunk.iter().sum::<f64>();
    }
    geo.for_each_tap(|oi, ii, ki| {
        let go = g[oi];
        dk[ki] += go * x[ii];
        if let Some(dx) = dx.as_deref_mut() {
            dx[ii] += go * k[ki];
        }
    });
}

/// Non-overlapping max pooling of a `[C,H,W]` input; trailing rows/columns
/// that do not fill a window are dropped.
///
/// Returns the pooled map and, per output element, the flat input index of the maximum.
pub fn max_pool2d(input: &Tensor, window: (usize, usize)) -> Result<(Tensor, Vec<usize>)> {
    let [c, h, w] = input.shape() else {
        return Err(Error::Shape(format!("max_pool2d expects [C,H,W], got {:?}", input.shape())));
    };
    let (c, h, w) = (*c, *h, *w);
    if window.0 == 0 || window.1 == 0 {
        return Err(Error::InvalidArgument("pooling window must be positive".into()));
    }
    if window.0 > h || window.1 > w {
        return Err(Error::WindowTooLarge { window, input: (h, w) });
    }
    let (oh, ow) = (h / window.0, w / window.1);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for r in 0..oh {
            for col in 0..ow {
                let mut best = (ch * h + r * window.0) * w + col * window.1;
                for i in 0..window.0 {
                    for j in 0..window.1 {
                        let idx = (ch * h + r * window.0 + i) * w + col * window.1 + j;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::raw(vec![c, oh, ow], out), argmax))
}

pub fn max_pool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    for (&idx, g) in argmax.iter().zip(grad_out.data()) {
        dx.data_mut()[idx] += g;
    }
    dx
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Activations saved by the LSTM forward pass for its backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCache {
    /// Gate activations laid out `[i, f, g, o]`, each of width `hidden`.
    pub gates: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

/// Recurrent half of an LSTM cell: `pre` already holds `W_ih x` for this step.
///
/// Gate order is input, forget, candidate, output. Returns `(h', c', cache)`.
pub fn lstm_gates_forward(
    pre: &[f64],
    h: &[f64],
    c: &[f64],
    w_hh: &[f64],
    bias: &[f64],
) -> (Vec<f64>, Vec<f64>, LstmCache) {
    let hidden = h.len();
    let mut gates = vec![0.0; 4 * hidden];
    for (k, gate) in gates.iter_mut().enumerate() {
        let row = &w_hh[k * hidden..(k + 1) * hidden];
        let acc = pre[k] + bias[k] + dot(row, h);
        *gate = if (2 * hidden..3 * hidden).contains(&k) { acc.tanh() } else { sigmoid(acc) };
    }
    let mut h_new = vec![0.0; hidden];
    let mut c_new = vec![0.0; hidden];
    let mut tanh_c = vec![0.0; hidden];
    for j in 0..hidden {
        let (i, f, g, o) = (gates[j], gates[hidden + j], gates[2 * hidden + j], gates[3 * hidden + j]);
        c_new[j] = f * c[j] + i * g;
        tanh_c[j] = c_new[j].tanh();
        h_new[j] = o * tanh_c[j];
    }
    let cache = LstmCache { gates, h_prev: h.to_vec(), c_prev: c.to_vec(), tanh_c };
    (h_new, c_new, cache)
}

/// Backward of [`lstm_gates_forward`]; every output buffer is accumulated into.
#[allow(clippy::too_many_arguments)]
pub fn lstm_gates_backward(
    cache: &LstmCache,
    w_hh: &[f64],
    dh_new: &[f64],
    dc_new: &[f64],
    d_pre: &mut [f64],
    dh: &mut [f64],
    dc: &mut [f64],
    dw_hh: &mut [f64],
    d_bias: &mut [f64],
) {
    let hidden = cache.h_prev.len();
    let gates = &cache.gates;
    let mut d_act = vec![0.0; 4 * hidden];
    for j in 0..hidden {
        let (i, f, g, o) = (gates[j], gates[hidden + j], gates[2 * hidden + j], gates[3 * hidden + j]);
        let tc = cache.tanh_c[j];
        let d_o = dh_new[j] * tc;
        let d_c = dc_new[j] + dh_new[j] * o * (1.0 - tc * tc);
        let d_i = d_c * g;
        let d_f = d_c * cache.c_prev[j];
        let d_g = d_c * i;
        dc[j] += d_c * f;
        d_act[j] = d_i * i * (1.0 - i);
        d_act[hidden + j] = d_f * f * (1.0 - f);
        d_act[2 * hidden + j] = d_g * (1.0 - g * g);
        d_act[3 * hidden + j] = d_o * o * (1.0 - o);
    }
    for (k, &da) in d_act.iter().enumerate() {
        d_pre[k] += da;
        d_bias[k] += da;
        if da == 0.0 {
            continue;
        }
        let row = &w_hh[k * hidden..(k + 1) * hidden];
        let drow = &mut dw_hh[k * hidden..(k + 1) * hidden];
        for j in 0..hidden {
            dh[j] += da * row[j];
            drow[j] += da * cache.h_prev[j];
        }
    }
}

/// Weights of one LSTM layer: `w_ih` is `[4H, I]`, `w_hh` is `[4H, H]`, `bias` is `[4H]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights<'a> {
    pub w_ih: &'a Tensor,
    pub w_hh: &'a Tensor,
    pub bias: &'a Tensor,
}

impl LstmWeights<'_> {
    pub fn hidden(&self) -> usize {
        self.w_hh.shape().get(1).copied().unwrap_or(0)
    }

    fn check(&self, input: usize, h: usize, c: usize) -> Result<()> {
        let hidden = self.hidden();
        let ok = self.w_ih.shape() == [4 * hidden, input]
            && self.w_hh.shape() == [4 * hidden, hidden]
            && self.bias.shape() == [4 * hidden]
            && h == hidden
            && c == hidden;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "lstm weights {:?}/{:?}/{:?} with input {input}, hidden {h}, cell {c}",
                self.w_ih.shape(),
                self.w_hh.shape(),
                self.bias.shape()
            )))
        }
    }
}

/// One full LSTM step. Returns `(h', c', cache)`.
pub fn lstm_cell(input: &[f64], h: &[f64], c: &[f64], weights: LstmWeights<'_>) -> Result<(Vec<f64>, Vec<f64>, LstmCache)> {
    weights.check(input.len(), h.len(), c.len())?;
    let hidden = h.len();
    let mut pre = vec![0.0; 4 * hidden];
    linear_rows(input, weights.w_ih.data(), None, 1, input.len(), 4 * hidden, &mut pre);
    Ok(lstm_gates_forward(&pre, h, c, weights.w_hh.data(), weights.bias.data()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmGrads {
    pub input: Vec<f64>,
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub bias: Tensor,
}

pub fn lstm_cell_backward(
    input: &[f64],
    cache: &LstmCache,
    weights: LstmWeights<'_>,
    dh_new: &[f64],
    dc_new: &[f64],
) -> Result<LstmGrads> {
    let hidden = cache.h_prev.len();
    weights.check(input.len(), hidden, hidden)?;
    let mut d_pre = vec![0.0; 4 * hidden];
    let mut grads = LstmGrads {
        input: vec![0.0; input.len()],
        hidden: vec![0.0; hidden],
        cell: vec![0.0; hidden],
        w_ih: Tensor::zeros(weights.w_ih.shape()),
        w_hh: Tensor::zeros(weights.w_hh.shape()),
        bias: Tensor::zeros(weights.bias.shape()),
    };
    lstm_gates_backward(
        cache,
        weights.w_hh.data(),
        dh_new,
        dc_new,
        &mut d_pre,
        &mut grads.hidden,
        &mut grads.cell,
        grads.w_hh.data_mut(),
        grads.bias.data_mut(),
    );
    linear_rows_backward(
        input,
        weights.w_ih.data(),
        &d_pre,
        1,
        input.len(),
        4 * hidden,
        Some(&mut grads.input),
        Some(grads.w_ih.data_mut()),
        None,
    );
    Ok(grads)
}

/// Per-step bivariate Gaussian parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GaussianStep {
    pub mu: Point,
    pub sigma: Point,
    pub rho: f64,
}

impl GaussianStep {
    pub const WIDTH: usize = 5;

    pub fn from_slice(v: &[f64]) -> Self {
        Self { mu: [v[0], v[1]], sigma: [v[2], v[3]], rho: v[4] }
    }

    pub fn to_array(self) -> [f64; 5] {
        [self.mu[0], self.mu[1], self.sigma[0], self.sigma[1], self.rho]
    }
}

fn check_gaussian(step: usize, p: &GaussianStep) -> Result<()> {
    if !(p.sigma[0] > 0.0 && p.sigma[1] > 0.0) {
        return Err(Error::NonPositiveSigma { step });
    }
    if !(p.rho.abs() < 1.0) {
        return Err(Error::InvalidArgument(format!("correlation {} at step {step} outside (-1, 1)", p.rho)));
    }
    Ok(())
}

/// Negative log density of `targets` under per-step bivariate Gaussians, averaged over steps.
pub fn bivariate_gaussian_nll(targets: &[Point], params: &[GaussianStep]) -> Result<f64> {
    if targets.len() != params.len() || targets.is_empty() {
        return Err(Error::Shape(format!("{} targets for {} gaussian steps", targets.len(), params.len())));
    }
    let mut total = 0.0;
    for (step, (t, p)) in targets.iter().zip(params).enumerate() {
        check_gaussian(step, p)?;
        let zx = (t[0] - p.mu[0]) / p.sigma[0];
        let zy = (t[1] - p.mu[1]) / p.sigma[1];
        let q = 1.0 - p.rho * p.rho;
        total += (2.0 * PI).ln()
            + p.sigma[0].ln()
            + p.sigma[1].ln()
            + 0.5 * q.ln()
            + (zx * zx + zy * zy - 2.0 * p.rho * zx * zy) / (2.0 * q);
    }
    Ok(total / targets.len() as f64)
}

/// Gradient of [`bivariate_gaussian_nll`] with respect to every step's (mu, sigma, rho).
pub fn bivariate_gaussian_nll_backward(targets: &[Point], params: &[GaussianStep]) -> Result<Vec<GaussianStep>> {
    if targets.len() != params.len() || targets.is_empty() {
        return Err(Error::Shape(format!("{} targets for {} gaussian steps", targets.len(), params.len())));
    }
    let scale = 1.0 / targets.len() as f64;
    targets
        .iter()
        .zip(params)
        .enumerate()
        .map(|(step, (t, p))| {
            check_gaussian(step, p)?;
            let (sx, sy, rho) = (p.sigma[0], p.sigma[1], p.rho);
            let zx = (t[0] - p.mu[0]) / sx;
            let zy = (t[1] - p.mu[1]) / sy;
            let q = 1.0 - rho * rho;
            let a = zx * zx + zy * zy;
            let b = zx * zy;
            let ex = (zx - rho * zy) / q;
            let ey = (zy - rho * zx) / q;
            Ok(GaussianStep {
                mu: [-ex / sx * scale, -ey / sy * scale],
                sigma: [(1.0 - zx * ex) / sx * scale, (1.0 - zy * ey) / sy * scale],
                rho: (-rho / q + (rho * (a - 2.0 * rho * b) - b * q) / (q * q)) * scale,
            })
        })
        .collect()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn softmax_cross_entropy(logits: &[f64], class: usize) -> Result<f64> {
    if class >= logits.len() {
        return Err(Error::ClassOutOfRange { index: class, classes: logits.len() });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_total = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    Ok(log_total - logits[class])
}

pub fn softmax_cross_entropy_backward(logits: &[f64], class: usize) -> Result<Vec<f64>> {
    if class >= logits.len() {
        return Err(Error::ClassOutOfRange { index: class, classes: logits.len() });
    }
    let mut g = softmax(logits);
    g[class] -= 1.0;
    Ok(g)
}

/// Maps raw decoder outputs `[steps, 5]` to Gaussian parameters.
///
/// Columns 0..2 are per-step velocities; means are their running sum times
/// `step_scale`. Columns 2..4 become `sigma = exp(raw)` and column 4 becomes
/// `rho = tanh(raw)`.
pub fn trajectory_head(raw: &[f64], step_scale: f64) -> Vec<f64> {
    let mut out = vec![0.0; raw.len()];
    let mut acc = [0.0, 0.0];
    for (r, o) in raw.chunks_exact(GaussianStep::WIDTH).zip(out.chunks_exact_mut(GaussianStep::WIDTH)) {
        acc[0] += r[0] * step_scale;
        acc[1] += r[1] * step_scale;
        o[0] = acc[0];
        o[1] = acc[1];
        o[2] = r[2].exp();
        o[3] = r[3].exp();
        o[4] = r[4].tanh();
    }
    out
}

pub fn trajectory_head_backward(out: &[f64], grad_out: &[f64], step_scale: f64) -> Vec<f64> {
    let mut d_raw = vec![0.0; out.len()];
    let mut acc = [0.0, 0.0];
    let steps = out.len() / GaussianStep::WIDTH;
    for s in (0..steps).rev() {
        let base = s * GaussianStep::WIDTH;
        acc[0] += grad_out[base];
        acc[1] += grad_out[base + 1];
        d_raw[base] = acc[0] * step_scale;
        d_raw[base + 1] = acc[1] * step_scale;
        d_raw[base + 2] = grad_out[base + 2] * out[base + 2];
        d_raw[base + 3] = grad_out[base + 3] * out[base + 3];
        d_raw[base + 4] = grad_out[base + 4] * (1.0 - out[base + 4] * out[base + 4]);
    }
    d_raw
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn leaky_relu_values() {
        assert_eq!(leaky_relu(&[2.0, -1.0], DEFAULT_LEAKY_SLOPE), vec![2.0, -0.1]);
        let g = leaky_relu_backward(&[-3.0], 0.1, &[1.0])[0];
        let h = 1e-5;
        let fd = (leaky_relu(&[-3.0 + h], 0.1)[0] - leaky_relu(&[-3.0 - h], 0.1)[0]) / (2.0 * h);
        assert!((g - 0.1).abs() < 1e-12);
        assert!((g - fd).abs() < 1e-6);
    }

    #[test]
    fn fully_connected_hand_values() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(fully_connected(&x, &eye, None).unwrap().data(), &[1.0, 2.0]);
        let b = t(&[2], &[1.0, 1.0]);
        let y = fully_connected(&x, &eye, Some(&b)).unwrap();
        assert_eq!(y.shape(), &[1, 2]);
        assert_eq!(y.data(), &[2.0, 3.0]);
        let bad = t(&[3, 3], &[0.0; 9]);
        assert!(matches!(fully_connected(&x, &bad, None), Err(Error::Shape(_))));
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = t(&[1, 3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let k = t(&[1, 1, 1, 1], &[1.0]);
        let y = conv2d(&x, &k, None, (1, 1), (0, 0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_output_geometry() {
        let x = Tensor::zeros(&[4, 13, 3]);
        let k = Tensor::zeros(&[8, 4, 3, 3]);
        let y = conv2d(&x, &k, None, (1, 1), (0, 0)).unwrap();
        assert_eq!(y.shape(), &[8, 11, 1]);
        let k_big = Tensor::zeros(&[8, 4, 3, 5]);
        assert!(conv2d(&x, &k_big, None, (1, 1), (0, 0)).is_err());
        assert!(conv2d(&x, &k_big, None, (1, 1), (0, 1)).is_ok());
    }

    #[test]
    fn max_pool_all_ones() {
        let x = t(&[1, 2, 2], &[1.0; 4]);
        let (y, _) = max_pool2d(&x, (2, 2)).unwrap();
        assert_eq!(y.data(), &[1.0]);
        assert!(matches!(max_pool2d(&x, (3, 1)), Err(Error::WindowTooLarge { .. })));
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = t(&[1, 2, 2], &[1.0, 5.0, 2.0, 3.0]);
        let (y, arg) = max_pool2d(&x, (2, 2)).unwrap();
        assert_eq!(y.data(), &[5.0]);
        let dx = max_pool2d_backward(x.shape(), &arg, &t(&[1, 1, 1], &[2.0]));
        assert_eq!(dx.data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn lstm_zero_weights_give_zero_state() {
        let w_ih = Tensor::zeros(&[8, 3]);
        let w_hh = Tensor::zeros(&[8, 2]);
        let bias = Tensor::zeros(&[8]);
        let weights = LstmWeights { w_ih: &w_ih, w_hh: &w_hh, bias: &bias };
        let (h, c, _) = lstm_cell(&[1.0, -2.0, 0.5], &[0.0, 0.0], &[0.0, 0.0], weights).unwrap();
        assert_eq!(h, vec![0.0, 0.0]);
        assert_eq!(c, vec![0.0, 0.0]);
        assert!(lstm_cell(&[1.0], &[0.0, 0.0], &[0.0, 0.0], weights).is_err());
    }

    #[test]
    fn lstm_scalar_matches_formula() {
        // scalar sizes: one unit, one input
        let (wi, wf, wg, wo) = (0.5, -0.3, 0.8, 1.2);
        let (ui, uf, ug, uo) = (0.1, 0.2, -0.4, 0.3);
        let (bi, bf, bg, bo) = (0.05, 1.0, -0.1, 0.0);
        let (x, h0, c0) = (0.7, -0.2, 0.4);
        let w_ih = t(&[4, 1], &[wi, wf, wg, wo]);
        let w_hh = t(&[4, 1], &[ui, uf, ug, uo]);
        let bias = t(&[4], &[bi, bf, bg, bo]);
        let (h, c, _) = lstm_cell(&[x], &[h0], &[c0], LstmWeights { w_ih: &w_ih, w_hh: &w_hh, bias: &bias }).unwrap();

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let i = sig(wi * x + ui * h0 + bi);
        let f = sig(wf * x + uf * h0 + bf);
        let g = (wg * x + ug * h0 + bg).tanh();
        let o = sig(wo * x + uo * h0 + bo);
        let c_expected = f * c0 + i * g;
        let h_expected = o * c_expected.tanh();
        assert!((c[0] - c_expected).abs() < 1e-15);
        assert!((h[0] - h_expected).abs() < 1e-15);
    }

    #[test]
    fn gaussian_nll_closed_forms() {
        let unit = GaussianStep { mu: [0.0, 0.0], sigma: [1.0, 1.0], rho: 0.0 };
        let at_mean = bivariate_gaussian_nll(&[[0.0, 0.0]], &[unit]).unwrap();
        assert!((at_mean - (2.0 * PI).ln()).abs() < 1e-12);
        assert!((at_mean - 1.8379).abs() < 1e-4);
        let one_sigma = bivariate_gaussian_nll(&[[1.0, 0.0]], &[unit]).unwrap();
        assert!((one_sigma - ((2.0 * PI).ln() + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn gaussian_nll_rejects_invalid_sigma() {
        let bad = GaussianStep { mu: [0.0, 0.0], sigma: [0.0, 1.0], rho: 0.0 };
        assert!(matches!(bivariate_gaussian_nll(&[[0.0, 0.0]], &[bad]), Err(Error::NonPositiveSigma { step: 0 })));
        let bad_rho = GaussianStep { mu: [0.0, 0.0], sigma: [1.0, 1.0], rho: 1.0 };
        assert!(bivariate_gaussian_nll(&[[0.0, 0.0]], &[bad_rho]).is_err());
    }

    #[test]
    fn cross_entropy_limits() {
        let uniform = softmax_cross_entropy(&[0.0; 6], 2).unwrap();
        assert!((uniform - 6f64.ln()).abs() < 1e-12);
        let confident = softmax_cross_entropy(&[0.0, 100.0, 0.0, 0.0, 0.0, 0.0], 1).unwrap();
        assert!(confident < 1e-40);
        assert!(matches!(softmax_cross_entropy(&[0.0; 6], 6), Err(Error::ClassOutOfRange { .. })));
        let g = softmax_cross_entropy_backward(&[0.0; 2], 0).unwrap();
        assert_eq!(g, vec![-0.5, 0.5]);
    }

    #[test]
    fn softmax_is_a_simplex() {
        let p = softmax(&[1000.0, -1000.0, 3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn trajectory_head_integrates_velocity() {
        let raw = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0, 0.0, 0.5];
        let out = trajectory_head(&raw, 0.1);
        assert_eq!(&out[..5], &[0.1, 0.0, 1.0, 1.0, 0.0]);
        assert!((out[5] - 0.2).abs() < 1e-15 && (out[6] - 0.2).abs() < 1e-15);
        assert!((out[7] - 1f64.exp()).abs() < 1e-15);
        assert!((out[9] - 0.5f64.tanh()).abs() < 1e-15);
    }
}
