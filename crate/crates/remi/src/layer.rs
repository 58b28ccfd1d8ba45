//! Network layers: dense, conv2d, relu, maxpool2d, flatten, softmax.
//!
//! Every layer is a pure map from a batched input `[B, ...]` to a batched
//! output plus a `Cache` holding exactly what its backward pass needs.
//! Backward never mutates the layer; parameter gradients come back as flat
//! buffers aligned with `params()` order (weight, then bias).
//!
//! Shape rules work on per-sample shapes (batch dim stripped):
//!   dense    [in]        -> [out]
//!   conv2d   [ic, h, w]  -> [oc, oh, ow]   oh = (h + 2p - k) / s + 1
//!   relu     any         -> same
//!   maxpool  [c, h, w]   -> [c, oh, ow]    oh = (h - k) / s + 1
//!   flatten  any         -> [prod]
//!   softmax  [k]         -> [k]            rows sum to 1

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Conv2d,
    Relu,
    MaxPool2d,
    Flatten,
    Softmax,
}

impl LayerKind {
    pub fn tag(self) -> u32 {
        match self {
            LayerKind::Dense => 0,
            LayerKind::Conv2d => 1,
            LayerKind::Relu => 2,
            LayerKind::MaxPool2d => 3,
            LayerKind::Flatten => 4,
            LayerKind::Softmax => 5,
        }
    }

    pub fn from_tag(tag: u32) -> Result<LayerKind> {
        Ok(match tag {
            0 => LayerKind::Dense,
            1 => LayerKind::Conv2d,
            2 => LayerKind::Relu,
            3 => LayerKind::MaxPool2d,
            4 => LayerKind::Flatten,
            5 => LayerKind::Softmax,
            other => return Err(Error::Format(format!("unknown layer kind tag {other}"))),
        })
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    /// weight [in, out], bias [out]
    Dense { weight: Tensor, bias: Tensor },
    /// weight [oc, ic, kh, kw], bias [oc]; zero padding, square kernel
    Conv2d { weight: Tensor, bias: Tensor, stride: usize, padding: usize },
    Relu,
    MaxPool2d { kernel: usize, stride: usize },
    Flatten,
    Softmax,
}

/// Per-layer state captured on the forward pass for the matching backward.
#[derive(Debug, Clone)]
pub enum Cache {
    Dense { input: Tensor },
    Conv2d { input: Tensor },
    Relu { mask: Vec<bool> },
    MaxPool2d { in_shape: Vec<usize>, argmax: Vec<usize> },
    Flatten { in_shape: Vec<usize> },
    Softmax { output: Tensor },
}

impl Layer {
    pub fn dense(in_dim: usize, out_dim: usize) -> Layer {
        Layer::Dense {
            weight: Tensor::zeros(&[in_dim, out_dim]),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn conv2d(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Layer {
        Layer::Conv2d {
            weight: Tensor::zeros(&[out_ch, in_ch, kernel, kernel]),
            bias: Tensor::zeros(&[out_ch]),
            stride,
            padding,
        }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Dense { .. } => LayerKind::Dense,
            Layer::Conv2d { .. } => LayerKind::Conv2d,
            Layer::Relu => LayerKind::Relu,
            Layer::MaxPool2d { .. } => LayerKind::MaxPool2d,
            Layer::Flatten => LayerKind::Flatten,
            Layer::Softmax => LayerKind::Softmax,
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias, .. } => {
                vec![weight, bias]
            }
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias, .. } => {
                vec![weight, bias]
            }
            _ => vec![],
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Output shape for a per-sample input shape (no batch dim).
    pub fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense { weight, .. } => {
                let (din, dout) = (weight.shape[0], weight.shape[1]);
                if in_shape != [din] {
                    return Err(Error::Dimension(format!(
                        "dense expects input [{din}], got {in_shape:?}"
                    )));
                }
                Ok(vec![dout])
            }
            Layer::Conv2d { weight, stride, padding, .. } => {
                let (oc, ic, k) = (weight.shape[0], weight.shape[1], weight.shape[2]);
                let [c, h, w] = match in_shape {
                    [c, h, w] => [*c, *h, *w],
                    _ => {
                        return Err(Error::Dimension(format!(
                            "conv2d expects input [c, h, w], got {in_shape:?}"
                        )))
                    }
                };
                if c != ic {
                    return Err(Error::Dimension(format!(
                        "conv2d expects {ic} input channels, got {c}"
                    )));
                }
                let oh = conv_out(h, k, *stride, *padding)?;
                let ow = conv_out(w, k, *stride, *padding)?;
                Ok(vec![oc, oh, ow])
            }
            Layer::Relu => Ok(in_shape.to_vec()),
            Layer::MaxPool2d { kernel, stride } => {
                let [c, h, w] = match in_shape {
                    [c, h, w] => [*c, *h, *w],
                    _ => {
                        return Err(Error::Dimension(format!(
                            "maxpool2d expects input [c, h, w], got {in_shape:?}"
                        )))
                    }
                };
                if h < *kernel || w < *kernel {
                    return Err(Error::Dimension(format!(
                        "maxpool2d kernel {kernel} exceeds input {h}x{w}"
                    )));
                }
                Ok(vec![c, pool_out(h, *kernel, *stride), pool_out(w, *kernel, *stride)])
            }
            Layer::Flatten => Ok(vec![in_shape.iter().product()]),
            Layer::Softmax => match in_shape {
                [k] => Ok(vec![*k]),
                _ => Err(Error::Dimension(format!(
                    "softmax expects flat input [k], got {in_shape:?}"
                ))),
            },
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, Cache)> {
        match self {
            Layer::Dense { weight, bias } => dense_forward(input, weight, bias),
            Layer::Conv2d { weight, bias, stride, padding } => {
                conv2d_forward(input, weight, bias, *stride, *padding)
            }
            Layer::Relu => relu_forward(input),
            Layer::MaxPool2d { kernel, stride } => maxpool_forward(input, *kernel, *stride),
            Layer::Flatten => {
                let b = input.rows();
                let out = input.reshape(&[b, input.row_len()])?;
                Ok((out, Cache::Flatten { in_shape: input.shape.clone() }))
            }
            Layer::Softmax => softmax_forward(input),
        }
    }

    /// Returns (d_input, parameter gradients in `params()` order).
    pub fn backward(&self, cache: &Cache, d_out: &Tensor) -> Result<(Tensor, Vec<Vec<f64>>)> {
        match (self, cache) {
            (Layer::Dense { weight, .. }, Cache::Dense { input }) => {
                dense_backward(input, weight, d_out)
            }
            (Layer::Conv2d { weight, stride, padding, .. }, Cache::Conv2d { input }) => {
                conv2d_backward(input, weight, *stride, *padding, d_out)
            }
            (Layer::Relu, Cache::Relu { mask }) => {
                let mut d_in = d_out.clone();
                d_in.grad = None;
                for (v, keep) in d_in.data.iter_mut().zip(mask) {
                    if !keep {
                        *v = 0.0;
                    }
                }
                Ok((d_in, vec![]))
            }
            (Layer::MaxPool2d { .. }, Cache::MaxPool2d { in_shape, argmax }) => {
                let mut d_in = Tensor::zeros(in_shape);
                for (o, &src) in argmax.iter().enumerate() {
                    d_in.data[src] += d_out.data[o];
                }
                Ok((d_in, vec![]))
            }
            (Layer::Flatten, Cache::Flatten { in_shape }) => {
                Ok((d_out.reshape(in_shape)?, vec![]))
            }
            (Layer::Softmax, Cache::Softmax { output }) => softmax_backward(output, d_out),
            _ => Err(Error::Dimension("layer/cache kind mismatch in backward".into())),
        }
    }
}

fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = size + 2 * padding;
    if padded < kernel {
        return Err(Error::Dimension(format!(
            "conv kernel {kernel} exceeds padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

fn pool_out(size: usize, kernel: usize, stride: usize) -> usize {
    (size - kernel) / stride + 1
}

fn dense_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(Tensor, Cache)> {
    let (b, din) = (input.rows(), input.row_len());
    let (wi, wo) = (weight.shape[0], weight.shape[1]);
    if din != wi {
        return Err(Error::Dimension(format!("dense input width {din}, weight wants {wi}")));
    }
    let mut out = Tensor::zeros(&[b, wo]);
    for ib in 0..b {
        let row = input.row(ib);
        let orow = &mut out.data[ib * wo..(ib + 1) * wo];
        orow.copy_from_slice(&bias.data);
        for (i, &x) in row.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let wrow = &weight.data[i * wo..(i + 1) * wo];
            for (o, &w) in wrow.iter().enumerate() {
                orow[o] += x * w;
            }
        }
    }
    Ok((out, Cache::Dense { input: input.clone() }))
}

fn dense_backward(
    input: &Tensor,
    weight: &Tensor,
    d_out: &Tensor,
) -> Result<(Tensor, Vec<Vec<f64>>)> {
    let (b, din) = (input.rows(), input.row_len());
    let wo = weight.shape[1];
    let mut d_in = Tensor::zeros(&[b, din]);
    let mut d_w = vec![0.0; weight.len()];
    let mut d_b = vec![0.0; wo];
    for ib in 0..b {
        let x = input.row(ib);
        let g = d_out.row(ib);
        for (o, &go) in g.iter().enumerate() {
            d_b[o] += go;
        }
        for i in 0..din {
            let wrow = &weight.data[i * wo..(i + 1) * wo];
            let dwrow = &mut d_w[i * wo..(i + 1) * wo];
            let xi = x[i];
            let mut acc = 0.0;
            for (o, &go) in g.iter().enumerate() {
                acc += wrow[o] * go;
                dwrow[o] += xi * go;
            }
            d_in.data[ib * din + i] = acc;
        }
    }
    Ok((d_in, vec![d_w, d_b]))
}

fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Cache)> {
    let [b, ic, h, w] = batch_shape4(input)?;
    let (oc, wic, k) = (weight.shape[0], weight.shape[1], weight.shape[2]);
    if ic != wic {
        return Err(Error::Dimension(format!("conv input has {ic} channels, weight wants {wic}")));
    }
    let oh = conv_out(h, k, stride, padding)?;
    let ow = conv_out(w, k, stride, padding)?;
    let mut out = Tensor::zeros(&[b, oc, oh, ow]);
    for bi in 0..b {
        for o in 0..oc {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = bias.data[o];
                    for c in 0..ic {
                        for ky in 0..k {
                            let iy = (y * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (x * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let iv = input.data
                                    [((bi * ic + c) * h + iy as usize) * w + ix as usize];
                                let wv = weight.data[((o * ic + c) * k + ky) * k + kx];
                                acc += iv * wv;
                            }
                        }
                    }
                    out.data[((bi * oc + o) * oh + y) * ow + x] = acc;
                }
            }
        }
    }
    Ok((out, Cache::Conv2d { input: input.clone() }))
}

fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    d_out: &Tensor,
) -> Result<(Tensor, Vec<Vec<f64>>)> {
    let [b, ic, h, w] = batch_shape4(input)?;
    let (oc, k) = (weight.shape[0], weight.shape[2]);
    let [_, _, oh, ow] = batch_shape4(d_out)?;
    let mut d_in = Tensor::zeros(&input.shape);
    let mut d_w = vec![0.0; weight.len()];
    let mut d_b = vec![0.0; oc];
    for bi in 0..b {
        for o in 0..oc {
            for y in 0..oh {
                for x in 0..ow {
                    let g = d_out.data[((bi * oc + o) * oh + y) * ow + x];
                    if g == 0.0 {
                        continue;
                    }
                    d_b[o] += g;
                    for c in 0..ic {
                        for ky in 0..k {
                            let iy = (y * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (x * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let ii = ((bi * ic + c) * h + iy as usize) * w + ix as usize;
                                let wi = ((o * ic + c) * k + ky) * k + kx;
                                d_in.data[ii] += weight.data[wi] * g;
                                d_w[wi] += input.data[ii] * g;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((d_in, vec![d_w, d_b]))
}

fn relu_forward(input: &Tensor) -> Result<(Tensor, Cache)> {
    let mut out = input.clone();
    out.grad = None;
    let mut mask = vec![false; input.len()];
    for (i, v) in out.data.iter_mut().enumerate() {
        if *v > 0.0 {
            mask[i] = true;
        } else {
            *v = 0.0;
        }
    }
    Ok((out, Cache::Relu { mask }))
}

fn maxpool_forward(input: &Tensor, kernel: usize, stride: usize) -> Result<(Tensor, Cache)> {
    let [b, c, h, w] = batch_shape4(input)?;
    if h < kernel || w < kernel {
        return Err(Error::Dimension(format!("maxpool kernel {kernel} exceeds input {h}x{w}")));
    }
    let (oh, ow) = (pool_out(h, kernel, stride), pool_out(w, kernel, stride));
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let mut argmax = vec![0usize; out.len()];
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let ii =
                                ((bi * c + ci) * h + y * stride + ky) * w + x * stride + kx;
                            // Strict > keeps the first maximum in scan order on ties.
                            if input.data[ii] > best {
                                best = input.data[ii];
                                best_i = ii;
                            }
                        }
                    }
                    let oi = ((bi * c + ci) * oh + y) * ow + x;
                    out.data[oi] = best;
                    argmax[oi] = best_i;
                }
            }
        }
    }
    Ok((out, Cache::MaxPool2d { in_shape: input.shape.clone(), argmax }))
}

fn softmax_forward(input: &Tensor) -> Result<(Tensor, Cache)> {
    let (b, k) = (input.rows(), input.row_len());
    if k == 0 {
        return Err(Error::Dimension("softmax over empty row".into()));
    }
    let mut out = Tensor::zeros(&[b, k]);
    for ib in 0..b {
        let row = input.row(ib);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out.data[ib * k..(ib + 1) * k];
        let mut sum = 0.0;
        for (i, &v) in row.iter().enumerate() {
            let e = (v - m).exp();
            orow[i] = e;
            sum += e;
        }
        for v in orow.iter_mut() {
            *v /= sum;
        }
    }
    let cache = Cache::Softmax { output: out.clone() };
    Ok((out, cache))
}

fn softmax_backward(output: &Tensor, d_out: &Tensor) -> Result<(Tensor, Vec<Vec<f64>>)> {
    let (b, k) = (output.rows(), output.row_len());
    let mut d_in = Tensor::zeros(&[b, k]);
    for ib in 0..b {
        let p = output.row(ib);
        let g = d_out.row(ib);
        let dot: f64 = p.iter().zip(g).map(|(pi, gi)| pi * gi).sum();
        for i in 0..k {
            d_in.data[ib * k + i] = p[i] * (g[i] - dot);
        }
    }
    Ok((d_in, vec![]))
}

fn batch_shape4(t: &Tensor) -> Result<[usize; 4]> {
    match t.shape.as_slice() {
        [b, c, h, w] => Ok([*b, *c, *h, *w]),
        other => Err(Error::Dimension(format!("expected [b, c, h, w] tensor, got {other:?}"))),
    }
}
