//! Network: an ordered layer stack with a fixed per-sample input shape.
//!
//! Construction validates that adjacent layer shapes compose and that the
//! stack ends in softmax, so `forward` always returns class probabilities.
//! Parameters live in the layers; `param_vector` / `set_param_vector` are
//! mutually inverse bit-exact flattenings in declaration order (per layer:
//! weight, then bias).
//!
//! `forward_traced` + `backward_from` take `&self`: gradients come back as a
//! flat buffer aligned with `param_vector`, so probing a model for per-sample
//! gradients never mutates it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layer::{Cache, Layer, LayerKind};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    seed: u64,
}

/// Forward-pass state for one batch; feeds exactly one backward pass.
#[derive(Debug)]
pub struct Trace {
    caches: Vec<Cache>,
    output_shape: Vec<usize>,
}

/// Flat-buffer location of one parameterized layer's params.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSpan {
    pub layer: usize,
    pub offset: usize,
    pub len: usize,
}

impl Network {
    /// Builds and initializes: weights Xavier-uniform in
    /// +-sqrt(6 / (fan_in + fan_out)) drawn from `seed`, biases zero.
    pub fn new(seed: u64, input_shape: &[usize], layers: Vec<Layer>) -> Result<Network> {
        let mut net = Network::from_parts(seed, input_shape, layers)?;
        let mut r = rng::rng(seed);
        for layer in &mut net.layers {
            init_xavier(layer, &mut r);
        }
        Ok(net)
    }

    /// Assembles pre-populated layers (checkpoint load); validates only.
    pub fn from_parts(seed: u64, input_shape: &[usize], layers: Vec<Layer>) -> Result<Network> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        if layers.last().unwrap().kind() != LayerKind::Softmax {
            return Err(Error::Config("network must end in a softmax layer".into()));
        }
        let mut shape = input_shape.to_vec();
        for (i, layer) in layers.iter().enumerate() {
            shape = layer
                .out_shape(&shape)
                .map_err(|e| Error::Dimension(format!("layer {i} ({:?}): {e}", layer.kind())))?;
        }
        if shape.len() != 1 || shape[0] < 2 {
            return Err(Error::Config(format!(
                "network must output class probabilities [k>=2], got {shape:?}"
            )));
        }
        for layer in &layers {
            for p in layer.params() {
                p.assert_finite("network parameter")?;
            }
        }
        Ok(Network { input_shape: input_shape.to_vec(), layers, seed })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Number of classes in the output distribution.
    pub fn class_count(&self) -> usize {
        let mut shape = self.input_shape.clone();
        for layer in &self.layers {
            shape = layer.out_shape(&shape).expect("validated at construction");
        }
        shape[0]
    }

    pub fn param_len(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// (layer index, flat offset, length) for each parameterized layer.
    pub fn param_spans(&self) -> Vec<ParamSpan> {
        let mut spans = Vec::new();
        let mut offset = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            let len = layer.param_count();
            if len > 0 {
                spans.push(ParamSpan { layer: i, offset, len });
                offset += len;
            }
        }
        spans
    }

    pub fn param_vector(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_len());
        for layer in &self.layers {
            for p in layer.params() {
                out.extend_from_slice(&p.data);
            }
        }
        out
    }

    pub fn set_param_vector(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_len() {
            return Err(Error::Dimension(format!(
                "parameter vector has {} entries, network wants {}",
                flat.len(),
                self.param_len()
            )));
        }
        if let Some(bad) = flat.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite parameter {bad}")));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for p in layer.params_mut() {
                let n = p.data.len();
                p.data.copy_from_slice(&flat[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    /// Copies a gradient vector into each parameter tensor's grad buffer.
    pub fn store_grads(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_len() {
            return Err(Error::Dimension(format!(
                "gradient vector has {} entries, network wants {}",
                flat.len(),
                self.param_len()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for p in layer.params_mut() {
                let n = p.data.len();
                p.fill_grad(&flat[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    /// Accepts `[b, input_dim]` (flat rows) or `[b, ...input_shape]`.
    fn shape_batch(&self, batch: &Tensor) -> Result<Tensor> {
        let b = batch.rows();
        if b == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        batch.assert_finite("network input")?;
        if batch.shape[1..] == self.input_shape[..] {
            return Ok(batch.clone());
        }
        if batch.row_len() == self.input_dim() {
            let mut shape = vec![b];
            shape.extend_from_slice(&self.input_shape);
            return batch.reshape(&shape);
        }
        Err(Error::Dimension(format!(
            "batch rows have {} elements, network input shape {:?} wants {}",
            batch.row_len(),
            self.input_shape,
            self.input_dim()
        )))
    }

    /// Class probabilities `[b, k]`; rows sum to 1.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward_traced(batch)?.0)
    }

    pub fn forward_traced(&self, batch: &Tensor) -> Result<(Tensor, Trace)> {
        let mut x = self.shape_batch(batch)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, cache) = layer.forward(&x)?;
            caches.push(cache);
            x = y;
        }
        x.assert_finite("network output")?;
        let output_shape = x.shape.clone();
        Ok((x, Trace { caches, output_shape }))
    }

    /// Backpropagates `d_out` (gradient of a scalar loss w.r.t. the forward
    /// output) through the traced pass. Returns (flat parameter gradient
    /// aligned with `param_vector`, gradient w.r.t. the batch input).
    pub fn backward_from(&self, trace: &Trace, d_out: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        if d_out.shape != trace.output_shape {
            return Err(Error::Dimension(format!(
                "d_out shape {:?} does not match traced output {:?}",
                d_out.shape, trace.output_shape
            )));
        }
        let mut flat = vec![0.0; self.param_len()];
        let spans = self.param_spans();
        let mut span_iter = spans.iter().rev().peekable();
        let mut d = d_out.clone();
        d.grad = None;
        for (i, (layer, cache)) in self.layers.iter().zip(&trace.caches).enumerate().rev() {
            let (d_in, grads) = layer.backward(cache, &d)?;
            if !grads.is_empty() {
                let span = span_iter.next().expect("span per parameterized layer");
                debug_assert_eq!(span.layer, i);
                let mut off = span.offset;
                for g in &grads {
                    flat[off..off + g.len()].copy_from_slice(g);
                    off += g.len();
                }
            }
            d = d_in;
        }
        Ok((flat, d))
    }

    /// Argmax class per row; ties break to the lowest class id.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let probs = self.forward(batch)?;
        Ok(argmax_rows(&probs))
    }
}

pub fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    let k = probs.row_len();
    (0..probs.rows())
        .map(|i| {
            let row = probs.row(i);
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn init_xavier(layer: &mut Layer, r: &mut ChaCha8Rng) {
    let (fan_in, fan_out) = match layer {
        Layer::Dense { weight, .. } => (weight.shape[0], weight.shape[1]),
        Layer::Conv2d { weight, .. } => {
            let (oc, ic, k) = (weight.shape[0], weight.shape[1], weight.shape[2]);
            (ic * k * k, oc * k * k)
        }
        _ => return,
    };
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    if let Layer::Dense { weight, .. } | Layer::Conv2d { weight, .. } = layer {
        for v in weight.data.iter_mut() {
            *v = bound * (2.0 * r.gen::<f64>() - 1.0);
        }
        // Biases stay zero.
    }
}

/// Stock architectures used across the workbench.
pub mod arch {
    use super::*;

    /// Dense stack: input -> hidden(relu)... -> k -> softmax.
    pub fn mlp(seed: u64, input_dim: usize, hidden: &[usize], k: usize) -> Result<Network> {
        let mut layers = Vec::new();
        let mut d = input_dim;
        for &h in hidden {
            layers.push(Layer::dense(d, h));
            layers.push(Layer::Relu);
            d = h;
        }
        layers.push(Layer::dense(d, k));
        layers.push(Layer::Softmax);
        Network::new(seed, &[input_dim], layers)
    }

    /// Small image classifier: repeated conv+relu+pool, then two dense layers.
    pub fn small_cnn(
        seed: u64,
        in_shape: [usize; 3],
        channels: &[usize],
        fc: usize,
        k: usize,
    ) -> Result<Network> {
        let [c, mut h, mut w] = in_shape;
        let mut layers = Vec::new();
        let mut ic = c;
        for &oc in channels {
            layers.push(Layer::conv2d(ic, oc, 3, 1, 1));
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool2d { kernel: 2, stride: 2 });
            ic = oc;
            h /= 2;
            w /= 2;
            if h == 0 || w == 0 {
                return Err(Error::Config("cnn pools input away; fewer blocks or larger input".into()));
            }
        }
        layers.push(Layer::Flatten);
        layers.push(Layer::dense(ic * h * w, fc));
        layers.push(Layer::Relu);
        layers.push(Layer::dense(fc, k));
        layers.push(Layer::Softmax);
        Network::new(seed, &[c, in_shape[1], in_shape[2]], layers)
    }
}
