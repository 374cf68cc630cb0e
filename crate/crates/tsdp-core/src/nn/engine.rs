//! Forward and backward passes.
//!
//! Everything is computed per sample; batched entry points fan samples out
//! via `exec::map_indexed` and reassemble in index order, so results are
//! bit-identical with and without the `parallel` feature.

use crate::error::{Error, Result};
use crate::exec;
use crate::nn::graph::{Edge, Layer, LayerKind, ModelGraph, OutputMode};
use crate::nn::ops;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

/// Per-layer activations of one sample, in layer order.
pub struct ForwardCache {
    pub outputs: Vec<Vec<f64>>,
}

fn resolve<'a>(
    edge: &Edge,
    x: &'a [f64],
    outputs: &'a [Vec<f64>],
) -> &'a [f64] {
    match edge {
        Edge::Input => x,
        Edge::Layer(id) => &outputs[*id],
    }
}

pub(crate) fn layer_forward(
    layer: &Layer,
    in_shape: &[usize],
    input: &[f64],
    input2: Option<&[f64]>,
) -> Vec<f64> {
    match &layer.kind {
        LayerKind::Conv2d {
            c_in,
            c_out,
            k,
            stride,
            pad,
        } => {
            let (h, w) = (in_shape[1], in_shape[2]);
            let oh = (h + 2 * pad - k) / stride + 1;
            let ow = (w + 2 * pad - k) / stride + 1;
            let cols = ops::im2col(input, *c_in, h, w, *k, *stride, *pad);
            let ck2 = c_in * k * k;
            let mut out = ops::matmul(layer.weights[0].data(), &cols, *c_out, ck2, oh * ow);
            let bias = layer.weights[1].data();
            for c in 0..*c_out {
                for v in &mut out[c * oh * ow..(c + 1) * oh * ow] {
                    *v += bias[c];
                }
            }
            out
        }
        LayerKind::Linear { c_in, c_out } => {
            let w = layer.weights[0].data();
            let b = layer.weights[1].data();
            let mut out = vec![0.0; *c_out];
            for o in 0..*c_out {
                let row = &w[o * c_in..(o + 1) * c_in];
                out[o] = b[o] + row.iter().zip(input).map(|(&a, &x)| a * x).sum::<f64>();
            }
            out
        }
        LayerKind::BatchNorm { c } => {
            let spatial = input.len() / c;
            let gamma = layer.weights[0].data();
            let beta = layer.weights[1].data();
            let mean = layer.buffers[0].data();
            let var = layer.buffers[1].data();
            let mut out = vec![0.0; input.len()];
            for ch in 0..*c {
                let inv = 1.0 / (var[ch] + BN_EPS).sqrt();
                for s in 0..spatial {
                    let idx = ch * spatial + s;
                    out[idx] = gamma[ch] * (input[idx] - mean[ch]) * inv + beta[ch];
                }
            }
            out
        }
        LayerKind::ReLU => input.iter().map(|&v| v.max(0.0)).collect(),
        LayerKind::AvgPool { k, stride } => {
            let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
            let oh = (h - k) / stride + 1;
            let ow = (w - k) / stride + 1;
            let norm = 1.0 / (k * k) as f64;
            let mut out = vec![0.0; c * oh * ow];
            for ch in 0..c {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut acc = 0.0;
                        for ki in 0..*k {
                            for kj in 0..*k {
                                acc += input[(ch * h + oi * stride + ki) * w + oj * stride + kj];
                            }
                        }
                        out[(ch * oh + oi) * ow + oj] = acc * norm;
                    }
                }
            }
            out
        }
        LayerKind::ResidualAdd => input
            .iter()
            .zip(input2.expect("residual_add needs two inputs"))
            .map(|(&a, &b)| a + b)
            .collect(),
        LayerKind::Softmax => ops::softmax(input),
        LayerKind::AlphaGate => {
            let a = sigmoid(layer.weights[0].data()[0]);
            input.iter().map(|&v| a * v).collect()
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Run one sample through the graph, keeping every layer's output.
pub fn forward_sample(
    model: &ModelGraph,
    shapes: &[Vec<usize>],
    x: &[f64],
) -> ForwardCache {
    let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let in_shape = match &layer.inputs[0] {
            Edge::Input => &model.input_shape,
            Edge::Layer(id) => &shapes[*id],
        };
        let a = resolve(&layer.inputs[0], x, &outputs);
        let b = layer.inputs.get(1).map(|e| resolve(e, x, &outputs));
        // Borrow dance: layer_forward can't hold `outputs` mutably.
        let (a, b) = (a.to_vec(), b.map(|s| s.to_vec()));
        outputs.push(layer_forward(layer, in_shape, &a, b.as_deref()));
    }
    ForwardCache { outputs }
}

fn check_batch_input(model: &ModelGraph, x: &Tensor) -> Result<usize> {
    if x.shape().len() < 2 || x.sample_shape() != model.input_shape.as_slice() {
        return Err(Error::shape(
            "model input (per-sample, after batch dim)",
            &model.input_shape,
            x.shape(),
        ));
    }
    Ok(x.shape()[0])
}

/// Batched raw logits (ignores `output_mode`). Used by training and attacks.
pub fn forward_logits(model: &ModelGraph, x: &Tensor) -> Result<Tensor> {
    let n = check_batch_input(model, x)?;
    let shapes = model.infer_shapes()?;
    let out_dim: usize = shapes.last().unwrap().iter().product();
    let rows = exec::map_indexed(n, |i| {
        let cache = forward_sample(model, &shapes, x.sample(i));
        cache.outputs.last().unwrap().clone()
    });
    let mut data = Vec::with_capacity(n * out_dim);
    for r in rows {
        data.extend_from_slice(&r);
    }
    let t = Tensor::new(vec![n, out_dim], data)?;
    t.assert_finite("forward output")?;
    Ok(t)
}

/// Batched forward honoring the model's `output_mode`:
/// `Logits` raw, `Probabilities` softmax rows, `LabelOnly` a `[n]` tensor
/// of argmax class ids.
pub fn forward(model: &ModelGraph, x: &Tensor) -> Result<Tensor> {
    let logits = forward_logits(model, x)?;
    match model.output_mode {
        OutputMode::Logits => Ok(logits),
        OutputMode::Probabilities => {
            let n = logits.shape()[0];
            let mut data = Vec::with_capacity(logits.len());
            for i in 0..n {
                data.extend(ops::softmax(logits.sample(i)));
            }
            Tensor::new(logits.shape().to_vec(), data)
        }
        OutputMode::LabelOnly => {
            let n = logits.shape()[0];
            let data = (0..n).map(|i| argmax(logits.sample(i)) as f64).collect();
            Tensor::new(vec![n], data)
        }
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Parameter gradients aligned with `model.layers[i].weights[j]`.
pub struct ParamGrads(pub Vec<Vec<Tensor>>);

impl ParamGrads {
    pub fn zeros_like(model: &ModelGraph) -> Self {
        ParamGrads(
            model
                .layers
                .iter()
                .map(|l| l.weights.iter().map(|w| Tensor::zeros(w.shape())).collect())
                .collect(),
        )
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (ta, tb) in a.iter_mut().zip(b) {
                for (va, &vb) in ta.data_mut().iter_mut().zip(tb.data()) {
                    *va += vb;
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for layer in &mut self.0 {
            for t in layer {
                for v in t.data_mut() {
                    *v *= s;
                }
            }
        }
    }
}

/// Backward pass for one sample. `d_out` is the loss gradient at the final
/// layer's output. Returns parameter gradients and the gradient w.r.t. `x`.
pub fn backward_sample(
    model: &ModelGraph,
    shapes: &[Vec<usize>],
    cache: &ForwardCache,
    x: &[f64],
    d_out: &[f64],
) -> (ParamGrads, Vec<f64>) {
    let mut grads = ParamGrads::zeros_like(model);
    let n_layers = model.layers.len();
    let mut d_outputs: Vec<Option<Vec<f64>>> = vec![None; n_layers];
    d_outputs[n_layers - 1] = Some(d_out.to_vec());
    let mut d_input = vec![0.0; x.len()];

    for (id, layer) in model.layers.iter().enumerate().rev() {
        let dy = match d_outputs[id].take() {
            Some(d) => d,
            None => continue, // dead branch (unconsumed layer)
        };
        let in_shape = match &layer.inputs[0] {
            Edge::Input => model.input_shape.as_slice(),
            Edge::Layer(src) => &shapes[*src],
        };
        let input = resolve(&layer.inputs[0], x, &cache.outputs);

        let push = |edge: &Edge, dx: Vec<f64>, d_outputs: &mut Vec<Option<Vec<f64>>>,
                        d_input: &mut Vec<f64>| {
            match edge {
                Edge::Input => {
                    for (a, b) in d_input.iter_mut().zip(&dx) {
                        *a += b;
                    }
                }
                Edge::Layer(src) => match &mut d_outputs[*src] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&dx) {
                            *a += b;
                        }
                    }
                    None => d_outputs[*src] = Some(dx),
                },
            }
        };

        match &layer.kind {
            LayerKind::Conv2d {
                c_in,
                c_out,
                k,
                stride,
                pad,
            } => {
                let (h, w) = (in_shape[1], in_shape[2]);
                let oh = (h + 2 * pad - k) / stride + 1;
                let ow = (w + 2 * pad - k) / stride + 1;
                let ck2 = c_in * k * k;
                let cols = ops::im2col(input, *c_in, h, w, *k, *stride, *pad);
                // dW = dY * cols^T  (treat cols^T as B^T with B stored [ck2, ohow])
                let dw = {
                    let mut dw = vec![0.0; c_out * ck2];
                    for o in 0..*c_out {
                        for r in 0..ck2 {
                            let mut acc = 0.0;
                            for p in 0..oh * ow {
                                acc += dy[o * oh * ow + p] * cols[r * oh * ow + p];
                            }
                            dw[o * ck2 + r] = acc;
                        }
                    }
                    dw
                };
                grads.0[id][0] = Tensor::new(vec![*c_out, *c_in, *k, *k], dw).unwrap();
                let db: Vec<f64> = (0..*c_out)
                    .map(|o| dy[o * oh * ow..(o + 1) * oh * ow].iter().sum())
                    .collect();
                grads.0[id][1] = Tensor::from_flat(db);
                // dCols = W^T dY, then scatter back.
                let dcols =
                    ops::matmul_at(layer.weights[0].data(), &dy, ck2, *c_out, oh * ow);
                let mut dx = vec![0.0; input.len()];
                ops::col2im_add(&dcols, *c_in, h, w, *k, *stride, *pad, &mut dx);
                push(&layer.inputs[0], dx, &mut d_outputs, &mut d_input);
            }
            LayerKind::Linear { c_in, c_out } => {
                let w = layer.weights[0].data();
                let mut dw = vec![0.0; c_out * c_in];
                for o in 0..*c_out {
                    for i in 0..*c_in {
                        dw[o * c_in + i] = dy[o] * input[i];
                    }
                }
                grads.0[id][0] = Tensor::new(vec![*c_out, *c_in], dw).unwrap();
                grads.0[id][1] = Tensor::from_flat(dy.clone());
                let mut dx = vec![0.0; *c_in];
                for o in 0..*c_out {
                    let row = &w[o * c_in..(o + 1) * c_in];
                    for (dv, &wv) in dx.iter_mut().zip(row) {
                        *dv += dy[o] * wv;
                    }
                }
                push(&layer.inputs[0], dx, &mut d_outputs, &mut d_input);
            }
            LayerKind::BatchNorm { c } => {
                let spatial = input.len() / c;
                let gamma = layer.weights[0].data();
                let mean = layer.buffers[0].data();
                let var = layer.buffers[1].data();
                let mut dgamma = vec![0.0; *c];
                let mut dbeta = vec![0.0; *c];
                let mut dx = vec![0.0; input.len()];
                for ch in 0..*c {
                    let inv = 1.0 / (var[ch] + BN_EPS).sqrt();
                    for s in 0..spatial {
                        let idx = ch * spatial + s;
                        dgamma[ch] += dy[idx] * (input[idx] - mean[ch]) * inv;
                        dbeta[ch] += dy[idx];
                        dx[idx] = dy[idx] * gamma[ch] * inv;
                    }
                }
                grads.0[id][0] = Tensor::from_flat(dgamma);
                grads.0[id][1] = Tensor::from_flat(dbeta);
                push(&layer.inputs[0], dx, &mut d_outputs, &mut d_input);
            }
            LayerKind::ReLU => {
                let dx = input
                    .iter()
                    .zip(&dy)
                    .map(|(&x, &d)| if x > 0.0 { d } else { 0.0 })
                    .collect();
                push(&layer.inputs[0], dx, &mut d_outputs, &mut d_input);
            }
            LayerKind::AvgPool { k, stride } => {
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let oh = (h - k) / stride + 1;
                let ow = (w - k) / stride + 1;
                let norm = 1.0 / (k * k) as f64;
                let mut dx = vec![0.0; input.len()];
                for ch in 0..c {
                    for oi in 0..oh {
                        for oj in 0..ow {
                            let g = dy[(ch * oh + oi) * ow + oj] * norm;
                            for ki in 0..*k {
                                for kj in 0..*k {
                                    dx[(ch * h + oi * stride + ki) * w + oj * stride + kj] += g;
                                }
                            }
                        }
                    }
                }
                push(&layer.inputs[0], dx, &mut d_outputs, &mut d_input);
            }
            LayerKind::ResidualAdd => {
                push(&layer.inputs[0], dy.clone(), &mut d_outputs, &mut d_input);
                push(&layer.inputs[1], dy, &mut d_outputs, &mut d_input);
            }
            LayerKind::Softmax => {
                let p = &cache.outputs[id];
                let dot: f64 = p.iter().zip(&dy).map(|(&pv, &dv)| pv * dv).sum();
                let dx = p.iter().zip(&dy).map(|(&pv, &dv)| pv * (dv - dot)).collect();
                push(&layer.inputs[0], dx, &mut d_outputs, &mut d_input);
            }
            LayerKind::AlphaGate => {
                let a = sigmoid(layer.weights[0].data()[0]);
                let xy: f64 = input.iter().zip(&dy).map(|(&x, &d)| x * d).sum();
                grads.0[id][0] = Tensor::from_flat(vec![a * (1.0 - a) * xy]);
                let dx = dy.iter().map(|&d| a * d).collect();
                push(&layer.inputs[0], dx, &mut d_outputs, &mut d_input);
            }
        }
    }
    (grads, d_input)
}

/// Cross-entropy of a logit row against a class id, with its gradient
/// `softmax(z) - onehot(y)`.
pub fn ce_loss_and_grad(logits: &[f64], y: usize) -> (f64, Vec<f64>) {
    let p = ops::softmax(logits);
    let loss = -(p[y].max(1e-300)).ln();
    let mut g = p;
    g[y] -= 1.0;
    (loss, g)
}
