//! Two-world execution of a partition plan.
//!
//! TEE-placed layers run in plain floating point. GPU-placed conv/linear
//! layers run through the offload protocol selected by [`Protocol`]:
//! plain floats, 8-bit quantized field arithmetic, or the full masked
//! protocol (quantize, one-time-pad the activations, verify the returned
//! product with Freivalds, decrypt). Masked and plain-quantized execution
//! produce bit-identical outputs by construction: decryption recovers the
//! exact level-product matrix, and everything after it is the same float
//! code path.

use crate::error::{Error, Result};
use crate::nn::engine;
use crate::nn::graph::{Edge, LayerId, LayerKind, ModelGraph, OutputMode};
use crate::nn::ops;
use crate::offload::field::FieldParams;
use crate::offload::freivalds::{freivalds_verify, sample_challenge, Challenge};
use crate::offload::quant::{otp_decrypt_linear, otp_encrypt, quantize_including_zero, OtpPad, QuantTensor};
use crate::partition::{PartitionPlan, Placement};
use crate::rng::{derive, derive_seed, Rng};
use crate::shadownet::{obfuscate, ObfuscatedLayer};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    /// Reference float execution of the same placement split.
    Plain,
    /// Quantized field arithmetic on the GPU, no masking.
    PlainQuantized,
    /// Quantized, one-time-pad masked, Freivalds-verified.
    Masked,
}

/// One Freivalds verification event, suitable for JSON-lines logging.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VerifyRecord {
    pub layer: LayerId,
    pub rounds: usize,
    pub pass: bool,
}

/// Additive corruption of one entry of a GPU layer's returned product,
/// for soundness tests. A delta that is 0 mod p leaves the product intact.
#[derive(Debug, Clone, Copy)]
pub struct Fault {
    pub layer: LayerId,
    pub index: usize,
    pub delta: u64,
}

#[derive(Debug, Clone)]
pub struct ExecutorConfig {
    pub protocol: Protocol,
    pub field: FieldParams,
    pub freivalds_rounds: usize,
    /// Pads minted per offline refill of a layer's pool.
    pub pad_pool: usize,
    /// Filter-count expansion for obfuscated layers.
    pub obf_expansion: f64,
    pub seed: u64,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        ExecutorConfig {
            protocol: Protocol::Masked,
            field: FieldParams::default(),
            freivalds_rounds: 2,
            pad_pool: 4,
            obf_expansion: crate::shadownet::DEFAULT_EXPANSION,
            seed: 0,
        }
    }
}

/// Matmul-as-seen-by-the-GPU geometry: conv lowers to im2col, linear is a
/// single-column product.
#[derive(Debug, Clone, Copy)]
enum Geom {
    Conv {
        c_in: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Linear,
}

struct GpuMatmul {
    rows: usize,
    inner: usize,
    cols: usize,
    geom: Geom,
    /// What the GPU holds in the float world: blinded (SOTER) and/or
    /// magnitude-complement weights.
    w_gpu: Vec<f64>,
    /// Shielded weight part computed inside the TEE (magnitude scheme).
    w_tee: Option<Vec<f64>>,
    bias: Vec<f64>,
    scalar: f64,
    /// Quantization of `w_gpu` for the field protocols.
    wq: Option<QuantTensor>,
    row_sums: Vec<i64>,
    /// Ready pads with their precomputed linear images `g(r) = W_q r`.
    pads: Vec<(OtpPad, Vec<u64>)>,
}

struct ObfExec {
    published: Vec<f64>, // [m, inner]
    m: usize,
    rows: usize,
    inner: usize,
    cols: usize,
    geom: Geom,
    bias: Vec<f64>,
    obf: ObfuscatedLayer,
}

enum Prepared {
    /// Plain float execution with the model's own weights (TEE layers and
    /// GPU-placed non-matmul layers).
    Float,
    Gpu(GpuMatmul),
    Obf(ObfExec),
}

pub struct Executor {
    model: ModelGraph,
    plan: PartitionPlan,
    shapes: Vec<Vec<usize>>,
    prepared: Vec<Prepared>,
    protocol: Protocol,
    fp: FieldParams,
    freivalds_rounds: usize,
    pad_pool: usize,
    rng: Rng,
    fault: Option<Fault>,
    verify_log: Vec<VerifyRecord>,
    pads_generated: u64,
}

fn layer_geometry(kind: &LayerKind, in_shape: &[usize], out_shape: &[usize]) -> Option<(Geom, usize, usize, usize)> {
    match kind {
        LayerKind::Conv2d {
            c_in,
            c_out,
            k,
            stride,
            pad,
        } => {
            let cols = out_shape[1] * out_shape[2];
            Some((
                Geom::Conv {
                    c_in: *c_in,
                    h: in_shape[1],
                    w: in_shape[2],
                    k: *k,
                    stride: *stride,
                    pad: *pad,
                },
                *c_out,
                c_in * k * k,
                cols,
            ))
        }
        LayerKind::Linear { c_in, c_out } => Some((Geom::Linear, *c_out, *c_in, 1)),
        _ => None,
    }
}

fn lower(geom: Geom, input: &[f64]) -> Vec<f64> {
    match geom {
        Geom::Conv {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
        } => ops::im2col(input, c_in, h, w, k, stride, pad),
        Geom::Linear => input.to_vec(),
    }
}

fn lower_levels(geom: Geom, levels: &[u64], zero_point: u64) -> Vec<u64> {
    match geom {
        Geom::Conv {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
        } => ops::im2col_padval(levels, c_in, h, w, k, stride, pad, zero_point),
        Geom::Linear => levels.to_vec(),
    }
}

impl Executor {
    pub fn new(model: &ModelGraph, plan: &PartitionPlan, cfg: ExecutorConfig) -> Result<Executor> {
        model.validate()?;
        plan.validate(model)?;
        let shapes = model.infer_shapes()?;
        let quantized = cfg.protocol != Protocol::Plain;
        let mut prepared = Vec::with_capacity(model.layers.len());
        for (id, layer) in model.layers.iter().enumerate() {
            let in_shape = match &layer.inputs[0] {
                Edge::Input => model.input_shape.as_slice(),
                Edge::Layer(src) => &shapes[*src],
            };
            let placement = plan.placement(id);
            let geometry = layer_geometry(&layer.kind, in_shape, &shapes[id]);
            let p = match (placement, geometry) {
                (Placement::Gpu, Some((geom, rows, inner, cols))) => {
                    let mask = plan
                        .weight_masks
                        .as_ref()
                        .and_then(|m| m.get(&id))
                        .cloned();
                    let scalar = plan
                        .scalars
                        .as_ref()
                        .and_then(|s| s.get(&id))
                        .copied()
                        .unwrap_or(1.0);
                    let full = layer.weights[0].data();
                    let (w_gpu_raw, w_tee): (Vec<f64>, Option<Vec<f64>>) = match &mask {
                        Some(m) if m.iter().any(|&b| b) => (
                            full.iter()
                                .zip(m)
                                .map(|(&v, &shielded)| if shielded { 0.0 } else { v })
                                .collect(),
                            Some(
                                full.iter()
                                    .zip(m)
                                    .map(|(&v, &shielded)| if shielded { v } else { 0.0 })
                                    .collect(),
                            ),
                        ),
                        _ => (full.to_vec(), None),
                    };
                    let w_gpu: Vec<f64> = w_gpu_raw.iter().map(|&v| v * scalar).collect();
                    let wq = if quantized {
                        cfg.field.check_otp(inner)?;
                        Some(quantize_including_zero(&Tensor::from_flat(w_gpu.clone()))?)
                    } else {
                        None
                    };
                    let row_sums = wq
                        .as_ref()
                        .map(|q| {
                            (0..rows)
                                .map(|i| {
                                    q.values[i * inner..(i + 1) * inner]
                                        .iter()
                                        .map(|&v| v as i64)
                                        .sum()
                                })
                                .collect()
                        })
                        .unwrap_or_default();
                    Prepared::Gpu(GpuMatmul {
                        rows,
                        inner,
                        cols,
                        geom,
                        w_gpu,
                        w_tee,
                        bias: layer.weights[1].data().to_vec(),
                        scalar,
                        wq,
                        row_sums,
                        pads: Vec::new(),
                    })
                }
                (Placement::Obfuscated, Some((geom, rows, inner, cols))) => {
                    let filters: Vec<Tensor> = (0..rows)
                        .map(|i| {
                            Tensor::from_flat(
                                layer.weights[0].data()[i * inner..(i + 1) * inner].to_vec(),
                            )
                        })
                        .collect();
                    let obf = obfuscate(
                        &filters,
                        cfg.obf_expansion,
                        derive_seed(cfg.seed, &format!("obf/{id}")),
                    )?;
                    let m = obf.filters.len();
                    let mut published = Vec::with_capacity(m * inner);
                    for f in &obf.filters {
                        published.extend_from_slice(f.data());
                    }
                    Prepared::Obf(ObfExec {
                        published,
                        m,
                        rows,
                        inner,
                        cols,
                        geom,
                        bias: layer.weights[1].data().to_vec(),
                        obf,
                    })
                }
                (Placement::Obfuscated, None) => {
                    return Err(Error::invalid(format!(
                        "layer {id} ({}) cannot be obfuscated: not a matmul",
                        layer.kind.name()
                    )))
                }
                _ => Prepared::Float,
            };
            prepared.push(p);
        }
        Ok(Executor {
            model: model.clone(),
            plan: plan.clone(),
            shapes,
            prepared,
            protocol: cfg.protocol,
            fp: cfg.field,
            freivalds_rounds: cfg.freivalds_rounds.max(1),
            pad_pool: cfg.pad_pool.max(1),
            rng: derive(cfg.seed, "offload-executor"),
            fault: None,
            verify_log: Vec::new(),
            pads_generated: 0,
        })
    }

    pub fn plan(&self) -> &PartitionPlan {
        &self.plan
    }

    pub fn set_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    pub fn verify_log(&self) -> &[VerifyRecord] {
        &self.verify_log
    }

    /// Total pads minted so far (across refills), for pool accounting.
    pub fn pads_generated(&self) -> u64 {
        self.pads_generated
    }

    /// Defender-side view of an obfuscated layer, if this plan has one.
    pub fn obfuscated(&self, id: LayerId) -> Option<&ObfuscatedLayer> {
        match &self.prepared[id] {
            Prepared::Obf(o) => Some(&o.obf),
            _ => None,
        }
    }

    /// Batched forward honoring the model's output mode. Samples run
    /// sequentially: masked execution consumes pads and appends to the
    /// verify log.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() < 2 || x.sample_shape() != self.model.input_shape.as_slice() {
            return Err(Error::shape(
                "executor input (per-sample, after batch dim)",
                &self.model.input_shape,
                x.shape(),
            ));
        }
        let n = x.shape()[0];
        let out_dim: usize = self.shapes.last().unwrap().iter().product();
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            rows.push(self.run_sample(x.sample(i))?);
        }
        match self.model.output_mode {
            OutputMode::Logits => {
                let mut data = Vec::with_capacity(n * out_dim);
                for r in rows {
                    data.extend_from_slice(&r);
                }
                let t = Tensor::new(vec![n, out_dim], data)?;
                t.assert_finite("executor output")?;
                Ok(t)
            }
            OutputMode::Probabilities => {
                let mut data = Vec::with_capacity(n * out_dim);
                for r in rows {
                    data.extend(ops::softmax(&r));
                }
                Tensor::new(vec![n, out_dim], data)
            }
            OutputMode::LabelOnly => {
                let data = rows.iter().map(|r| engine::argmax(r) as f64).collect();
                Tensor::new(vec![n], data)
            }
        }
    }

    fn run_sample(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(self.model.layers.len());
        for id in 0..self.model.layers.len() {
            let resolve = |e: &Edge, outputs: &[Vec<f64>]| -> Vec<f64> {
                match e {
                    Edge::Input => x.to_vec(),
                    Edge::Layer(src) => outputs[*src].clone(),
                }
            };
            let input = resolve(&self.model.layers[id].inputs[0], &outputs);
            let out = match &self.prepared[id] {
                Prepared::Float => {
                    let layer = &self.model.layers[id];
                    let in_shape = match &layer.inputs[0] {
                        Edge::Input => self.model.input_shape.clone(),
                        Edge::Layer(src) => self.shapes[*src].clone(),
                    };
                    let input2 = layer.inputs.get(1).map(|e| resolve(e, &outputs));
                    engine::layer_forward(layer, &in_shape, &input, input2.as_deref())
                }
                Prepared::Obf(o) => {
                    let cols_f = lower(o.geom, &input);
                    let y = ops::matmul(&o.published, &cols_f, o.m, o.inner, o.cols);
                    let mut out = vec![0.0; o.rows * o.cols];
                    for i in 0..o.rows {
                        let masked = o.obf.secret.slot_of_masked[i];
                        let mask = o.obf.secret.slot_of_mask[i];
                        for j in 0..o.cols {
                            out[i * o.cols + j] =
                                y[masked * o.cols + j] - y[mask * o.cols + j] + o.bias[i];
                        }
                    }
                    out
                }
                Prepared::Gpu(_) => self.gpu_forward(id, &input)?,
            };
            outputs.push(out);
        }
        Ok(outputs.pop().unwrap())
    }

    fn gpu_forward(&mut self, id: LayerId, input: &[f64]) -> Result<Vec<f64>> {
        let protocol = self.protocol;
        let fp = self.fp;
        let rounds = self.freivalds_rounds;
        let pool = self.pad_pool;
        let fault = self.fault;
        let Executor {
            prepared,
            rng,
            verify_log,
            pads_generated,
            ..
        } = self;
        let g = match &mut prepared[id] {
            Prepared::Gpu(g) => g,
            _ => unreachable!("gpu_forward on non-gpu layer"),
        };
        // TEE-side contribution: shielded magnitude weights in plain float.
        let tee_part: Option<Vec<f64>> = g
            .w_tee
            .as_ref()
            .map(|wt| ops::matmul(wt, &lower(g.geom, input), g.rows, g.inner, g.cols));
        let mut out = match protocol {
            Protocol::Plain => {
                let cols_f = lower(g.geom, input);
                ops::matmul(&g.w_gpu, &cols_f, g.rows, g.inner, g.cols)
                    .into_iter()
                    .map(|v| v / g.scalar)
                    .collect::<Vec<f64>>()
            }
            Protocol::PlainQuantized | Protocol::Masked => {
                let wq = g.wq.as_ref().expect("quantized weights prepared");
                let hq = quantize_including_zero(&Tensor::from_flat(input.to_vec()))?;
                let h_mat = lower_levels(g.geom, &hq.values, hq.zero_point as u64);
                let col_sums: Vec<i64> = (0..g.cols)
                    .map(|j| {
                        (0..g.inner)
                            .map(|k| h_mat[k * g.cols + j] as i64)
                            .sum()
                    })
                    .collect();
                let y_levels = if protocol == Protocol::PlainQuantized {
                    fp.matmul(&wq.values, &h_mat, g.rows, g.inner, g.cols)
                } else {
                    if g.pads.is_empty() {
                        // Offline phase: mint pads and their linear images.
                        for _ in 0..pool {
                            let pad =
                                OtpPad::generate(*pads_generated, g.inner * g.cols, &fp, rng);
                            let g_r =
                                fp.matmul(&wq.values, pad.mask(), g.rows, g.inner, g.cols);
                            g.pads.push((pad, g_r));
                            *pads_generated += 1;
                        }
                    }
                    let (mut pad, g_r) = g.pads.pop().unwrap();
                    let wrapped = QuantTensor {
                        values: h_mat.clone(),
                        scale: hq.scale,
                        zero_point: hq.zero_point,
                        shape: vec![g.inner, g.cols],
                    };
                    let he = otp_encrypt(&wrapped, &mut pad, &fp)?;
                    let mut y_e = fp.matmul(&wq.values, &he.values, g.rows, g.inner, g.cols);
                    if let Some(f) = fault {
                        if f.layer == id {
                            if f.index >= y_e.len() {
                                return Err(Error::invalid(format!(
                                    "fault index {} out of range for layer {id}",
                                    f.index
                                )));
                            }
                            y_e[f.index] = fp.add(y_e[f.index], f.delta % fp.p);
                        }
                    }
                    let challenges: Vec<Challenge> = (0..rounds)
                        .map(|_| sample_challenge(&wq.values, g.rows, g.inner, &fp, rng))
                        .collect();
                    let pass = freivalds_verify(&he.values, &y_e, &challenges, g.cols, &fp)?;
                    verify_log.push(VerifyRecord {
                        layer: id,
                        rounds,
                        pass,
                    });
                    if !pass {
                        return Err(Error::VerifyFailed { layer: id });
                    }
                    otp_decrypt_linear(&y_e, &g_r, &fp)?
                };
                // Exact integer readback (no modular wrap by check_otp),
                // then the zero-point-corrected affine dequantization.
                let mut out = vec![0.0; g.rows * g.cols];
                for i in 0..g.rows {
                    for j in 0..g.cols {
                        let y = y_levels[i * g.cols + j] as i64;
                        let corrected = y - hq.zero_point * g.row_sums[i]
                            - wq.zero_point * col_sums[j]
                            + g.inner as i64 * wq.zero_point * hq.zero_point;
                        out[i * g.cols + j] = wq.scale * hq.scale * corrected as f64 / g.scalar;
                    }
                }
                out
            }
        };
        for i in 0..g.rows {
            for j in 0..g.cols {
                let idx = i * g.cols + j;
                if let Some(t) = &tee_part {
                    out[idx] += t[idx];
                }
                out[idx] += g.bias[i];
            }
        }
        Ok(out)
    }
}
