//! Model graphs: ordered layer lists with explicit input edges.
//!
//! Layers are stored in topological order; every edge points at an earlier
//! layer (or the graph input), which makes residual skip connections and
//! slice taps representable without a general graph library.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub type LayerId = usize;

/// Where a layer reads its input from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Edge {
    /// The graph's external input.
    Input,
    Layer(LayerId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv2d {
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Linear {
        c_in: usize,
        c_out: usize,
    },
    BatchNorm {
        c: usize,
    },
    ReLU,
    AvgPool {
        k: usize,
        stride: usize,
    },
    ResidualAdd,
    Softmax,
    /// Elementwise gate `sigmoid(alpha_tilde) * x` with one trainable
    /// scalar; the importance gate on slice adapters.
    AlphaGate,
}

impl LayerKind {
    /// Conv/Linear carry learnable multiply weights; BatchNorm carries an
    /// affine pair. ReLU/AvgPool/ResidualAdd/Softmax carry nothing.
    pub fn is_weighted(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv2d { .. }
                | LayerKind::Linear { .. }
                | LayerKind::BatchNorm { .. }
                | LayerKind::AlphaGate
        )
    }

    /// Layers the masked-offload protocol can run on the GPU as a field
    /// matrix product.
    pub fn is_linear_op(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::Linear { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Linear { .. } => "linear",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::ReLU => "relu",
            LayerKind::AvgPool { .. } => "avgpool",
            LayerKind::ResidualAdd => "residual_add",
            LayerKind::Softmax => "softmax",
            LayerKind::AlphaGate => "alpha_gate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub kind: LayerKind,
    pub inputs: Vec<Edge>,
    /// Kind-specific parameter list:
    /// Conv2d `[weight (c_out,c_in,k,k), bias (c_out)]`,
    /// Linear `[weight (c_out,c_in), bias (c_out)]`,
    /// BatchNorm `[gamma (c), beta (c)]`.
    pub weights: Vec<Tensor>,
    /// BatchNorm normalization constants `[mean (c), var (c)]`; not trained.
    pub buffers: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputMode {
    Logits,
    Probabilities,
    LabelOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub layers: Vec<Layer>,
    /// Per-sample input shape, e.g. `[c, h, w]`.
    pub input_shape: Vec<usize>,
    pub output_mode: OutputMode,
}

impl ModelGraph {
    /// Per-sample output shape of each layer, in layer order.
    /// Fails with the offending edge named if any connection is inconsistent.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.layers.len());
        for (id, layer) in self.layers.iter().enumerate() {
            let resolve = |e: &Edge| -> Result<Vec<usize>> {
                match e {
                    Edge::Input => Ok(self.input_shape.clone()),
                    Edge::Layer(src) => {
                        if *src >= id {
                            Err(Error::invalid(format!(
                                "layer {id} reads from non-earlier layer {src}"
                            )))
                        } else {
                            Ok(shapes[*src].clone())
                        }
                    }
                }
            };
            let out = match &layer.kind {
                LayerKind::Conv2d {
                    c_in,
                    c_out,
                    k,
                    stride,
                    pad,
                } => {
                    let s = resolve(&layer.inputs[0])?;
                    if s.len() != 3 || s[0] != *c_in {
                        return Err(Error::shape(
                            format!("edge into conv layer {id}"),
                            &[*c_in],
                            &s,
                        ));
                    }
                    let (h, w) = (s[1], s[2]);
                    if h + 2 * pad < *k || w + 2 * pad < *k {
                        return Err(Error::invalid(format!(
                            "conv layer {id}: kernel {k} larger than padded input {h}x{w}"
                        )));
                    }
                    let oh = (h + 2 * pad - k) / stride + 1;
                    let ow = (w + 2 * pad - k) / stride + 1;
                    vec![*c_out, oh, ow]
                }
                LayerKind::Linear { c_in, c_out } => {
                    let s = resolve(&layer.inputs[0])?;
                    let n: usize = s.iter().product();
                    if n != *c_in {
                        return Err(Error::shape(
                            format!("edge into linear layer {id}"),
                            &[*c_in],
                            &s,
                        ));
                    }
                    vec![*c_out]
                }
                LayerKind::BatchNorm { c } => {
                    let s = resolve(&layer.inputs[0])?;
                    if s[0] != *c {
                        return Err(Error::shape(
                            format!("edge into batchnorm layer {id}"),
                            &[*c],
                            &s,
                        ));
                    }
                    s
                }
                LayerKind::ReLU | LayerKind::Softmax | LayerKind::AlphaGate => {
                    resolve(&layer.inputs[0])?
                }
                LayerKind::AvgPool { k, stride } => {
                    let s = resolve(&layer.inputs[0])?;
                    if s.len() != 3 {
                        return Err(Error::shape(
                            format!("edge into avgpool layer {id}"),
                            &[3],
                            &s,
                        ));
                    }
                    if s[1] < *k || s[2] < *k {
                        return Err(Error::invalid(format!(
                            "avgpool layer {id}: window {k} larger than input"
                        )));
                    }
                    vec![s[0], (s[1] - k) / stride + 1, (s[2] - k) / stride + 1]
                }
                LayerKind::ResidualAdd => {
                    let a = resolve(&layer.inputs[0])?;
                    let b = resolve(&layer.inputs[1])?;
                    if a != b {
                        return Err(Error::shape(
                            format!("residual_add layer {id} branch shapes"),
                            &a,
                            &b,
                        ));
                    }
                    a
                }
            };
            shapes.push(out);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("empty model graph"));
        }
        for (id, layer) in self.layers.iter().enumerate() {
            let want = match layer.kind {
                LayerKind::ResidualAdd => 2,
                _ => 1,
            };
            if layer.inputs.len() != want {
                return Err(Error::invalid(format!(
                    "layer {id} ({}) has {} inputs, wants {want}",
                    layer.kind.name(),
                    layer.inputs.len()
                )));
            }
            match &layer.kind {
                LayerKind::Conv2d { c_in, c_out, k, .. } => {
                    check_weight(id, &layer.weights, 0, &[*c_out, *c_in, *k, *k])?;
                    check_weight(id, &layer.weights, 1, &[*c_out])?;
                }
                LayerKind::Linear { c_in, c_out } => {
                    check_weight(id, &layer.weights, 0, &[*c_out, *c_in])?;
                    check_weight(id, &layer.weights, 1, &[*c_out])?;
                }
                LayerKind::BatchNorm { c } => {
                    check_weight(id, &layer.weights, 0, &[*c])?;
                    check_weight(id, &layer.weights, 1, &[*c])?;
                    if layer.buffers.len() != 2 {
                        return Err(Error::invalid(format!("batchnorm {id} missing buffers")));
                    }
                }
                LayerKind::AlphaGate => {
                    check_weight(id, &layer.weights, 0, &[1])?;
                }
                _ => {
                    if !layer.weights.is_empty() {
                        return Err(Error::invalid(format!(
                            "layer {id} ({}) must not carry weights",
                            layer.kind.name()
                        )));
                    }
                }
            }
        }
        self.infer_shapes()?;
        Ok(())
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.infer_shapes()?.pop().unwrap())
    }

    /// Ids of layers carrying learnable weights.
    pub fn weighted_layers(&self) -> Vec<LayerId> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind.is_weighted())
            .map(|(i, _)| i)
            .collect()
    }

    /// Number of classes for classifier graphs (arity of the final output).
    pub fn n_outputs(&self) -> Result<usize> {
        Ok(self.output_shape()?.iter().product())
    }

    /// SHA-256 over all parameter bytes, in layer order. Used for
    /// frozen-weight invariants and cache keys.
    pub fn param_checksum(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for layer in &self.layers {
            for w in layer.weights.iter().chain(layer.buffers.iter()) {
                for v in w.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        h.finalize().into()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter())
            .map(|w| w.len())
            .sum()
    }
}

fn check_weight(id: usize, weights: &[Tensor], idx: usize, want: &[usize]) -> Result<()> {
    let w = weights
        .get(idx)
        .ok_or_else(|| Error::invalid(format!("layer {id} missing weight {idx}")))?;
    if w.shape() != want {
        return Err(Error::shape(
            format!("layer {id} weight {idx}"),
            want,
            w.shape(),
        ));
    }
    Ok(())
}

/// Chain-style builder for the common sequential-with-skips case.
pub struct ModelBuilder {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    rng: Rng,
}

impl ModelBuilder {
    pub fn new(input_shape: Vec<usize>, seed: u64) -> Self {
        ModelBuilder {
            input_shape,
            layers: Vec::new(),
            rng: crate::rng::derive(seed, "model-init"),
        }
    }

    fn last_edge(&self) -> Edge {
        if self.layers.is_empty() {
            Edge::Input
        } else {
            Edge::Layer(self.layers.len() - 1)
        }
    }

    fn he_init(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let std = (2.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                // Box-Muller from two uniforms keeps us independent of
                // rand_distr and bit-stable across releases.
                let u1: f64 = self.rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = self.rng.gen_range(0.0..1.0);
                std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    pub fn conv(mut self, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        let w = self.he_init(&[c_out, c_in, k, k], c_in * k * k);
        let input = self.last_edge();
        self.layers.push(Layer {
            kind: LayerKind::Conv2d {
                c_in,
                c_out,
                k,
                stride,
                pad,
            },
            inputs: vec![input],
            weights: vec![w, Tensor::zeros(&[c_out])],
            buffers: vec![],
        });
        self
    }

    pub fn linear(mut self, c_in: usize, c_out: usize) -> Self {
        let w = self.he_init(&[c_out, c_in], c_in);
        let input = self.last_edge();
        self.layers.push(Layer {
            kind: LayerKind::Linear { c_in, c_out },
            inputs: vec![input],
            weights: vec![w, Tensor::zeros(&[c_out])],
            buffers: vec![],
        });
        self
    }

    pub fn batchnorm(mut self, c: usize) -> Self {
        let input = self.last_edge();
        self.layers.push(Layer {
            kind: LayerKind::BatchNorm { c },
            inputs: vec![input],
            weights: vec![Tensor::filled(&[c], 1.0), Tensor::zeros(&[c])],
            buffers: vec![Tensor::zeros(&[c]), Tensor::filled(&[c], 1.0)],
        });
        self
    }

    pub fn relu(mut self) -> Self {
        let input = self.last_edge();
        self.layers.push(Layer {
            kind: LayerKind::ReLU,
            inputs: vec![input],
            weights: vec![],
            buffers: vec![],
        });
        self
    }

    pub fn avgpool(mut self, k: usize, stride: usize) -> Self {
        let input = self.last_edge();
        self.layers.push(Layer {
            kind: LayerKind::AvgPool { k, stride },
            inputs: vec![input],
            weights: vec![],
            buffers: vec![],
        });
        self
    }

    pub fn softmax(mut self) -> Self {
        let input = self.last_edge();
        self.layers.push(Layer {
            kind: LayerKind::Softmax,
            inputs: vec![input],
            weights: vec![],
            buffers: vec![],
        });
        self
    }

    /// Gate the chain tip by `sigmoid(alpha_tilde)`; `alpha_tilde` starts
    /// at 0, i.e. a gate value of 0.5.
    pub fn alpha_gate(mut self) -> Self {
        let input = self.last_edge();
        self.layers.push(Layer {
            kind: LayerKind::AlphaGate,
            inputs: vec![input],
            weights: vec![Tensor::zeros(&[1])],
            buffers: vec![],
        });
        self
    }

    /// Add a residual join of the current chain tip with an earlier layer.
    pub fn residual_from(mut self, src: LayerId) -> Self {
        let tip = self.last_edge();
        self.layers.push(Layer {
            kind: LayerKind::ResidualAdd,
            inputs: vec![tip, Edge::Layer(src)],
            weights: vec![],
            buffers: vec![],
        });
        self
    }

    pub fn last_id(&self) -> Option<LayerId> {
        self.layers.len().checked_sub(1)
    }

    pub fn build(self, output_mode: OutputMode) -> Result<ModelGraph> {
        let g = ModelGraph {
            layers: self.layers,
            input_shape: self.input_shape,
            output_mode,
        };
        g.validate()?;
        Ok(g)
    }
}
