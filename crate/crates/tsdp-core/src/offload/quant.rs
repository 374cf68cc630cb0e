//! 8-bit affine quantization with field-element storage, and the one-time
//! pad over the field.

use crate::error::{Error, Result};
use crate::offload::field::FieldParams;
use crate::rng::Rng;
use crate::tensor::Tensor;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub const QUANT_LEVELS: u64 = 256;

/// 8-bit quantized tensor. `values` are the quantization levels `0..=255`
/// embedded in `Z_p` (so they double as field elements).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantTensor {
    pub values: Vec<u64>,
    pub scale: f64,
    pub zero_point: i64,
    pub shape: Vec<usize>,
}

/// Affine map of `x` onto levels `{0..255}`, round-half-to-even.
/// Degenerate range (max == min) maps to all-zero levels with scale 1 and
/// a zero point that preserves the constant to the nearest integer.
pub fn quantize(x: &Tensor) -> Result<QuantTensor> {
    x.assert_finite("quantize input")?;
    let mn = x.data().iter().copied().fold(f64::INFINITY, f64::min);
    let mx = x.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    quantize_range(x, mn, mx)
}

/// Like [`quantize`] but with the range widened to include 0, so real 0.0
/// maps exactly onto the zero point and the zero point always lands in
/// `0..=255`. Convolution padding relies on both properties.
pub fn quantize_including_zero(x: &Tensor) -> Result<QuantTensor> {
    x.assert_finite("quantize input")?;
    let mn = x.data().iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
    let mx = x.data().iter().copied().fold(f64::NEG_INFINITY, f64::max).max(0.0);
    quantize_range(x, mn, mx)
}

fn quantize_range(x: &Tensor, mn: f64, mx: f64) -> Result<QuantTensor> {
    if mx == mn {
        return Ok(QuantTensor {
            values: vec![0; x.len()],
            scale: 1.0,
            zero_point: -mn.round_ties_even() as i64,
            shape: x.shape().to_vec(),
        });
    }
    let scale = (mx - mn) / (QUANT_LEVELS - 1) as f64;
    let zero_point = (-mn / scale).round_ties_even() as i64;
    let values = x
        .data()
        .iter()
        .map(|&v| {
            let q = (v / scale).round_ties_even() as i64 + zero_point;
            q.clamp(0, QUANT_LEVELS as i64 - 1) as u64
        })
        .collect();
    Ok(QuantTensor {
        values,
        scale,
        zero_point,
        shape: x.shape().to_vec(),
    })
}

pub fn dequantize(q: &QuantTensor) -> Tensor {
    let data = q
        .values
        .iter()
        .map(|&v| (v as i64 - q.zero_point) as f64 * q.scale)
        .collect();
    Tensor::new(q.shape.clone(), data).expect("shape preserved by quantize")
}

/// A single-use additive mask over `Z_p`.
#[derive(Debug, Clone)]
pub struct OtpPad {
    pub id: u64,
    mask: Vec<u64>,
    consumed: bool,
}

impl OtpPad {
    /// Uniform mask over `Z_p`, one element per protected input element.
    pub fn generate(id: u64, len: usize, fp: &FieldParams, rng: &mut Rng) -> OtpPad {
        OtpPad {
            id,
            mask: (0..len).map(|_| rng.gen_range(0..fp.p)).collect(),
            consumed: false,
        }
    }

    /// Test helper: a fixed mask.
    pub fn from_values(id: u64, mask: Vec<u64>) -> OtpPad {
        OtpPad {
            id,
            mask,
            consumed: false,
        }
    }

    pub fn mask(&self) -> &[u64] {
        &self.mask
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }
}

/// `(h_hat + r) mod p`, consuming the pad. A second use of the same pad is
/// a hard failure.
pub fn otp_encrypt(q: &QuantTensor, pad: &mut OtpPad, fp: &FieldParams) -> Result<QuantTensor> {
    if pad.consumed {
        return Err(Error::PadReuse(pad.id));
    }
    if pad.mask.len() != q.values.len() {
        return Err(Error::shape(
            "otp pad length",
            &[q.values.len()],
            &[pad.mask.len()],
        ));
    }
    pad.consumed = true;
    Ok(QuantTensor {
        values: q
            .values
            .iter()
            .zip(&pad.mask)
            .map(|(&v, &r)| fp.add(v, r))
            .collect(),
        scale: q.scale,
        zero_point: q.zero_point,
        shape: q.shape.clone(),
    })
}

/// `g(h_hat) = g(h_e) - g(r) mod p`, elementwise over the two precomputed
/// linear images. Exact for any linear `g` evaluated in the field.
pub fn otp_decrypt_linear(g_he: &[u64], g_r: &[u64], fp: &FieldParams) -> Result<Vec<u64>> {
    if g_he.len() != g_r.len() {
        return Err(Error::shape("decrypt operands", &[g_he.len()], &[g_r.len()]));
    }
    Ok(g_he.iter().zip(g_r).map(|(&a, &b)| fp.sub(a, b)).collect())
}
