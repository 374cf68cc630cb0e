//! The masked-offload protocol: prime-field arithmetic, 8-bit affine
//! quantization, one-time-pad masking of GPU-bound activations, Freivalds
//! verification of returned products, and the two-world executor that runs
//! a partition plan end to end.

pub mod executor;
pub mod field;
pub mod freivalds;
pub mod quant;

pub use executor::{Executor, ExecutorConfig, Fault, Protocol, VerifyRecord};
pub use field::{FieldParams, DEFAULT_PRIME};
pub use freivalds::{freivalds_verify, sample_challenge, Challenge};
pub use quant::{
    dequantize, otp_decrypt_linear, otp_encrypt, quantize, quantize_including_zero, OtpPad,
    QuantTensor, QUANT_LEVELS,
};
