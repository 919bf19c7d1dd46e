//! KV-cache quantization with Hadamard rotation and linear correction
//! adapters.
//!
//! Keys are quantized channel-wise and values token-wise after a Hadamard
//! rotation, both to packed 2-bit codes. The attention error left by the
//! quantized keys is compensated by trainable feature maps whose running
//! states add a correction to the numerator and denominator of softmax
//! attention. The crate also carries the reference and blocked decode paths,
//! a streaming cache with a byte-exact snapshot format, diagnostics, a
//! synthetic trace generator and a small CLI.

pub mod adapter;
pub mod attention;
pub mod cache;
pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod hadamard;
pub mod io_util;
pub mod quant;
pub mod tensor;
pub mod trace;

pub use adapter::{CorrectionAdapter, TrainConfig};
pub use attention::{
    attention_reference, attention_with_config, corrected_attention_quadratic,
    corrected_attention_recurrent, decode_step_blocked, CorrectionScaling, DecodeOptions,
};
pub use cache::{CacheConfig, Footprint, KvCache};
pub use error::{Error, Result};
pub use hadamard::{hadamard_matrix, rotate, HadamardMatrix};
pub use quant::{quantize_tensor, Axis, QuantConfig, QuantizedTensor, Rotation};
pub use tensor::Matrix;
pub use trace::{generate_synthetic_trace, AttentionTrace, SyntheticParams};
