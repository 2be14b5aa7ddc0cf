//! Dual-stream neural audio codec: a semantic stream distilled from a frozen
//! feature extractor carries the first token layer, a waveform stream encodes
//! the residual with more token layers, and a mirrored transposed-conv
//! decoder reconstructs audio. Everything runs on a self-contained f64
//! reverse-mode tape so training, inference, and the bit-exact token formats
//! need no external ML runtime.

pub mod bitstream;
mod bytes;
pub mod codec;
pub mod dsp;
pub mod error;
pub mod gradcheck;
mod linalg;
pub mod metrics;
pub mod nn;
pub mod quant;
pub mod semantic;
pub mod tensor;

pub use error::{CodecError, Result};
