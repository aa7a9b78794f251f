//! Adaptive-length image tokenizer.
//!
//! A small, self-contained stack that maps images to a grid of
//! discrete 2D tokens (a trainable toy VQ tokenizer), then recurrently
//! distills those into a variable number of quantized 1D latent
//! tokens. Each rollout iteration appends fresh latent slots, refines
//! the existing ones through a shared encoder-decoder, and can halt
//! image tokens that are already reconstructed. More iterations buy
//! more tokens and better reconstructions, so every image gets exactly
//! the representation budget it needs.
//!
//! Everything runs on the CPU on top of a minimal reverse-mode
//! autodiff tape (`tape`), with finite-difference verification
//! (`check`), shared vector-quantization machinery (`quantizer`), the
//! two-stage training procedure (`training`), evaluation tooling
//! (`analysis`), and a synthetic-shapes dataset plus file formats and
//! CLI (`data`, `cli`).

pub mod analysis;
pub mod base_tokenizer;
pub mod check;
pub mod cli;
pub mod data;
pub mod distill;
pub mod error;
pub mod nn;
pub mod optim;
pub mod quantizer;
pub mod rng;
pub mod rollout;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
