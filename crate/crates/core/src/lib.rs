//! Low-resource multimodal dialogue response generation.
//!
//! A textual dialogue generator emits text and `[DST]`-delimited image
//! descriptions; a text-to-image translator turns each description into
//! discrete image tokens, which a vector-quantized codec decodes to pixels.

pub mod agent;
pub mod checkpoint;
pub mod classifier;
pub mod codec;
pub mod data;
pub mod error;
pub mod eval;
pub mod generator;
pub mod image;
pub mod optim;
pub mod pipeline;
pub mod scorer;
pub mod seq;
pub mod tensor;
pub mod tokenizer;
pub mod translator;

pub use error::{Error, Result};
