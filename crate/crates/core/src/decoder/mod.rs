//! Token-level side of the pipeline: tokenizer, decoder contract, toy
//! decoder, standalone LoRA layer and greedy generation.

pub mod generate;
pub mod lora;
pub mod model;
pub mod tokenizer;

pub use generate::greedy;
pub use lora::LoraLayer;
pub use model::{decode_forward, fuse, fuse_tensors, Decoder, ToyDecoder, ToyDecoderConfig};
pub use tokenizer::Tokenizer;
