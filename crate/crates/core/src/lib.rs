//! Multimodal speech emotion recognition: query-based audio/text fusion,
//! supervised-contrastive + focal training objectives, soft-prompt injection
//! into an autoregressive decoder, a two-stage trainer and an evaluation
//! harness.

pub mod autodiff;
pub mod bridge;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod harness;
mod init;
pub mod losses;
pub mod pipeline;

pub use error::{EmoqError, Result};
