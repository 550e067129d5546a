//! Next-item recommendation with a causal self-attention encoder,
//! bidirectional pre-training, pseudo-prior augmentation of short sequences
//! and self-distillation fine-tuning.

pub mod augment;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod io;
pub mod markov;
pub mod numerics;
pub mod pipeline;
pub mod pretrain;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

/// Code blocks in the guide under `book/src`, compiled and run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/numerics.md")]
    mod numerics {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/encoder.md")]
    mod encoder {}
    #[doc = include_str!("../../../book/src/pretraining.md")]
    mod pretraining {}
    #[doc = include_str!("../../../book/src/augmentation.md")]
    mod augmentation {}
    #[doc = include_str!("../../../book/src/finetuning.md")]
    mod finetuning {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/markov-oracle.md")]
    mod markov_oracle {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
