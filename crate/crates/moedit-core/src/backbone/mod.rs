//! The tiny frozen decoder-only transformer that hosts the editing
//! adaptor: word-level tokenizer, embedding + pre-norm attention/FFN
//! blocks + LM head, a forward pass with an optional per-token hook at
//! the host layer's FFN sublayer, an activation-gradient backward pass
//! through the frozen upper blocks, and a pretraining routine that ends
//! by freezing every parameter.

mod backward;
mod model;
mod pretrain;
mod tokenizer;

pub use backward::{
    ffn_backward_input, host_ffn_forward, FullTrace, LayerGrads, ModelGrads, UpperTrace,
};
pub use model::{
    checksum_tensors, ffn_forward, BackboneConfig, BackboneModel, FfnRef, ForwardPass, Layer,
    LowerState, Norm,
};
pub use pretrain::{pretrain, PretrainReport, PretrainSpec};
pub use tokenizer::{Tokenizer, BOS, EOS, PAD, UNK};

use alloc::string::String;

use crate::numerics::NumericsError;

/// Errors from the backbone.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackboneError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("invalid config: {0}")]
    Config(String),
}
