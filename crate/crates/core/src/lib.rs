//! Whole-word-mask language-model pretraining, FGM adversarial training and a
//! transformer + BiLSTM sentiment classifier, built on a small reverse-mode
//! autodiff engine over `f64` tensors.

pub mod adversarial;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
