//! Language-specific neuron analysis and layer-selective fine-tuning for
//! gated-FFN decoders.
//!
//! The crate is organised as a pipeline:
//!
//! - [`corpus`] builds a synthetic multilingual, multimodal corpus with
//!   known translation ground truth.
//! - [`model`] is a small decoder with pseudo-vision tokens and gated FFNs,
//!   built on the [`autodiff`] tape.
//! - [`trace`] stores per-sample activation masks in the PLTR format.
//! - [`stats`] turns traces into activation ratios and English overlap.
//! - [`selection`] finds the language-specific layers and selects those
//!   whose cross-language MSD exceeds the mean.
//! - [`trainer`] fine-tunes only the selected layers on question translation.
//! - [`lens`] emits logit-lens grids and attention-to-vision mass.

pub mod activation;
pub mod autodiff;
pub mod bitset;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod lens;
pub mod model;
pub mod selection;
pub mod stats;
pub mod tensor;
pub mod trace;
pub mod trainer;

pub use activation::Activation;
pub use autodiff::{Gradients, Graph, ParamGrads, ParamId, ParamNode, ParamStore, Var};
pub use bitset::NeuronMask;
pub use corpus::{Corpus, SyntheticSpec, Tokenizer};
pub use error::{Error, Result};
pub use model::{ForwardCapture, ModelConfig, ToyLvlm};
pub use selection::LayerSelection;
pub use stats::StatsReport;
pub use trace::TraceFile;
pub use trainer::{TrainConfig, TranslationPair};
pub use tensor::Tensor;
