//! Transformer recommender over encoded command sequences.
//!
//! A small tape-based autodiff engine ([`graph`]) carries the whole network,
//! so every preset trains and gradient-checks in 64-bit on a CPU.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod lora;
pub mod network;
pub mod params;
pub mod tensor;
pub mod train;
pub mod verify;

pub use config::{BackboneConfig, Directionality, FfnActivation, FfnKind, NormKind, NormPlacement, PosEncoding, Preset};
pub use error::{ModelError, Result};
pub use graph::{Activation, AttentionSpec, Graph, Var};
pub use lora::{inject_lora, LoraSpec, LoraTarget};
pub use network::{Forward, ForwardOptions, Head, Model, Routing};
pub use params::{init_params, ParamStore};
pub use tensor::Tensor;
pub use eval::{evaluate, top_k, RankedPrediction};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use train::{train, EpochRecord, Optimizer, RunDir, TrainConfig, TrainData};
