//! Single-branch transformer tracking: a small autodiff tensor engine, the
//! Extract-or-Correlation (EoC) blocks, model assembly and persistence,
//! correlation oracles, training losses and a synthetic tracking harness.

pub mod blocks;
pub mod error;
pub mod gradsuite;
pub mod harness;
pub mod model;
pub mod oracles;
pub mod tensor;
pub mod training;

pub use error::{Result, SbtError};
pub use model::{build_model, Model, ModelConfig, Prediction};
pub use tensor::{Float, Graph, PadKind, PadMode, ParamId, ParamStore, Tensor, Var};
