//! Stage assembly, the two-image forward pass and weight persistence.

mod config;
mod io;
mod net;

pub use config::{HeadKind, ModelConfig, PatchConfig, Preset, StageConfig};
pub use io::{read_tensors, sidecar_path, write_tensors, LoadReport, MAGIC, VERSION};
pub use net::{build_model, depthwise_xcorr, Heads, Model, Prediction, StageWeights, Step, TemplateCache, Trace};

#[cfg(test)]
mod tests;
