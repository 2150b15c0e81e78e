//! The transformer that renders colour and features from source views.

mod checkpoint;
mod composite;
mod config;
mod network;
mod params;
mod render;
#[cfg(test)]
mod tests;

pub use checkpoint::{
    read_checkpoint, write_checkpoint, Checkpoint, OptimizerState, Stage, CHECKPOINT_VERSION,
};
pub use composite::{composite, Composite};
pub use config::{positional_encoding, ModelConfig, Readout};
pub use network::{
    forward, Depths, Diagnostics, DirectionInput, Model, Outputs, Prediction, RayBatch, SourceSet,
};
pub use params::{Binding, Params, FEATURE_PREFIX};
pub use render::{render_view, RenderRequest, Rendered};
