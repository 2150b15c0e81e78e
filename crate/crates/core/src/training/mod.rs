//! Two-stage optimization: photometric training, then feature distillation.

mod adam;
mod config;
mod eval;
mod gradcheck;
mod log;
mod objective;
mod stages;
#[cfg(test)]
mod tests;

pub use adam::Adam;
pub use config::{AdamConfig, Profile, TrainConfig};
pub use eval::{evaluate_view, psnr, ViewMetrics, RENDER_CHUNK};
pub use gradcheck::{
    finite_difference_check, gradient_check, pick_coordinates, relative_error, GradCheckReport,
    GradEntry,
};
pub use log::{LogRecord, TrainLog};
pub use objective::{loss_feat, loss_rgb, objective, LossParts, Targets, Weights};
pub use stages::{train_stage1, train_stage2, HeldOut, Hooks};
