//! Generalizable feature radiance fields.
//!
//! A transformer renders colour and distilled semantic features for novel
//! views of unseen scenes from a handful of posed source images. Per-sample
//! tokens are aggregated across source views along epipolar lines (view
//! transformer) and then along the query ray (ray transformer). The backbone
//! never sees a viewing direction; that signal only enters the colour head,
//! so rendered features are view-independent by construction. Rendered
//! features drive stroke-based multi-view segmentation.

pub mod autodiff;
pub mod error;
pub mod features;
pub mod geometry;
pub mod model;
pub mod scene;
pub mod segmentation;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use features::{FeatureImage, PcaModel, Provenance};
pub use geometry::{Camera, Ray, RaySamples};
pub use scene::{PosedImage, Scene, SceneSpec};
pub use tensor::Tensor;
