//! RGB-D salient object detection: a two-stream encoder with complementary
//! attention over high-level features, adaptive cross-modal fusion, a small
//! reverse-mode autodiff engine to train it, and the standard saliency
//! evaluation metrics.

pub mod afi;
pub mod attention;
pub mod backbone;
pub mod cca;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod params;
pub mod tensor;
pub mod train;

pub use config::{BackboneConfig, Config, ModelConfig, Precision, TrainConfig};
pub use error::{Error, Result};
pub use params::{Init, Param, ParamId, ParamStore};
pub use tensor::{Float, Grads, Tape, Tensor, Var};
