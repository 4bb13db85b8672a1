//! Multi-modal controllable diffusion at desk scale: a reverse-mode
//! autodiff engine, a toy latent U-Net, a control branch with controllable
//! normalization, spatial attention guidance, procedural data and metrics.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod controlnorm;
mod error;
pub mod gcontrolnet;
pub mod guidance;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod rng;
pub mod synthdata;
pub mod tensor;

pub use backbone::{AttentionState, BlockId, Model, NoiseSchedule, SamplerConfig, TextPrompt, UNetConfig};
pub use error::{Error, Result};
pub use gcontrolnet::{ControlFeatures, GControlConfig, ModalityBundle, ModalityKind};
pub use guidance::{GuidanceConfig, RegionSpec};
pub use metrics::EvalReport;
pub use params::ParamStore;
pub use tensor::Tensor;

/// Stabilizer added to variances before the square root.
pub const EPS_STD: f64 = 1e-5;
