//! The toy latent-diffusion backbone.

pub mod attention;
pub mod latent;
pub mod sampler;
pub mod schedule;
pub mod text;
pub mod unet;

pub use attention::{AttentionHook, AttentionMap, AttentionState, AttnCtl, BlockId, Origin};
pub use sampler::{sample, Model, SampleOutput, SamplerConfig, StepAttention};
pub use schedule::{cfg_combine, NoiseSchedule};
pub use text::TextPrompt;
pub use unet::{init_backbone, unet_forward, UNetConfig};
