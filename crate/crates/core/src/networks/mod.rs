//! Trainable components and the composed forward pass.

mod config;
pub mod layers;
mod model;
pub mod tem;
pub mod unet;

pub use config::{AblationFlags, AttentionScale, NetConfig};
pub use layers::{update_running_stats, Ctx};
pub use model::{ForwardOut, Model, FUSED_HEAD_STD};
