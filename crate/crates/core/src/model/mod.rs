//! Two-stream temporal-difference Mamba network.

mod blocks;
mod config;
mod network;
mod profile;

pub use blocks::{channel_attention, flatten_tokens, tdc_forward, unflatten_tokens, TdMambaBlock};
pub use config::ModelConfig;
pub use network::PhysMamba;
pub use profile::{profile_model, LayerCost, Profile};
