//! Conditional denoisers, low-rank students and the discriminator head.

mod denoiser;
mod discriminator;
mod embed;

pub use denoiser::{layer_rank, lora_scale, Adapter, DenoiserNet, Forward, Linear, NetConfig};
pub use discriminator::{DiscConfig, Discriminator};
pub use embed::{classes, one_hot, time_embedding, Cond};
