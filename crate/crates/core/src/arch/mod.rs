//! The U-shaped Serpent network, its configuration, accounting and checkpoints.

mod checkpoint;
mod config;
mod flops;
mod model;
mod patch;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{SerpentConfig, Variant};
pub use flops::{attention_flops, count_flops, FlopsReport};
pub use model::{count_params, ParamReport, SerpentBlock, SerpentModel};
pub use patch::{depth_to_space, space_to_depth, PatchEmbed, PatchExpand, PatchHead, PatchMerge};
