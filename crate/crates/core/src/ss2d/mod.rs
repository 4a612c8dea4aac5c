//! Four-directional selective scanning over feature maps and the VSS block.

mod block;
mod scan2d;

pub use block::{VssBlock, VSS_CONV_SIZE};
pub use scan2d::{reroll, unroll, ScanDirection, Ss2dLayer};
