pub mod act;
pub mod attention;
pub mod linear;
pub mod norm;
pub mod spatial;

pub use attention::{AttnCache, Attention, Block, BlockCache};
pub use linear::Linear;
pub use norm::{LayerNorm, LnCache};
pub use spatial::{ConvTranspose2x2, Conv1x1, Conv3x3};
