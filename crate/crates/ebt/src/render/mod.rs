//! Frame representation and the mouth-region completion pipeline:
//! heatmaps, masking, the completion network, soft masks, and
//! gradient-domain blending.

pub mod compose;
pub mod frame;
pub mod poisson;
pub mod raster;
pub mod unet;

pub use frame::FrameBuffer;
