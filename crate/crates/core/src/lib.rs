//! Cross-modal supervision transfer for planar parallel-jaw grasping on
//! synthetic tabletop scenes.

pub mod augment;
pub mod error;
pub mod render;
pub mod scene;
pub mod teacher;
pub mod volume;
pub mod execute;
pub mod net;
pub mod dataset;
pub mod netpbm;
pub mod train;
pub mod fusion;
pub mod eval;
pub mod pipeline;
