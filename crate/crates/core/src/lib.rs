//! Lossless point cloud geometry codec combining a frozen pretrained prior
//! network with a per-group overfitted refiner.

pub mod assets;
pub mod autodiff;
pub mod bitstream;
pub mod codec;
pub mod coder;
pub mod dar;
pub mod kdtree;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod octree;
pub mod optim;
pub mod ply;
pub mod ppn;
pub mod pretrained;
pub mod smc;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
