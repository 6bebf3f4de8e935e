//! The four model families (U-Net, SegNet, residual U-Net, stacked ensemble)
//! assembled from tensor primitives.

mod arch;
mod model;
mod params;

pub use arch::{Architecture, ConvBlock, EnsembleConfig, Family, ResUNetConfig, Scope};
pub use model::{Model, ResidualBlock};
pub use params::{glob_match, Init, ParamSpec, ParamStore};
