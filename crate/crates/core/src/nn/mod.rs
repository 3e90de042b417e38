//! Minimal neural-network toolkit on top of candle tensors.

pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;
pub mod resnet;

pub use layers::Mode;
pub use params::{Init, ParamStore, Scope};
