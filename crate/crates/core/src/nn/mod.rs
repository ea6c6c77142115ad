//! Tape-based autodiff, parameter storage, layers and the optimizer.

pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

pub use optim::AdamW;
pub use params::{Graph, Param, ParamStore};
pub use tape::{Arr, Tape, Var};
