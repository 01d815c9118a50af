//! Reverse-mode differentiation over dense `f64` arrays, plus the layers,
//! losses and optimizer needed by the lobforge forecasters.

pub mod checkpoint;
mod error;
pub mod layers;
mod optim;
mod params;
mod tape;
mod tensor;

pub use error::{NnError, Result};
pub use optim::{clip_global_norm, Adam, AdamConfig};
pub use params::{uniform_fan_in, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
