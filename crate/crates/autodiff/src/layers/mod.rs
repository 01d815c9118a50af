//! Parameterized building blocks shared by the forecasters.

mod attention;
mod decompose;
mod encoding;
mod linear;
mod lstm;

pub use attention::{causal_mask, scaled_dot_attention, MultiHeadAttention};
pub use decompose::series_decompose;
pub use encoding::{calendar_components, sinusoid_table, TimestampEncoding};
pub use linear::{FeedForward, LayerNorm, Linear};
pub use lstm::{LstmCell, LstmState};
