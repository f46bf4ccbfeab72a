//! Decoder-only GQA transformer: RMSNorm, grouped-query attention with
//! rotary positions, SwiGLU MLP, residual connections.

pub mod checkpoint;
mod config;
mod forward;
mod params;
mod rope;

pub use config::{kv_head_of, ModelConfig};
pub use forward::{forward, Dropout, ForwardOptions, ForwardTrace, Model, TapeTrace, RMS_EPS};
pub use params::{LayerParams, ModelParams, Projection};
pub use rope::apply_rope;
