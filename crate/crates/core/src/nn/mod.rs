//! Parameter storage, forward contexts and the basic layers built on them.

mod layers;
mod params;

pub use layers::{pooled_dims, Conv1x1, Conv2d, DwConv, LayerNorm, Linear, MultiHeadAttention};
pub use params::{Ctx, Init, ParamId, ParamStore};
