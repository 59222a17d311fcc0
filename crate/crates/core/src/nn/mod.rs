//! Layers built on the tensor tape.

mod conv;
mod dense;
mod params;
mod pool;

pub use conv::{conv3d, conv_transpose3d, ConvSpec};
pub use dense::dense;
pub use params::{init_params, Param, ParamSet, ParamSpec};
pub use pool::{pool3d, PoolKind};
