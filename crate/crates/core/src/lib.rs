//! Multi-granularity deferred-interaction network (MGDIN) for click-through-rate
//! prediction.
//!
//! Features are embedded, partitioned into groups at several window
//! granularities, and each window runs a stack of attention layers whose
//! score matrices are masked by a top-k schedule derived from layer-0 scores:
//! the strongest group pairs interact first and weaker ones join in deeper
//! layers. Everything numeric is generic over [`Scalar`] (`f32` or `f64`).

pub mod attention;
pub mod error;
pub mod experiment;
pub mod features;
pub mod gradcheck;
pub mod grouping;
pub mod metrics;
pub mod model;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{Gradients, Param, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;

/// Version string written into manifests and checkpoints.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
