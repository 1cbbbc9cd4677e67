//! Minimal dense-tensor neural-network substrate.
//!
//! Layers follow a split-phase convention: `forward` is `&self` (safe to run
//! concurrently over disjoint inputs) and returns the activation plus a
//! per-call cache; `backward` takes `&mut self`, consumes the cache and the
//! upstream gradient, accumulates parameter gradients in place and returns
//! the gradient with respect to the layer input. All math is `f64`.

mod conv;
mod linear;
pub mod ops;
mod optim;
mod param;

pub use conv::{Conv2d, Conv2dCache};
pub use linear::Linear;
pub use optim::SgdMomentum;
pub use param::Param;
