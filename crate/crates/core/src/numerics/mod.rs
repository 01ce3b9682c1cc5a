//! Dense tensor arithmetic and reverse-mode differentiation.
//!
//! Everything trainable in this crate runs on [`Tape`]: the forward pass
//! records primitive ops, `backward` replays them in reverse and accumulates
//! parameter adjoints into a [`ParamStore`]. Element precision is generic:
//! `f32` for the normal pipeline, `f64` for verification (gradient checks,
//! exactness tests).

pub mod adam;
pub mod params;
pub mod real;
pub mod tape;
pub mod tensor;

pub use adam::Adam;
pub use params::{Init, ParamStore};
pub use real::Real;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
