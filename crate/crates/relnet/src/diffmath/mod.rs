//! Minimal dense-array math with reverse-mode differentiation and Adam.
//!
//! Everything trains in `f32`; the same code instantiates in `f64` for
//! finite-difference gradient checks. No broadcasting beyond the row-vector
//! bias case, no views, no acceleration — just enough to train the networks
//! in this crate deterministically.

pub mod adam;
pub mod array;
pub mod check;
pub mod nn;
pub mod params;
pub mod tape;

pub use adam::{clip_global_norm, AdamState};
pub use array::{Array, Scalar};
pub use check::{check_gradients, GradCheckReport};
pub use nn::{Linear, Mlp};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Tape, Var};
