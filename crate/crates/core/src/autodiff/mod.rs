//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Values live on a [`Tape`]; operations are methods on the tape and return
//! [`Var`] handles. Parameters are kept in a [`ParamStore`] between steps and
//! bound onto a fresh tape for each forward pass.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use params::{Bound, ParamStore, CHECKPOINT_VERSION};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Single-head scaled dot-product attention: `softmax(q·kᵀ/√d)·v`.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let d = tape.shape(q)[1] as f64;
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, 1.0 / d.sqrt());
    let weights = tape.softmax(scores, 1)?;
    tape.matmul(weights, v)
}
