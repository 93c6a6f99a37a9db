//! Differentiable dense-array substrate: the handful of layer ops the
//! encoder, decoder and context network need, plus reverse-mode gradients.

mod gradcheck;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use params::{BufferStore, ParamStore};
pub use tape::{
    Activation, Grads, Mode, ParamVars, Tape, Var, BN_EPS, BN_MOMENTUM, ELU_ALPHA,
};
pub use tensor::Tensor;

use crate::error::Result;

/// Runs the reverse sweep from `loss` and accumulates every bound parameter's
/// gradient into the matching store.
pub fn backward(tape: &Tape, loss: Var, stores: &mut [&mut ParamStore]) -> Result<Grads> {
    let grads = tape.backward(loss)?;
    for store in stores.iter_mut() {
        grads.accumulate_into(tape, store)?;
    }
    Ok(grads)
}
