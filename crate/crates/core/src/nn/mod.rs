//! Minimal layer library with explicit forward/backward passes.
//!
//! Parameters live in a single flat [`ParamStore`]; layers only record the
//! ranges they own. Every backward pass *accumulates* into a gradient slice
//! of the same length as the store, so several losses can share one buffer.

mod adam;
mod layers;
mod lstm;
mod params;
mod resnet;
mod tensor;

pub use adam::{Adam, StepDecay};
pub use layers::{
    avg_pool, avg_pool_backward, global_avg_pool, global_avg_pool_backward, max_pool, max_pool_backward, relu,
    relu_backward, softmax, softmax_backward, Conv2d, Linear, PoolIndex,
};
pub use lstm::{Lstm, LstmCache, LstmState};
pub use params::{Init, ParamBuilder, ParamStore};
pub use resnet::{ResNet, ResNetCache};
pub use tensor::Tensor;

use crate::scalar::Scalar;

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}
