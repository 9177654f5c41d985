//! Dense tensors with a reverse-mode autodiff tape, Adam, and a
//! finite-difference gradient checker.

mod adam;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use adam::{AdamHyper, AdamState};
pub use graph::{BatchStats, Gradients, Graph, Var, BATCH_NORM_EPS, LAYER_NORM_EPS};
pub use params::ParamStore;
pub use tensor::Tensor;

pub(crate) use graph::softmax_in_place;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else
/// `1/(1−rate)`.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

/// Identity in eval mode or at rate 0.
pub fn dropout(g: &mut Graph, x: Var, rate: f64, mode: Mode, rng: &mut Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidConfig(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let mask = dropout_mask(g.value(x).len(), rate, rng);
    g.mul_const(x, mask)
}

/// Momentum used for batch-norm running statistics.
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

#[cfg(test)]
mod tests;
