//! Reverse-mode differentiation, parameter storage and the Adam optimizer.

mod adam;
pub mod fd;
mod nn;
mod params;
mod tape;

pub use adam::{adam_step, exp_decay_lr, AdamConfig, OptimError};
pub use nn::{Mlp, MlpShape, LEAKY_SLOPE};
pub use params::{GroupId, ParamEntry, ParamId, ParamStore};
pub use tape::{CustomOp, Mat, Tape, TapeError, Var};

#[cfg(test)]
mod tests;
