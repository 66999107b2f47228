//! Minimal dense tensors with tape-based reverse-mode differentiation.
//!
//! Every tensor is row-major. Most operators treat their operands as 2-D
//! `[rows, cols]` matrices where `cols` is the last extent; that is enough for
//! transformer-style models operating on packed token sequences.
//!
//! A [`Graph`] records operations eagerly. Calling [`Graph::backward`] on a
//! scalar walks the tape in reverse and returns [`Gradients`] for every node
//! that depends on a parameter. Parameters live in a [`ParamSet`] and are
//! updated by [`AdamW`]; [`ema_update`] maintains an exponential moving
//! average copy.

mod error;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use error::{NumericsError, Result};
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use optim::{ema_update, AdamW, AdamWConfig, StepReport};
pub use params::{Param, ParamId, ParamSet};
pub use scalar::Scalar;
pub use tensor::Tensor;
