//! Dense matrices, seeded randomness, and the reverse-mode tape.

mod matrix;
pub mod rng;
mod tape;

pub use matrix::{standard_normal, Matrix};
pub use rng::seeded_rng;
pub use tape::{log_sum_exp, Tape, ValueId};
