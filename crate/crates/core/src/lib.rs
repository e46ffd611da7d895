// NaN-rejecting guards are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dwimath;
pub mod encoder;
pub mod error;
pub mod evalmod;
pub mod fixel;
pub mod geom;
pub mod learn;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod tracker;
pub mod vmf;
pub mod volume;

pub use error::{Error, Result};
