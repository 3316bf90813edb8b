#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod corpus;
pub mod discriminator;
pub mod error;
pub mod experiments;
pub mod generator;
pub mod heuristic;
mod io;
pub mod ranker;
pub mod training;

pub use error::{Error, Result};
