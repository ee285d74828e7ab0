//! Time-domain speech separation with an asymmetric encoder/decoder
//! separator built from global and local Transformer blocks.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod blocks;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod evaluation;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod mixtures;
pub mod objectives;
pub mod params;
pub mod separator;
pub mod tensor;
pub mod training;

pub use error::{Error, ErrorKind, Result};
