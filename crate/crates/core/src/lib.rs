//! Parallel latent reasoning for sequential recommendation.

pub mod data;
pub mod error;
pub mod model;
pub mod objectives;
pub mod tensor;
pub mod theory;
pub mod train;

pub use error::{PlrError, Result};

/// Sub-stream identifiers split off the root seed.
pub mod streams {
    pub const DATA: u64 = 0;
    pub const INIT: u64 = 1;
    pub const DROPOUT_VIEW1: u64 = 2;
    pub const DROPOUT_VIEW2: u64 = 3;
    pub const PERTURB: u64 = 4;
}
