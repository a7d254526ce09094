//! Attribute-conditioned prompt learning on frozen synthetic dual encoders.
//!
//! The crate is layered bottom-up: [`tensor`] provides reverse-mode
//! autodiff, [`data`] and [`augment`] produce images and their views,
//! [`encoders`] holds the frozen image/text maps, [`prompt`] and [`losses`]
//! hold the learnable state and objectives, and [`train`] / [`eval`] drive
//! experiments end to end.

pub mod augment;
pub mod data;
pub mod encoders;
pub mod prompt;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
