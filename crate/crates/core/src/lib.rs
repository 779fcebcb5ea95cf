//! Goal-conditioned visual navigation with hard feature selection and
//! early-exit decoding.

pub mod cost;
pub mod bo;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod exit;
pub mod image;
pub mod model;
pub mod navsim;
pub mod selector;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
