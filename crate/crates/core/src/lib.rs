//! Desk-scale vision-language model with cross-attention grounding guidance.
//!
//! A small decoder-only language model receives visual tokens through
//! cross-attention blocks interleaved into selected layers. During training,
//! the cross-attention maps of the query tokens can be pulled towards a
//! ground-truth region with a soft-dice loss.

pub mod analysis;
pub mod attention;
pub mod autograd;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod guidance;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
