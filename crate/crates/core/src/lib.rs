//! Search-enhanced sequential recommendation with latent cross reasoning.

pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod harness;
pub mod head;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod reasoner;
pub mod rl;

pub use error::{Error, Result};
