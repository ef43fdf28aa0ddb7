pub mod cli;
pub mod error;
pub mod numerics;
pub mod pipeline;
pub mod sacm;
pub mod vit;

pub use error::{Error, Result};
