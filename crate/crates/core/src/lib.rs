pub mod align;
pub mod bridge;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod numerics;
pub mod skeldata;
pub mod tokenizer;
pub mod unify;

pub use error::{Error, Result};
