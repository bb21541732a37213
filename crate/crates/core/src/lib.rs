pub mod checkpoint;
pub mod config;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod metatrain;
pub mod model;
pub mod synth;

pub use error::{Error, Result};
