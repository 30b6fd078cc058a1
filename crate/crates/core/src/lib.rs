pub mod autodiff;
pub mod boxes;
pub mod cli;
pub mod detect;
mod error;
pub mod eval;
pub mod hsi;
mod kv;
pub mod nn;
pub mod sacm;
pub mod ssam;
pub mod trainer;

pub use error::{Result, SfaError};
pub use kv::KvError;
