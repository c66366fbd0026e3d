pub mod backbone;
pub mod cvf;
pub mod data;
mod error;
pub mod eval;
pub mod fsa;
pub mod meta;
pub mod model;
pub mod norm;

pub use error::{FaceError, Result};
