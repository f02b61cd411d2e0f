pub mod container;
pub mod error;
pub mod eval;
pub mod fisher;
pub mod model;
pub mod pipeline;
pub mod prefix;
pub mod tasks;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
