pub mod corpus;
pub mod dataset;
pub mod editors;
pub mod error;
pub mod eval;
pub mod model;
pub mod targets;
pub mod tensor;
pub mod unlearners;

pub use error::{Error, Result};
