pub mod composition;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod harness;
pub mod inference;
pub mod model;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
