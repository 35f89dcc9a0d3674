pub mod cli;
pub mod data;
pub mod estimators;
pub mod error;
pub mod glm;
pub mod linalg;
pub mod inference;
pub mod pipeline;
pub mod seeding;
pub mod simgen;
pub mod survival;

pub use error::{Error, Result};
