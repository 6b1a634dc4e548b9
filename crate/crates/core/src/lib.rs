//! Online meta-learned LoRA adapters for continual imitation learning.

pub mod adapters;
pub mod continual;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metabatch;
pub mod metalearn;
pub mod optim;
pub mod policy;
pub mod seeding;
pub mod taskworld;
pub mod train;

pub use error::{CoreError, Result};
