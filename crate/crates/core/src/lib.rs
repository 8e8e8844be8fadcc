//! Interactive reflective dialogue alignment: elicit an individual's value
//! concept through critique, hypothesis and active-learning turns, then serve
//! a language-model-backed binary reward over agent trajectories.

pub mod alignment;
pub mod applefarm;
pub mod error;
pub mod featurize;
pub mod llm;
pub mod mlp;
pub mod moralmachine;
pub mod oracle;
pub mod reward;
pub mod sampling;
pub mod session;
pub mod stats;
pub mod stimulus;
pub mod study;

pub use error::{Error, Result};
