//! Retrieval-augmented survey answering: summarize respondents' values and
//! demographics, retrieve demographically similar individuals, and prompt a
//! model with their values to answer as a target person.

pub mod backends;
pub mod corpus;
pub mod eval;
pub mod index;
pub mod prompt;
pub mod summarize;
pub mod synth;
pub mod util;
