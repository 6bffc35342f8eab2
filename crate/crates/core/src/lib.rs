pub mod backend;
pub mod corpus;
pub mod eval;
pub mod orchestrator;
pub mod parse;
pub mod prompt;
pub mod vote;
