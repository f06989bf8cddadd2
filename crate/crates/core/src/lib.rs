pub mod corpus;
pub mod dataset;
pub mod digest;
pub mod gateway;
pub mod index;
pub mod parse;
pub mod prompts;
pub mod retrieval;
pub mod pipeline;
pub mod evaluation;
pub mod config;
pub mod workflow;
