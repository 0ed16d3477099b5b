pub mod cell;
pub mod config;
pub mod eval;
pub mod executor;
pub mod fst;
pub mod llm;
pub mod notebook;
pub mod orchestrator;
pub mod prompts;
pub mod replay;
pub mod service;
pub mod toolkit;
pub mod trajectory;
pub mod transcript;
