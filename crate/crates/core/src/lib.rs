pub mod agent;
pub mod baselines;
pub mod catalog;
pub mod config;
pub mod embedding;
pub mod engine;
pub mod eval;
pub mod orchestrator;
pub mod ranking;
pub mod synth;
pub mod text;
pub mod tools;
pub mod transport;
