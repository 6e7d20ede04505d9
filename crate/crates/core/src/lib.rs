//! Multi-instance symbolic regression of ODE systems.

pub mod autograd;
pub mod baseline;
pub mod corpus;
pub mod datagen;
pub mod eval;
pub mod exec;
pub mod exprtree;
pub mod infer;
pub mod integrate;
pub mod model;
pub mod report;
pub mod tokenizer;
pub mod train;
