//! Grammar-constrained, network-guided Monte-Carlo tree search for
//! synthesizing machine-learning pipelines.

pub mod checkpoint;
pub mod evaluator;
pub mod experiments;
pub mod game;
pub mod grammar;
pub mod hashing;
pub mod mcts;
pub mod metafeatures;
pub mod network;
pub mod task;
pub mod trainer;
