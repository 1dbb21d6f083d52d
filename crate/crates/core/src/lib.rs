//! Data plane, tag-driven scheduler and pipeline simulator for RL post-training.

pub mod dataloader;
pub mod engine;
pub mod events;
pub mod replay;
pub mod rollout;
pub mod runtime;
pub mod scheduler;
pub mod sim;
pub mod trajectory;
pub mod trie;
pub mod types;

pub use types::*;
