//! Patch tokenization and the three multi-head attention mechanisms.

mod block;
mod config;
mod longformer;
mod mhsa;
mod patch;

pub use block::{EvitBlock, EvitBranch};
pub use config::{AttentionConfig, EvitBlockSpec, Mechanism};
pub use longformer::NeighborPattern;
pub use mhsa::{AttnProbs, Mhsa};
pub use patch::{map_to_tokens, tokens_to_map, PatchEmbed};
