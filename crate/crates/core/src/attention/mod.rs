//! Windowed self-attention blocks: window partitioning and shifting,
//! relative position bias, attention masks and the block pair built on them.

pub mod bias;
pub mod block;
pub mod window;

pub use bias::{relative_position_index, RelativePositionBias};
pub use block::{
    AttentionOutput, BlockConfig, BlockTrace, Effn, FeedForward, Ffn, MwaBlock, MwaBlockPair, WindowAttention,
};
pub use window::{cyclic_shift, window_partition, window_reverse, WindowLayout, MASK_VALUE};
