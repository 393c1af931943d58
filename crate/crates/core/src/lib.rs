//! Memory-bounded KV caching for block-wise autoregressive video generation.
//!
//! Past blocks live in three partitions: a full-resolution sink of the first
//! frames, a ring buffer of compressed mid blocks from which a few are
//! attended per block, and a full-resolution recent window. Evicting from the
//! mid buffer shifts the sink's temporal rotary phase so relative positions
//! stay contiguous.

pub mod analysis;
pub mod cli;
pub mod codec;
pub mod compressor;
pub mod config;
pub mod error;
pub mod generator;
pub mod kvcache;
pub mod numerics;
pub mod rope;
pub mod selector;
pub mod trace;

pub use error::{Error, Result};
