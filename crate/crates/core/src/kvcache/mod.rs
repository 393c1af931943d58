//! Three-partition per-layer KV cache.
//!
//! * **sink**: the first `N_sink / B_f` blocks at full resolution, never
//!   evicted. Their keys are the only bytes rotated on eviction.
//! * **mid**: compressed entries in block order, bounded by `mid_capacity`.
//!   Overflow evicts the oldest entries and shifts the sink keys forward by
//!   the evicted frame count, so sink positions stay contiguous with the
//!   earliest surviving mid entry.
//! * **recent**: the last `N_recent / B_f` blocks at full resolution, each
//!   paired with a compressed backup computed when the block was produced.
//!   When a block ages out its full KV is dropped and the backup moves to mid.
//!
//! Block indices are 1-based; block `b` covers frames `(b-1)·B_f .. b·B_f`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::compressor::{compressed_tokens, CompressedEntry};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rope::{temporal_shift_in_place, RopeConfig};

/// Keys and values of one layer, both `N × N_h × d_h`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv {
    pub keys: Tensor,
    pub values: Tensor,
}

impl LayerKv {
    pub fn tokens(&self) -> usize {
        self.keys.dim(0)
    }
}

/// Full-resolution KV of one block across all layers.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockKv {
    pub block_index: usize,
    pub layers: Vec<LayerKv>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CacheConfig {
    pub sink_frames: usize,
    pub recent_frames: usize,
    pub frames_per_block: usize,
    /// Mid blocks attended per step.
    pub n_top: usize,
    /// Mid blocks stored.
    pub mid_capacity: usize,
    /// Mid blocks evicted per overflow event.
    pub evict_blocks: usize,
    /// `n`, tokens in a full-resolution block.
    pub tokens_per_block: usize,
    /// `N_c`, tokens in a compressed block.
    pub compressed_tokens: usize,
    pub layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            sink_frames: 8,
            recent_frames: 4,
            frames_per_block: 4,
            n_top: 16,
            mid_capacity: 64,
            evict_blocks: 1,
            tokens_per_block: 192,
            compressed_tokens: 4,
            layers: 2,
            n_heads: 4,
            head_dim: 16,
        }
    }
}

impl CacheConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("cache.frames_per_block", self.frames_per_block),
            ("cache.n_top", self.n_top),
            ("cache.mid_capacity", self.mid_capacity),
            ("cache.evict_blocks", self.evict_blocks),
            ("cache.tokens_per_block", self.tokens_per_block),
            ("cache.compressed_tokens", self.compressed_tokens),
            ("cache.layers", self.layers),
            ("cache.n_heads", self.n_heads),
            ("cache.head_dim", self.head_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if !self.sink_frames.is_multiple_of(self.frames_per_block) {
            return Err(Error::config(
                "cache.sink_frames",
                format!("{} is not divisible by frames_per_block {}", self.sink_frames, self.frames_per_block),
            ));
        }
        if !self.recent_frames.is_multiple_of(self.frames_per_block) {
            return Err(Error::config(
                "cache.recent_frames",
                format!("{} is not divisible by frames_per_block {}", self.recent_frames, self.frames_per_block),
            ));
        }
        if self.n_top > self.mid_capacity {
            return Err(Error::config(
                "cache.n_top",
                format!("{} exceeds mid_capacity {}", self.n_top, self.mid_capacity),
            ));
        }
        if self.evict_blocks > self.mid_capacity + 1 - self.n_top {
            return Err(Error::config(
                "cache.evict_blocks",
                format!(
                    "evicting {} blocks would drop mid below n_top {} (capacity {})",
                    self.evict_blocks, self.n_top, self.mid_capacity
                ),
            ));
        }
        Ok(())
    }

    pub fn sink_blocks(&self) -> usize {
        self.sink_frames / self.frames_per_block
    }

    pub fn recent_blocks(&self) -> usize {
        self.recent_frames / self.frames_per_block
    }

    /// Tokens in an assembled context with `selected` mid blocks, including
    /// the block being generated.
    pub fn context_tokens(&self, sink: usize, selected: usize, recent: usize) -> usize {
        sink * self.tokens_per_block + selected * self.compressed_tokens + (recent + 1) * self.tokens_per_block
    }

    /// Context size once every partition is at steady state.
    pub fn steady_context_tokens(&self) -> usize {
        self.context_tokens(self.sink_blocks(), self.n_top, self.recent_blocks())
    }

    /// First block whose context has the steady-state size.
    pub fn first_steady_block(&self) -> usize {
        self.sink_blocks() + self.recent_blocks() + self.n_top + 1
    }

    /// KV bytes per token across all layers.
    pub fn bytes_per_token(&self, bytes_per_scalar: usize) -> u64 {
        (self.layers * 2 * self.n_heads * self.head_dim * bytes_per_scalar) as u64
    }
}

/// What happened during one [`PartitionedCache::evict_mid`] call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvictionEvent {
    pub evicted_blocks: Vec<usize>,
    /// Frames the sink keys were shifted by.
    pub delta_frames: usize,
    /// Pair rotations applied to sink keys.
    pub rotations: u64,
}

#[derive(Debug, Clone)]
pub struct PartitionedCache {
    cfg: CacheConfig,
    rope: RopeConfig,
    sink: Vec<BlockKv>,
    mid: VecDeque<CompressedEntry>,
    recent: VecDeque<(BlockKv, CompressedEntry)>,
    evicted_frames: usize,
    last_block: usize,
    eviction_events: usize,
    rotations: u64,
}

impl PartitionedCache {
    pub fn new(cfg: CacheConfig, rope: RopeConfig) -> Result<Self> {
        cfg.validate()?;
        if rope.head_dim() != cfg.head_dim {
            return Err(Error::config(
                "cache.head_dim",
                format!("{} does not match rope head_dim {}", cfg.head_dim, rope.head_dim()),
            ));
        }
        Ok(Self {
            cfg,
            rope,
            sink: Vec::new(),
            mid: VecDeque::new(),
            recent: VecDeque::new(),
            evicted_frames: 0,
            last_block: 0,
            eviction_events: 0,
            rotations: 0,
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.cfg
    }

    pub fn rope(&self) -> &RopeConfig {
        &self.rope
    }

    /// Cumulative frames evicted from mid (the running sink shift).
    pub fn evicted_frames(&self) -> usize {
        self.evicted_frames
    }

    pub fn eviction_events(&self) -> usize {
        self.eviction_events
    }

    /// Total pair rotations spent on sink correction so far.
    pub fn correction_rotations(&self) -> u64 {
        self.rotations
    }

    pub fn last_block(&self) -> usize {
        self.last_block
    }

    pub fn sink(&self) -> &[BlockKv] {
        &self.sink
    }

    pub fn mid(&self) -> impl ExactSizeIterator<Item = &CompressedEntry> {
        self.mid.iter()
    }

    pub fn sink_indices(&self) -> Vec<usize> {
        self.sink.iter().map(|b| b.block_index).collect()
    }

    pub fn mid_indices(&self) -> Vec<usize> {
        self.mid.iter().map(|e| e.block_index).collect()
    }

    pub fn recent_indices(&self) -> Vec<usize> {
        self.recent.iter().map(|(b, _)| b.block_index).collect()
    }

    pub fn recent(&self) -> impl ExactSizeIterator<Item = &BlockKv> {
        self.recent.iter().map(|(b, _)| b)
    }

    fn check_block(&self, kv: &BlockKv, tokens: usize, what: &str) -> Result<()> {
        if kv.layers.len() != self.cfg.layers {
            return Err(Error::invalid(format!(
                "{what} for block {} has {} layers, cache expects {}",
                kv.block_index,
                kv.layers.len(),
                self.cfg.layers
            )));
        }
        let want = [tokens, self.cfg.n_heads, self.cfg.head_dim];
        for l in &kv.layers {
            if l.keys.shape() != want || l.values.shape() != want {
                return Err(Error::invalid(format!(
                    "{what} for block {}: layer kv shape {:?}/{:?}, expected {want:?}",
                    kv.block_index,
                    l.keys.shape(),
                    l.values.shape()
                )));
            }
        }
        Ok(())
    }

    /// Adds the next block. Sink fills first; afterwards blocks enter the
    /// recent window and the oldest recent block's backup slides into mid.
    /// Returns the eviction event if mid overflowed.
    pub fn append_block(
        &mut self,
        full: BlockKv,
        backup: Option<CompressedEntry>,
    ) -> Result<Option<EvictionEvent>> {
        if full.block_index != self.last_block + 1 {
            return Err(Error::contract(format!(
                "expected block {}, got {}",
                self.last_block + 1,
                full.block_index
            )));
        }
        self.check_block(&full, self.cfg.tokens_per_block, "full kv")?;
        if let Some(b) = &backup {
            if b.block_index != full.block_index {
                return Err(Error::contract(format!(
                    "backup for block {} paired with block {}",
                    b.block_index, full.block_index
                )));
            }
            let as_block = BlockKv {
                block_index: b.block_index,
                layers: b.layers.clone(),
            };
            self.check_block(&as_block, self.cfg.compressed_tokens, "compressed backup")?;
        }

        self.last_block = full.block_index;
        if self.sink.len() < self.cfg.sink_blocks() {
            self.sink.push(full);
            return Ok(None);
        }
        let backup = backup.ok_or_else(|| {
            Error::contract(format!(
                "block {} enters the recent window without a compressed backup",
                full.block_index
            ))
        })?;
        self.recent.push_back((full, backup));
        while self.recent.len() > self.cfg.recent_blocks() {
            let (_, aged) = self.recent.pop_front().expect("non-empty");
            self.mid.push_back(aged);
        }
        if self.mid.len() > self.cfg.mid_capacity {
            let event = self.evict_mid(self.cfg.evict_blocks.min(self.mid.len()))?;
            return Ok(Some(event));
        }
        Ok(None)
    }

    /// Drops the `blocks` oldest mid entries and shifts every sink key
    /// forward by `blocks · B_f` frames.
    pub fn evict_mid(&mut self, blocks: usize) -> Result<EvictionEvent> {
        if blocks > self.mid.len() {
            return Err(Error::invalid(format!(
                "cannot evict {blocks} blocks from a mid partition of {}",
                self.mid.len()
            )));
        }
        let evicted: Vec<usize> = self.mid.drain(..blocks).map(|e| e.block_index).collect();
        let delta = blocks * self.cfg.frames_per_block;
        let mut rotations = 0;
        if delta > 0 {
            for block in &mut self.sink {
                for layer in &mut block.layers {
                    rotations += temporal_shift_in_place(&mut layer.keys, delta, &self.rope)?;
                }
            }
            self.evicted_frames += delta;
            self.eviction_events += 1;
            self.rotations += rotations;
        }
        Ok(EvictionEvent {
            evicted_blocks: evicted,
            delta_frames: delta,
            rotations,
        })
    }

    fn mid_entry(&self, block_index: usize) -> Option<&CompressedEntry> {
        let pos = self
            .mid
            .binary_search_by_key(&block_index, |e| e.block_index)
            .ok()?;
        self.mid.get(pos)
    }

    fn check_selection(&self, selected: &[usize]) -> Result<()> {
        if selected.len() > self.cfg.n_top {
            return Err(Error::invalid(format!(
                "{} mid blocks selected, n_top is {}",
                selected.len(),
                self.cfg.n_top
            )));
        }
        if selected.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!(
                "selected mid blocks {selected:?} are not strictly ascending"
            )));
        }
        if let Some(missing) = selected.iter().find(|&&b| self.mid_entry(b).is_none()) {
            return Err(Error::invalid(format!("block {missing} is not in the mid partition")));
        }
        Ok(())
    }

    /// `sink ∥ selected mid ∥ recent ∥ current` for one layer.
    pub fn assemble_context(&self, selected: &[usize], layer: usize, current: Option<&LayerKv>) -> Result<LayerKv> {
        if layer >= self.cfg.layers {
            return Err(Error::invalid(format!(
                "layer {layer} out of range for {} layers",
                self.cfg.layers
            )));
        }
        self.check_selection(selected)?;
        let mut parts: Vec<&LayerKv> = self.sink.iter().map(|b| &b.layers[layer]).collect();
        parts.extend(
            selected
                .iter()
                .map(|&b| &self.mid_entry(b).expect("checked").layers[layer]),
        );
        parts.extend(self.recent.iter().map(|(b, _)| &b.layers[layer]));
        parts.extend(current);
        if parts.is_empty() {
            return Err(Error::invalid("attention context is empty"));
        }
        let keys: Vec<&Tensor> = parts.iter().map(|p| &p.keys).collect();
        let values: Vec<&Tensor> = parts.iter().map(|p| &p.values).collect();
        Ok(LayerKv {
            keys: Tensor::concat(&keys)?,
            values: Tensor::concat(&values)?,
        })
    }

    /// Token count [`assemble_context`](Self::assemble_context) would produce
    /// with a current block attached.
    pub fn context_tokens(&self, selected: usize) -> usize {
        self.cfg
            .context_tokens(self.sink.len(), selected.min(self.mid.len()), self.recent.len())
    }

    /// Effective first temporal position of each context part, in
    /// concatenation order (sink positions include the running shift).
    pub fn context_frame_starts(&self, selected: &[usize]) -> Result<Vec<usize>> {
        self.check_selection(selected)?;
        let bf = self.cfg.frames_per_block;
        let mut out: Vec<usize> = self
            .sink
            .iter()
            .map(|b| (b.block_index - 1) * bf + self.evicted_frames)
            .collect();
        out.extend(
            selected
                .iter()
                .map(|&b| self.mid_entry(b).expect("checked").positions[0].t),
        );
        out.extend(self.recent.iter().map(|(b, _)| (b.block_index - 1) * bf));
        out.push(self.last_block * bf);
        Ok(out)
    }

    /// Tokens currently stored across all partitions, including recent backups.
    pub fn stored_tokens(&self) -> usize {
        self.sink.len() * self.cfg.tokens_per_block
            + self.mid.len() * self.cfg.compressed_tokens
            + self.recent.len() * (self.cfg.tokens_per_block + self.cfg.compressed_tokens)
    }
}

/// Geometry used for closed-form memory accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryGeometry {
    pub width_px: usize,
    pub height_px: usize,
    pub fps: usize,
    pub temporal_stride: usize,
    pub spatial_stride: usize,
    pub patch: usize,
    pub frames_per_block: usize,
    pub layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub sink_frames: usize,
    pub recent_frames: usize,
    pub n_top: usize,
    pub mid_capacity: usize,
    pub bytes_per_scalar: usize,
}

impl Default for MemoryGeometry {
    /// 832×480 at 16 fps, 30 layers of 12×128 heads, bf16.
    fn default() -> Self {
        Self {
            width_px: 832,
            height_px: 480,
            fps: 16,
            temporal_stride: 4,
            spatial_stride: 8,
            patch: 2,
            frames_per_block: 4,
            layers: 30,
            n_heads: 12,
            head_dim: 128,
            sink_frames: 8,
            recent_frames: 4,
            n_top: 16,
            mid_capacity: 64,
            bytes_per_scalar: 2,
        }
    }
}

impl MemoryGeometry {
    /// Post-patch grid `(h, w)`.
    pub fn grid(&self) -> (usize, usize) {
        let s = self.spatial_stride * self.patch;
        (self.height_px / s, self.width_px / s)
    }

    pub fn tokens_per_block(&self) -> usize {
        let (h, w) = self.grid();
        self.frames_per_block * h * w
    }

    pub fn compressed_tokens(&self) -> usize {
        let (h, w) = self.grid();
        compressed_tokens(self.frames_per_block, h, w)
    }

    fn cache_config(&self) -> CacheConfig {
        CacheConfig {
            sink_frames: self.sink_frames,
            recent_frames: self.recent_frames,
            frames_per_block: self.frames_per_block,
            n_top: self.n_top,
            mid_capacity: self.mid_capacity,
            evict_blocks: 1,
            tokens_per_block: self.tokens_per_block(),
            compressed_tokens: self.compressed_tokens(),
            layers: self.layers,
            n_heads: self.n_heads,
            head_dim: self.head_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("memory.width_px", self.width_px),
            ("memory.height_px", self.height_px),
            ("memory.fps", self.fps),
            ("memory.temporal_stride", self.temporal_stride),
            ("memory.spatial_stride", self.spatial_stride),
            ("memory.patch", self.patch),
            ("memory.bytes_per_scalar", self.bytes_per_scalar),
        ];
        for (field, v) in fields {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        let (h, w) = self.grid();
        if h == 0 || w == 0 {
            return Err(Error::config("memory.height_px", "frame too small for one patch"));
        }
        self.cache_config().validate().map_err(|e| match e {
            Error::Config { field, message } => {
                let name = field.rsplit('.').next().unwrap_or(&field).to_string();
                Error::config(format!("memory.{name}"), message)
            }
            other => other,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryReport {
    pub duration_s: f64,
    pub latent_frames: u64,
    pub total_tokens: u64,
    pub full_cache_bytes: u64,
    pub bounded_context_tokens: u64,
    pub bounded_cache_bytes: u64,
    pub stored_buffer_tokens: u64,
    pub stored_buffer_bytes: u64,
}

/// Full-history versus bounded KV footprint for a clip of `duration_s`.
pub fn memory_report(geom: &MemoryGeometry, duration_s: f64) -> Result<MemoryReport> {
    geom.validate()?;
    if !(duration_s.is_finite() && duration_s >= 0.0) {
        return Err(Error::invalid(format!("duration {duration_s} must be non-negative")));
    }
    let cfg = geom.cache_config();
    let (h, w) = geom.grid();
    let latent_frames = (duration_s * geom.fps as f64 / geom.temporal_stride as f64).floor() as u64;
    let total_tokens = latent_frames * (h * w) as u64;
    let per_token = cfg.bytes_per_token(geom.bytes_per_scalar);
    let bounded = cfg.steady_context_tokens() as u64;
    let n = cfg.tokens_per_block;
    let stored = (cfg.sink_blocks() * n
        + cfg.mid_capacity * cfg.compressed_tokens
        + cfg.recent_blocks() * (n + cfg.compressed_tokens)
        + n) as u64;
    Ok(MemoryReport {
        duration_s,
        latent_frames,
        total_tokens,
        full_cache_bytes: total_tokens * per_token,
        bounded_context_tokens: bounded,
        bounded_cache_bytes: bounded * per_token,
        stored_buffer_tokens: stored,
        stored_buffer_bytes: stored * per_token,
    })
}

#[cfg(test)]
mod tests;
