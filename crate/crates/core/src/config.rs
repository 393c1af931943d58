//! Run configuration: one TOML file with `[geometry]`, `[cache]`,
//! `[selection]`, `[schedule]`, `[codec]`, `[seeds]`, `[memory]` and
//! `[output]` sections. Every section and field is optional and falls back to
//! the toy defaults. Validation runs before any compute and reports the
//! offending field as `section.field`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::CodecSpec;
use crate::compressor::{lr_grid, token_grid};
use crate::error::{Error, Result};
use crate::kvcache::{CacheConfig, MemoryGeometry};
use crate::rope::RopeConfig;
use crate::selector::SelectionConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelGeometry {
    pub frames_per_block: usize,
    pub latent_channels: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    /// Model width `d`.
    pub width: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub compressor_hidden: usize,
    /// `(d_t, d_h, d_w)`
    pub rope_split: [usize; 3],
    pub rope_base: f64,
}

impl Default for ModelGeometry {
    fn default() -> Self {
        Self {
            frames_per_block: 4,
            latent_channels: 4,
            latent_height: 12,
            latent_width: 16,
            width: 64,
            n_heads: 4,
            head_dim: 16,
            layers: 2,
            mlp_hidden: 128,
            compressor_hidden: 16,
            rope_split: [6, 6, 4],
            rope_base: RopeConfig::DEFAULT_BASE,
        }
    }
}

impl ModelGeometry {
    /// Post-patch grid `(h, w)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.latent_height / 2, self.latent_width / 2)
    }

    pub fn tokens_per_block(&self) -> usize {
        let (h, w) = self.grid();
        self.frames_per_block * h * w
    }

    pub fn compressed_tokens(&self) -> usize {
        token_grid(self.frames_per_block, self.latent_height, self.latent_width)
            .iter()
            .product()
    }

    pub fn rope(&self) -> Result<RopeConfig> {
        RopeConfig::new(self.head_dim, self.rope_split, self.rope_base)
            .map_err(|e| Error::config("geometry.rope_split", e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheSection {
    pub sink_frames: usize,
    pub recent_frames: usize,
    pub n_top: usize,
    pub mid_capacity: usize,
    pub evict_blocks: usize,
}

impl Default for CacheSection {
    fn default() -> Self {
        Self {
            sink_frames: 8,
            recent_frames: 4,
            n_top: 4,
            mid_capacity: 8,
            evict_blocks: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSection {
    pub gamma: f64,
    pub min_queries: usize,
    pub half_heads: bool,
    pub refresh_interval: usize,
}

impl Default for SelectionSection {
    fn default() -> Self {
        let d = SelectionConfig::default();
        Self {
            gamma: d.gamma,
            min_queries: d.min_queries,
            half_heads: d.half_heads,
            refresh_interval: d.refresh_interval,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub shift: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 4, shift: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSection {
    pub temporal_stride: usize,
    pub spatial_stride: usize,
    pub pixel_channels: usize,
}

impl Default for CodecSection {
    fn default() -> Self {
        let d = CodecSpec::default();
        Self {
            temporal_stride: d.temporal_stride,
            spatial_stride: d.spatial_stride,
            pixel_channels: d.pixel_channels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub model: u64,
    pub noise: u64,
    pub codec: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            model: 0,
            noise: 1,
            codec: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub dump_frames: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            dump_frames: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: ModelGeometry,
    pub cache: CacheSection,
    pub selection: SelectionSection,
    pub schedule: ScheduleConfig,
    pub codec: CodecSection,
    pub seeds: Seeds,
    pub memory: MemoryGeometry,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: "<config>".into(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// SHA-256 of the canonical TOML serialisation.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn cache_config(&self) -> CacheConfig {
        let g = &self.geometry;
        CacheConfig {
            sink_frames: self.cache.sink_frames,
            recent_frames: self.cache.recent_frames,
            frames_per_block: g.frames_per_block,
            n_top: self.cache.n_top,
            mid_capacity: self.cache.mid_capacity,
            evict_blocks: self.cache.evict_blocks,
            tokens_per_block: g.tokens_per_block(),
            compressed_tokens: g.compressed_tokens(),
            layers: g.layers,
            n_heads: g.n_heads,
            head_dim: g.head_dim,
        }
    }

    pub fn selection_config(&self) -> SelectionConfig {
        SelectionConfig {
            n_top: self.cache.n_top,
            gamma: self.selection.gamma,
            min_queries: self.selection.min_queries,
            half_heads: self.selection.half_heads,
            refresh_interval: self.selection.refresh_interval,
        }
    }

    pub fn codec_spec(&self) -> CodecSpec {
        CodecSpec {
            temporal_stride: self.codec.temporal_stride,
            spatial_stride: self.codec.spatial_stride,
            latent_channels: self.geometry.latent_channels,
            pixel_channels: self.codec.pixel_channels,
            mixing_seed: self.seeds.codec,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        let positive = [
            ("geometry.frames_per_block", g.frames_per_block),
            ("geometry.latent_channels", g.latent_channels),
            ("geometry.width", g.width),
            ("geometry.n_heads", g.n_heads),
            ("geometry.head_dim", g.head_dim),
            ("geometry.layers", g.layers),
            ("geometry.mlp_hidden", g.mlp_hidden),
            ("geometry.compressor_hidden", g.compressor_hidden),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if g.width != g.n_heads * g.head_dim {
            return Err(Error::config(
                "geometry.width",
                format!("{} != n_heads {} x head_dim {}", g.width, g.n_heads, g.head_dim),
            ));
        }
        if g.frames_per_block < 2 {
            return Err(Error::config(
                "geometry.frames_per_block",
                "blocks need at least 2 frames for temporal compression",
            ));
        }
        for (field, v) in [("geometry.latent_height", g.latent_height), ("geometry.latent_width", g.latent_width)] {
            if v < 8 || v % 2 != 0 {
                return Err(Error::config(field, format!("{v} must be even and >= 8")));
            }
        }
        g.rope()?;
        self.cache_config().validate()?;
        self.selection_config().validate()?;
        if self.schedule.steps == 0 {
            return Err(Error::config("schedule.steps", "must be >= 1"));
        }
        if !(self.schedule.shift.is_finite() && self.schedule.shift > 0.0) {
            return Err(Error::config("schedule.shift", "must be positive"));
        }
        let spec = self.codec_spec();
        spec.validate()?;
        let want = token_grid(g.frames_per_block, g.latent_height, g.latent_width);
        match lr_grid(g.frames_per_block, g.latent_height, g.latent_width, &spec) {
            Some(got) if got == want => {}
            got => {
                return Err(Error::config(
                    "codec",
                    format!(
                        "pixel-space branch grid {got:?} does not match compressed grid {want:?} \
                         (latent height/width must be multiples of 4 and strides consistent)"
                    ),
                ))
            }
        }
        self.memory.validate()?;
        Ok(())
    }
}
