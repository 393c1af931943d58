//! Dual-branch block compression.
//!
//! The HR branch runs the latent through four strided 3D convolutions
//! (one temporal 2× stage, three spatial 2× stages, SiLU after each) and a
//! 1×1×1 projection to model width. The LR branch decodes to pixels,
//! average-pools by (2, 4, 4), re-encodes and patch-embeds. Both land on the
//! same `(⌊T/2⌋, ⌊H/8⌋, ⌊W/8⌋)` token grid and are summed.
//!
//! Strided stages use kernel 4 with padding 1 along each strided axis, which
//! gives exactly `⌊n/2⌋` outputs for every `n >= 2`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{crop_even, Codec, CodecSpec, LatentBlock, PatchEmbed};
use crate::error::{Error, Result};
use crate::kvcache::LayerKv;
use crate::numerics::{avg_pool3d, conv3d, silu, Conv3dSpec, Linear, Tensor};
use crate::rope::{apply_rope, Position3D, RopeConfig};

/// Pixel-space pooling window of the LR branch.
pub const LR_POOL: [usize; 3] = [2, 4, 4];

/// Per-layer key and value projections shared between the generator and the
/// compressor.
#[derive(Debug, Clone, PartialEq)]
pub struct KvProjector {
    pub key: Linear,
    pub value: Linear,
}

/// A block compressed to `N_c` tokens, with per-layer projected K̃/Ṽ.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedEntry {
    pub block_index: usize,
    /// `N_c × d`
    pub tokens: Tensor,
    pub positions: Vec<Position3D>,
    pub layers: Vec<LayerKv>,
}

impl CompressedEntry {
    pub fn token_count(&self) -> usize {
        self.tokens.dim(0)
    }
}

/// Compressed grid `(⌊T/2⌋, ⌊H/8⌋, ⌊W/8⌋)` for a `T×C×H×W` latent block.
pub fn token_grid(frames: usize, height: usize, width: usize) -> [usize; 3] {
    [frames / 2, height / 8, width / 8]
}

/// `N_c = ⌊B_f/2⌋·⌊h/4⌋·⌊w/4⌋` in terms of the post-patch grid `h × w`.
pub fn compressed_tokens(frames_per_block: usize, h: usize, w: usize) -> usize {
    (frames_per_block / 2) * (h / 4) * (w / 4)
}

/// Centroid position of every compressed token, t-major then y then x.
///
/// Temporal: first frame of the block plus `2·t`; spatial: `4·i + 1.5`
/// rounded to the nearest patch index.
pub fn centroid_positions(block_index: usize, frames_per_block: usize, grid: [usize; 3]) -> Vec<Position3D> {
    let start = (block_index - 1) * frames_per_block;
    let spatial = |i: usize| (4.0 * i as f64 + 1.5).round() as usize;
    let mut out = Vec::with_capacity(grid.iter().product());
    for t in 0..grid[0] {
        for y in 0..grid[1] {
            for x in 0..grid[2] {
                out.push(Position3D::new(start + 2 * t, spatial(y), spatial(x)));
            }
        }
    }
    out
}

/// Token grid the pixel-space branch produces for a `T×C×H×W` latent under
/// `spec`, computed from the stride chain alone. `None` if some stage is
/// undefined (pooling window too large or pixels not divisible on re-encode).
pub fn lr_grid(frames: usize, height: usize, width: usize, spec: &CodecSpec) -> Option<[usize; 3]> {
    let s = spec.spatial_stride;
    let pixel_frames = spec.pixel_frames(frames);
    let (ph, pw) = (height * s, width * s);
    if pixel_frames < LR_POOL[0] || ph < LR_POOL[1] || pw < LR_POOL[2] {
        return None;
    }
    let (pt, qh, qw) = (pixel_frames / LR_POOL[0], ph / LR_POOL[1], pw / LR_POOL[2]);
    if qh % s != 0 || qw % s != 0 {
        return None;
    }
    let (lt, lh, lw) = (spec.latent_frames(pt), qh / s, qw / s);
    if lh < 2 || lw < 2 {
        return None;
    }
    Some([lt, lh / 2, lw / 2])
}

pub fn fuse(hr: &Tensor, lr: &Tensor) -> Result<Tensor> {
    if hr.shape() != lr.shape() {
        return Err(Error::invalid(format!(
            "fuse: HR tokens {:?} and LR tokens {:?} differ in shape",
            hr.shape(),
            lr.shape()
        )));
    }
    hr.add(lr)
}

/// Projects fused tokens through every layer's K/V maps; keys are rotated
/// at their centroid positions.
pub fn project_kv(
    tokens: &Tensor,
    positions: &[Position3D],
    projections: &[KvProjector],
    rope: &RopeConfig,
    n_heads: usize,
) -> Result<Vec<LayerKv>> {
    let n = tokens.dim(0);
    let head_dim = rope.head_dim();
    projections
        .iter()
        .map(|p| {
            let k = p.key.forward(tokens)?.reshape(&[n, n_heads, head_dim])?;
            let v = p.value.forward(tokens)?.reshape(&[n, n_heads, head_dim])?;
            Ok(LayerKv {
                keys: apply_rope(&k, positions, rope)?,
                values: v,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Compressor {
    /// temporal 2×, then three spatial 2× stages
    pub stages: [Conv3dSpec; 4],
    /// 1×1×1 to model width
    pub projection: Conv3dSpec,
}

impl Compressor {
    pub fn new(latent_channels: usize, hidden: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let temporal = Conv3dSpec::random(latent_channels, hidden, [4, 1, 1], [2, 1, 1], [1, 0, 0], &mut rng);
        let spatial = |rng: &mut ChaCha8Rng| Conv3dSpec::random(hidden, hidden, [1, 4, 4], [1, 2, 2], [0, 1, 1], rng);
        let s1 = spatial(&mut rng);
        let s2 = spatial(&mut rng);
        let s3 = spatial(&mut rng);
        let projection = Conv3dSpec::random(hidden, width, [1, 1, 1], [1, 1, 1], [0, 0, 0], &mut rng);
        Self {
            stages: [temporal, s1, s2, s3],
            projection,
        }
    }

    pub fn width(&self) -> usize {
        self.projection.out_channels
    }

    /// HR tokens `N_c × d` for a `T×C×H×W` latent.
    pub fn hr_branch(&self, latent: &Tensor) -> Result<Tensor> {
        latent.expect_rank(4, "HR branch latent")?;
        let (t, h, w) = (latent.dim(0), latent.dim(2), latent.dim(3));
        if t < 2 || h < 8 || w < 8 {
            return Err(Error::invalid(format!(
                "block {t}x{h}x{w} too small for the 2x8x8 compression strides (need T>=2, H>=8, W>=8)"
            )));
        }
        let mut x = latent.permute(&[1, 0, 2, 3])?;
        let shape = x.shape().to_vec();
        x = x.reshape(&[1, shape[0], shape[1], shape[2], shape[3]])?;
        for stage in &self.stages {
            x = silu(&conv3d(&x, stage)?);
        }
        let x = conv3d(&x, &self.projection)?;
        let s = x.shape().to_vec();
        let grid = token_grid(t, h, w);
        if [s[2], s[3], s[4]] != grid {
            return Err(Error::InternalConsistency(format!(
                "HR grid {:?} differs from expected {grid:?}",
                &s[2..]
            )));
        }
        let n = grid.iter().product();
        x.permute(&[0, 2, 3, 4, 1])?.reshape(&[n, s[1]])
    }

    /// LR tokens: decode, pool in pixel space, re-encode, patch-embed.
    pub fn lr_branch(&self, latent: &Tensor, codec: &Codec, patch: &PatchEmbed) -> Result<Tensor> {
        latent.expect_rank(4, "LR branch latent")?;
        let (t, h, w) = (latent.dim(0), latent.dim(2), latent.dim(3));
        if t < 2 || h < 8 || w < 8 {
            return Err(Error::invalid(format!(
                "block {t}x{h}x{w} too small for the 2x8x8 compression strides (need T>=2, H>=8, W>=8)"
            )));
        }
        let pixels = codec.decode(latent)?;
        let ps = pixels.shape().to_vec();
        let volume = pixels
            .permute(&[1, 0, 2, 3])?
            .reshape(&[1, ps[1], ps[0], ps[2], ps[3]])?;
        let pooled = avg_pool3d(&volume, LR_POOL)?;
        let qs = pooled.shape().to_vec();
        let frames = pooled
            .reshape(&[qs[1], qs[2], qs[3], qs[4]])?
            .permute(&[1, 0, 2, 3])?;
        let relatent = crop_even(&codec.encode(&frames)?)?;
        let got = [relatent.dim(0), relatent.dim(2) / 2, relatent.dim(3) / 2];
        let want = token_grid(t, h, w);
        if got != want {
            return Err(Error::InternalConsistency(format!(
                "LR grid {got:?} does not match HR grid {want:?}; check codec strides"
            )));
        }
        patch.embed(&relatent)
    }

    /// Full compression of one block into a [`CompressedEntry`].
    pub fn compress(
        &self,
        block: &LatentBlock,
        codec: &Codec,
        patch: &PatchEmbed,
        projections: &[KvProjector],
        rope: &RopeConfig,
        n_heads: usize,
    ) -> Result<CompressedEntry> {
        let z = &block.latent;
        let hr = self.hr_branch(z)?;
        let lr = self.lr_branch(z, codec, patch)?;
        let tokens = fuse(&hr, &lr)?;
        let grid = token_grid(z.dim(0), z.dim(2), z.dim(3));
        let positions = centroid_positions(block.index, z.dim(0), grid);
        let layers = project_kv(&tokens, &positions, projections, rope, n_heads)?;
        Ok(CompressedEntry {
            block_index: block.index,
            tokens,
            positions,
            layers,
        })
    }
}
