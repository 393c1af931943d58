//! Synthetic stand-in for a frozen video VAE.
//!
//! Every latent cell (one frame, one spatial position, all channels) maps to a
//! pixel volume through a fixed matrix with orthonormal columns, so encoding
//! is the transpose and round-trips exactly. The very first latent frame of a
//! stream expands to a single pixel frame; every later frame expands to
//! `temporal_stride` frames and is also coupled to the previous latent frame.
//! That previous frame is the decoder's temporal cache: a streaming decoder
//! carries it across block boundaries, which makes block-by-block decoding
//! identical to decoding the whole latent sequence at once.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Linear, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecSpec {
    pub temporal_stride: usize,
    pub spatial_stride: usize,
    pub latent_channels: usize,
    pub pixel_channels: usize,
    pub mixing_seed: u64,
}

impl Default for CodecSpec {
    fn default() -> Self {
        Self {
            temporal_stride: 4,
            spatial_stride: 8,
            latent_channels: 4,
            pixel_channels: 3,
            mixing_seed: 0,
        }
    }
}

impl CodecSpec {
    pub fn validate(&self) -> Result<()> {
        if self.temporal_stride == 0 {
            return Err(Error::config("codec.temporal_stride", "must be >= 1"));
        }
        if self.spatial_stride == 0 {
            return Err(Error::config("codec.spatial_stride", "must be >= 1"));
        }
        if self.latent_channels == 0 || self.pixel_channels == 0 {
            return Err(Error::config("codec.latent_channels", "channel counts must be >= 1"));
        }
        let cell = self.pixel_channels * self.spatial_stride * self.spatial_stride;
        if cell < self.latent_channels {
            return Err(Error::config(
                "codec.latent_channels",
                format!(
                    "{} latent channels cannot be embedded orthogonally into a {cell}-value pixel cell",
                    self.latent_channels
                ),
            ));
        }
        Ok(())
    }

    /// Pixel frames produced by decoding `latent_frames` frames from a stream start.
    pub fn pixel_frames(&self, latent_frames: usize) -> usize {
        if latent_frames == 0 {
            0
        } else {
            self.temporal_stride * (latent_frames - 1) + 1
        }
    }

    /// Latent frames recovered when encoding `pixel_frames` frames; trailing
    /// frames that do not fill a stride group are dropped.
    pub fn latent_frames(&self, pixel_frames: usize) -> usize {
        if pixel_frames == 0 {
            0
        } else {
            (pixel_frames - 1) / self.temporal_stride + 1
        }
    }
}

/// One generation block of latent frames, `B_f × C × H × W`, with its
/// 1-based absolute block index.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBlock {
    pub index: usize,
    pub latent: Tensor,
}

impl LatentBlock {
    pub fn new(index: usize, latent: Tensor) -> Result<Self> {
        latent.expect_rank(4, "latent block")?;
        Ok(Self { index, latent })
    }

    pub fn frames(&self) -> usize {
        self.latent.dim(0)
    }
}

/// Fixed-weight codec built from a [`CodecSpec`].
#[derive(Debug, Clone)]
pub struct Codec {
    spec: CodecSpec,
    /// `(P·s·s) × C`, orthonormal columns; decodes the stream's first frame.
    first: Vec<f64>,
    /// `(s_t·P·s·s) × C`, orthonormal columns.
    rest: Vec<f64>,
    /// `(s_t·P·s·s) × C` coupling to the previous latent frame.
    carry: Vec<f64>,
}

impl Codec {
    pub fn new(spec: CodecSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.mixing_seed);
        let c = spec.latent_channels;
        let cell = spec.pixel_channels * spec.spatial_stride * spec.spatial_stride;
        let first = orthonormal_columns(cell, c, &mut rng);
        let rest = orthonormal_columns(cell * spec.temporal_stride, c, &mut rng);
        let carry = Tensor::randn(&[cell * spec.temporal_stride, c], 0.1, &mut rng).into_data();
        Ok(Self {
            spec,
            first,
            rest,
            carry,
        })
    }

    pub fn spec(&self) -> &CodecSpec {
        &self.spec
    }

    fn cell(&self) -> usize {
        self.spec.pixel_channels * self.spec.spatial_stride * self.spec.spatial_stride
    }

    fn check_latent(&self, latent: &Tensor) -> Result<()> {
        latent.expect_rank(4, "latent")?;
        if latent.dim(1) != self.spec.latent_channels {
            return Err(Error::invalid(format!(
                "latent has {} channels, codec expects {}",
                latent.dim(1),
                self.spec.latent_channels
            )));
        }
        Ok(())
    }

    /// Decodes `T×C×H×W` latents as the start of a stream, giving
    /// `(s_t(T−1)+1) × P × sH × sW` pixels.
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        self.check_latent(latent)?;
        let (out, frames) = self.decode_frames(latent, None);
        self.pixel_tensor(latent, out, frames)
    }

    fn pixel_tensor(&self, latent: &Tensor, data: Vec<f64>, frames: usize) -> Result<Tensor> {
        let s = self.spec.spatial_stride;
        Tensor::new(
            vec![frames, self.spec.pixel_channels, latent.dim(2) * s, latent.dim(3) * s],
            data,
        )
    }

    /// Decodes latent frames given the previous latent frame (if any).
    fn decode_frames<'a>(&self, latent: &'a Tensor, mut prev: Option<&'a [f64]>) -> (Vec<f64>, usize) {
        let (t, c, h, w) = (latent.dim(0), latent.dim(1), latent.dim(2), latent.dim(3));
        let (s, st, pc) = (
            self.spec.spatial_stride,
            self.spec.temporal_stride,
            self.spec.pixel_channels,
        );
        let cell = self.cell();
        let (ph, pw) = (h * s, w * s);
        let frame_len = c * h * w;
        let total_frames = match prev {
            None => self.spec.pixel_frames(t),
            Some(_) => st * t,
        };
        let mut out = vec![0.0; total_frames * pc * ph * pw];
        let mut frame_cursor = 0;
        let mut cellv = vec![0.0; cell * st];
        for k in 0..t {
            let cur = &latent.data()[k * frame_len..(k + 1) * frame_len];
            let n_frames = if prev.is_some() { st } else { 1 };
            for y in 0..h {
                for x in 0..w {
                    let rows = cell * n_frames;
                    cellv[..rows].fill(0.0);
                    for ch in 0..c {
                        let z = cur[(ch * h + y) * w + x];
                        let zp = prev.map(|p| p[(ch * h + y) * w + x]);
                        for r in 0..rows {
                            let mut v = match zp {
                                None => self.first[r * c + ch] * z,
                                Some(_) => self.rest[r * c + ch] * z,
                            };
                            if let Some(zp) = zp {
                                v += self.carry[r * c + ch] * zp;
                            }
                            cellv[r] += v;
                        }
                    }
                    // cell layout: (frame, channel, dy, dx)
                    for f in 0..n_frames {
                        for p in 0..pc {
                            for dy in 0..s {
                                let dst = (((frame_cursor + f) * pc + p) * ph + y * s + dy) * pw + x * s;
                                let src = ((f * pc + p) * s + dy) * s;
                                out[dst..dst + s].copy_from_slice(&cellv[src..src + s]);
                            }
                        }
                    }
                }
            }
            frame_cursor += n_frames;
            prev = Some(cur);
        }
        (out, total_frames)
    }

    /// Inverse of [`Codec::decode`]: `F×P×H_p×W_p` pixels to
    /// `(⌊(F−1)/s_t⌋+1) × C × H_p/s × W_p/s` latents.
    pub fn encode(&self, pixels: &Tensor) -> Result<Tensor> {
        pixels.expect_rank(4, "pixels")?;
        let (s, st, pc, c) = (
            self.spec.spatial_stride,
            self.spec.temporal_stride,
            self.spec.pixel_channels,
            self.spec.latent_channels,
        );
        let (f, p, ph, pw) = (pixels.dim(0), pixels.dim(1), pixels.dim(2), pixels.dim(3));
        if p != pc {
            return Err(Error::invalid(format!(
                "pixels have {p} channels, codec expects {pc}"
            )));
        }
        if ph % s != 0 || pw % s != 0 {
            return Err(Error::invalid(format!(
                "pixel dims {ph}x{pw} not divisible by spatial stride {s}"
            )));
        }
        let (h, w) = (ph / s, pw / s);
        let t = self.spec.latent_frames(f);
        let cell = self.cell();
        let frame_len = c * h * w;
        let mut out = vec![0.0; t * frame_len];
        let mut cellv = vec![0.0; cell * st];
        let mut frame_cursor = 0;
        for k in 0..t {
            let n_frames = if k == 0 { 1 } else { st };
            let rows = cell * n_frames;
            let (done, rest) = out.split_at_mut(k * frame_len);
            let prev = if k == 0 { None } else { Some(&done[(k - 1) * frame_len..]) };
            let cur = &mut rest[..frame_len];
            for y in 0..h {
                for x in 0..w {
                    for fi in 0..n_frames {
                        for pi in 0..pc {
                            for dy in 0..s {
                                let src = (((frame_cursor + fi) * pc + pi) * ph + y * s + dy) * pw + x * s;
                                let dst = ((fi * pc + pi) * s + dy) * s;
                                cellv[dst..dst + s].copy_from_slice(&pixels.data()[src..src + s]);
                            }
                        }
                    }
                    if let Some(prev) = prev {
                        for ch in 0..c {
                            let zp = prev[(ch * h + y) * w + x];
                            for r in 0..rows {
                                cellv[r] -= self.carry[r * c + ch] * zp;
                            }
                        }
                    }
                    let basis = if k == 0 { &self.first } else { &self.rest };
                    for ch in 0..c {
                        let z: f64 = (0..rows).map(|r| basis[r * c + ch] * cellv[r]).sum();
                        cur[(ch * h + y) * w + x] = z;
                    }
                }
            }
            frame_cursor += n_frames;
        }
        Tensor::new(vec![t, c, h, w], out)
    }
}

/// Splits a `F×P×H×W` pixel tensor into per-frame `P×H×W` tensors.
pub fn split_frames(pixels: &Tensor) -> Vec<Tensor> {
    let frame: Vec<usize> = pixels.shape()[1..].to_vec();
    let len: usize = frame.iter().product();
    pixels
        .data()
        .chunks(len)
        .map(|c| Tensor::new(frame.clone(), c.to_vec()).expect("frame shape"))
        .collect()
}

/// Block-by-block decoder that carries the temporal cache between blocks.
#[derive(Debug, Clone)]
pub struct StreamDecoder {
    codec: Codec,
    prev_frame: Option<Vec<f64>>,
    next_index: Option<usize>,
}

impl StreamDecoder {
    pub fn new(codec: Codec) -> Self {
        Self {
            codec,
            prev_frame: None,
            next_index: None,
        }
    }

    /// Decodes one block. The first block yields `s_t·B_f − (s_t − 1)`
    /// frames, every later block `s_t·B_f`.
    pub fn decode_block(&mut self, block: &LatentBlock) -> Result<Vec<Tensor>> {
        if let Some(expected) = self.next_index {
            if block.index != expected {
                return Err(Error::contract(format!(
                    "stream decoder expected block {expected}, got {}",
                    block.index
                )));
            }
        }
        self.codec.check_latent(&block.latent)?;
        let (data, frames) = self
            .codec
            .decode_frames(&block.latent, self.prev_frame.as_deref());
        let pixels = self.codec.pixel_tensor(&block.latent, data, frames)?;
        let t = block.latent.dim(0);
        let frame_len = block.latent.len() / t;
        self.prev_frame = Some(block.latent.data()[(t - 1) * frame_len..].to_vec());
        self.next_index = Some(block.index + 1);
        Ok(split_frames(&pixels))
    }
}

/// Gram–Schmidt on a random Gaussian `rows × cols` matrix (row-major).
fn orthonormal_columns(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let m = Tensor::randn(&[rows, cols], 1.0, rng).into_data();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for j in 0..cols {
        let mut v: Vec<f64> = (0..rows).map(|r| m[r * cols + j]).collect();
        // two passes for numerical orthogonality
        for _ in 0..2 {
            for b in &basis {
                let proj: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= proj * y;
                }
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
    let mut out = vec![0.0; rows * cols];
    for (j, b) in basis.iter().enumerate() {
        for r in 0..rows {
            out[r * cols + j] = b[r];
        }
    }
    out
}

/// `1×2×2` spatial patchification followed by a linear map to width `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbed {
    pub proj: Linear,
}

impl PatchEmbed {
    pub const PATCH: usize = 2;

    pub fn new(proj: Linear) -> Self {
        Self { proj }
    }

    /// Token count for a `T×C×H×W` latent.
    pub fn token_count(frames: usize, height: usize, width: usize) -> usize {
        frames * (height / Self::PATCH) * (width / Self::PATCH)
    }

    pub fn embed(&self, latent: &Tensor) -> Result<Tensor> {
        self.proj.forward(&patchify(latent)?)
    }
}

/// `T×C×H×W` latent to `T·(H/2)·(W/2) × (C·2·2)` patch vectors, tokens ordered
/// frame-major then row then column, features ordered `(c, dy, dx)`.
pub fn patchify(latent: &Tensor) -> Result<Tensor> {
    latent.expect_rank(4, "latent")?;
    let (t, c, h, w) = (latent.dim(0), latent.dim(1), latent.dim(2), latent.dim(3));
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!(
            "patch embedding needs even spatial dims, got {h}x{w}"
        )));
    }
    let (gh, gw) = (h / 2, w / 2);
    let feat = c * 4;
    let mut out = vec![0.0; t * gh * gw * feat];
    let z = latent.data();
    for ti in 0..t {
        for gy in 0..gh {
            for gx in 0..gw {
                let tok = (ti * gh + gy) * gw + gx;
                for ci in 0..c {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            out[tok * feat + ci * 4 + dy * 2 + dx] =
                                z[((ti * c + ci) * h + gy * 2 + dy) * w + gx * 2 + dx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![t * gh * gw, feat], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, frames: usize, channels: usize, height: usize, width: usize) -> Result<Tensor> {
    let (gh, gw) = (height / 2, width / 2);
    if tokens.shape() != [frames * gh * gw, channels * 4] {
        return Err(Error::invalid(format!(
            "unpatchify: tokens {:?} do not match latent {frames}x{channels}x{height}x{width}",
            tokens.shape()
        )));
    }
    let mut out = vec![0.0; frames * channels * height * width];
    let feat = channels * 4;
    for ti in 0..frames {
        for gy in 0..gh {
            for gx in 0..gw {
                let tok = (ti * gh + gy) * gw + gx;
                for ci in 0..channels {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            out[((ti * channels + ci) * height + gy * 2 + dy) * width + gx * 2 + dx] =
                                tokens.data()[tok * feat + ci * 4 + dy * 2 + dx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![frames, channels, height, width], out)
}

/// Drops a trailing odd row/column so the latent can be patchified.
pub fn crop_even(latent: &Tensor) -> Result<Tensor> {
    latent.expect_rank(4, "latent")?;
    let (t, c, h, w) = (latent.dim(0), latent.dim(1), latent.dim(2), latent.dim(3));
    let (eh, ew) = (h - h % 2, w - w % 2);
    if eh == 0 || ew == 0 {
        return Err(Error::invalid(format!("latent {h}x{w} too small to patchify")));
    }
    if (eh, ew) == (h, w) {
        return Ok(latent.clone());
    }
    let mut out = Vec::with_capacity(t * c * eh * ew);
    for tc in 0..t * c {
        for y in 0..eh {
            let row = (tc * h + y) * w;
            out.extend_from_slice(&latent.data()[row..row + ew]);
        }
    }
    Tensor::new(vec![t, c, eh, ew], out)
}
