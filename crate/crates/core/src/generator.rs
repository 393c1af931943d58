//! Block-wise causal generation with few-step flow-matching denoising.
//!
//! The network is a small transformer with fixed-seed random weights. Each
//! block starts from seeded noise, runs `S` denoising steps against the
//! assembled cache context, and is then re-run once at `σ = 0` to produce the
//! keys and values that enter the cache.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{unpatchify, Codec, LatentBlock, PatchEmbed, StreamDecoder};
use crate::compressor::{Compressor, KvProjector};
use crate::config::{ModelGeometry, RunConfig};
use crate::error::{Error, Result};
use crate::kvcache::{BlockKv, EvictionEvent, LayerKv, PartitionedCache};
use crate::numerics::{attention, attention_flops, layer_norm, silu, Linear, Tensor};
use crate::rope::{apply_rope, Position3D, RopeConfig};
use crate::selector::{RouteRecord, Router};

/// Bytes per stored scalar; tensors are held as `f64`.
pub const STORED_SCALAR_BYTES: usize = 8;

/// Rotating one interleaved pair costs four multiplies and two adds.
pub const FLOPS_PER_ROTATION: u64 = 6;

/// `S + 1` noise levels: `σ = shift·u / (1 + (shift − 1)·u)` on the grid
/// `u_s = 1 − (s − 1)/S`, followed by a terminal 0.
pub fn sigma_schedule(steps: usize, shift: f64) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::invalid("sigma schedule needs at least one step"));
    }
    if !(shift.is_finite() && shift > 0.0) {
        return Err(Error::invalid(format!("schedule shift must be positive, got {shift}")));
    }
    let mut sigmas: Vec<f64> = (1..=steps)
        .map(|s| {
            let u = 1.0 - (s - 1) as f64 / steps as f64;
            if s == 1 {
                1.0
            } else if shift == 1.0 {
                u
            } else {
                shift * u / (1.0 + (shift - 1.0) * u)
            }
        })
        .collect();
    sigmas.push(0.0);
    Ok(sigmas)
}

/// `(1 − σ)·x₀ + σ·ε`
pub fn flow_interpolate(x0: &Tensor, eps: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::invalid(format!("sigma {sigma} is outside [0, 1]")));
    }
    x0.zip_with(eps, |x, e| (1.0 - sigma) * x + sigma * e)
}

/// Few-step sampler. `velocity(step, σ, z)` predicts the flow at each step
/// (1-based); `fresh_noise()` supplies `ε′` for re-noising between steps.
/// Returns the clean estimate after the last step.
pub fn denoise_loop(
    z_noise: &Tensor,
    sigmas: &[f64],
    mut fresh_noise: impl FnMut() -> Tensor,
    mut velocity: impl FnMut(usize, f64, &Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    if sigmas.len() < 2 {
        return Err(Error::invalid("schedule needs at least two sigmas"));
    }
    let steps = sigmas.len() - 1;
    let mut z = z_noise.clone();
    let mut x_hat = z.clone();
    for s in 1..=steps {
        let sigma = sigmas[s - 1];
        let v = velocity(s, sigma, &z)?;
        x_hat = z.zip_with(&v, |zi, vi| zi - sigma * vi)?;
        let next = sigmas[s];
        if s < steps && next > 0.0 {
            z = flow_interpolate(&x_hat, &fresh_noise(), next)?;
        } else {
            z = x_hat.clone();
        }
    }
    Ok(x_hat)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayer {
    pub query: Linear,
    pub kv: KvProjector,
    pub out: Linear,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

/// Result of one forward pass over a block.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Predicted velocity, same shape as the input latent.
    pub velocity: Tensor,
    /// Rotated keys and values of the block's own tokens, per layer.
    pub layers: Vec<LayerKv>,
    /// Rotated layer-0 queries, `n × N_h × d_h`.
    pub queries: Tensor,
    pub attention_flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    geometry: ModelGeometry,
    rope: RopeConfig,
    pub patch: PatchEmbed,
    pub sigma_embed: Vec<f64>,
    pub layers: Vec<TransformerLayer>,
    pub unpatch: Linear,
}

impl ToyModel {
    pub fn new(geometry: &ModelGeometry, seed: u64) -> Result<Self> {
        let rope = geometry.rope()?;
        let d = geometry.width;
        if d != geometry.n_heads * geometry.head_dim {
            return Err(Error::invalid(format!(
                "width {d} != {} heads x {}",
                geometry.n_heads, geometry.head_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patch_features = geometry.latent_channels * PatchEmbed::PATCH * PatchEmbed::PATCH;
        let patch = PatchEmbed::new(Linear::random(patch_features, d, &mut rng));
        let sigma_embed = Tensor::randn(&[d], 1.0, &mut rng).into_data();
        let layers = (0..geometry.layers)
            .map(|_| TransformerLayer {
                query: Linear::random(d, d, &mut rng),
                kv: KvProjector {
                    key: Linear::random(d, d, &mut rng),
                    value: Linear::random(d, d, &mut rng),
                },
                out: Linear::random(d, d, &mut rng),
                mlp_in: Linear::random(d, geometry.mlp_hidden, &mut rng),
                mlp_out: Linear::random(geometry.mlp_hidden, d, &mut rng),
            })
            .collect();
        let unpatch = Linear::random(d, patch_features, &mut rng);
        Ok(Self {
            geometry: geometry.clone(),
            rope,
            patch,
            sigma_embed,
            layers,
            unpatch,
        })
    }

    pub fn geometry(&self) -> &ModelGeometry {
        &self.geometry
    }

    pub fn rope(&self) -> &RopeConfig {
        &self.rope
    }

    pub fn kv_projections(&self) -> Vec<KvProjector> {
        self.layers.iter().map(|l| l.kv.clone()).collect()
    }

    /// Absolute positions of a block's tokens, frame-major.
    pub fn block_positions(&self, block_index: usize) -> Vec<Position3D> {
        let g = &self.geometry;
        let (h, w) = g.grid();
        let t0 = (block_index - 1) * g.frames_per_block;
        let mut out = Vec::with_capacity(g.tokens_per_block());
        for lt in 0..g.frames_per_block {
            for y in 0..h {
                for x in 0..w {
                    out.push(Position3D { t: t0 + lt, y, x });
                }
            }
        }
        out
    }

    fn embed(&self, z: &Tensor, sigma: f64) -> Result<Tensor> {
        let x = self.patch.embed(z)?;
        let d = self.geometry.width;
        let mut data = x.into_data();
        for row in data.chunks_mut(d) {
            for (v, e) in row.iter_mut().zip(&self.sigma_embed) {
                *v += sigma * e;
            }
        }
        Tensor::new(vec![data.len() / d, d], data)
    }

    fn heads(&self, t: Tensor) -> Result<Tensor> {
        let n = t.dim(0);
        t.reshape(&[n, self.geometry.n_heads, self.geometry.head_dim])
    }

    /// Rotated layer-0 queries for a latent at noise level `sigma`.
    pub fn layer0_queries(&self, z: &Tensor, sigma: f64, block_index: usize) -> Result<Tensor> {
        let x = self.embed(z, sigma)?;
        let q = self.heads(self.layers[0].query.forward(&layer_norm(&x))?)?;
        apply_rope(&q, &self.block_positions(block_index), &self.rope)
    }

    /// One pass over a `B_f × C × H × W` latent. `context(layer, current)`
    /// returns the keys/values to attend, given the block's own.
    pub fn forward(
        &self,
        z: &Tensor,
        sigma: f64,
        block_index: usize,
        mut context: impl FnMut(usize, &LayerKv) -> Result<LayerKv>,
    ) -> Result<ForwardOutput> {
        let g = &self.geometry;
        let want = [g.frames_per_block, g.latent_channels, g.latent_height, g.latent_width];
        if z.shape() != want {
            return Err(Error::invalid(format!(
                "model input {:?}, expected {want:?}",
                z.shape()
            )));
        }
        let positions = self.block_positions(block_index);
        let n = positions.len();
        let d = g.width;
        let mut x = self.embed(z, sigma)?;
        let mut kv_out = Vec::with_capacity(self.layers.len());
        let mut queries = None;
        let mut flops = 0;
        for (li, layer) in self.layers.iter().enumerate() {
            let h = layer_norm(&x);
            let q = apply_rope(&self.heads(layer.query.forward(&h)?)?, &positions, &self.rope)?;
            let current = LayerKv {
                keys: apply_rope(&self.heads(layer.kv.key.forward(&h)?)?, &positions, &self.rope)?,
                values: self.heads(layer.kv.value.forward(&h)?)?,
            };
            let ctx = context(li, &current)?;
            flops += attention_flops(n, ctx.tokens(), g.n_heads, g.head_dim);
            let a = attention(&q, &ctx.keys, &ctx.values)?.reshape(&[n, d])?;
            x = x.add(&layer.out.forward(&a)?)?;
            let m = layer.mlp_out.forward(&silu(&layer.mlp_in.forward(&layer_norm(&x))?))?;
            x = x.add(&m)?;
            if li == 0 {
                queries = Some(q);
            }
            kv_out.push(current);
        }
        let out = self.unpatch.forward(&layer_norm(&x))?;
        let velocity = unpatchify(&out, g.frames_per_block, g.latent_channels, g.latent_height, g.latent_width)?;
        Ok(ForwardOutput {
            velocity,
            layers: kv_out,
            queries: queries.expect("at least one layer"),
            attention_flops: flops,
        })
    }
}

/// One row of the cache trace, written after the block is appended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheTraceRow {
    pub block_index: usize,
    pub sink_blocks: usize,
    pub mid_blocks: usize,
    pub recent_blocks: usize,
    /// Cumulative evicted frames (the running sink shift).
    pub evicted_frames: usize,
    /// Frames evicted while appending this block.
    pub delta_frames: usize,
    /// Tokens attended while generating this block.
    pub context_tokens: usize,
    /// Tokens a full-history cache would have attended.
    pub full_history_tokens: usize,
    pub estimated_bytes: u64,
    pub attention_flops: u64,
    pub scoring_flops: u64,
    pub correction_rotations: u64,
    pub correction_flops: u64,
    pub selected: usize,
}

/// Everything produced for one block.
#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub latent: LatentBlock,
    pub frames: Vec<Tensor>,
    pub trace: CacheTraceRow,
    pub routes: Vec<RouteRecord>,
    pub eviction: Option<EvictionEvent>,
}

/// Collected output of [`Generator::generate`].
#[derive(Debug, Clone, Default)]
pub struct GenerationOutput {
    pub latents: Vec<LatentBlock>,
    /// Decoded frames, only when requested.
    pub frames: Vec<Tensor>,
    pub decoded_frames: usize,
    pub cache_trace: Vec<CacheTraceRow>,
    pub selection_trace: Vec<RouteRecord>,
}

/// Streaming generator. Blocks are produced one at a time with
/// [`next_block`](Self::next_block).
#[derive(Debug, Clone)]
pub struct Generator {
    cfg: RunConfig,
    model: ToyModel,
    codec: Codec,
    compressor: Compressor,
    cache: PartitionedCache,
    router: Router,
    decoder: StreamDecoder,
    sigmas: Vec<f64>,
    /// Layer-0 queries of blocks in the recent window.
    recent_queries: VecDeque<(usize, Tensor)>,
    next_index: usize,
}

impl Generator {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = ToyModel::new(&cfg.geometry, cfg.seeds.model)?;
        let codec = Codec::new(cfg.codec_spec())?;
        let g = &cfg.geometry;
        let compressor = Compressor::new(
            g.latent_channels,
            g.compressor_hidden,
            g.width,
            cfg.seeds.model.wrapping_add(1),
        );
        let cache = PartitionedCache::new(cfg.cache_config(), model.rope().clone())?;
        Ok(Self {
            cfg: cfg.clone(),
            router: Router::new(cfg.selection_config())?,
            decoder: StreamDecoder::new(codec.clone()),
            sigmas: sigma_schedule(cfg.schedule.steps, cfg.schedule.shift)?,
            model,
            codec,
            compressor,
            cache,
            recent_queries: VecDeque::new(),
            next_index: 1,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> &ToyModel {
        &self.model
    }

    pub fn cache(&self) -> &PartitionedCache {
        &self.cache
    }

    pub fn router(&self) -> &Router {
        &self.router
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// Noise source of one block; independent of every other block.
    fn block_rng(&self, block: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seeds.noise);
        rng.set_stream(block as u64);
        rng
    }

    pub fn next_block(&mut self) -> Result<BlockOutput> {
        let block = self.next_index;
        self.step(block).map_err(|e| e.at_block(block))
    }

    fn step(&mut self, block: usize) -> Result<BlockOutput> {
        let g = self.cfg.geometry.clone();
        let shape = [g.frames_per_block, g.latent_channels, g.latent_height, g.latent_width];
        let mut rng = self.block_rng(block);
        let z_noise = Tensor::randn(&shape, 1.0, &mut rng);

        let Self {
            model,
            cache,
            router,
            recent_queries,
            sigmas,
            ..
        } = self;
        let model = &*model;
        let cache_ref = &*cache;
        let mut routes = Vec::with_capacity(sigmas.len());
        let mut selected: Vec<usize> = Vec::new();
        let mut flops = 0u64;
        let scoring_before = router.scoring_flops();

        let x_hat = denoise_loop(
            &z_noise,
            sigmas,
            || Tensor::randn(&shape, 1.0, &mut rng),
            |step, sigma, z| {
                let route = router.route(cache_ref, block, step, || {
                    let current = model.layer0_queries(z, sigma, block)?;
                    let mut parts: Vec<&Tensor> = recent_queries.iter().map(|(_, q)| q).collect();
                    parts.push(&current);
                    Tensor::concat(&parts)
                })?;
                selected = route.selected.clone();
                routes.push(route);
                let out = model.forward(z, sigma, block, |layer, current| {
                    cache_ref.assemble_context(&selected, layer, Some(current))
                })?;
                flops += out.attention_flops;
                Ok(out.velocity)
            },
        )?;

        let context_tokens = cache.context_tokens(selected.len());
        let clean = model.forward(&x_hat, 0.0, block, |layer, current| {
            cache_ref.assemble_context(&selected, layer, Some(current))
        })?;
        flops += clean.attention_flops;

        let latent = LatentBlock::new(block, x_hat)?;
        let frames = self.decoder.decode_block(&latent)?;

        let ccfg = self.cache.config().clone();
        let backup = if block > ccfg.sink_blocks() {
            Some(self.compressor.compress(
                &latent,
                &self.codec,
                &self.model.patch,
                &self.model.kv_projections(),
                self.model.rope(),
                g.n_heads,
            )?)
        } else {
            None
        };
        let full = BlockKv {
            block_index: block,
            layers: clean.layers,
        };
        let eviction = self.cache.append_block(full, backup)?;
        let recent = self.cache.recent_indices();
        if recent.contains(&block) {
            self.recent_queries.push_back((block, clean.queries));
        }
        self.recent_queries.retain(|(b, _)| recent.contains(b));

        let rotations = eviction.as_ref().map_or(0, |e| e.rotations);
        let trace = CacheTraceRow {
            block_index: block,
            sink_blocks: self.cache.sink().len(),
            mid_blocks: self.cache.mid().len(),
            recent_blocks: recent.len(),
            evicted_frames: self.cache.evicted_frames(),
            delta_frames: eviction.as_ref().map_or(0, |e| e.delta_frames),
            context_tokens,
            full_history_tokens: block * ccfg.tokens_per_block,
            estimated_bytes: self.cache.stored_tokens() as u64 * ccfg.bytes_per_token(STORED_SCALAR_BYTES),
            attention_flops: flops,
            scoring_flops: self.router.scoring_flops() - scoring_before,
            correction_rotations: rotations,
            correction_flops: rotations * FLOPS_PER_ROTATION,
            selected: selected.len(),
        };
        self.next_index += 1;
        Ok(BlockOutput {
            latent,
            frames,
            trace,
            routes,
            eviction,
        })
    }

    /// Runs `num_blocks` blocks from scratch.
    pub fn generate(cfg: &RunConfig, num_blocks: usize, keep_frames: bool) -> Result<GenerationOutput> {
        let mut gen = Self::new(cfg)?;
        let mut out = GenerationOutput::default();
        for _ in 0..num_blocks {
            let b = gen.next_block()?;
            out.decoded_frames += b.frames.len();
            if keep_frames {
                out.frames.extend(b.frames);
            }
            out.latents.push(b.latent);
            out.cache_trace.push(b.trace);
            out.selection_trace.extend(b.routes);
        }
        Ok(out)
    }
}

/// Configuration of the full-history baseline: a sink large enough that
/// nothing ever leaves it.
pub fn full_history_config(cfg: &RunConfig, num_blocks: usize) -> RunConfig {
    let mut full = cfg.clone();
    full.cache.sink_frames = num_blocks.max(1) * cfg.geometry.frames_per_block;
    full
}
