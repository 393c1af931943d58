//! Factored 3D rotary position embeddings.
//!
//! Each head dimension is split into a temporal, a height and a width block.
//! Within a block, adjacent coordinate pairs `(x[2i], x[2i+1])` are rotated by
//! `pos * base^(-2i / d_block)`, where `pos` is the position along that
//! block's axis. Because rotations compose additively, a key that already
//! carries the rotation for frame `p` can be moved to frame `p + delta` by
//! rotating only its temporal block by `delta`; height and width blocks stay
//! untouched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Position of a token on the latent grid: frame, patch row, patch column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Position3D {
    pub t: usize,
    pub y: usize,
    pub x: usize,
}

impl Position3D {
    pub const fn new(t: usize, y: usize, x: usize) -> Self {
        Self { t, y, x }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RopeConfig {
    head_dim: usize,
    /// `(d_t, d_h, d_w)`
    split: [usize; 3],
    base: f64,
    freqs: [Vec<f64>; 3],
}

impl RopeConfig {
    pub const DEFAULT_BASE: f64 = 10_000.0;

    pub fn new(head_dim: usize, split: [usize; 3], base: f64) -> Result<Self> {
        if split.iter().sum::<usize>() != head_dim {
            return Err(Error::invalid(format!(
                "rope split {split:?} does not sum to head_dim {head_dim}"
            )));
        }
        if split.iter().any(|&d| d < 2 || d % 2 != 0) {
            return Err(Error::invalid(format!(
                "rope split {split:?}: every block must be even and >= 2"
            )));
        }
        if !(base.is_finite() && base > 0.0) {
            return Err(Error::invalid(format!("rope base must be positive, got {base}")));
        }
        let freqs = split.map(|d| {
            (0..d / 2)
                .map(|i| base.powf(-((2 * i) as f64) / d as f64))
                .collect()
        });
        Ok(Self {
            head_dim,
            split,
            base,
            freqs,
        })
    }

    /// Splits `head_dim` in the 44:42:42 temporal/height/width proportion,
    /// rounding the spatial blocks to even sizes; temporal takes the rest.
    pub fn proportional(head_dim: usize, base: f64) -> Result<Self> {
        let spatial = 2 * ((head_dim as f64 * 42.0 / 128.0) / 2.0).round() as usize;
        let spatial = spatial.max(2);
        let temporal = head_dim
            .checked_sub(2 * spatial)
            .ok_or_else(|| Error::invalid(format!("head_dim {head_dim} too small for rope")))?;
        Self::new(head_dim, [temporal, spatial, spatial], base)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn split(&self) -> [usize; 3] {
        self.split
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    fn check_keys(&self, keys: &Tensor) -> Result<()> {
        keys.expect_rank(3, "rope keys")?;
        if keys.dim(2) != self.head_dim {
            return Err(Error::invalid(format!(
                "rope: key head dim {} does not match config head_dim {}",
                keys.dim(2),
                self.head_dim
            )));
        }
        Ok(())
    }

    /// Rotates the pairs of one axis block of every head row in `rows`.
    fn rotate_block(&self, row: &mut [f64], axis: usize, pos: f64) {
        let offset: usize = self.split[..axis].iter().sum();
        let block = &mut row[offset..offset + self.split[axis]];
        for (pair, &f) in block.chunks_exact_mut(2).zip(&self.freqs[axis]) {
            let (s, c) = (pos * f).sin_cos();
            let (a, b) = (pair[0], pair[1]);
            pair[0] = a * c - b * s;
            pair[1] = a * s + b * c;
        }
    }
}

/// Rotates every `N×N_h×head_dim` row by its absolute 3D position.
pub fn apply_rope(keys: &Tensor, positions: &[Position3D], cfg: &RopeConfig) -> Result<Tensor> {
    cfg.check_keys(keys)?;
    if positions.len() != keys.dim(0) {
        return Err(Error::invalid(format!(
            "rope: {} positions for {} tokens",
            positions.len(),
            keys.dim(0)
        )));
    }
    let mut out = keys.clone();
    let token = keys.dim(1) * cfg.head_dim;
    for (chunk, p) in out.data_mut().chunks_mut(token).zip(positions) {
        for row in chunk.chunks_mut(cfg.head_dim) {
            cfg.rotate_block(row, 0, p.t as f64);
            cfg.rotate_block(row, 1, p.y as f64);
            cfg.rotate_block(row, 2, p.x as f64);
        }
    }
    Ok(out)
}

/// Moves already-rotated keys forward by `delta` frames.
pub fn temporal_shift(cached_keys: &Tensor, delta: usize, cfg: &RopeConfig) -> Result<Tensor> {
    let mut out = cached_keys.clone();
    temporal_shift_in_place(&mut out, delta, cfg)?;
    Ok(out)
}

/// In-place form of [`temporal_shift`]. Returns the number of pair rotations
/// performed (zero when `delta == 0`).
pub fn temporal_shift_in_place(keys: &mut Tensor, delta: usize, cfg: &RopeConfig) -> Result<u64> {
    cfg.check_keys(keys)?;
    if delta == 0 {
        return Ok(0);
    }
    let rows = keys.len() / cfg.head_dim;
    for row in keys.data_mut().chunks_mut(cfg.head_dim) {
        cfg.rotate_block(row, 0, delta as f64);
    }
    Ok((rows * cfg.split[0] / 2) as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> RopeConfig {
        RopeConfig::new(16, [6, 6, 4], RopeConfig::DEFAULT_BASE).unwrap()
    }

    fn keys(n: usize, seed: u64) -> Tensor {
        Tensor::randn(&[n, 2, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn split_validation() {
        assert!(RopeConfig::new(16, [6, 6, 6], 1e4).is_err());
        assert!(RopeConfig::new(16, [7, 5, 4], 1e4).is_err());
        assert!(RopeConfig::new(16, [12, 4, 0], 1e4).is_err());
        assert!(RopeConfig::new(16, [6, 6, 4], 0.0).is_err());
        let full = RopeConfig::proportional(128, 1e4).unwrap();
        assert_eq!(full.split(), [44, 42, 42]);
        assert_eq!(RopeConfig::proportional(16, 1e4).unwrap().split(), [4, 6, 6]);
    }

    #[test]
    fn zero_position_is_identity() {
        let k = keys(3, 1);
        let out = apply_rope(&k, &[Position3D::default(); 3], &cfg()).unwrap();
        assert_eq!(out, k);
    }

    #[test]
    fn unit_pair_rotation() {
        let c = RopeConfig::new(6, [2, 2, 2], 1e4).unwrap();
        let k = Tensor::new(vec![1, 1, 6], vec![1., 0., 0., 0., 0., 0.]).unwrap();
        for p in [1usize, 3, 17] {
            let out = apply_rope(&k, &[Position3D::new(p, 0, 0)], &c).unwrap();
            let want = (p as f64).cos();
            assert!((out.data()[0] - want).abs() < 1e-15);
            assert!((out.data()[1] - (p as f64).sin()).abs() < 1e-15);
        }
    }

    #[test]
    fn position_count_mismatch() {
        assert!(apply_rope(&keys(2, 0), &[Position3D::default()], &cfg()).is_err());
    }

    #[test]
    fn zero_shift_is_identity() {
        let k = apply_rope(&keys(2, 3), &[Position3D::new(5, 1, 2); 2], &cfg()).unwrap();
        assert_eq!(temporal_shift(&k, 0, &cfg()).unwrap(), k);
    }

    fn logit(q: &Tensor, k: &Tensor) -> f64 {
        q.data().iter().zip(k.data()).map(|(a, b)| a * b).sum()
    }

    proptest! {
        #[test]
        fn shift_equals_reencode(p in 0usize..=64, delta in 0usize..=32, y in 0usize..8, x in 0usize..8, seed in 0u64..10_000) {
            let c = cfg();
            let raw = keys(1, seed);
            let cached = apply_rope(&raw, &[Position3D::new(p, y, x)], &c).unwrap();
            let shifted = temporal_shift(&cached, delta, &c).unwrap();
            let direct = apply_rope(&raw, &[Position3D::new(p + delta, y, x)], &c).unwrap();
            prop_assert!(shifted.max_abs_diff(&direct) <= 1e-9);
        }

        #[test]
        fn shift_composes(d1 in 0usize..=32, d2 in 0usize..=32, seed in 0u64..10_000) {
            let c = cfg();
            let k = apply_rope(&keys(2, seed), &[Position3D::new(3, 1, 1); 2], &c).unwrap();
            let twice = temporal_shift(&temporal_shift(&k, d1, &c).unwrap(), d2, &c).unwrap();
            let once = temporal_shift(&k, d1 + d2, &c).unwrap();
            prop_assert!(twice.max_abs_diff(&once) <= 1e-9);
        }

        #[test]
        fn shift_leaves_spatial_bytes(delta in 1usize..=32, seed in 0u64..10_000) {
            let c = cfg();
            let k = keys(2, seed);
            let s = temporal_shift(&k, delta, &c).unwrap();
            for (a, b) in k.data().chunks(16).zip(s.data().chunks(16)) {
                prop_assert_eq!(&a[6..], &b[6..]);
            }
        }

        #[test]
        fn norm_preserved(t in 0usize..64, y in 0usize..32, x in 0usize..32, delta in 0usize..32, seed in 0u64..10_000) {
            let c = cfg();
            let k = keys(1, seed);
            let r = apply_rope(&k, &[Position3D::new(t, y, x)], &c).unwrap();
            for (a, b) in k.data().chunks(2).zip(r.data().chunks(2)) {
                prop_assert!((a[0].hypot(a[1]) - b[0].hypot(b[1])).abs() <= 1e-9);
            }
            let s = temporal_shift(&r, delta, &c).unwrap();
            prop_assert!((s.norm() - k.norm()).abs() <= 1e-9 * k.norm());
        }

        #[test]
        fn logits_depend_on_relative_position(
            qt in 0usize..32, qy in 0usize..8, qx in 0usize..8,
            kt in 0usize..32, ky in 0usize..8, kx in 0usize..8,
            ot in 0usize..32, oy in 0usize..8, ox in 0usize..8, seed in 0u64..10_000,
        ) {
            let c = RopeConfig::new(16, [6, 6, 4], 1e4).unwrap();
            let q = Tensor::randn(&[1, 1, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
            let k = Tensor::randn(&[1, 1, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 1));
            let base = logit(
                &apply_rope(&q, &[Position3D::new(qt, qy, qx)], &c).unwrap(),
                &apply_rope(&k, &[Position3D::new(kt, ky, kx)], &c).unwrap(),
            );
            let moved = logit(
                &apply_rope(&q, &[Position3D::new(qt + ot, qy + oy, qx + ox)], &c).unwrap(),
                &apply_rope(&k, &[Position3D::new(kt + ot, ky + oy, kx + ox)], &c).unwrap(),
            );
            prop_assert!((base - moved).abs() < 1e-6);
        }
    }
}
