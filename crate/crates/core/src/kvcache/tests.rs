use super::*;
use crate::compressor::centroid_positions;
use crate::rope::{apply_rope, Position3D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: usize = 2;
const W: usize = 2;

fn rope() -> RopeConfig {
    RopeConfig::new(8, [4, 2, 2], 1e4).unwrap()
}

fn cfg(mid_capacity: usize, n_top: usize) -> CacheConfig {
    CacheConfig {
        sink_frames: 8,
        recent_frames: 4,
        frames_per_block: 4,
        n_top,
        mid_capacity,
        evict_blocks: 1,
        tokens_per_block: 4 * H * W,
        compressed_tokens: 2,
        layers: 2,
        n_heads: 1,
        head_dim: 8,
    }
}

fn block_positions(block: usize) -> Vec<Position3D> {
    let mut out = Vec::new();
    for t in 0..4 {
        for y in 0..H {
            for x in 0..W {
                out.push(Position3D::new((block - 1) * 4 + t, y, x));
            }
        }
    }
    out
}

/// Raw (unrotated) keys of a block, reproducible from its index.
fn raw_keys(block: usize, layer: usize, n: usize) -> Tensor {
    Tensor::randn(&[n, 1, 8], 1.0, &mut ChaCha8Rng::seed_from_u64((block * 31 + layer) as u64))
}

fn full_block(block: usize) -> BlockKv {
    let pos = block_positions(block);
    BlockKv {
        block_index: block,
        layers: (0..2)
            .map(|l| LayerKv {
                keys: apply_rope(&raw_keys(block, l, pos.len()), &pos, &rope()).unwrap(),
                values: Tensor::full(&[pos.len(), 1, 8], block as f64),
            })
            .collect(),
    }
}

fn backup(block: usize) -> CompressedEntry {
    let positions = centroid_positions(block, 4, [2, 1, 1]);
    let layers = (0..2)
        .map(|l| LayerKv {
            keys: apply_rope(&raw_keys(block + 1000, l, 2), &positions, &rope()).unwrap(),
            values: Tensor::full(&[2, 1, 8], -(block as f64)),
        })
        .collect();
    CompressedEntry {
        block_index: block,
        tokens: Tensor::zeros(&[2, 8]),
        positions,
        layers,
    }
}

fn filled(c: CacheConfig, blocks: usize) -> PartitionedCache {
    let mut cache = PartitionedCache::new(c, rope()).unwrap();
    for b in 1..=blocks {
        cache.append_block(full_block(b), Some(backup(b))).unwrap();
    }
    cache
}

/// Straight-line replay of the partition policy on block indices only.
struct Replay {
    sink: Vec<usize>,
    recent: Vec<usize>,
    mid: Vec<usize>,
    delta: usize,
}

fn replay(c: &CacheConfig, blocks: usize) -> Replay {
    let mut r = Replay { sink: vec![], recent: vec![], mid: vec![], delta: 0 };
    for b in 1..=blocks {
        if r.sink.len() < c.sink_frames / c.frames_per_block {
            r.sink.push(b);
            continue;
        }
        r.recent.push(b);
        if r.recent.len() > c.recent_frames / c.frames_per_block {
            r.mid.push(r.recent.remove(0));
        }
        if r.mid.len() > c.mid_capacity {
            r.mid.drain(..c.evict_blocks);
            r.delta += c.evict_blocks * c.frames_per_block;
        }
    }
    r
}

#[test]
fn config_validation_names_fields() {
    let mut c = cfg(8, 4);
    c.sink_frames = 6;
    assert!(c.validate().unwrap_err().to_string().contains("cache.sink_frames"));
    let mut c = cfg(8, 4);
    c.n_top = 9;
    assert!(c.validate().unwrap_err().to_string().contains("cache.n_top"));
    let mut c = cfg(8, 4);
    c.evict_blocks = 6;
    assert!(c.validate().unwrap_err().to_string().contains("cache.evict_blocks"));
}

#[test]
fn warm_up_fills_sink_then_recent() {
    let mut cache = filled(cfg(8, 4), 2);
    assert_eq!(cache.sink_indices(), vec![1, 2]);
    assert!(cache.mid_indices().is_empty() && cache.recent_indices().is_empty());
    cache.append_block(full_block(3), Some(backup(3))).unwrap();
    assert_eq!(cache.recent_indices(), vec![3]);
    cache.append_block(full_block(4), Some(backup(4))).unwrap();
    assert_eq!(cache.recent_indices(), vec![4]);
    assert_eq!(cache.mid_indices(), vec![3]);
}

#[test]
fn append_contract_errors() {
    let mut cache = filled(cfg(8, 4), 2);
    let err = cache.append_block(full_block(4), Some(backup(4))).unwrap_err();
    assert!(matches!(err, Error::ContractViolation(_)));
    let err = cache.append_block(full_block(3), Some(backup(5))).unwrap_err();
    assert!(matches!(err, Error::ContractViolation(_)));
    let err = cache.append_block(full_block(3), None).unwrap_err();
    assert!(matches!(err, Error::ContractViolation(_)));
}

#[test]
fn hundred_blocks_match_replay() {
    let c = cfg(64, 16);
    let cache = filled(c.clone(), 100);
    let oracle = replay(&c, 100);
    assert_eq!(cache.mid_indices().len(), 64);
    assert_eq!(cache.evicted_frames(), (100 - 2 - 1 - 64) * 4);
    assert_eq!(cache.sink_indices(), oracle.sink);
    assert_eq!(cache.mid_indices(), oracle.mid);
    assert_eq!(cache.recent_indices(), oracle.recent);
    assert_eq!(cache.evicted_frames(), oracle.delta);
}

#[test]
fn replay_equivalence_over_configs() {
    for (cap, top, evict, recent) in [(4, 2, 1, 4), (6, 3, 2, 8), (3, 3, 1, 0), (10, 1, 5, 4)] {
        let mut c = cfg(cap, top);
        c.evict_blocks = evict;
        c.recent_frames = recent;
        for blocks in [1, 2, 5, 17, 40] {
            let cache = filled(c.clone(), blocks);
            let o = replay(&c, blocks);
            assert_eq!(cache.sink_indices(), o.sink, "{c:?} {blocks}");
            assert_eq!(cache.mid_indices(), o.mid, "{c:?} {blocks}");
            assert_eq!(cache.recent_indices(), o.recent, "{c:?} {blocks}");
            assert_eq!(cache.evicted_frames(), o.delta, "{c:?} {blocks}");
        }
    }
}

#[test]
fn evict_zero_is_noop() {
    let mut cache = filled(cfg(8, 4), 6);
    let before = cache.sink().to_vec();
    let ev = cache.evict_mid(0).unwrap();
    assert_eq!(ev.delta_frames, 0);
    assert_eq!(cache.sink(), &before[..]);
    assert_eq!(cache.eviction_events(), 0);
}

#[test]
fn evict_too_many_is_rejected() {
    let mut cache = filled(cfg(8, 4), 5);
    assert!(matches!(cache.evict_mid(3), Err(Error::InvalidArgument(_))));
}

#[test]
fn eviction_matches_reencoded_sink() {
    let mut cache = filled(cfg(8, 4), 6);
    let ev = cache.evict_mid(1).unwrap();
    assert_eq!(ev.delta_frames, 4);
    for b in cache.sink() {
        let shifted: Vec<Position3D> = block_positions(b.block_index)
            .into_iter()
            .map(|p| Position3D::new(p.t + 4, p.y, p.x))
            .collect();
        for (l, layer) in b.layers.iter().enumerate() {
            let want = apply_rope(&raw_keys(b.block_index, l, shifted.len()), &shifted, &rope()).unwrap();
            assert!(layer.keys.max_abs_diff(&want) <= 1e-9);
        }
    }
}

#[test]
fn two_single_evictions_equal_one_double() {
    let mut a = filled(cfg(8, 4), 7);
    let mut b = a.clone();
    a.evict_mid(1).unwrap();
    a.evict_mid(1).unwrap();
    b.evict_mid(2).unwrap();
    assert_eq!(a.evicted_frames(), b.evicted_frames());
    assert_eq!(a.mid_indices(), b.mid_indices());
    for (x, y) in a.sink().iter().zip(b.sink()) {
        for (lx, ly) in x.layers.iter().zip(&y.layers) {
            assert!(lx.keys.max_abs_diff(&ly.keys) <= 1e-9);
        }
    }
}

#[test]
fn sink_identity_and_values_never_change() {
    let mut cache = filled(cfg(4, 2), 3);
    let values: Vec<Tensor> = cache.sink().iter().map(|b| b.layers[0].values.clone()).collect();
    for b in 4..60 {
        cache.append_block(full_block(b), Some(backup(b))).unwrap();
        assert_eq!(cache.sink_indices(), vec![1, 2]);
        for (s, v) in cache.sink().iter().zip(&values) {
            assert_eq!(&s.layers[0].values, v);
        }
    }
    assert!(cache.eviction_events() > 0);
}

#[test]
fn context_positions_stay_ordered() {
    let c = cfg(5, 3);
    let mut cache = PartitionedCache::new(c, rope()).unwrap();
    for b in 1..=80 {
        cache.append_block(full_block(b), Some(backup(b))).unwrap();
        let mid = cache.mid_indices();
        for selected in [mid.iter().copied().take(3).collect::<Vec<_>>(), mid.iter().rev().take(3).rev().copied().collect()] {
            let starts = cache.context_frame_starts(&selected).unwrap();
            assert!(starts.windows(2).all(|w| w[0] <= w[1]), "block {b}: {starts:?}");
        }
        if let (Some(&last_sink), Some(&first_mid)) = (cache.sink_indices().last(), mid.first()) {
            let sink_end = last_sink * 4 + cache.evicted_frames();
            assert_eq!(sink_end, (first_mid - 1) * 4, "sink must abut mid at block {b}");
        }
    }
}

#[test]
fn bounded_context_is_constant_for_500_blocks() {
    let c = cfg(8, 4);
    let steady = c.steady_context_tokens();
    let first = c.first_steady_block();
    let mut cache = PartitionedCache::new(c.clone(), rope()).unwrap();
    for b in 1..=500 {
        // context while generating block b
        let selected: Vec<usize> = {
            let mid = cache.mid_indices();
            mid[mid.len().saturating_sub(4)..].to_vec()
        };
        let ctx = cache.assemble_context(&selected, 1, Some(&full_block(b).layers[1])).unwrap();
        assert_eq!(ctx.tokens(), cache.context_tokens(selected.len()));
        if b >= first {
            assert_eq!(ctx.tokens(), steady, "block {b}");
        } else {
            assert!(ctx.tokens() < steady);
        }
        cache.append_block(full_block(b), Some(backup(b))).unwrap();
        assert!(cache.mid_indices().len() <= c.mid_capacity);
    }
}

#[test]
fn assemble_context_errors() {
    let cache = filled(cfg(8, 4), 9);
    let mid = cache.mid_indices();
    assert!(cache.assemble_context(&[999], 0, None).is_err());
    assert!(cache.assemble_context(&[mid[1], mid[0]], 0, None).is_err());
    assert!(cache.assemble_context(&mid, 0, None).is_err()); // 5 > n_top
    assert!(cache.assemble_context(&[], 2, None).is_err());
    let empty = PartitionedCache::new(cfg(8, 4), rope()).unwrap();
    assert!(empty.assemble_context(&[], 0, None).is_err());
}

#[test]
fn warm_up_context_has_available_partitions_only() {
    let cache = filled(cfg(8, 4), 3);
    let ctx = cache.assemble_context(&[], 0, Some(&full_block(4).layers[0])).unwrap();
    assert_eq!(ctx.tokens(), 4 * 16);
}

#[test]
fn toy_context_arithmetic() {
    let mut c = cfg(8, 4);
    c.tokens_per_block = 192;
    c.compressed_tokens = 8;
    assert_eq!(c.context_tokens(2, 4, 1), 384 + 32 + 384);
}

#[test]
fn full_scale_context_assembles_27872_tokens() {
    let c = CacheConfig {
        sink_frames: 8,
        recent_frames: 4,
        frames_per_block: 4,
        n_top: 16,
        mid_capacity: 16,
        evict_blocks: 1,
        tokens_per_block: 6240,
        compressed_tokens: 182,
        layers: 1,
        n_heads: 1,
        head_dim: 6,
    };
    assert_eq!(c.steady_context_tokens(), 27_872);
    let rope = RopeConfig::new(6, [2, 2, 2], 1e4).unwrap();
    let mut cache = PartitionedCache::new(c, rope).unwrap();
    let kv = |n: usize| LayerKv { keys: Tensor::zeros(&[n, 1, 6]), values: Tensor::zeros(&[n, 1, 6]) };
    for b in 1..=19 {
        let full = BlockKv { block_index: b, layers: vec![kv(6240)] };
        let bk = CompressedEntry {
            block_index: b,
            tokens: Tensor::zeros(&[182, 1]),
            positions: vec![Position3D::default(); 182],
            layers: vec![kv(182)],
        };
        cache.append_block(full, Some(bk)).unwrap();
    }
    let sel = cache.mid_indices();
    assert_eq!(sel.len(), 16);
    let ctx = cache.assemble_context(&sel, 0, Some(&kv(6240))).unwrap();
    assert_eq!(ctx.tokens(), 12_480 + 2_912 + 12_480);
}

#[test]
fn memory_report_full_scale_numbers() {
    let g = MemoryGeometry::default();
    assert_eq!(g.tokens_per_block(), 6240);
    assert_eq!(g.compressed_tokens(), 182);
    let r = memory_report(&g, 120.0).unwrap();
    assert_eq!(r.total_tokens, 748_800);
    assert_eq!(r.full_cache_bytes, 748_800 * 30 * 2 * 12 * 128 * 2);
    assert!((r.full_cache_bytes as f64 / 1e9 - 138.0).abs() / 138.0 < 0.01);
    assert_eq!(r.bounded_context_tokens, 27_872);
    assert_eq!(r.bounded_cache_bytes, 27_872 * 30 * 2 * 12 * 128 * 2);
    assert!((r.bounded_cache_bytes as f64 / 1e9 - 5.14).abs() < 0.01);

    let r2 = memory_report(&g, 240.0).unwrap();
    assert_eq!(r2.full_cache_bytes, 2 * r.full_cache_bytes);
    assert_eq!(r2.bounded_cache_bytes, r.bounded_cache_bytes);
    assert_eq!(r2.stored_buffer_bytes, r.stored_buffer_bytes);
}
