use streamkv::compressor::{centroid_positions, CompressedEntry};
use streamkv::kvcache::{BlockKv, CacheConfig, LayerKv, PartitionedCache};
use streamkv::numerics::Tensor;
use streamkv::rope::RopeConfig;
use streamkv::selector::{Router, SelectionConfig};

const D: usize = 8;

fn cache_cfg(mid_capacity: usize, n_top: usize) -> CacheConfig {
    CacheConfig {
        sink_frames: 4,
        recent_frames: 4,
        frames_per_block: 4,
        n_top,
        mid_capacity,
        evict_blocks: 1,
        tokens_per_block: 4,
        compressed_tokens: 2,
        layers: 1,
        n_heads: 1,
        head_dim: D,
    }
}

/// One-hot direction for block `b`, so queries along it pick that block.
fn direction(b: usize) -> Vec<f64> {
    let mut v = vec![0.0; D];
    v[b % D] = 1.0;
    v
}

fn rows(n: usize, dir: &[f64]) -> Tensor {
    Tensor::from_fn(&[n, 1, D], |i| dir[i % D])
}

fn full(b: usize) -> BlockKv {
    BlockKv {
        block_index: b,
        layers: vec![LayerKv { keys: rows(4, &direction(b)), values: rows(4, &direction(b)) }],
    }
}

fn backup(b: usize) -> CompressedEntry {
    CompressedEntry {
        block_index: b,
        tokens: Tensor::zeros(&[2, D]),
        positions: centroid_positions(b, 4, [2, 1, 1]),
        layers: vec![LayerKv { keys: rows(2, &direction(b)), values: rows(2, &direction(b)) }],
    }
}

fn cache(blocks: usize, mid_capacity: usize, n_top: usize) -> PartitionedCache {
    let rope = RopeConfig::new(D, [4, 2, 2], 1e4).unwrap();
    let mut c = PartitionedCache::new(cache_cfg(mid_capacity, n_top), rope).unwrap();
    for b in 1..=blocks {
        c.append_block(full(b), Some(backup(b))).unwrap();
    }
    c
}

fn router(n_top: usize, refresh_interval: usize) -> Router {
    Router::new(SelectionConfig {
        n_top,
        gamma: 1.0,
        min_queries: 1,
        half_heads: false,
        refresh_interval,
    })
    .unwrap()
}

fn toward(b: usize) -> impl FnOnce() -> streamkv::Result<Tensor> {
    move || Ok(rows(3, &direction(b)))
}

#[test]
fn later_steps_reuse_step_one() {
    // sink 1, recent 1, mid holds blocks 2..=6
    let c = cache(7, 8, 2);
    assert_eq!(c.mid_indices(), vec![2, 3, 4, 5, 6]);
    let mut r = router(2, 1);
    let first = r.route(&c, 8, 1, toward(4)).unwrap();
    assert!(first.scored);
    assert!(first.selected.contains(&4));
    assert_eq!(r.scoring_calls(), 1);
    let flops = r.scoring_flops();
    for step in 2..=4 {
        let again = r.route(&c, 8, step, || panic!("no scoring on later steps")).unwrap();
        assert!(!again.scored);
        assert_eq!(again.selected, first.selected);
    }
    assert_eq!(r.scoring_calls(), 1);
    assert_eq!(r.scoring_flops(), flops);
}

#[test]
fn refresh_interval_shares_indices_across_blocks() {
    let c = cache(7, 8, 2);
    let mut r = router(2, 2);
    let a = r.route(&c, 8, 1, toward(3)).unwrap();
    let b = r.route(&c, 9, 1, || panic!("block 9 reuses block 8")).unwrap();
    assert_eq!(a.selected, b.selected);
    let b2 = r.route(&c, 9, 2, || panic!("step 2 reuses")).unwrap();
    assert_eq!(b2.selected, a.selected);
    let c10 = r.route(&c, 10, 1, toward(5)).unwrap();
    assert!(c10.scored);
    assert_eq!(r.scoring_calls(), 2);
}

#[test]
fn small_mid_is_selected_whole() {
    let c = cache(5, 8, 4);
    let mut r = router(4, 1);
    let out = r.route(&c, 6, 1, || panic!("selection is total")).unwrap();
    assert!(!out.scored);
    assert_eq!(out.selected, c.mid_indices());
    assert_eq!(r.scoring_calls(), 0);
}

#[test]
fn routing_does_not_destroy_unselected_blocks() {
    let c = cache(7, 8, 1);
    let before = c.mid_indices();
    let mut r = router(1, 1);
    let a = r.route(&c, 8, 1, toward(2)).unwrap();
    assert_eq!(a.selected, vec![2]);
    assert_eq!(c.mid_indices(), before);
    // block 5 was passed over above and is still retrievable
    let b = r.route(&c, 9, 1, toward(5)).unwrap();
    assert_eq!(b.selected, vec![5]);
    assert_eq!(c.mid_indices(), before);
}

#[test]
fn evicted_selection_forces_rescoring() {
    let mut c = cache(7, 8, 1);
    let mut r = router(1, 4);
    assert_eq!(r.route(&c, 8, 1, toward(2)).unwrap().selected, vec![2]);
    c.evict_mid(1).unwrap();
    let out = r.route(&c, 9, 1, toward(3)).unwrap();
    assert!(out.scored);
    assert_eq!(out.selected, vec![3]);
}

#[test]
fn trace_records_are_consistent() {
    let c = cache(7, 8, 2);
    let mut r = router(2, 1);
    let out = r.route(&c, 8, 1, toward(6)).unwrap();
    assert_eq!(out.candidates, c.mid_indices());
    assert_eq!(out.scores.len(), out.candidates.len());
    assert_eq!(out.selected.len(), 2);
    assert!(out.selected.windows(2).all(|w| w[0] < w[1]));
    assert!(out.selected.iter().all(|s| out.candidates.contains(s)));
    // work bound: queries · mid tokens · heads · head_dim
    assert!(r.last_scoring_flops() <= (3 * 5 * 2 * D) as u64);
}
