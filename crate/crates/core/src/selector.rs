//! Dynamic context selection over the compressed mid partition.
//!
//! Each candidate block gets an affinity score: the sum, over a uniformly
//! subsampled set of query tokens and all of the block's keys, of the scaled
//! dot products averaged over the first `N_h / 2` heads. The top `N_top`
//! blocks are attended, in ascending block order. Scoring runs only at the
//! first denoising step of a block; later steps reuse the cached indices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvcache::PartitionedCache;
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub n_top: usize,
    /// Query sampling ratio in `(0, 1]`.
    pub gamma: f64,
    pub min_queries: usize,
    /// Score with the first `N_h / 2` heads only.
    pub half_heads: bool,
    /// Blocks between re-scoring.
    pub refresh_interval: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            n_top: 16,
            gamma: 0.25,
            min_queries: 32,
            half_heads: true,
            refresh_interval: 1,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_top == 0 {
            return Err(Error::config("selection.n_top", "must be >= 1"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config(
                "selection.gamma",
                format!("{} is outside (0, 1]", self.gamma),
            ));
        }
        if self.min_queries == 0 {
            return Err(Error::config("selection.min_queries", "must be >= 1"));
        }
        if self.refresh_interval == 0 {
            return Err(Error::config("selection.refresh_interval", "must be >= 1"));
        }
        Ok(())
    }

    pub fn scoring_heads(&self, n_heads: usize) -> usize {
        if self.half_heads {
            (n_heads / 2).max(1)
        } else {
            n_heads
        }
    }
}

/// `min(L_q, max(min_queries, ⌊γ·L_q⌋))` uniformly spaced query indices.
pub fn subsample_queries(l_q: usize, gamma: f64, min_queries: usize) -> Vec<usize> {
    let count = l_q.min(min_queries.max((gamma * l_q as f64).floor() as usize));
    (0..count).map(|k| k * l_q / count).collect()
}

/// Scores and the work spent computing them.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockScores {
    pub scores: Vec<f64>,
    pub flops: u64,
}

/// Affinity score of each candidate key block (`L_k × N_h × d_h` each)
/// against `queries` (`L_q × N_h × d_h`).
///
/// The double sum over queries and keys factorises into a dot product of
/// the query sum with the key sum, per head.
pub fn score_blocks(queries: &Tensor, candidates: &[&Tensor], cfg: &SelectionConfig) -> Result<BlockScores> {
    queries.expect_rank(3, "selector queries")?;
    if candidates.is_empty() {
        return Ok(BlockScores { scores: Vec::new(), flops: 0 });
    }
    let (l_q, n_heads, head_dim) = (queries.dim(0), queries.dim(1), queries.dim(2));
    let heads = cfg.scoring_heads(n_heads);
    let picked = subsample_queries(l_q, cfg.gamma, cfg.min_queries);
    let row = n_heads * head_dim;
    let mut q_sum = vec![0.0; heads * head_dim];
    for &i in &picked {
        let q = &queries.data()[i * row..i * row + heads * head_dim];
        q_sum.iter_mut().zip(q).for_each(|(a, b)| *a += b);
    }
    let mut flops = (picked.len() * heads * head_dim) as u64;
    let norm = 1.0 / (heads as f64 * (head_dim as f64).sqrt());
    let mut scores = Vec::with_capacity(candidates.len());
    for k in candidates {
        if k.rank() != 3 || k.dim(1) != n_heads || k.dim(2) != head_dim {
            return Err(Error::invalid(format!(
                "candidate keys {:?} incompatible with queries {:?}",
                k.shape(),
                queries.shape()
            )));
        }
        let mut k_sum = vec![0.0; heads * head_dim];
        for j in 0..k.dim(0) {
            let kr = &k.data()[j * row..j * row + heads * head_dim];
            k_sum.iter_mut().zip(kr).for_each(|(a, b)| *a += b);
        }
        let s: f64 = q_sum.iter().zip(&k_sum).map(|(a, b)| a * b).sum();
        flops += ((k.dim(0) + 2) * heads * head_dim) as u64;
        scores.push(s * norm);
    }
    Ok(BlockScores { scores, flops })
}

/// Positions of the `n_top` largest scores, ascending. Ties go to the
/// smaller (older) position.
pub fn select_topk(scores: &[f64], n_top: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(n_top);
    order.sort_unstable();
    order
}

/// One routing decision, as recorded in the selection trace.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteRecord {
    pub block: usize,
    pub step: usize,
    /// Whether scores were computed on this call.
    pub scored: bool,
    pub candidates: Vec<usize>,
    /// Scores aligned with `candidates`; empty if selection was total.
    pub scores: Vec<f64>,
    pub selected: Vec<usize>,
}

#[derive(Debug, Clone)]
struct CachedRoute {
    scored_block: usize,
    served_block: usize,
    candidates: Vec<usize>,
    scores: Vec<f64>,
    selected: Vec<usize>,
}

/// Step-wise routing with cached indices.
#[derive(Debug, Clone)]
pub struct Router {
    cfg: SelectionConfig,
    cached: Option<CachedRoute>,
    scoring_calls: u64,
    scoring_flops: u64,
    last_scoring_flops: u64,
}

impl Router {
    pub fn new(cfg: SelectionConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            cached: None,
            scoring_calls: 0,
            scoring_flops: 0,
            last_scoring_flops: 0,
        })
    }

    pub fn config(&self) -> &SelectionConfig {
        &self.cfg
    }

    pub fn scoring_calls(&self) -> u64 {
        self.scoring_calls
    }

    pub fn scoring_flops(&self) -> u64 {
        self.scoring_flops
    }

    pub fn last_scoring_flops(&self) -> u64 {
        self.last_scoring_flops
    }

    /// Selects mid blocks for denoising step `step` (1-based) of `block`.
    ///
    /// `queries` supplies the scoring-layer queries of the recent and
    /// current blocks; it is only invoked when scoring actually runs.
    pub fn route(
        &mut self,
        cache: &PartitionedCache,
        block: usize,
        step: usize,
        queries: impl FnOnce() -> Result<Tensor>,
    ) -> Result<RouteRecord> {
        let candidates = cache.mid_indices();
        let record = |scored: bool, scores: Vec<f64>, selected: Vec<usize>| RouteRecord {
            block,
            step,
            scored,
            candidates: candidates.clone(),
            scores,
            selected,
        };
        if candidates.len() <= self.cfg.n_top {
            return Ok(record(false, Vec::new(), candidates.clone()));
        }
        if let Some(c) = &mut self.cached {
            let still_present = c.selected.iter().all(|b| candidates.binary_search(b).is_ok());
            let same_block = c.served_block == block && step > 1;
            let within_interval =
                step == 1 && block > c.scored_block && block - c.scored_block < self.cfg.refresh_interval;
            if still_present && (same_block || within_interval) {
                c.served_block = block;
                let scores = if c.candidates == candidates { c.scores.clone() } else { Vec::new() };
                return Ok(record(false, scores, c.selected.clone()));
            }
        }
        let q = queries()?;
        let keys: Vec<&Tensor> = cache.mid().map(|e| &e.layers[0].keys).collect();
        let scored = score_blocks(&q, &keys, &self.cfg)?;
        self.scoring_calls += 1;
        self.scoring_flops += scored.flops;
        self.last_scoring_flops = scored.flops;
        let selected: Vec<usize> = select_topk(&scored.scores, self.cfg.n_top)
            .into_iter()
            .map(|i| candidates[i])
            .collect();
        self.cached = Some(CachedRoute {
            scored_block: block,
            served_block: block,
            candidates: candidates.clone(),
            scores: scored.scores.clone(),
            selected: selected.clone(),
        });
        Ok(record(true, scored.scores, selected))
    }
}
