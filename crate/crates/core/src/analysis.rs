//! Post-hoc metrics over selection traces and the eviction-strategy
//! benchmark.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{attention_weights, Tensor};
use crate::selector::{score_blocks, select_topk, RouteRecord, SelectionConfig};

/// One routing step seen by the metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionStep {
    pub block: usize,
    pub step: usize,
    /// Selected block ids.
    pub blocks: BTreeSet<usize>,
    /// Selected positions within the candidate list, `< candidates`.
    pub positions: BTreeSet<usize>,
    pub candidates: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SelectionHistory {
    pub steps: Vec<SelectionStep>,
}

impl SelectionHistory {
    /// Builds a history from trace records. Records with no candidates are
    /// skipped; `scored_only` also drops steps that reused cached indices.
    pub fn from_routes(records: &[RouteRecord], scored_only: bool) -> Result<Self> {
        let mut steps = Vec::new();
        for r in records {
            if r.candidates.is_empty() || (scored_only && !r.scored) {
                continue;
            }
            let mut positions = BTreeSet::new();
            for b in &r.selected {
                let p = r.candidates.iter().position(|c| c == b).ok_or_else(|| {
                    Error::invalid(format!(
                        "block {} step {}: selected block {b} is not a candidate",
                        r.block, r.step
                    ))
                })?;
                positions.insert(p);
            }
            steps.push(SelectionStep {
                block: r.block,
                step: r.step,
                blocks: r.selected.iter().copied().collect(),
                positions,
                candidates: r.candidates.len(),
            });
        }
        Ok(Self { steps })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Mean score per relative-position bucket. `None` marks an empty bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceProfile {
    pub means: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

/// Buckets every score by the relative position `(j + ½)/M` of its
/// candidate and averages per bucket.
pub fn importance_profile(history: &[Vec<f64>], buckets: usize) -> Result<ImportanceProfile> {
    if buckets == 0 {
        return Err(Error::invalid("importance profile needs at least one bucket"));
    }
    if history.iter().all(|s| s.is_empty()) {
        return Err(Error::invalid("importance profile needs a non-empty score history"));
    }
    let mut sums = vec![0.0; buckets];
    let mut counts = vec![0usize; buckets];
    for scores in history {
        let m = scores.len();
        for (j, &s) in scores.iter().enumerate() {
            let b = ((2 * j + 1) * buckets / (2 * m)).min(buckets - 1);
            sums[b] += s;
            counts[b] += 1;
        }
    }
    let means = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    Ok(ImportanceProfile { means, counts })
}

/// `1 − |A ∩ B| / |A ∪ B|`, and 0 when both sets are empty.
pub fn jaccard_distance(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    1.0 - a.intersection(b).count() as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Churn {
    pub distances: Vec<f64>,
    pub mean: f64,
}

/// Jaccard distance between consecutive selected block sets.
pub fn jaccard_churn(sets: &[BTreeSet<usize>]) -> Result<Churn> {
    if sets.len() < 2 {
        return Err(Error::invalid(format!(
            "churn needs at least 2 selection steps, got {}",
            sets.len()
        )));
    }
    let distances: Vec<f64> = sets.windows(2).map(|w| jaccard_distance(&w[0], &w[1])).collect();
    let mean = distances.iter().sum::<f64>() / distances.len() as f64;
    Ok(Churn { distances, mean })
}

/// Per step, the fraction of that step's candidate positions selected at
/// least once within the trailing `window` steps.
pub fn position_diversity(history: &SelectionHistory, window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::invalid("diversity window must be >= 1"));
    }
    let steps = &history.steps;
    Ok((0..steps.len())
        .map(|t| {
            let m = steps[t].candidates;
            let lo = (t + 1).saturating_sub(window);
            let seen: BTreeSet<usize> = steps[lo..=t]
                .iter()
                .flat_map(|s| s.positions.iter().copied())
                .filter(|&p| p < m)
                .collect();
            seen.len() as f64 / m as f64
        })
        .collect())
}

/// How often each candidate position is attended, under two normalisations.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionDensity {
    /// Raw selection count per position.
    pub counts: Vec<u64>,
    /// `count / steps`: fraction of steps that selected the position.
    pub global: Vec<f64>,
    /// Mean over steps of `1/|selected|` for selected positions, so each step
    /// contributes total mass 1.
    pub per_step: Vec<f64>,
}

pub fn selection_density(history: &SelectionHistory) -> Result<SelectionDensity> {
    if history.is_empty() {
        return Err(Error::invalid("selection density needs a non-empty history"));
    }
    let width = history.steps.iter().map(|s| s.candidates).max().unwrap_or(0);
    let mut counts = vec![0u64; width];
    let mut per_step = vec![0.0; width];
    for s in &history.steps {
        let k = s.positions.len().max(1) as f64;
        for &p in &s.positions {
            counts[p] += 1;
            per_step[p] += 1.0 / k;
        }
    }
    let n = history.len() as f64;
    Ok(SelectionDensity {
        global: counts.iter().map(|&c| c as f64 / n).collect(),
        per_step: per_step.iter().map(|&v| v / n).collect(),
        counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Uniformly random subset, seeded.
    Random,
    /// The most recent blocks.
    Fifo,
    /// Affinity-ranked top-k.
    Dynamic,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Random, Strategy::Fifo, Strategy::Dynamic];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Fifo => "fifo",
            Strategy::Dynamic => "dynamic",
        }
    }

    /// Parses a comma-separated list such as `fifo,dynamic`.
    pub fn parse_list(s: &str) -> Result<Vec<Strategy>> {
        s.split(',').map(|p| p.trim().parse()).collect()
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Strategy::Random),
            "fifo" => Ok(Strategy::Fifo),
            "dynamic" => Ok(Strategy::Dynamic),
            other => Err(Error::invalid(format!(
                "unknown strategy {other:?}; expected random, fifo or dynamic"
            ))),
        }
    }
}

/// Synthetic stream with planted revisits: at every step one old block
/// carries keys aligned with that step's queries.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    /// Candidate blocks, oldest first.
    pub candidates: usize,
    /// Blocks each policy may keep.
    pub budget: usize,
    pub tokens_per_block: usize,
    pub queries: usize,
    pub head_dim: usize,
    pub steps: usize,
    /// Blocks that get revisited, cycled through step by step.
    pub planted: Vec<usize>,
    /// Norm of the shared direction added to planted keys and queries.
    pub strength: f64,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            candidates: 8,
            budget: 4,
            tokens_per_block: 8,
            queries: 32,
            head_dim: 16,
            steps: 24,
            planted: vec![0, 1, 2],
            strength: 4.0,
            seed: 0,
        }
    }
}

/// A materialised workload: per step, the candidate key blocks and the
/// query block (`N_h = 1`).
#[derive(Debug, Clone)]
pub struct Workload {
    pub spec: WorkloadSpec,
    pub keys: Vec<Vec<Tensor>>,
    pub queries: Vec<Tensor>,
}

impl Workload {
    pub fn build(spec: &WorkloadSpec) -> Result<Self> {
        let s = spec;
        if s.candidates == 0 || s.budget == 0 || s.tokens_per_block == 0 || s.queries == 0 || s.head_dim == 0 {
            return Err(Error::invalid("workload sizes must all be >= 1"));
        }
        if s.steps < 2 {
            return Err(Error::invalid("workload needs at least 2 steps"));
        }
        if let Some(p) = s.planted.iter().find(|&&p| p >= s.candidates) {
            return Err(Error::invalid(format!(
                "planted block {p} is outside {} candidates",
                s.candidates
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        let noise = 1.0 / (s.head_dim as f64).sqrt();
        let mut keys = Vec::with_capacity(s.steps);
        let mut queries = Vec::with_capacity(s.steps);
        for t in 0..s.steps {
            let dir = Tensor::randn(&[s.head_dim], 1.0, &mut rng);
            let dir = dir.scale(1.0 / dir.norm());
            let planted = (!s.planted.is_empty()).then(|| s.planted[t % s.planted.len()]);
            let step_keys: Vec<Tensor> = (0..s.candidates)
                .map(|b| {
                    let k = Tensor::randn(&[s.tokens_per_block, 1, s.head_dim], noise, &mut rng);
                    if Some(b) == planted {
                        shift_rows(&k, &dir, s.strength)
                    } else {
                        Ok(k)
                    }
                })
                .collect::<Result<_>>()?;
            let q = Tensor::randn(&[s.queries, 1, s.head_dim], noise, &mut rng);
            let q = if planted.is_some() { shift_rows(&q, &dir, s.strength)? } else { q };
            keys.push(step_keys);
            queries.push(q);
        }
        Ok(Self {
            spec: spec.clone(),
            keys,
            queries,
        })
    }
}

fn shift_rows(t: &Tensor, dir: &Tensor, strength: f64) -> Result<Tensor> {
    let d = dir.len();
    let data = t
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v + strength * dir.data()[i % d])
        .collect();
    Tensor::new(t.shape().to_vec(), data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyResult {
    pub strategy: Strategy,
    /// Mean over steps of the full-context softmax mass on kept blocks.
    pub retained_mass: f64,
    pub min_mass: f64,
    pub churn: f64,
}

/// Blocks a policy keeps at `step`, ascending.
fn choose(strategy: Strategy, w: &Workload, step: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let (m, k) = (w.spec.candidates, w.spec.budget.min(w.spec.candidates));
    Ok(match strategy {
        Strategy::Fifo => (m - k..m).collect(),
        Strategy::Random => {
            let mut v = sample(rng, m, k).into_vec();
            v.sort_unstable();
            v
        }
        Strategy::Dynamic => {
            let cfg = SelectionConfig {
                n_top: k,
                gamma: 1.0,
                min_queries: 1,
                half_heads: false,
                refresh_interval: 1,
            };
            let refs: Vec<&Tensor> = w.keys[step].iter().collect();
            select_topk(&score_blocks(&w.queries[step], &refs, &cfg)?.scores, k)
        }
    })
}

/// Softmax mass the full context puts on `kept`, averaged over queries.
fn retained_mass(w: &Workload, step: usize, kept: &[usize]) -> Result<f64> {
    let refs: Vec<&Tensor> = w.keys[step].iter().collect();
    let all = Tensor::concat(&refs)?;
    let probs = attention_weights(&w.queries[step], &all)?;
    let (lq, lk, l) = (probs.dim(0), probs.dim(2), w.spec.tokens_per_block);
    let mut mass = 0.0;
    for i in 0..lq {
        let row = &probs.data()[i * lk..(i + 1) * lk];
        mass += kept.iter().map(|&b| row[b * l..(b + 1) * l].iter().sum::<f64>()).sum::<f64>();
    }
    Ok((mass / lq as f64).min(1.0))
}

pub fn strategy_bench(workload: &Workload, strategies: &[Strategy]) -> Result<Vec<StrategyResult>> {
    strategies
        .iter()
        .map(|&strategy| {
            let mut rng = ChaCha8Rng::seed_from_u64(workload.spec.seed ^ 0x5eed);
            let mut masses = Vec::with_capacity(workload.spec.steps);
            let mut sets = Vec::with_capacity(workload.spec.steps);
            for step in 0..workload.spec.steps {
                let kept = choose(strategy, workload, step, &mut rng)?;
                masses.push(retained_mass(workload, step, &kept)?);
                sets.push(kept.into_iter().collect::<BTreeSet<_>>());
            }
            Ok(StrategyResult {
                strategy,
                retained_mass: masses.iter().sum::<f64>() / masses.len() as f64,
                min_mass: masses.iter().copied().fold(f64::INFINITY, f64::min),
                churn: jaccard_churn(&sets)?.mean,
            })
        })
        .collect()
}
