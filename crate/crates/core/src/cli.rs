//! Subcommands behind the `streamkv` binary.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::analysis::{
    importance_profile, jaccard_churn, position_diversity, selection_density, strategy_bench,
    SelectionHistory, Strategy, StrategyResult, Workload, WorkloadSpec,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::kvcache::{memory_report, MemoryGeometry, MemoryReport};
use crate::trace::{
    read_cache_trace, read_selection_trace, write_cache_trace, write_selection_trace, DumpWriter,
    CACHE_TRACE_FILE, SELECTION_TRACE_FILE,
};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const CONFIG_FILE: &str = "config.toml";
pub const LATENTS_FILE: &str = "latents.bin";
pub const FRAMES_FILE: &str = "frames.bin";
pub const ANALYSIS_DIR: &str = "analysis";

#[derive(Debug, Parser)]
#[command(name = "streamkv", version, about = "Bounded-memory streaming KV cache for block-wise generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate blocks and write traces, dumps and a manifest.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 40)]
        blocks: usize,
        /// Run directory; defaults to `output.dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `seeds.noise`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare eviction strategies on synthetic revisit workloads.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "random,fifo,dynamic")]
        strategies: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `seeds.noise`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compute selection metrics for a generate run.
    Analyze {
        run_dir: PathBuf,
        /// Defaults to `<run_dir>/analysis`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full versus bounded KV memory per clip duration.
    MemoryReport {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated seconds.
        #[arg(long, default_value = "60,120")]
        durations: String,
        /// Optional CSV output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seeds.noise = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gb(bytes: u64) -> String {
    format!("{:.3}", bytes as f64 / 1e9)
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    num_blocks: usize,
    config_hash: String,
    config_file: &'a str,
    version: &'a str,
    files: Vec<&'a str>,
    seeds: crate::config::Seeds,
    config: &'a RunConfig,
}

/// Result of [`cmd_generate`].
#[derive(Debug, Clone)]
pub struct GenerateSummary {
    pub run_dir: PathBuf,
    pub blocks: usize,
    pub decoded_frames: usize,
    pub config_hash: String,
    pub eviction_events: usize,
    pub final_context_tokens: usize,
}

pub fn cmd_generate(cfg: &RunConfig, num_blocks: usize, out: &Path) -> Result<GenerateSummary> {
    cfg.validate()?;
    if num_blocks == 0 {
        return Err(Error::invalid("--blocks must be >= 1"));
    }
    create_dir(out)?;
    let g = &cfg.geometry;
    let mut gen = Generator::new(cfg)?;
    let mut latents = DumpWriter::create(
        &out.join(LATENTS_FILE),
        &[g.latent_channels, g.latent_height, g.latent_width],
    )?;
    let spec = cfg.codec_spec();
    let mut frames = if cfg.output.dump_frames {
        Some(DumpWriter::create(
            &out.join(FRAMES_FILE),
            &[
                spec.pixel_channels,
                g.latent_height * spec.spatial_stride,
                g.latent_width * spec.spatial_stride,
            ],
        )?)
    } else {
        None
    };
    let mut cache_rows = Vec::with_capacity(num_blocks);
    let mut routes = Vec::new();
    let mut decoded = 0;
    for _ in 0..num_blocks {
        let b = gen.next_block()?;
        latents.append(&b.latent.latent)?;
        if let Some(f) = frames.as_mut() {
            for frame in &b.frames {
                f.append(frame)?;
            }
        }
        decoded += b.frames.len();
        cache_rows.push(b.trace);
        routes.extend(b.routes);
    }
    latents.finish()?;
    let mut files = vec![CONFIG_FILE, CACHE_TRACE_FILE, SELECTION_TRACE_FILE, LATENTS_FILE];
    if let Some(f) = frames {
        f.finish()?;
        files.push(FRAMES_FILE);
    }
    write_cache_trace(&out.join(CACHE_TRACE_FILE), &cache_rows)?;
    write_selection_trace(&out.join(SELECTION_TRACE_FILE), &routes)?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_toml())?;
    let hash = cfg.hash();
    let manifest = Manifest {
        num_blocks,
        config_hash: hash.clone(),
        config_file: CONFIG_FILE,
        version: env!("CARGO_PKG_VERSION"),
        files,
        seeds: cfg.seeds,
        config: cfg,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::invalid(e.to_string()))?;
    write_text(&out.join(MANIFEST_FILE), &text)?;
    Ok(GenerateSummary {
        run_dir: out.to_path_buf(),
        blocks: num_blocks,
        decoded_frames: decoded,
        config_hash: hash,
        eviction_events: gen.cache().eviction_events(),
        final_context_tokens: cache_rows.last().map_or(0, |r| r.context_tokens),
    })
}

/// Row of `bench.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub workload: String,
    pub strategy: String,
    pub candidates: usize,
    pub budget: usize,
    pub retained_mass: f64,
    pub min_mass: f64,
    pub churn: f64,
}

/// Workloads derived from the cache and geometry settings.
pub fn bench_workloads(cfg: &RunConfig) -> Vec<(&'static str, WorkloadSpec)> {
    let m = cfg.cache.mid_capacity;
    let base = WorkloadSpec {
        candidates: m,
        budget: cfg.cache.n_top.min(m),
        tokens_per_block: cfg.geometry.compressed_tokens(),
        queries: cfg.selection.min_queries,
        head_dim: cfg.geometry.head_dim,
        steps: 32,
        planted: (0..m.div_ceil(2)).collect(),
        strength: 4.0,
        seed: cfg.seeds.noise,
    };
    vec![
        ("planted_revisits", base.clone()),
        (
            "planted_oldest",
            WorkloadSpec {
                planted: vec![0],
                ..base.clone()
            },
        ),
        (
            "full_budget",
            WorkloadSpec {
                budget: m,
                ..base
            },
        ),
    ]
}

pub fn cmd_bench(cfg: &RunConfig, strategies: &[Strategy], out: Option<&Path>) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    if strategies.is_empty() {
        return Err(Error::invalid("no strategies given"));
    }
    let mut rows = Vec::new();
    for (name, spec) in bench_workloads(cfg) {
        let w = Workload::build(&spec)?;
        for StrategyResult {
            strategy,
            retained_mass,
            min_mass,
            churn,
        } in strategy_bench(&w, strategies)?
        {
            rows.push(BenchRow {
                workload: name.to_string(),
                strategy: strategy.to_string(),
                candidates: spec.candidates,
                budget: spec.budget,
                retained_mass,
                min_mass,
                churn,
            });
        }
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        write_csv(&dir.join("bench.csv"), &rows)?;
        write_text(&dir.join("bench_summary.txt"), &bench_table(&rows))?;
    }
    Ok(rows)
}

pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut s = format!(
        "{:<18} {:<8} {:>4} {:>4} {:>10} {:>10} {:>7}\n",
        "workload", "strategy", "M", "k", "mass", "min_mass", "churn"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<18} {:<8} {:>4} {:>4} {:>10.6} {:>10.6} {:>7.4}",
            r.workload, r.strategy, r.candidates, r.budget, r.retained_mass, r.min_mass, r.churn
        );
    }
    s
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct ProfileRow {
    bucket: usize,
    rel_lo: f64,
    rel_hi: f64,
    count: usize,
    mean: Option<f64>,
}

#[derive(Serialize)]
struct JaccardRow {
    block: usize,
    prev_block: usize,
    distance: f64,
}

#[derive(Serialize)]
struct DiversityRow {
    block: usize,
    candidates: usize,
    diversity: f64,
}

#[derive(Serialize)]
struct DensityRow {
    position: usize,
    count: u64,
    global: f64,
    per_step: f64,
}

/// Headline numbers from [`cmd_analyze`].
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisSummary {
    pub blocks: usize,
    pub routed_blocks: usize,
    pub scored_steps: usize,
    pub mean_importance: Option<f64>,
    pub mean_jaccard: Option<f64>,
    pub mean_diversity: Option<f64>,
    pub max_context_tokens: usize,
}

pub const PROFILE_BUCKETS: usize = 10;
pub const DIVERSITY_WINDOW: usize = 10;

pub fn cmd_analyze(run_dir: &Path, out: Option<&Path>) -> Result<AnalysisSummary> {
    let cache = read_cache_trace(&run_dir.join(CACHE_TRACE_FILE))?;
    let routes = read_selection_trace(&run_dir.join(SELECTION_TRACE_FILE))?;
    let out = out.map_or_else(|| run_dir.join(ANALYSIS_DIR), Path::to_path_buf);
    create_dir(&out)?;

    let step_one: Vec<_> = routes.iter().filter(|r| r.step == 1).cloned().collect();
    let history = SelectionHistory::from_routes(&step_one, false)?;
    let scores: Vec<Vec<f64>> = routes
        .iter()
        .filter(|r| r.scored)
        .map(|r| r.scores.clone())
        .collect();

    let mut profile_rows = Vec::new();
    let mut mean_importance = None;
    if !scores.is_empty() {
        // each step min-max normalised so steps are comparable
        let normalised: Vec<Vec<f64>> = scores.iter().map(|s| min_max(s)).collect();
        let p = importance_profile(&normalised, PROFILE_BUCKETS)?;
        let flat: Vec<f64> = normalised.iter().flatten().copied().collect();
        mean_importance = Some(flat.iter().sum::<f64>() / flat.len() as f64);
        for (b, (mean, count)) in p.means.iter().zip(&p.counts).enumerate() {
            profile_rows.push(ProfileRow {
                bucket: b,
                rel_lo: b as f64 / PROFILE_BUCKETS as f64,
                rel_hi: (b + 1) as f64 / PROFILE_BUCKETS as f64,
                count: *count,
                mean: *mean,
            });
        }
    }
    write_csv(&out.join("importance_profile.csv"), &profile_rows)?;

    let sets: Vec<BTreeSet<usize>> = history.steps.iter().map(|s| s.blocks.clone()).collect();
    let mut jaccard_rows = Vec::new();
    let mut mean_jaccard = None;
    if sets.len() >= 2 {
        let churn = jaccard_churn(&sets)?;
        mean_jaccard = Some(churn.mean);
        for (i, d) in churn.distances.iter().enumerate() {
            jaccard_rows.push(JaccardRow {
                block: history.steps[i + 1].block,
                prev_block: history.steps[i].block,
                distance: *d,
            });
        }
    }
    write_csv(&out.join("jaccard.csv"), &jaccard_rows)?;

    let diversity = position_diversity(&history, DIVERSITY_WINDOW)?;
    let diversity_rows: Vec<DiversityRow> = history
        .steps
        .iter()
        .zip(&diversity)
        .map(|(s, &d)| DiversityRow {
            block: s.block,
            candidates: s.candidates,
            diversity: d,
        })
        .collect();
    write_csv(&out.join("diversity.csv"), &diversity_rows)?;
    let mean_diversity = (!diversity.is_empty()).then(|| diversity.iter().sum::<f64>() / diversity.len() as f64);

    let mut density_rows = Vec::new();
    if !history.is_empty() {
        let d = selection_density(&history)?;
        for p in 0..d.counts.len() {
            density_rows.push(DensityRow {
                position: p,
                count: d.counts[p],
                global: d.global[p],
                per_step: d.per_step[p],
            });
        }
    }
    write_csv(&out.join("density.csv"), &density_rows)?;

    let summary = AnalysisSummary {
        blocks: cache.len(),
        routed_blocks: history.len(),
        scored_steps: scores.len(),
        mean_importance,
        mean_jaccard,
        mean_diversity,
        max_context_tokens: cache.iter().map(|r| r.context_tokens).max().unwrap_or(0),
    };
    write_text(&out.join("summary.txt"), &analysis_text(&summary))?;
    Ok(summary)
}

fn min_max(s: &[f64]) -> Vec<f64> {
    let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        s.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.5; s.len()]
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"))
}

pub fn analysis_text(s: &AnalysisSummary) -> String {
    format!(
        "blocks              {}\nrouted_blocks       {}\nscored_steps        {}\n\
         mean_importance     {}\nmean_jaccard        {}\nmean_diversity      {}\n\
         max_context_tokens  {}\n",
        s.blocks,
        s.routed_blocks,
        s.scored_steps,
        opt(s.mean_importance),
        opt(s.mean_jaccard),
        opt(s.mean_diversity),
        s.max_context_tokens
    )
}

pub fn parse_durations(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            let p = p.trim();
            p.parse::<f64>()
                .ok()
                .filter(|d| d.is_finite() && *d >= 0.0)
                .ok_or_else(|| Error::invalid(format!("bad duration {p:?}")))
        })
        .collect()
}

/// Row of the memory-report CSV: exact byte counts plus decimal GB.
#[derive(Serialize)]
struct MemoryRow {
    duration_s: f64,
    latent_frames: u64,
    total_tokens: u64,
    full_cache_bytes: u64,
    full_cache_gb: String,
    bounded_context_tokens: u64,
    bounded_cache_bytes: u64,
    bounded_cache_gb: String,
    stored_buffer_tokens: u64,
    stored_buffer_bytes: u64,
    stored_buffer_gb: String,
}

impl From<&MemoryReport> for MemoryRow {
    fn from(r: &MemoryReport) -> Self {
        Self {
            duration_s: r.duration_s,
            latent_frames: r.latent_frames,
            total_tokens: r.total_tokens,
            full_cache_bytes: r.full_cache_bytes,
            full_cache_gb: gb(r.full_cache_bytes),
            bounded_context_tokens: r.bounded_context_tokens,
            bounded_cache_bytes: r.bounded_cache_bytes,
            bounded_cache_gb: gb(r.bounded_cache_bytes),
            stored_buffer_tokens: r.stored_buffer_tokens,
            stored_buffer_bytes: r.stored_buffer_bytes,
            stored_buffer_gb: gb(r.stored_buffer_bytes),
        }
    }
}

pub fn cmd_memory_report(geom: &MemoryGeometry, durations: &[f64], out: Option<&Path>) -> Result<Vec<MemoryReport>> {
    let rows: Vec<MemoryReport> = durations
        .iter()
        .map(|&d| memory_report(geom, d))
        .collect::<Result<_>>()?;
    if let Some(path) = out {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        let csv_rows: Vec<MemoryRow> = rows.iter().map(MemoryRow::from).collect();
        write_csv(path, &csv_rows)?;
    }
    Ok(rows)
}

pub fn memory_table(rows: &[MemoryReport]) -> String {
    let mut s = format!(
        "{:>10} {:>10} {:>16} {:>10} {:>10} {:>10} {:>10}\n",
        "seconds", "tokens", "full_bytes", "full_GB", "ctx_tok", "bound_GB", "stored_GB"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:>10} {:>10} {:>16} {:>10} {:>10} {:>10} {:>10}",
            r.duration_s,
            r.total_tokens,
            r.full_cache_bytes,
            gb(r.full_cache_bytes),
            r.bounded_context_tokens,
            gb(r.bounded_cache_bytes),
            gb(r.stored_buffer_bytes)
        );
    }
    s
}

/// Process exit code for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Parse { .. } => 2,
        _ => 1,
    }
}

/// Runs a parsed command and returns the text to print.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Generate {
            config,
            blocks,
            out,
            seed,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let out = out.unwrap_or_else(|| cfg.output.dir.clone());
            let s = cmd_generate(&cfg, blocks, &out)?;
            Ok(format!(
                "wrote {} blocks ({} frames) to {}\nconfig_hash {}\neviction_events {}\ncontext_tokens {}\n",
                s.blocks,
                s.decoded_frames,
                s.run_dir.display(),
                s.config_hash,
                s.eviction_events,
                s.final_context_tokens
            ))
        }
        Command::Bench {
            config,
            strategies,
            out,
            seed,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let strategies = Strategy::parse_list(&strategies)?;
            let rows = cmd_bench(&cfg, &strategies, out.as_deref())?;
            Ok(bench_table(&rows))
        }
        Command::Analyze { run_dir, out } => Ok(analysis_text(&cmd_analyze(&run_dir, out.as_deref())?)),
        Command::MemoryReport { config, durations, out } => {
            let cfg = load_config(config.as_deref(), None)?;
            let rows = cmd_memory_report(&cfg.memory, &parse_durations(&durations)?, out.as_deref())?;
            Ok(memory_table(&rows))
        }
    }
}
