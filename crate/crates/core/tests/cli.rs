use std::fs;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_streamkv"))
}

fn run(args: &[&str]) -> std::process::Output {
    bin().args(args).output().expect("binary runs")
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn generate_sink_only_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(&["generate", "--blocks", "2", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["manifest.toml", "config.toml", "cache_trace.csv", "selection_trace.csv", "latents.bin"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let trace = fs::read_to_string(out.join("cache_trace.csv")).unwrap();
    let rows: Vec<&str> = trace.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    // evicted_frames and delta_frames columns stay zero
    assert!(rows.iter().all(|r| {
        let c: Vec<&str> = r.split(',').collect();
        c[4] == "0" && c[5] == "0" && c[11] == "0"
    }));
    let manifest = fs::read_to_string(out.join("manifest.toml")).unwrap();
    assert!(manifest.contains("config_hash = \""));
    assert!(manifest.contains("[seeds]"));
    assert!(!manifest.to_lowercase().contains("time"));
}

#[test]
fn identical_invocations_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&["generate", "--blocks", "12", "--seed", "5", "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
    }
    for f in ["manifest.toml", "cache_trace.csv", "selection_trace.csv", "latents.bin"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f} differs");
    }
}

#[test]
fn invalid_config_reports_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[geometry]\nwidth = 60\n").unwrap();
    let o = run(&["generate", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("geometry.width"), "{err}");
    assert!(!dir.path().join("r").exists());

    fs::write(&cfg, "[cache]\nmid_capacity = 2\nn_top = 4\n").unwrap();
    let o = run(&["generate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cache.n_top"));
}

#[test]
fn analyze_writes_metric_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert!(run(&["generate", "--blocks", "16", "--out", out.to_str().unwrap()]).status.success());
    let o = run(&["analyze", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["importance_profile.csv", "jaccard.csv", "diversity.csv", "density.csv", "summary.txt"] {
        assert!(out.join("analysis").join(f).exists(), "{f} missing");
    }
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("mean_jaccard"));
}

#[test]
fn analyze_names_missing_trace() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["analyze", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("cache_trace.csv"));
}

#[test]
fn bench_with_full_budget_keeps_all_mass() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[cache]\nmid_capacity = 4\nn_top = 4\n").unwrap();
    let o = run(&["bench", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert!(csv.starts_with("workload,strategy,candidates,budget,retained_mass,min_mass,churn\n"));
    for line in csv.lines().skip(1) {
        let c: Vec<&str> = line.split(',').collect();
        let mass: f64 = c[4].parse().unwrap();
        assert!((mass - 1.0).abs() < 1e-9, "{line}");
    }
}

#[test]
fn bench_planted_workload_orders_strategies() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["bench", "--strategies", "fifo,dynamic", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    let csv = fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let mass = |strategy: &str| -> f64 {
        csv.lines()
            .map(|l| l.split(',').collect::<Vec<_>>())
            .find(|c| c[0] == "planted_revisits" && c[1] == strategy)
            .map(|c| c[4].parse().unwrap())
            .unwrap()
    };
    assert!(mass("dynamic") > mass("fifo"));
    let o = run(&["bench", "--strategies", "lru"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lru"));
}

#[test]
fn memory_report_rows() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("mem.csv");
    let o = run(&["memory-report", "--durations", "60,120", "--out", csv.to_str().unwrap()]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("748800"));
    assert!(text.contains("138018816000"));
    let csv = fs::read_to_string(csv).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "duration_s,latent_frames,total_tokens,full_cache_bytes,full_cache_gb,bounded_context_tokens,\
         bounded_cache_bytes,bounded_cache_gb,stored_buffer_tokens,stored_buffer_bytes,stored_buffer_gb"
    );
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("60.0,240,374400,69009408000,69.009,27872,"));
}
