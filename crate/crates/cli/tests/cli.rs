use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rankserve"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn data_rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

const OPS: &str = "rank,max_tps\n8,3600\n16,3350\n32,2840\n64,2080\n128,1290\n";

/// A 900 s shifting-skew trace plus operating points in a fresh directory.
fn workload(rps: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("ops.csv"), OPS).unwrap();
    let o = bin(
        &["gen-trace", "--rps", rps, "--duration", "900", "--popularity", "shifting_skew", "--seed", "3", "--out", "t.csv"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir
}

#[test]
fn help_exits_zero_and_documents_flags() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["--help"], dir.path());
    assert_eq!(code(&o), 0);
    for sub in ["gen-trace", "profile", "run", "sweep"] {
        assert!(stdout(&o).contains(sub));
    }
    let o = bin(&["sweep", "--help"], dir.path());
    assert_eq!(code(&o), 0);
    for flag in ["--config", "--trace", "--placement", "--router", "--servers", "--tp", "--slo", "--rps-min", "--rps-max", "--rebalance-window", "--seed", "--out"] {
        assert!(stdout(&o).contains(flag), "{flag}");
    }
}

#[test]
fn gen_trace_row_count_matches_poisson_mean() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(
        &["gen-trace", "--arrival", "poisson", "--popularity", "shifting_skew", "--rps", "30", "--duration", "3600", "--seed", "7", "--out", "t.csv"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let n = data_rows(&dir.path().join("t.csv")) as f64;
    let (mean, sd) = (108_000.0, 108_000f64.sqrt());
    assert!((n - mean).abs() <= 3.0 * sd, "{n}");
}

#[test]
fn gen_trace_uniform_25_gives_five_per_rank() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["gen-trace", "--rps", "2", "--duration", "60", "--popularity", "uniform", "--adapters", "25"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("adapters.csv")).unwrap();
    for rank in [8, 16, 32, 64, 128] {
        let count = text.lines().skip(1).filter(|l| l.split(',').nth(1) == Some(&rank.to_string())).count();
        assert_eq!(count, 5, "rank {rank}");
    }
}

#[test]
fn gen_trace_without_rps_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["gen-trace", "--duration", "60"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--rps"));
}

fn profiled(dir: &Path, slo: &str, out: &str) -> Vec<f64> {
    let o = bin(&["profile", "--slo", slo, "--duration", "300", "--out", out], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    fs::read_to_string(dir.join(out))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn profile_writes_non_increasing_table_and_respects_slo() {
    let dir = tempfile::tempdir().unwrap();
    let tight = profiled(dir.path(), "10", "a.csv");
    let loose = profiled(dir.path(), "20", "b.csv");
    assert_eq!(tight.len(), 5);
    assert!(tight.windows(2).all(|w| w[1] <= w[0]), "{tight:?}");
    assert!(tight.iter().zip(&loose).all(|(t, l)| t <= l), "{tight:?} vs {loose:?}");
}

#[test]
fn profile_with_no_ranks_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&bin(&["profile", "--ranks", ""], dir.path())), 1);
}

#[test]
fn run_writes_reports_deterministically() {
    let dir = workload("4");
    let args = |out: &'static str| {
        ["run", "--trace", "t.csv", "--ops", "ops.csv", "--placement", "loraserve,random", "--seed", "5", "--out", out]
    };
    let a = bin(&args("a"), dir.path());
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert_eq!(code(&bin(&args("b"), dir.path())), 0);
    for f in ["summary.csv", "per_request.csv", "per_server.csv"] {
        let x = fs::read(dir.path().join("a").join(f)).unwrap();
        let y = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
    assert_eq!(data_rows(&dir.path().join("a/summary.csv")), 2);
    assert_eq!(stdout(&a), stdout(&bin(&args("b"), dir.path())));
}

#[test]
fn unknown_policy_lists_valid_names() {
    let dir = workload("2");
    let o = bin(&["run", "--trace", "t.csv", "--ops", "ops.csv", "--placement", "bogus"], dir.path());
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    for name in ["loraserve", "random", "contiguous", "replicate"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn contiguous_times_out_under_heavy_skewed_load() {
    let dir = workload("12");
    let o = bin(&["run", "--trace", "t.csv", "--ops", "ops.csv", "--placement", "contiguous"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let row = stdout(&o).lines().nth(1).unwrap().to_owned();
    let timeouts: usize = row.split(',').nth(4).unwrap().parse().unwrap();
    assert!(timeouts > 0, "{row}");
}

#[test]
fn flags_override_config_values() {
    let dir = workload("2");
    fs::write(dir.path().join("cluster.toml"), "servers = 2\nslo = 10.0\n").unwrap();
    let o = bin(
        &["run", "--config", "cluster.toml", "--servers", "3", "--trace", "t.csv", "--ops", "ops.csv", "--out", "r"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(data_rows(&dir.path().join("r/per_server.csv")), 3);
}

#[test]
fn sweep_reports_each_policy_with_ratio() {
    let dir = workload("4");
    let o = bin(
        &["sweep", "--trace", "t.csv", "--ops", "ops.csv", "--rps-min", "1", "--rps-max", "20", "--tol", "0.1", "--out", "s"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("s/sweep.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].contains("loraserve_ratio"));
    assert!(lines[1].starts_with("loraserve,") && lines[1].ends_with(",1.000"));
}

#[test]
fn sweep_with_inverted_range_is_a_usage_error() {
    let dir = workload("2");
    let o = bin(&["sweep", "--trace", "t.csv", "--ops", "ops.csv", "--rps-min", "5", "--rps-max", "1"], dir.path());
    assert_eq!(code(&o), 1);
}

#[test]
fn missing_trace_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("ops.csv"), OPS).unwrap();
    let o = bin(&["run", "--trace", "absent.csv", "--ops", "ops.csv"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("absent.csv"));
}
