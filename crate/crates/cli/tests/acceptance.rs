//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Run with `cargo test -p streamattn-cli --test acceptance`.

use std::time::{Duration, Instant};

use streamattn::attention::AttentionPath;
use streamattn_cli::bench::{cmd_bench, read_bench_csv};
use streamattn_cli::cost::reports;
use streamattn_cli::verify::{
    equivalence_suite, f16_suite, grn_suite, invariance_suite, memory_suite, morphism_suite,
    sfu_suite, EquivalenceGrid, SuiteReport, CASES,
};
use streamattn_cli::{Command, RunConfig};

struct Outcome {
    passed: bool,
    summary: String,
}

fn from_suite(r: SuiteReport, elapsed: Duration, budget: Option<Duration>) -> Outcome {
    let mut out = String::new();
    r.print(&mut sink(&mut out)).expect("print to memory");
    let in_time = budget.is_none_or(|b| elapsed <= b);
    let summary = if r.passed() && in_time {
        format!("{} checks, {:.1}s", r.checks.len(), elapsed.as_secs_f64())
    } else if !in_time {
        format!("took {:.1}s, budget {:?}", elapsed.as_secs_f64(), budget.unwrap())
    } else {
        r.failure_summary()
    };
    print!("{out}");
    Outcome {
        passed: r.passed() && in_time,
        summary,
    }
}

/// Collects suite output so it prints before the summary line.
fn sink(s: &mut String) -> StringSink<'_> {
    StringSink(s)
}

struct StringSink<'a>(&'a mut String);

impl std::io::Write for StringSink<'_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.push_str(&String::from_utf8_lossy(buf));
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

fn timed(budget: Option<Duration>, f: impl FnOnce() -> SuiteReport) -> Outcome {
    let t = Instant::now();
    let r = f();
    from_suite(r, t.elapsed(), budget)
}

fn criterion_6() -> Outcome {
    let mut o = timed(None, || sfu_suite(6));
    let mut cfg = RunConfig {
        command: Command::Cost,
        preset: Some("paper-anchor".into()),
        ..Default::default()
    };
    cfg.resolve_preset().expect("known preset");
    let n = 13824u64;
    let anchor_ok = match reports(&cfg) {
        Ok(reps) => {
            reps.len() == 6
                && reps.iter().all(|r| {
                    let want = if r.spec == "softmax" { 2 * n * n } else { 0 };
                    r.y == n && r.x == n && r.k == 128 && r.sfu_ops == want
                })
        }
        Err(_) => false,
    };
    if !anchor_ok {
        o.passed = false;
        o.summary = "paper-anchor preset reports wrong sfu_ops".into();
    } else {
        o.summary.push_str(&format!(", anchor softmax sfu_ops = {}", 2 * n * n));
    }
    o
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = RunConfig {
        command: Command::Bench,
        sizes: vec![4096],
        k: 128,
        reps: 1,
        warmup: 0,
        out: dir.path().to_path_buf(),
        ..Default::default()
    };
    let mut log = Vec::new();
    let rows = match cmd_bench(&cfg, &mut log) {
        Ok(r) => r,
        Err(e) => {
            return Outcome {
                passed: false,
                summary: format!("bench failed: {e}"),
            }
        }
    };
    print!("{}", String::from_utf8_lossy(&log));
    let naive = rows.iter().find(|r| r.path == AttentionPath::Naive);
    let streamed = rows.iter().find(|r| r.path == AttentionPath::Streamed);
    let naive_bytes = naive.and_then(|r| r.peak_score_buffer_bytes).unwrap_or(0);
    let streamed_bytes = streamed.and_then(|r| r.peak_score_buffer_bytes).unwrap_or(u64::MAX);
    let files = ["bench.csv", "time_naive.svg", "time_streamed.svg", "memory_naive.svg", "memory_streamed.svg"];
    let files_ok = files.iter().all(|f| dir.path().join(f).is_file());
    let csv_ok = std::fs::File::open(dir.path().join("bench.csv"))
        .ok()
        .and_then(|f| read_bench_csv(f).ok())
        .is_some_and(|back| back == rows);
    let bound = (cfg.g_y * cfg.s_x * 4) as u64;
    let passed = naive_bytes >= 64 << 20
        && streamed_bytes <= bound
        && streamed.is_some_and(|r| r.median_ms.is_some())
        && files_ok
        && csv_ok;
    Outcome {
        passed,
        summary: format!(
            "naive score bytes {naive_bytes} (need >= {}), streamed {streamed_bytes} (bound {bound}), artifacts {}, csv round-trip {}",
            64u64 << 20,
            if files_ok { "ok" } else { "missing" },
            if csv_ok { "ok" } else { "mismatch" }
        ),
    }
}

type Criterion = (&'static str, Box<dyn FnOnce() -> Outcome>);

fn main() {
    let seed = 2024;
    let criteria: Vec<Criterion> = vec![
        (
            "1 streamed == naive over the size/k/spec/tile grid (f64 1e-12/1e-14, f32 1e-5/1e-6)",
            Box::new(move || {
                timed(Some(Duration::from_secs(300)), || {
                    equivalence_suite(&EquivalenceGrid::default(), seed)
                })
            }),
        ),
        (
            "2 chunked accumulation morphism, merge laws, exact rational mode",
            Box::new(move || timed(None, || morphism_suite(CASES, seed, false))),
        ),
        (
            "3 scale/shift/permutation invariances, property flags, jvp",
            Box::new(move || timed(None, || invariance_suite(CASES, seed))),
        ),
        (
            "4 f16 emulation: >= 99% of outputs within 0.01 (y=x=1024, k=128)",
            Box::new(move || timed(Some(Duration::from_secs(60)), || f16_suite(seed))),
        ),
        (
            "5 score tile == min(g,y)*min(s,x), constant in x, naive grows 4x",
            Box::new(move || timed(None, || memory_suite(seed))),
        ),
        ("6 sfu_ops = 2yx for softmax, 0 otherwise, incl. paper-anchor", Box::new(criterion_6)),
        (
            "7 GRN deletion, negative control, relabeling, adjacency, paths, init",
            Box::new(move || timed(None, || grn_suite(50, seed))),
        ),
        ("8 bench at 4096: bounded streamed buffer, naive >= 64 MiB, artifacts", Box::new(criterion_8)),
    ];

    let mut lines = Vec::new();
    for (name, run) in criteria {
        println!("--- criterion {name}");
        let o = run();
        lines.push(format!(
            "{} criterion {name}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.summary
        ));
    }
    println!();
    for l in &lines {
        println!("{l}");
    }
    let failed = lines.iter().filter(|l| l.starts_with("FAIL")).count();
    println!("\n{} of {} criteria passed", lines.len() - failed, lines.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
