//! `--cmd bench`: wall-clock and score-buffer measurements for naive and
//! streamed attention over a sweep of sizes.
//!
//! CSV columns (`bench.csv`):
//!
//! ```text
//! y,x,k,spec,path,tile,dtype,median_ms,peak_score_buffer_bytes,repetitions
//! ```
//!
//! `tile` is `g_yxs_x` for the streamed path and `full` for the naive one.
//! A naive cell whose score matrix would exceed [`NAIVE_ELEMENT_CAP`]
//! elements, or that cannot be allocated, is recorded with `median_ms =
//! OOM` and an empty byte count.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use streamattn::attention::{
    naive_attention_with_stats, streamed_attention_with_stats, AttentionConfig, AttentionPath,
};
use streamattn::normalizers::NormalizerSpec;
use streamattn::rng::XorShift64Star;
use streamattn::tensor::{DType, Element, Tensor};
use streamattn::Error;

use crate::svg::line_chart;
use crate::verify::{case_seed, randn};
use crate::{CliResult, RunConfig, NAIVE_ELEMENT_CAP};

pub const BENCH_HEADER: [&str; 10] = [
    "y",
    "x",
    "k",
    "spec",
    "path",
    "tile",
    "dtype",
    "median_ms",
    "peak_score_buffer_bytes",
    "repetitions",
];

pub const DEFAULT_SWEEP: [usize; 3] = [1024, 2048, 4096];

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub y: usize,
    pub x: usize,
    pub k: usize,
    pub spec: String,
    pub path: AttentionPath,
    pub tile: String,
    pub dtype: DType,
    /// `None` when the run was refused for memory.
    pub median_ms: Option<f64>,
    pub peak_score_buffer_bytes: Option<u64>,
    pub repetitions: usize,
}

impl BenchRow {
    pub fn record(&self) -> [String; 10] {
        [
            self.y.to_string(),
            self.x.to_string(),
            self.k.to_string(),
            self.spec.clone(),
            match self.path {
                AttentionPath::Naive => "naive".into(),
                AttentionPath::Streamed => "streamed".into(),
            },
            self.tile.clone(),
            self.dtype.to_string(),
            self.median_ms.map_or("OOM".into(), |m| m.to_string()),
            self.peak_score_buffer_bytes.map_or(String::new(), |b| b.to_string()),
            self.repetitions.to_string(),
        ]
    }

    pub fn from_record(r: &csv::StringRecord) -> CliResult<Self> {
        let bad = |what: &str| crate::CliError::Usage(format!("bench csv: bad {what} in {r:?}"));
        let num = |i: usize, what: &str| r[i].parse::<usize>().map_err(|_| bad(what));
        Ok(Self {
            y: num(0, "y")?,
            x: num(1, "x")?,
            k: num(2, "k")?,
            spec: r[3].to_string(),
            path: match &r[4] {
                "naive" => AttentionPath::Naive,
                "streamed" => AttentionPath::Streamed,
                _ => return Err(bad("path")),
            },
            tile: r[5].to_string(),
            dtype: r[6].parse().map_err(|_| bad("dtype"))?,
            median_ms: match &r[7] {
                "OOM" => None,
                s => Some(s.parse().map_err(|_| bad("median_ms"))?),
            },
            peak_score_buffer_bytes: match &r[8] {
                "" => None,
                s => Some(s.parse().map_err(|_| bad("peak bytes"))?),
            },
            repetitions: num(9, "repetitions")?,
        })
    }
}

pub fn write_bench_csv<W: Write>(w: W, rows: &[BenchRow]) -> CliResult<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(BENCH_HEADER)?;
    for r in rows {
        out.write_record(r.record())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_bench_csv<R: std::io::Read>(r: R) -> CliResult<Vec<BenchRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    if rdr.headers()?.iter().ne(BENCH_HEADER) {
        return Err(crate::CliError::Usage("bench csv: unexpected header".into()));
    }
    rdr.records().map(|r| BenchRow::from_record(&r?)).collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Runs `f` `warmup` times untimed, then `reps` times timed. Returns the
/// median in milliseconds and the last result.
fn time<R>(warmup: usize, reps: usize, mut f: impl FnMut() -> streamattn::Result<R>) -> streamattn::Result<(f64, R)> {
    for _ in 0..warmup {
        f()?;
    }
    let mut times = Vec::with_capacity(reps);
    let mut last = None;
    for _ in 0..reps {
        let t = Instant::now();
        let r = f()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
        last = Some(r);
    }
    Ok((median(times), last.expect("reps >= 1")))
}

fn bench_size<T: Element>(
    cfg: &RunConfig,
    spec: &NormalizerSpec,
    y: usize,
    x: usize,
    rng: &mut XorShift64Star,
) -> CliResult<[BenchRow; 2]> {
    let k = cfg.k;
    let q: Tensor<T> = randn(rng, vec![y, k]);
    let kk: Tensor<T> = randn(rng, vec![x, k]);
    let v: Tensor<T> = randn(rng, vec![x, k]);
    let db = T::DTYPE.size_bytes() as u64;
    let mut att = AttentionConfig::new(spec.clone(), k)
        .with_tile(cfg.tile())
        .with_f16(cfg.f16);
    att.naive_score_budget_bytes = Some(NAIVE_ELEMENT_CAP as u64 * db);

    let row = |path, tile: String, median_ms, peak| BenchRow {
        y,
        x,
        k,
        spec: spec.name.clone(),
        path,
        tile,
        dtype: T::DTYPE,
        median_ms,
        peak_score_buffer_bytes: peak,
        repetitions: cfg.reps,
    };

    let naive = match time(cfg.warmup, cfg.reps, || naive_attention_with_stats(&q, &kk, &v, &att)) {
        Ok((ms, (_, st))) => row(
            AttentionPath::Naive,
            "full".into(),
            Some(ms),
            Some(st.score_elems_materialized as u64 * db),
        ),
        Err(Error::OutOfMemory { .. }) => row(AttentionPath::Naive, "full".into(), None, None),
        Err(e) => return Err(e.into()),
    };
    let (ms, (_, st)) = time(cfg.warmup, cfg.reps, || streamed_attention_with_stats(&q, &kk, &v, &att))?;
    let streamed = row(
        AttentionPath::Streamed,
        format!("{}x{}", cfg.g_y, cfg.s_x),
        Some(ms),
        Some(st.peak_score_tile_elems as u64 * db),
    );
    Ok([naive, streamed])
}

/// Runs the sweep and writes `bench.csv` plus one SVG per (metric, path).
pub fn cmd_bench(cfg: &RunConfig, report: &mut dyn Write) -> CliResult<Vec<BenchRow>> {
    let spec = NormalizerSpec::from_name(cfg.spec.as_deref().unwrap_or("spherical"))?;
    let mut rows = Vec::new();
    writeln!(report, "{}", BENCH_HEADER.join(","))?;
    for (i, (y, x)) in cfg.problem_sizes(&DEFAULT_SWEEP).into_iter().enumerate() {
        let mut rng = XorShift64Star::new(case_seed(cfg.seed, 80, i as u64));
        let pair = match cfg.dtype {
            DType::Float32 => bench_size::<f32>(cfg, &spec, y, x, &mut rng)?,
            DType::Float64 => bench_size::<f64>(cfg, &spec, y, x, &mut rng)?,
        };
        for r in pair {
            writeln!(report, "{}", r.record().join(","))?;
            rows.push(r);
        }
    }
    std::fs::create_dir_all(&cfg.out)?;
    write_bench_csv(std::fs::File::create(cfg.out.join("bench.csv"))?, &rows)?;
    write_charts(&cfg.out, &rows)?;
    writeln!(report, "wrote {}", cfg.out.join("bench.csv").display())?;
    Ok(rows)
}

fn write_charts(dir: &Path, rows: &[BenchRow]) -> CliResult<()> {
    for (path, name) in [(AttentionPath::Naive, "naive"), (AttentionPath::Streamed, "streamed")] {
        let series: Vec<&BenchRow> = rows.iter().filter(|r| r.path == path).collect();
        let time: Vec<(f64, f64)> = series
            .iter()
            .filter_map(|r| r.median_ms.map(|m| (r.x as f64, m)))
            .collect();
        let mem: Vec<(f64, f64)> = series
            .iter()
            .filter_map(|r| r.peak_score_buffer_bytes.map(|b| (r.x as f64, b as f64)))
            .collect();
        std::fs::write(
            dir.join(format!("time_{name}.svg")),
            line_chart(&format!("{name}: median time vs x"), "x", "ms", &time),
        )?;
        std::fs::write(
            dir.join(format!("memory_{name}.svg")),
            line_chart(
                &format!("{name}: peak score-buffer bytes vs x"),
                "x",
                "bytes",
                &mem,
            ),
        )?;
    }
    Ok(())
}
