//! `--cmd cost`: cost-model reports for naive and streamed attention.
//!
//! Writes `cost.csv` (one row per report, columns = [`CostReport`] fields in
//! declaration order) and `cost.json` (the same reports as an array).

use std::io::Write;

use streamattn::costmodel::{compare_reports, CostModel, CostReport};
use streamattn::normalizers::NormalizerSpec;

use crate::{CliResult, RunConfig};

pub const DEFAULT_SIZES: [usize; 3] = [1024, 4096, crate::PAPER_ANCHOR];

pub fn reports(cfg: &RunConfig) -> CliResult<Vec<CostReport>> {
    let specs: Vec<NormalizerSpec> = match &cfg.spec {
        Some(name) => vec![NormalizerSpec::from_name(name)?],
        None => vec![
            NormalizerSpec::softmax(),
            NormalizerSpec::spherical(),
            NormalizerSpec::signed_l1(),
        ],
    };
    let model = CostModel::default();
    let mut out = Vec::new();
    for (y, x) in cfg.problem_sizes(&DEFAULT_SIZES) {
        for spec in &specs {
            out.push(model.naive(y, x, cfg.k, cfg.dtype, spec)?);
            out.push(model.streamed(y, x, cfg.k, cfg.dtype, spec, cfg.tile())?);
        }
    }
    Ok(out)
}

pub fn write_cost_csv<W: Write>(w: W, reports: &[CostReport]) -> CliResult<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in reports {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_cost_csv<R: std::io::Read>(r: R) -> CliResult<Vec<CostReport>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|r| r.map_err(Into::into))
        .collect()
}

pub fn cmd_cost(cfg: &RunConfig, report: &mut dyn Write) -> CliResult<Vec<CostReport>> {
    let reps = reports(cfg)?;
    writeln!(
        report,
        "{:>6} {:>6} {:>4} {:<10} {:<9} {:>16} {:>14} {:>16} {:>14}",
        "y", "x", "k", "spec", "path", "score_bytes", "peak_onchip", "matmul_flops", "sfu_ops"
    )?;
    for r in &reps {
        writeln!(
            report,
            "{:>6} {:>6} {:>4} {:<10} {:<9} {:>16} {:>14} {:>16} {:>14}",
            r.y,
            r.x,
            r.k,
            r.spec,
            format!("{:?}", r.path).to_lowercase(),
            r.score_matrix_bytes_materialized,
            r.peak_onchip_bytes,
            r.matmul_flops,
            r.sfu_ops
        )?;
    }
    for pair in reps.chunks(2) {
        let c = compare_reports(&pair[0], &pair[1])?;
        let ratio = |f: &str| c.ratio(f).map_or("-".into(), |r| r.to_string());
        writeln!(
            report,
            "naive/streamed y={} x={} {}: score bytes {}, peak on-chip {} ({:?} vs {:?})",
            pair[0].y,
            pair[0].x,
            pair[0].spec,
            ratio("score_matrix_bytes_materialized"),
            ratio("peak_onchip_bytes"),
            c.lhs_onchip,
            c.rhs_onchip
        )?;
    }
    std::fs::create_dir_all(&cfg.out)?;
    write_cost_csv(std::fs::File::create(cfg.out.join("cost.csv"))?, &reps)?;
    std::fs::write(cfg.out.join("cost.json"), serde_json::to_string_pretty(&reps)?)?;
    writeln!(report, "wrote {} and cost.json", cfg.out.join("cost.csv").display())?;
    Ok(reps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Command;

    #[test]
    fn csv_and_json_agree() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            command: Command::Cost,
            sizes: vec![64, 100],
            k: 16,
            out: dir.path().to_path_buf(),
            ..Default::default()
        };
        let mut sink = Vec::new();
        let reps = cmd_cost(&cfg, &mut sink).unwrap();
        assert_eq!(reps.len(), 2 * 3 * 2);
        let from_csv = read_cost_csv(std::fs::File::open(dir.path().join("cost.csv")).unwrap()).unwrap();
        let json = std::fs::read_to_string(dir.path().join("cost.json")).unwrap();
        let from_json: Vec<CostReport> = serde_json::from_str(&json).unwrap();
        assert_eq!(from_csv, reps);
        assert_eq!(from_json, reps);
    }

    #[test]
    fn softmax_vs_spherical_sfu() {
        let cfg = RunConfig {
            sizes: vec![crate::PAPER_ANCHOR],
            ..Default::default()
        };
        let reps = reports(&cfg).unwrap();
        let n = crate::PAPER_ANCHOR as u64;
        for r in reps {
            let want = if r.spec == "softmax" { 2 * n * n } else { 0 };
            assert_eq!(r.sfu_ops, want);
        }
    }
}
