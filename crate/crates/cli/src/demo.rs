//! `--cmd grn-demo`: seeds a model, draws one cell, runs it and exports the
//! results.
//!
//! Files under `RunConfig::out`:
//!
//! * `sample.csv`: `gene,multiplicity`
//! * `logits.csv`: `output,logit`
//! * `adjacency_l0_h0.csv`: `query_gene,key_gene,weight`
//! * `params/`: `manifest.json` plus one `.nct` file per tensor

use std::io::Write;

use streamattn::grn::{self, CellSample, GRNConfig};
use streamattn::io::{save_params, write_adjacency_csv};
use streamattn::rng::XorShift64Star;

use crate::verify::rel_deviation;
use crate::{CliError, CliResult, RunConfig};

/// Largest relative change allowed in the deletion check.
pub const DELETION_TOL: f64 = 1e-12;

pub fn default_config() -> GRNConfig {
    GRNConfig::new(64, 32, 2, 4, 2, 5)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoOutcome {
    pub logits: Vec<f64>,
    pub zero_genes: Vec<usize>,
    /// Worst relative change over the other genes' hidden states and the
    /// logits when each zero-count gene is deleted.
    pub deletion_deviation: f64,
}

fn grn_context(what: &str) -> impl FnOnce(streamattn::Error) -> CliError + '_ {
    move |e| CliError::Verification(format!("{what}: {e}"))
}

pub fn cmd_grn_demo(cfg: &RunConfig, report: &mut dyn Write) -> CliResult<DemoOutcome> {
    let mut g = cfg.grn.clone().unwrap_or_else(default_config);
    g.seed = cfg.seed;
    g.tile = cfg.tile();
    g.validate()?;
    let params = grn::init_params(&g, g.seed)?;
    let mut rng = XorShift64Star::new(g.seed.wrapping_add(1));
    let sample = CellSample::random_counts(g.n_genes, 5, &mut rng);

    let logits = grn::grn_forward(&sample, &params, &g).map_err(grn_context("forward"))?;
    let adjacency = grn::extract_adjacency(&sample, &params, &g, 0, 0).map_err(grn_context("layer 0 head 0"))?;

    let zero_genes: Vec<usize> = (0..g.n_genes)
        .filter(|&i| sample.multiplicities[i] == 0.0)
        .collect();
    let full = grn::encode(&sample, &params, &g)?;
    let mut worst = 0.0f64;
    for &gene in &zero_genes {
        let (c2, p2, s2) = grn::delete_gene(&g, &params, &sample, gene)?;
        let cut = grn::encode(&s2, &p2, &c2).map_err(grn_context("deleted model"))?;
        for j in 0..c2.n_genes {
            let i = if j < gene { j } else { j + 1 };
            worst = worst.max(rel_deviation(cut.row(j), full.row(i)));
        }
        worst = worst.max(rel_deviation(&grn::grn_forward(&s2, &p2, &c2)?, &logits));
    }

    std::fs::create_dir_all(&cfg.out)?;
    let mut w = csv::Writer::from_path(cfg.out.join("sample.csv"))?;
    w.write_record(["gene", "multiplicity"])?;
    for (i, m) in sample.multiplicities.iter().enumerate() {
        w.write_record([i.to_string(), m.to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(cfg.out.join("logits.csv"))?;
    w.write_record(["output", "logit"])?;
    for (i, l) in logits.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush()?;
    write_adjacency_csv(
        std::fs::File::create(cfg.out.join("adjacency_l0_h0.csv"))?,
        &adjacency,
    )?;
    save_params(&cfg.out.join("params"), &g, &params)?;

    writeln!(
        report,
        "genes={} d_model={} layers={} heads={}/{} outputs={} seed={}",
        g.n_genes, g.d_model, g.n_layers, g.heads, g.kv_heads, g.n_outputs, g.seed
    )?;
    writeln!(report, "logits: {logits:?}")?;
    let held = worst <= DELETION_TOL;
    if zero_genes.is_empty() {
        writeln!(report, "deletion check: no zero-count genes in this sample")?;
    } else {
        writeln!(
            report,
            "deletion check: {} ({} zero-count genes {:?}, max relative change {:.3e}, limit {:.0e})",
            if held { "held" } else { "VIOLATED" },
            zero_genes.len(),
            zero_genes,
            worst,
            DELETION_TOL
        )?;
    }
    writeln!(report, "wrote {}", cfg.out.display())?;
    if !held {
        return Err(CliError::Verification(format!(
            "zero-count deletion changed outputs by {worst:.3e}"
        )));
    }
    Ok(DemoOutcome {
        logits,
        zero_genes,
        deletion_deviation: worst,
    })
}
