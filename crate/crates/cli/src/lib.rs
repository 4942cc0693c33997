//! Library side of the `streamattn` command-line tool.
//!
//! Each command takes a validated [`RunConfig`] and a writer for its
//! human-readable report; artifacts go under `RunConfig::out`.

use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use streamattn::attention::TileConfig;
use streamattn::grn::GRNConfig;
use streamattn::normalizers::NormalizerSpec;
use streamattn::tensor::DType;
use thiserror::Error;

pub mod bench;
pub mod cost;
pub mod demo;
pub mod svg;
pub mod verify;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Core(#[from] streamattn::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 1 for a failed property, 2 for a bad invocation or config, 1 for
    /// anything that went wrong while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(streamattn::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Verify,
    Bench,
    Cost,
    GrnDemo,
}

/// Largest naive score matrix the bench will materialize, in elements.
pub const NAIVE_ELEMENT_CAP: usize = 1 << 24;

/// `y = x` for the anchor preset, `108 * 128`.
pub const PAPER_ANCHOR: usize = 13824;

pub const PRESETS: [&str; 3] = ["desk", "paper-anchor", "paper-full"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    /// Key/value lengths `x`. Empty means the command's default.
    pub sizes: Vec<usize>,
    /// Query length; `None` means `y = x`.
    pub y: Option<usize>,
    pub k: usize,
    /// Normalizer name; `None` means the command's default.
    pub spec: Option<String>,
    pub g_y: usize,
    pub s_x: usize,
    pub dtype: DType,
    pub f16: bool,
    pub seed: u64,
    pub reps: usize,
    pub warmup: usize,
    pub out: PathBuf,
    pub preset: Option<String>,
    /// Only produce cost-model output; nothing is materialized or timed.
    pub cost_only: bool,
    /// Flip the sign of one streamed accumulator in the morphism suite.
    pub inject_fault: bool,
    pub grn: Option<GRNConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: Command::Verify,
            sizes: Vec::new(),
            y: None,
            k: 128,
            spec: None,
            g_y: 64,
            s_x: 64,
            dtype: DType::Float32,
            f16: false,
            seed: 0,
            reps: 3,
            warmup: 1,
            out: PathBuf::from("out"),
            preset: None,
            cost_only: false,
            inject_fault: false,
            grn: None,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl RunConfig {
    /// Applies the preset, if any, to fields the user left at their
    /// defaults.
    pub fn resolve_preset(&mut self) -> CliResult<()> {
        let Some(p) = self.preset.as_deref() else {
            return Ok(());
        };
        let sizes = match p {
            "desk" => vec![1024, 2048, 4096],
            "paper-anchor" => vec![PAPER_ANCHOR],
            "paper-full" => vec![PAPER_ANCHOR, 2 * PAPER_ANCHOR, 3 * PAPER_ANCHOR],
            other => {
                return Err(usage(format!(
                    "unknown preset {other:?} (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        };
        if p == "paper-full" && !(self.cost_only || self.command == Command::Cost) {
            return Err(usage("preset paper-full is cost-model only; pass --cost-only"));
        }
        if self.sizes.is_empty() {
            self.sizes = sizes;
        }
        if p != "desk" {
            self.k = 128;
        }
        Ok(())
    }

    pub fn validate(&self) -> CliResult<()> {
        if let Some(s) = &self.spec {
            NormalizerSpec::from_name(s).map_err(|e| usage(e.to_string()))?;
        }
        if let Some(&bad) = self.sizes.iter().find(|&&s| s == 0) {
            return Err(usage(format!("sizes must be positive, got {bad}")));
        }
        if self.y == Some(0) || self.k == 0 {
            return Err(usage("y and k must be positive"));
        }
        TileConfig::new(self.g_y, self.s_x).map_err(|e| usage(e.to_string()))?;
        if self.reps == 0 {
            return Err(usage("reps must be at least 1"));
        }
        if self.f16 && self.dtype != DType::Float32 {
            return Err(usage("--f16 needs --dtype float32"));
        }
        if let Some(g) = &self.grn {
            g.validate().map_err(|e| usage(format!("grn config: {e}")))?;
        }
        Ok(())
    }

    pub fn tile(&self) -> TileConfig {
        TileConfig {
            g_y: self.g_y,
            s_x: self.s_x,
        }
    }

    /// `(y, x)` pairs for the configured sizes.
    pub fn problem_sizes(&self, default: &[usize]) -> Vec<(usize, usize)> {
        let xs = if self.sizes.is_empty() {
            default
        } else {
            &self.sizes
        };
        xs.iter().map(|&x| (self.y.unwrap_or(x), x)).collect()
    }

    /// Overrides fields with the keys of a JSON object.
    pub fn apply_json(&mut self, json: &str) -> CliResult<()> {
        let overrides: serde_json::Value = serde_json::from_str(json)?;
        let serde_json::Value::Object(overrides) = overrides else {
            return Err(usage("config file must hold a JSON object"));
        };
        let mut current = serde_json::to_value(&*self)?;
        let obj = current.as_object_mut().expect("RunConfig serializes to an object");
        for (key, v) in overrides {
            obj.insert(key, v);
        }
        *self = serde_json::from_value(current).map_err(|e| usage(format!("config file: {e}")))?;
        Ok(())
    }
}

/// Runs the configured command. Errors carry the process exit code.
pub fn run(cfg: &RunConfig, report: &mut dyn Write) -> CliResult<()> {
    cfg.validate()?;
    if cfg.cost_only && cfg.command != Command::Cost {
        return cost::cmd_cost(cfg, report).map(|_| ());
    }
    match cfg.command {
        Command::Verify => {
            let suites = verify::cmd_verify(cfg, report)?;
            match suites.iter().find(|s| !s.passed()) {
                None => Ok(()),
                Some(s) => Err(CliError::Verification(s.failure_summary())),
            }
        }
        Command::Bench => bench::cmd_bench(cfg, report).map(|_| ()),
        Command::Cost => cost::cmd_cost(cfg, report).map(|_| ()),
        Command::GrnDemo => demo::cmd_grn_demo(cfg, report).map(|_| ()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_overrides_flags() {
        let mut c = RunConfig {
            k: 64,
            ..Default::default()
        };
        c.apply_json(r#"{"k": 16, "spec": "softmax", "command": "grn-demo"}"#).unwrap();
        assert_eq!(c.k, 16);
        assert_eq!(c.spec.as_deref(), Some("softmax"));
        assert_eq!(c.command, Command::GrnDemo);
        assert!(matches!(c.apply_json(r#"{"bogus": 1}"#), Err(CliError::Usage(_))));
    }

    #[test]
    fn validation_rejects_bad_values() {
        let bad_spec = RunConfig {
            spec: Some("relu".into()),
            ..Default::default()
        };
        assert_eq!(bad_spec.validate().unwrap_err().exit_code(), 2);
        let f16_f64 = RunConfig {
            f16: true,
            dtype: DType::Float64,
            ..Default::default()
        };
        assert!(f16_f64.validate().is_err());
        let zero_tile = RunConfig {
            g_y: 0,
            ..Default::default()
        };
        assert!(zero_tile.validate().is_err());
    }

    #[test]
    fn presets() {
        let mut c = RunConfig {
            preset: Some("paper-anchor".into()),
            k: 8,
            ..Default::default()
        };
        c.resolve_preset().unwrap();
        assert_eq!((c.sizes.clone(), c.k), (vec![PAPER_ANCHOR], 128));
        let mut full = RunConfig {
            command: Command::Bench,
            preset: Some("paper-full".into()),
            ..Default::default()
        };
        assert!(full.resolve_preset().is_err());
        full.cost_only = true;
        full.resolve_preset().unwrap();
        assert_eq!(full.sizes.last(), Some(&41472));
    }
}
