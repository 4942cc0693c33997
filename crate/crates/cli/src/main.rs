use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use streamattn::tensor::DType;
use streamattn_cli::{run, CliError, Command, RunConfig};

/// Streamed generalized attention: verification, benchmarks, cost model
/// and a gene-regulatory-network demo.
#[derive(Debug, Parser)]
#[command(name = "streamattn", version)]
struct Cli {
    #[arg(long, value_enum, default_value = "verify")]
    cmd: Command,
    /// Comma-separated key/value lengths x.
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<usize>,
    /// Query length (defaults to y = x).
    #[arg(long)]
    y: Option<usize>,
    /// Head dimension.
    #[arg(long)]
    k: Option<usize>,
    /// spherical | softmax | signed_l1
    #[arg(long)]
    spec: Option<String>,
    #[arg(long)]
    gy: Option<usize>,
    #[arg(long)]
    sx: Option<usize>,
    /// float32 | float64
    #[arg(long)]
    dtype: Option<DType>,
    /// Emulate binary16 storage in the streamed path.
    #[arg(long)]
    f16: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON file whose keys override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// desk | paper-anchor | paper-full
    #[arg(long)]
    preset: Option<String>,
    /// Only run the cost model.
    #[arg(long)]
    cost_only: bool,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

impl Cli {
    fn into_config(self) -> Result<RunConfig, CliError> {
        let d = RunConfig::default();
        let mut c = RunConfig {
            command: self.cmd,
            sizes: self.sizes,
            y: self.y,
            k: self.k.unwrap_or(d.k),
            spec: self.spec,
            g_y: self.gy.unwrap_or(d.g_y),
            s_x: self.sx.unwrap_or(d.s_x),
            dtype: self.dtype.unwrap_or(d.dtype),
            f16: self.f16,
            seed: self.seed.unwrap_or(d.seed),
            reps: self.reps.unwrap_or(d.reps),
            warmup: self.warmup.unwrap_or(d.warmup),
            out: self.out.unwrap_or(d.out),
            preset: self.preset,
            cost_only: self.cost_only,
            inject_fault: self.inject_fault,
            grn: None,
        };
        if let Some(path) = self.config {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            c.apply_json(&text)?;
        }
        c.resolve_preset()?;
        Ok(c)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = cli.into_config().and_then(|cfg| {
        let stdout = std::io::stdout();
        run(&cfg, &mut stdout.lock())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
