mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lion_core::persist::RunConfig;

use error::CliError;

/// Implicit prompt tuning experiments on desk-scale tasks.
#[derive(Debug, Parser)]
#[command(name = "lion", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain the backbone on the unshifted source task.
    Pretrain,
    /// Tune the pretrained backbone on the shifted target task.
    Tune,
    /// Re-score a tuned checkpoint on the target test split.
    Eval,
    /// Check implicit gradients against finite differences and unrolling.
    Gradcheck,
    /// Run the input/output prompt asymmetry experiment.
    Prop1,
    /// Aggregate run CSVs (files or run directories) into one table.
    Report {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
}

/// Flags override values read from `--config`.
#[derive(Debug, Args)]
struct Opts {
    /// `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<String>,
    /// Quantile of the criticality scores below which parameters are shrunk.
    #[arg(long, global = true)]
    tau: Option<String>,
    #[arg(long, global = true)]
    eta: Option<String>,
    /// Fixed-point residual tolerance.
    #[arg(long, global = true)]
    tol: Option<String>,
    #[arg(long, global = true)]
    max_iters: Option<String>,
    #[arg(long, global = true)]
    anderson_depth: Option<String>,
    /// Spectral-norm bound on the equilibrium weights.
    #[arg(long, global = true)]
    kappa: Option<String>,
    #[arg(long, global = true)]
    layers: Option<String>,
    /// head_tuning, full_finetune, bias_tuning or lion.
    #[arg(long, global = true)]
    protocol: Option<String>,
    /// blobs or glyphs.
    #[arg(long, global = true)]
    dataset: Option<String>,
    /// invertible_linear, rotation, noise or none.
    #[arg(long, global = true)]
    shift: Option<String>,
    /// Long-tail imbalance ratio of the target train split.
    #[arg(long, global = true)]
    ir: Option<String>,
    /// Samples per class of the target train split.
    #[arg(long, global = true)]
    shots: Option<String>,
    #[arg(long, global = true)]
    epochs: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<String>,
    /// Any other config key, e.g. `--set hidden=64`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Opts {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).map_err(|e| match e {
                lion_core::Error::Config { .. } => CliError::Config(e),
                other => CliError::Config(lion_core::Error::Config {
                    key: "config".into(),
                    message: format!("{}: {other}", path.display()),
                }),
            })?,
            None => RunConfig::default(),
        };
        let flags = [
            ("seed", &self.seed),
            ("tau", &self.tau),
            ("eta", &self.eta),
            ("tol", &self.tol),
            ("max_iters", &self.max_iters),
            ("anderson_depth", &self.anderson_depth),
            ("kappa", &self.kappa),
            ("layers", &self.layers),
            ("protocol", &self.protocol),
            ("dataset", &self.dataset),
            ("shift", &self.shift),
            ("ir", &self.ir),
            ("shots", &self.shots),
            ("epochs", &self.epochs),
            ("out", &self.out),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v).map_err(CliError::Config)?;
            }
        }
        for pair in &self.set {
            let (key, value) = pair.split_once('=').ok_or_else(|| {
                CliError::Config(lion_core::Error::Config {
                    key: pair.clone(),
                    message: "expected KEY=VALUE".into(),
                })
            })?;
            cfg.set(key.trim(), value.trim()).map_err(CliError::Config)?;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = cli.opts.resolve()?;
    match cli.command {
        Command::Pretrain => commands::pretrain(&cfg),
        Command::Tune => commands::tune(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Gradcheck => commands::gradcheck(&cfg),
        Command::Prop1 => commands::prop1(&cfg),
        Command::Report { paths } => commands::report(&cfg, &paths),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
