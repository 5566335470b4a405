use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use qshadow::harness::{self, parse_config, ExperimentConfig};
use qshadow::Error;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Lyap,
    Blocks,
    Norms,
    Holder,
    Shadow,
    Close,
    Spec,
    Entropy,
    Qpp,
    TheoremC,
    All,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Lyap => "lyap",
            Command::Blocks => "blocks",
            Command::Norms => "norms",
            Command::Holder => "holder",
            Command::Shadow => "shadow",
            Command::Close => "close",
            Command::Spec => "spec",
            Command::Entropy => "entropy",
            Command::Qpp => "qpp",
            Command::TheoremC => "theorem-c",
            Command::All => "all",
        }
    }
}

/// Quasi-shadowing experiments on partially hyperbolic torus maps.
///
/// Exit status: 0 when every contract passes, 2 when one fails, 1 on usage errors.
#[derive(Debug, Parser)]
#[command(name = "qshadow", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// System to run when no configuration file is given.
    #[arg(long, default_value = "cat_x_rot")]
    system: String,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: config `out_dir`, then `$QSHADOW_OUT/<system>`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn load(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config { key: "config".into(), msg: format!("{}: {e}", p.display()) })?;
            parse_config(&text)?
        }
        None => ExperimentConfig::minimal(&cli.system),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cfg = match load(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let out = harness::resolve_out(cli.out.as_deref(), &cfg);
    match harness::run(cli.command.name(), &cfg, &out, cli.jobs) {
        Ok(pass) => {
            println!("{} {} -> {}", cli.command.name(), if pass { "PASS" } else { "FAIL" }, out.display());
            ExitCode::from(if pass { 0 } else { 2 })
        }
        Err(e @ Error::Config { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
