use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wavetomo::harness::{self, RunConfig, SweepParameter};
use wavetomo::{Error, Result};

#[derive(Parser)]
#[command(name = "wavetomo", version, about = "Wavelet-domain MCAO tomography simulator")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed-loop simulation.
    Run(Common),
    /// Run one simulation per value of a parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// alpha, pcg_iters, lgs_flux or gain
        #[arg(long)]
        parameter: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<f64>,
    },
    /// Write the phase screens of a configuration.
    Screens {
        #[command(flatten)]
        common: Common,
        /// Frozen-flow time of the dump in seconds.
        #[arg(long, default_value_t = 0.0)]
        time: f64,
    },
    /// Check a configuration and print the effective TOML.
    Validate(Common),
}

#[derive(Args)]
struct Common {
    /// TOML file overlaid on the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "desk-default")]
    preset: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Override a field: `--set tomography.alpha=2`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let text = match &self.config {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::config("--config", format!("{}: {e}", p.display())))?),
            None => None,
        };
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("run.seed={s}"));
        }
        if let Some(n) = self.steps {
            overrides.push(format!("run.steps={n}"));
        }
        RunConfig::compose(&self.preset, text.as_deref(), &overrides)
    }
}

fn execute(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config("--threads", e.to_string()))?;
    }
    match cli.command {
        Command::Run(common) => {
            let cfg = common.config()?;
            let outcome = harness::run(&cfg)?;
            outcome.write(&common.out_dir)?;
            let s = &outcome.report.summary;
            println!("field-average LE Strehl {:.4}, on-axis {:.4}", s.field_average, s.on_axis);
            println!("outputs written to {}", common.out_dir.display());
        }
        Command::Sweep { common, parameter, values } => {
            let cfg = common.config()?;
            let p: SweepParameter = parameter.parse()?;
            let rows = harness::sweep(&cfg, p, &values, Some(&common.out_dir))?;
            println!("{:>12} {:>10} {:>10}", p.name(), "on-axis", "field-avg");
            for r in rows {
                println!("{:>12} {:>10.4} {:>10.4}", r.value, r.on_axis, r.field_average);
            }
        }
        Command::Screens { common, time } => {
            let cfg = common.config()?;
            for p in harness::dump_screens(&cfg, time, &common.out_dir)? {
                println!("{}", p.display());
            }
        }
        Command::Validate(common) => {
            let cfg = common.config()?;
            print!("{}", cfg.to_toml_string()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
