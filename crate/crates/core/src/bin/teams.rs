use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use teams::cli::{emit_report, exit_code, run, validate_config, ReportFormat, RunConfig};
use teams::TeamsError;

#[derive(Parser)]
#[command(name = "teams", version, about = "Decentralized stochastic team solvers")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline described by a config file.
    Run {
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; results do not depend on it.
        #[arg(long, env = "TEAMS_WORKERS")]
        workers: Option<usize>,
        /// Summary format on stdout: human, csv or json-lines.
        #[arg(long, default_value = "human")]
        format: String,
    },
    /// Check a config and its problem without solving.
    Validate { config: PathBuf },
}

fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn execute(command: Command) -> Result<(), TeamsError> {
    match command {
        Command::Run { config, seed, out, workers, format } => {
            let format: ReportFormat = format.parse()?;
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out = o;
            }
            if let Some(k) = workers {
                if k == 0 {
                    return Err(TeamsError::Config("--workers must be at least 1".into()));
                }
                rayon::ThreadPoolBuilder::new()
                    .num_threads(k)
                    .build_global()
                    .map_err(|e| TeamsError::Config(e.to_string()))?;
            }
            let report = run(&cfg, &base_dir(&config))?;
            let mut bytes = serde_json::to_vec_pretty(&report).map_err(|e| TeamsError::Io(e.to_string()))?;
            bytes.push(b'\n');
            std::fs::write(cfg.out.join("report.json"), bytes)?;
            emit_report(&report, format, std::io::stdout().lock())
        }
        Command::Validate { config } => {
            let cfg = RunConfig::load(&config)?;
            match validate_config(&cfg, &base_dir(&config))? {
                Some(report) => {
                    for c in &report.checks {
                        let mark = if c.passed { "ok  " } else { "FAIL" };
                        println!("{mark} {:<4} {} {}", c.id, c.description, c.detail);
                    }
                }
                None => println!("ok   witsenhausen spec"),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    match execute(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
