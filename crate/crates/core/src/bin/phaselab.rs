use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use phasebranch::config::{Experiment, RunConfig};
use phasebranch::experiments::run_with;
use phasebranch::Error;

/// Run a configured experiment and write its artifacts.
#[derive(Debug, Parser)]
#[command(name = "phaselab", version)]
struct Args {
    /// JSON run configuration. Without it the built-in defaults are used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the experiment named in the config.
    #[arg(long, value_parser = parse_experiment)]
    experiment: Option<Experiment>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
    /// Print the effective configuration as JSON and exit.
    #[arg(long)]
    dump_config: bool,
}

fn parse_experiment(s: &str) -> Result<Experiment, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown experiment `{s}`"))
}

fn error_kind(e: &Error) -> String {
    let dbg = format!("{e:?}");
    dbg.split(|c: char| !c.is_alphanumeric())
        .next()
        .unwrap_or("Error")
        .to_string()
}

fn fail(e: &Error) -> ExitCode {
    let body = serde_json::json!({ "error": error_kind(e), "message": e.to_string() });
    eprintln!("{body}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let mut cfg = match &args.config {
        Some(path) => match RunConfig::from_path(path) {
            Ok(c) => c,
            Err(e) => return fail(&e),
        },
        None => RunConfig::new(Experiment::AcceptAll),
    };
    if let Some(x) = args.experiment {
        cfg.experiment = x;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.output {
        cfg.output_dir = o.clone();
    }
    if args.dump_config {
        println!("{}", cfg.to_json());
        return ExitCode::SUCCESS;
    }
    let out = cfg.output_dir.clone();
    let quiet = args.quiet;
    let outcome = run_with(&cfg, &out, |c, d| {
        if !quiet {
            println!("{}  ({:.1} s)", c.line(), d.as_secs_f64());
        }
    });
    match outcome {
        Ok(o) => {
            if !quiet {
                println!(
                    "{}: {} -> {}",
                    o.experiment,
                    if o.pass { "PASS" } else { "FAIL" },
                    out.display()
                );
            }
            if o.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => fail(&e),
    }
}
