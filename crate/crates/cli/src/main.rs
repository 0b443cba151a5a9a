/// `println!` that ignores a closed stdout.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

mod config;
mod output;
mod pipelines;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nls_floer::Error;

use crate::config::Config;
use crate::output::{Outputs, RunManifest};

#[derive(Parser, Debug)]
#[command(name = "nls-floer", version, about = "Spectral NLS experiments: dynamics, fixed points, Floer cylinders, small divisors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; an empty document prints the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the seed of the config and of the Hofer search.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for independent parameter points.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Evolve one state and report conservation.
    Simulate,
    /// Continue free fixed points to the model strength.
    FixedPoints,
    /// Solve the cylinder boundary value problem for each T.
    Floer,
    /// Scan small divisors and compute convergents.
    Divisors,
    /// Estimate the Hofer norm and the smallness gate.
    Hofer,
    /// Compare the Hamiltonian with its truncated kernel versions.
    Galerkin,
    /// Profiles and monitors on stored states and fixed points.
    Diagnose,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Self::Simulate => "simulate",
            Self::FixedPoints => "fixed-points",
            Self::Floer => "floer",
            Self::Divisors => "divisors",
            Self::Hofer => "hofer",
            Self::Galerkin => "galerkin",
            Self::Diagnose => "diagnose",
        }
    }
}

#[derive(Debug)]
pub enum Failure {
    Config(String),
    NonConvergence(String),
    Numeric(String),
    Io(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::NonConvergence(_) | Self::Numeric(_) => 3,
            Self::Io(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Self::Config(m) | Self::NonConvergence(m) | Self::Numeric(m) | Self::Io(m) => m,
        }
    }

    fn status(&self) -> &'static str {
        match self {
            Self::Config(_) => "config_error",
            Self::NonConvergence(_) => "non_convergence",
            Self::Numeric(_) => "numeric_error",
            Self::Io(_) => "io_error",
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let m = e.to_string();
        match e {
            Error::Io(_) | Error::Json(_) | Error::Csv(_) => Self::Io(m),
            Error::InvalidParameter(_) => Self::Config(m),
            Error::NoConvergence { .. } => Self::NonConvergence(m),
            _ => Self::Numeric(m),
        }
    }
}

fn finish(out: Option<&Outputs>, pipeline: &str, seed: u64, config: Option<&Config>, failure: Option<&Failure>) -> ExitCode {
    let code = failure.map_or(0, Failure::code);
    if let Some(out) = out {
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            pipeline,
            seed,
            status: failure.map_or("ok", Failure::status),
            exit_code: code as i32,
            message: failure.map(Failure::message),
            config,
            artifacts: out.artifacts(),
        };
        if let Err(e) = out.write_manifest(&manifest) {
            eprintln!("error: {}", e.message());
            return ExitCode::from(e.code());
        }
    }
    if let Some(f) = failure {
        eprintln!("error: {}", f.message());
    }
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pipeline = cli.command.name();
    let Some(path) = &cli.config else {
        eprintln!("error: --config <path> is required");
        return ExitCode::from(2);
    };
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return ExitCode::from(4);
        }
    };
    let out = match Outputs::create(&cli.out) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {}", e.message());
            return ExitCode::from(e.code());
        }
    };
    let mut cfg = match config::parse(&text) {
        Ok(c) => c,
        Err(issue) => {
            let f = Failure::Config(format!("config error at {issue}"));
            return finish(Some(&out), pipeline, cli.seed.unwrap_or(0), None, Some(&f));
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.hofer.seed = seed;
    }
    let mut issues = cfg.validate();
    if let Some(p) = &cfg.pipeline {
        if p != pipeline {
            issues.push(config::Issue {
                path: "pipeline".into(),
                message: format!("config selects {p:?} but the subcommand is {pipeline:?}"),
            });
        }
    }

    if config::is_empty(&text) {
        say!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
        if issues.is_empty() {
            say!("validation: ok");
        } else {
            for i in &issues {
                say!("validation: {i}");
            }
        }
        return finish(Some(&out), pipeline, cfg.seed, Some(&cfg), None);
    }
    if !issues.is_empty() {
        for i in &issues {
            eprintln!("config error at {i}");
        }
        let f = Failure::Config(format!("{} invalid field(s), first at {}", issues.len(), issues[0]));
        return finish(Some(&out), pipeline, cfg.seed, Some(&cfg), Some(&f));
    }
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            let f = Failure::Config(format!("--threads: {e}"));
            return finish(Some(&out), pipeline, cfg.seed, Some(&cfg), Some(&f));
        }
    }

    let mut out = out;
    let run = match cli.command {
        Command::Simulate => pipelines::simulate(&cfg, &mut out),
        Command::FixedPoints => pipelines::fixed_points(&cfg, &mut out),
        Command::Floer => pipelines::floer(&cfg, &mut out),
        Command::Divisors => pipelines::divisors(&cfg, &mut out),
        Command::Hofer => pipelines::hofer(&cfg, &mut out),
        Command::Galerkin => pipelines::galerkin(&cfg, &mut out),
        Command::Diagnose => pipelines::diagnose(&cfg, &mut out),
    };
    let failure = match run {
        Ok(outcome) => {
            let report = format!("{}_report.json", pipeline.replace('-', "_"));
            match out.write_json(&report, &outcome.summary) {
                Ok(()) => {
                    say!("{}", serde_json::to_string_pretty(&outcome.summary).expect("summary serializes"));
                    outcome.failure
                }
                Err(e) => Some(e),
            }
        }
        Err(e) => Some(e),
    };
    finish(Some(&out), pipeline, cfg.seed, Some(&cfg), failure.as_ref())
}
