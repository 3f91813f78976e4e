use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use smom_core::experiments::{
    oracle_nan, read_rows, run_are_curve, run_estimation, run_trace, summarize, write_csv, Experiment,
    ExperimentConfig, FULL_REPS,
};
use smom_core::Error;

const THREADS_ENV: &str = "SMOM_THREADS";

#[derive(Parser, Debug)]
#[command(name = "smom", version, about = "Stein's method of moments: Monte Carlo experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generalized normal scale estimation.
    Gnormal(RunArgs),
    /// PPI model on the positive orthant of the sphere.
    Ppi(RunArgs),
    /// Matrix Bingham on the Stiefel manifold.
    Bingham(RunArgs),
    /// Closed-form MLE/SM efficiency ratio as a function of beta.
    AreCurve(RunArgs),
    /// Generalized-normal test functions on a grid.
    Trace(RunArgs),
    /// Median (min, max) over MLP pairs of a results CSV.
    Summarize {
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// key=value settings applied before any flag.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sample sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    #[arg(long)]
    reps: Option<usize>,
    /// Orthogonal element counts, comma separated.
    #[arg(long = "K", value_delimiter = ',')]
    k: Option<Vec<usize>>,
    #[arg(long)]
    pairs: Option<usize>,
    /// Monte Carlo size for the moment matrices.
    #[arg(long = "M")]
    m: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    beta: Option<u32>,
    #[arg(long = "beta-max")]
    beta_max: Option<u32>,
    /// plugin, oracle, or both comma separated.
    #[arg(long)]
    anchors: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use the full replication count.
    #[arg(long)]
    full: bool,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Config(m),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn build_config(exp: Experiment, args: &RunArgs) -> Result<(ExperimentConfig, Option<PathBuf>), Failure> {
    let mut cfg = ExperimentConfig::new(exp);
    let mut out = None;
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
        out = cfg.apply_file(&text)?.map(PathBuf::from);
    }
    if args.full {
        cfg.reps = FULL_REPS;
    }
    if let Some(v) = &args.n {
        cfg.n = v.clone();
    }
    if let Some(v) = args.reps {
        cfg.reps = v;
    }
    if let Some(v) = &args.k {
        cfg.k_list = v.clone();
    }
    if let Some(v) = args.pairs {
        cfg.pairs = v;
    }
    if let Some(v) = args.m {
        cfg.mc_size = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.beta {
        cfg.beta = v;
    }
    if let Some(v) = args.beta_max {
        cfg.beta_max = v;
    }
    if let Some(v) = &args.anchors {
        cfg.set("anchors", v)?;
    }
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let t = v
            .trim()
            .parse::<usize>()
            .map_err(|_| Failure::Config(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
        cfg.threads = Some(t);
    }
    if args.out.is_some() {
        out = args.out.clone();
    }
    cfg.validate()?;
    Ok((cfg, out))
}

fn sink(out: Option<&PathBuf>) -> Result<Box<dyn Write>, Failure> {
    match out {
        Some(p) => {
            let f = File::create(p).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", p.display())))?;
            Ok(Box::new(BufWriter::new(f)))
        }
        None => Ok(Box::new(io::stdout().lock())),
    }
}

fn run(cli: Cli) -> Result<bool, Failure> {
    let (exp, args) = match &cli.command {
        Command::Gnormal(a) => (Experiment::Gnormal, a),
        Command::Ppi(a) => (Experiment::Ppi, a),
        Command::Bingham(a) => (Experiment::Bingham, a),
        Command::AreCurve(a) => (Experiment::AreCurve, a),
        Command::Trace(a) => (Experiment::Trace, a),
        Command::Summarize { input, out } => {
            let f = File::open(input).map_err(|e| Failure::Config(format!("cannot open {}: {e}", input.display())))?;
            let rows = read_rows(f).map_err(|e| Failure::Config(format!("bad results file: {e}")))?;
            write_csv(&summarize(&rows), sink(out.as_ref())?)?;
            return Ok(false);
        }
    };
    let (cfg, out) = build_config(exp, args)?;
    match exp {
        Experiment::AreCurve => write_csv(&run_are_curve(cfg.beta_max)?, sink(out.as_ref())?)?,
        Experiment::Trace => write_csv(&run_trace(&cfg)?, sink(out.as_ref())?)?,
        _ => {
            let rows = run_estimation(&cfg)?;
            write_csv(&rows, sink(out.as_ref())?)?;
            return Ok(oracle_nan(&rows));
        }
    }
    Ok(false)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => {
            eprintln!("smom: an oracle-mode row has a NaN estimate");
            ExitCode::from(3)
        }
        Err(Failure::Config(m)) => {
            eprintln!("smom: configuration error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("smom: {m}");
            ExitCode::from(1)
        }
    }
}
