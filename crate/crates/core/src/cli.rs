//! The `gt` command-line front end.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 invalid flags or arguments,
//! 3 capacity errors and unreadable or malformed matrix files.
//!
//! `--config FILE` reads a flat TOML table whose keys are flag names
//! (`rho = 0.05`, `algo = ["bp", "nwrbp"]`, `timing = true`). File values are
//! applied first, so flags given on the command line win.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::design::{bernoulli_design, parse_matrix, write_matrix};
use crate::error::{invalid, Error, Result};
use crate::harness::{
    run_experiment, sweep_tau, tau_grid, with_threads, Aggregation, Algorithm, ExperimentConfig, ExperimentResult,
    MatrixMode, Model, TruthSampling, CSV_HEADER,
};
use crate::model::MeasurementMatrix;
use crate::schedule::RsbpSampling;

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CAPACITY: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "gt", version, about = "Noisy non-adaptive group testing experiments")]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run one experiment per (M, algorithm) pair and emit CSV rows.
    Run(RunArgs),
    /// Score each algorithm over a grid of thresholds (probabilistic model).
    SweepTau(SweepArgs),
    /// Write a Bernoulli design in the text matrix format.
    Matrix(MatrixArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ExperimentArgs {
    /// Flat TOML file of flag values; command-line flags take precedence.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "combinatorial")]
    pub model: Model,
    /// Number of items.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Number of defectives (expected number for the probabilistic model).
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    /// Number of tests; a comma list runs each value.
    #[arg(long, value_delimiter = ',', action = clap::ArgAction::Set)]
    pub m: Option<Vec<usize>>,
    /// Channel flip probability.
    #[arg(long)]
    pub rho: f64,
    /// Comma list of bp, rsbp, nwrbp, optimal.
    #[arg(long, value_delimiter = ',', action = clap::ArgAction::Set, default_value = "bp")]
    pub algo: Vec<Algorithm>,
    #[arg(long, default_value_t = 3000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Flooding BP rounds.
    #[arg(long, default_value_t = 10)]
    pub iters: usize,
    /// Test updates for rsbp and nwrbp [default: 10·M].
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long, default_value = "with-replacement", value_parser = parse_sampling)]
    pub rsbp_sampling: RsbpSampling,
    /// How true supports are drawn: prior, or exact-k (exactly K defectives
    /// even under the probabilistic model).
    #[arg(long, default_value = "prior")]
    pub truth: TruthSampling,
    #[arg(long, default_value = "per-trial")]
    pub matrix_mode: MatrixMode,
    /// Use this design for every trial (implies --matrix-mode fixed).
    #[arg(long, value_name = "FILE")]
    pub matrix_in: Option<PathBuf>,
    /// Largest support weight searched by probabilistic optimal [default: K+3].
    #[arg(long)]
    pub w_max: Option<usize>,
    /// Design density is nu/K.
    #[arg(long, default_value_t = std::f64::consts::LN_2)]
    pub nu: f64,
    #[arg(long, default_value = "pooled")]
    pub aggregation: Aggregation,
    /// Candidate limit for the optimal decoders.
    #[arg(long, default_value_t = crate::oracle::DEFAULT_CANDIDATE_CAP)]
    pub cap: u64,
    /// Worker threads [default: all cores].
    #[arg(long, env = "GT_THREADS")]
    pub threads: Option<usize>,
    /// Append rows to this file (header written when the file is new or
    /// empty); stdout otherwise.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Fill the wall_time_s column. Output is then no longer reproducible.
    #[arg(long)]
    pub timing: bool,
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: ExperimentArgs,
    /// Selection threshold for the probabilistic model.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub tau: f64,
}

#[derive(Args, Debug, Clone)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: ExperimentArgs,
    #[arg(long, default_value_t = -2.0, allow_negative_numbers = true)]
    pub tau_min: f64,
    #[arg(long, default_value_t = 2.0, allow_negative_numbers = true)]
    pub tau_max: f64,
    #[arg(long, default_value_t = 41)]
    pub tau_steps: usize,
}

#[derive(Args, Debug, Clone)]
pub struct MatrixArgs {
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long)]
    pub m: usize,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = std::f64::consts::LN_2)]
    pub nu: f64,
    /// Destination file; stdout otherwise.
    #[arg(long, value_name = "FILE")]
    pub matrix_out: Option<PathBuf>,
}

fn parse_sampling(s: &str) -> std::result::Result<RsbpSampling, String> {
    match s {
        "with-replacement" => Ok(RsbpSampling::WithReplacement),
        "permuted-sweeps" => Ok(RsbpSampling::PermutedSweeps),
        other => Err(format!(
            "unknown sampling {other:?}; expected with-replacement or permuted-sweeps"
        )),
    }
}

/// Why a command stopped, with the exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidArgument(_) => EXIT_USAGE,
            Error::Capacity(_) | Error::MatrixFormat { .. } => EXIT_CAPACITY,
            Error::Io(_) => EXIT_IO,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn io_failure(what: &Path, e: io::Error) -> Failure {
    Failure {
        code: EXIT_IO,
        message: format!("{}: {e}", what.display()),
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(f) => {
            eprintln!("error: {}", f.message);
            return f.code;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::SweepTau(a) => cmd_sweep_tau(&a),
        Command::Matrix(a) => cmd_matrix(&a),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

/// Splices the flags from a `--config` file in right after the subcommand.
fn expand_config(args: Vec<OsString>) -> std::result::Result<Vec<OsString>, Failure> {
    let mut path = None;
    for (j, a) in args.iter().enumerate() {
        let Some(s) = a.to_str() else { continue };
        if s == "--config" {
            path = args.get(j + 1).map(PathBuf::from);
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        }
    }
    let Some(path) = path else { return Ok(args) };
    let text = fs::read_to_string(&path).map_err(|e| io_failure(&path, e))?;
    let tokens = config_tokens(&text).map_err(|message| Failure {
        code: EXIT_USAGE,
        message: format!("{}: {message}", path.display()),
    })?;
    let Some(sub) = args
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
        .map(|p| p + 1)
    else {
        return Ok(args);
    };
    let mut out = args[..=sub].to_vec();
    out.extend(tokens.into_iter().map(OsString::from));
    out.extend_from_slice(&args[sub + 1..]);
    Ok(out)
}

/// Flattens a TOML table into `--key value` tokens.
fn config_tokens(text: &str) -> std::result::Result<Vec<String>, String> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| e.message().to_string())?;
    let scalar = |key: &str, v: &toml::Value| -> std::result::Result<String, String> {
        match v {
            toml::Value::String(s) => Ok(s.clone()),
            toml::Value::Integer(i) => Ok(i.to_string()),
            toml::Value::Float(f) => Ok(f.to_string()),
            other => Err(format!("key {key:?}: unsupported value {other}")),
        }
    };
    let mut tokens = Vec::new();
    for (key, value) in &table {
        if key == "config" {
            continue;
        }
        let flag = format!("--{}", key.replace('_', "-"));
        match value {
            toml::Value::Boolean(true) => tokens.push(flag),
            toml::Value::Boolean(false) => {}
            toml::Value::Array(items) => {
                let parts = items
                    .iter()
                    .map(|v| scalar(key, v))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                tokens.push(format!("{flag}={}", parts.join(",")));
            }
            v => tokens.push(format!("{flag}={}", scalar(key, v)?)),
        }
    }
    Ok(tokens)
}

fn read_matrix_file(path: &Path) -> std::result::Result<MeasurementMatrix, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure {
        code: EXIT_CAPACITY,
        message: format!("cannot read matrix {}: {e}", path.display()),
    })?;
    parse_matrix(&text).map_err(|e| Failure {
        code: EXIT_CAPACITY,
        message: format!("{}: {e}", path.display()),
    })
}

/// Builds one config per (M, algorithm), M outer.
fn configs(a: &ExperimentArgs, tau: f64) -> std::result::Result<Vec<ExperimentConfig>, Failure> {
    let fixed = match &a.matrix_in {
        Some(p) => Some(Arc::new(read_matrix_file(p)?)),
        None => None,
    };
    let ms = match (&a.m, &fixed) {
        (Some(ms), _) => ms.clone(),
        (None, Some(f)) => vec![f.tests()],
        (None, None) => return Err(invalid("--m is required unless --matrix-in is given").into()),
    };
    if ms.is_empty() || a.algo.is_empty() {
        return Err(invalid("--m and --algo need at least one value").into());
    }
    let mut out = Vec::new();
    for &m in &ms {
        for &algorithm in &a.algo {
            let config = ExperimentConfig {
                model: a.model,
                n: a.n,
                k: a.k,
                m,
                rho: a.rho,
                algorithm,
                trials: a.trials,
                seed: a.seed,
                tau,
                iterations: a.iters,
                budget: a.budget,
                rsbp_sampling: a.rsbp_sampling,
                truth: a.truth,
                matrix_mode: if fixed.is_some() {
                    MatrixMode::Fixed
                } else {
                    a.matrix_mode
                },
                fixed_matrix: fixed.clone(),
                w_max: a.w_max,
                nu: a.nu,
                aggregation: a.aggregation,
                candidate_cap: a.cap,
            };
            config.validate()?;
            out.push(config);
        }
    }
    Ok(out)
}

/// CSV destination: an appended file or stdout.
struct CsvSink {
    out: Box<dyn Write>,
    path: Option<PathBuf>,
    timing: bool,
}

impl CsvSink {
    fn open(path: Option<&Path>, timing: bool) -> std::result::Result<Self, Failure> {
        let (mut out, needs_header): (Box<dyn Write>, bool) = match path {
            Some(p) => {
                let file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|e| io_failure(p, e))?;
                let empty = file.metadata().map_err(|e| io_failure(p, e))?.len() == 0;
                (Box::new(io::BufWriter::new(file)), empty)
            }
            None => (Box::new(io::stdout().lock()), true),
        };
        let path = path.map(Path::to_path_buf);
        if needs_header {
            writeln!(out, "{CSV_HEADER}")
                .map_err(|e| io_failure(path.as_deref().unwrap_or(Path::new("<stdout>")), e))?;
        }
        Ok(Self { out, path, timing })
    }

    fn write(&mut self, r: &ExperimentResult) -> std::result::Result<(), Failure> {
        let row = r.csv_row(self.timing);
        writeln!(self.out, "{row}")
            .and_then(|_| self.out.flush())
            .map_err(|e| io_failure(self.path.as_deref().unwrap_or(Path::new("<stdout>")), e))
    }
}

fn threaded<R: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<R> + Send) -> std::result::Result<R, Failure> {
    Ok(with_threads(threads.unwrap_or(0), f)??)
}

fn cmd_run(a: &RunArgs) -> std::result::Result<(), Failure> {
    let configs = configs(&a.common, a.tau)?;
    let mut sink = CsvSink::open(a.common.out.as_deref(), a.common.timing)?;
    for c in &configs {
        let r = threaded(a.common.threads, || run_experiment(c))?;
        sink.write(&r)?;
    }
    Ok(())
}

fn cmd_sweep_tau(a: &SweepArgs) -> std::result::Result<(), Failure> {
    if a.common.model != Model::Probabilistic {
        return Err(invalid("sweep-tau needs --model probabilistic").into());
    }
    if a.common.algo.contains(&Algorithm::Optimal) {
        return Err(invalid("sweep-tau needs message-passing algorithms (bp, rsbp, nwrbp)").into());
    }
    if a.tau_steps == 0 {
        return Err(invalid("--tau-steps must be at least 1").into());
    }
    let grid = tau_grid(a.tau_min, a.tau_max, a.tau_steps);
    let configs = configs(&a.common, a.tau_min)?;
    let mut sink = CsvSink::open(a.common.out.as_deref(), a.common.timing)?;
    for c in &configs {
        for r in threaded(a.common.threads, || sweep_tau(c, &grid))? {
            sink.write(&r)?;
        }
    }
    Ok(())
}

fn cmd_matrix(a: &MatrixArgs) -> std::result::Result<(), Failure> {
    if a.k == 0 || a.nu.is_nan() || a.nu <= 0.0 {
        return Err(invalid("matrix needs --k >= 1 and --nu > 0").into());
    }
    let m = bernoulli_design(a.n, a.m, a.k, a.nu, a.seed);
    match &a.matrix_out {
        Some(p) => {
            let file = fs::File::create(p).map_err(|e| io_failure(p, e))?;
            let mut w = io::BufWriter::new(file);
            write_matrix(&m, &mut w)
                .and_then(|_| w.flush())
                .map_err(|e| io_failure(p, e))
        }
        None => write_matrix(&m, io::stdout().lock()).map_err(|e| io_failure(Path::new("<stdout>"), e)),
    }
}
