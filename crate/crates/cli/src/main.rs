use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use weaksep::field::{load_field, write_field};
use weaksep::simulate::{generate_field, power_study, write_rate_table, SimulationConfig, StudyPlan};
use weaksep::wstest::{multi_lag_test, CorrelationMethod, MultiLagReport, TestOptions};

/// Test weak separability of spatial functional fields.
#[derive(Debug, Parser)]
#[command(name = "weaksep", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Test a field stored as CSV and write a JSON report.
    Test(TestArgs),
    /// Generate a synthetic field and write it as CSV.
    Simulate(SimulateArgs),
    /// Run a Monte Carlo study and write rejection rates as CSV.
    PowerStudy(StudyArgs),
}

#[derive(Debug, Args)]
struct LagArgs {
    /// Lag distance; repeat for several lags.
    #[arg(long = "lag", value_name = "REAL")]
    lags: Vec<f64>,
    /// Lag as a multiple of the grid spacing; repeat for several lags.
    #[arg(long = "lag-z", value_name = "INT")]
    lag_z: Vec<u32>,
}

impl LagArgs {
    /// Distances in the order given, lattice multiples after real lags.
    fn resolve(&self, spacing: f64) -> Vec<f64> {
        self.lags
            .iter()
            .copied()
            .chain(self.lag_z.iter().map(|&z| z as f64 * spacing))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Para,
    Nonp,
    Both,
}

impl MethodArg {
    fn methods(self) -> Vec<CorrelationMethod> {
        match self {
            MethodArg::Para => vec![CorrelationMethod::Parametric],
            MethodArg::Nonp => vec![CorrelationMethod::Nonparametric],
            MethodArg::Both => vec![CorrelationMethod::Parametric, CorrelationMethod::Nonparametric],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

impl Preset {
    fn config(self, seed: u64) -> SimulationConfig {
        match self {
            Preset::Desk => SimulationConfig::desk(seed),
            Preset::Paper => SimulationConfig::paper(seed),
        }
    }
}

#[derive(Debug, Args)]
struct TestArgs {
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
    /// Report destination; stdout when absent.
    #[arg(long, value_name = "PATH")]
    output: Option<PathBuf>,
    #[command(flatten)]
    lags: LagArgs,
    #[arg(long, default_value_t = 0.9)]
    fve: f64,
    #[arg(long, value_enum, default_value_t = MethodArg::Para)]
    method: MethodArg,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, value_name = "PATH")]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Cross correlation between the first two score fields.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    rho12: f64,
}

#[derive(Debug, Args)]
struct StudyArgs {
    #[arg(long, value_name = "PATH")]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Repeat for several settings; defaults to 0.
    #[arg(long, allow_negative_numbers = true)]
    rho12: Vec<f64>,
    /// Defaults to one grid step when no lag is given.
    #[command(flatten)]
    lags: LagArgs,
    /// Repeat for several levels.
    #[arg(long)]
    fve: Vec<f64>,
    #[arg(long, value_enum, default_value_t = MethodArg::Para)]
    method: MethodArg,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 200)]
    replicates: usize,
}

/// A failure reported as `error[CODE]: message` with exit status 2.
#[derive(Debug)]
struct Failure {
    code: &'static str,
    message: String,
}

impl Failure {
    fn new(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    fn io(path: &Path, err: io::Error) -> Self {
        Self::new("E_IO", format!("{}: {err}", path.display()))
    }
}

impl From<weaksep::Error> for Failure {
    fn from(e: weaksep::Error) -> Self {
        Self::new(e.code(), e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn check_fve(fve: f64) -> Outcome {
    if fve > 0.0 && fve <= 1.0 {
        Ok(())
    } else {
        Err(Failure::new("E_DOMAIN", format!("fve must lie in (0, 1], got {fve}")))
    }
}

fn check_alpha(alpha: f64) -> Outcome {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Failure::new("E_DOMAIN", format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// Run `write` against the output file, or stdout when there is none.
fn emit(output: Option<&Path>, write: impl FnOnce(&mut dyn Write) -> Outcome) -> Outcome {
    match output {
        Some(path) => {
            let file = File::create(path).map_err(|e| Failure::io(path, e))?;
            let mut sink = BufWriter::new(file);
            write(&mut sink)?;
            sink.flush().map_err(|e| Failure::io(path, e))
        }
        None => {
            let stdout = io::stdout();
            let mut sink = stdout.lock();
            write(&mut sink)?;
            sink.flush().map_err(|e| Failure::new("E_IO", e.to_string()))
        }
    }
}

#[derive(Serialize)]
struct MethodResult {
    method: CorrelationMethod,
    p_value: f64,
    reject: bool,
    #[serde(flatten)]
    detail: MultiLagReport,
}

#[derive(Serialize)]
struct TestDocument {
    input: String,
    fve: f64,
    alpha: f64,
    lags: Vec<f64>,
    results: Vec<MethodResult>,
}

fn cmd_test(args: &TestArgs) -> Outcome {
    check_fve(args.fve)?;
    check_alpha(args.alpha)?;
    let file = File::open(&args.input).map_err(|e| Failure::io(&args.input, e))?;
    let field = load_field(BufReader::new(file))
        .map_err(|e| Failure::new(e.code(), format!("{}: {e}", args.input.display())))?;
    let lags = args.lags.resolve(field.grid().spacing());
    if lags.is_empty() {
        return Err(Failure::new("E_USAGE", "at least one --lag or --lag-z is required"));
    }

    let mut results = Vec::new();
    for method in args.method.methods() {
        let report = multi_lag_test(&field, &lags, args.fve, &TestOptions::with_method(method))?;
        for w in report.warnings.iter().chain(report.reports.iter().flat_map(|r| &r.diagnostics.warnings)) {
            eprintln!("warning[{method}]: {w}");
        }
        results.push(MethodResult {
            method,
            p_value: report.combined_p_value,
            reject: report.combined_p_value < args.alpha,
            detail: report,
        });
    }
    let doc = TestDocument {
        input: args.input.display().to_string(),
        fve: args.fve,
        alpha: args.alpha,
        lags,
        results,
    };
    emit(args.output.as_deref(), |sink| {
        serde_json::to_writer_pretty(&mut *sink, &doc).map_err(|e| Failure::new("E_IO", e.to_string()))?;
        writeln!(sink).map_err(|e| Failure::new("E_IO", e.to_string()))
    })
}

fn cmd_simulate(args: &SimulateArgs) -> Outcome {
    let config = args.preset.config(args.seed).with_rho12(args.rho12);
    let field = generate_field(&config, 0)?;
    emit(args.output.as_deref(), |sink| Ok(write_field(&field, sink)?))
}

fn cmd_power_study(args: &StudyArgs) -> Outcome {
    args.fve.iter().try_for_each(|&f| check_fve(f))?;
    check_alpha(args.alpha)?;
    let base = args.preset.config(args.seed);
    let mut lags = args.lags.resolve(base.spacing);
    if lags.is_empty() {
        lags.push(base.spacing);
    }
    let fve_levels = if args.fve.is_empty() { vec![0.9] } else { args.fve.clone() };
    let rho12 = if args.rho12.is_empty() { vec![0.0] } else { args.rho12.clone() };
    let plan = StudyPlan {
        replicates: args.replicates,
        lags,
        fve_levels,
        methods: args.method.methods(),
        alpha: args.alpha,
    };

    let mut rows = Vec::new();
    for &r in &rho12 {
        let result = power_study(&base.clone().with_rho12(r), &plan)?;
        for f in &result.failures {
            eprintln!("warning: rho12 {r}: {f}");
        }
        rows.extend(result.rows);
    }
    emit(args.output.as_deref(), |sink| Ok(write_rate_table(&rows, sink)?))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[E_USAGE]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    let outcome = match &cli.command {
        Command::Test(args) => cmd_test(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::PowerStudy(args) => cmd_power_study(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let message = f.message.replace('\n', " ");
            eprintln!("error[{}]: {message}", f.code);
            ExitCode::from(2)
        }
    }
}
