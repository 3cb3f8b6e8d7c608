use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use lgportf::backtest::{GridMethod, InitialAllocation};
use lgportf::data::{self, InputMode};
use lgportf::local_cov::LocalCovEstimator;
use lgportf::optimizer::StrategySpec;
use lgportf::parallel::Execution;
use lgportf::report::{self, ReportError, RunConfig};
use lgportf::synth::{self, SynthConfig, SynthModel};

/// Environment variable holding the worker thread count.
const THREADS_ENV: &str = "LGPORTF_THREADS";

#[derive(Parser)]
#[command(name = "lgportf", version, about = "Local Gaussian correlation portfolio backtests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rolling-window backtest of the selected strategies.
    Run(RunArgs),
    /// Write a synthetic monthly return panel.
    Synth(SynthArgs),
    /// Full-sample asset statistics and global/local correlations.
    Describe(DescribeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Prices,
    Returns,
}

impl From<ModeArg> for InputMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Prices => InputMode::Prices,
            ModeArg::Returns => InputMode::PercentReturns,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum InitialArg {
    Free,
    Cash,
}

#[derive(Args)]
struct RunArgs {
    /// Input panel (date column followed by one column per asset).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "returns")]
    mode: ModeArg,
    /// Estimation window lengths in months.
    #[arg(long, value_delimiter = ',', default_value = "120,240")]
    windows: Vec<usize>,
    /// Strategies, e.g. EW,MVS,MINC-L. Defaults to all nine.
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<String>>,
    /// `moving:<k>` or `percentile:<q>`.
    #[arg(long, default_value = "moving:3", value_parser = report::parse_grid)]
    grid: GridMethod,
    #[arg(long, default_value_t = lgportf::lgc::DEFAULT_BANDWIDTH_CONSTANT)]
    bandwidth_constant: f64,
    /// Proportional transaction costs in basis points.
    #[arg(long, value_delimiter = ',', default_value = "0,1")]
    tcosts: Vec<f64>,
    #[arg(long)]
    output: PathBuf,
    /// Recorded in the manifest when the input is synthetic.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "free")]
    initial_allocation: InitialArg,
    /// Fit every month from scratch instead of from last month's estimates.
    #[arg(long)]
    no_warm_start: bool,
    /// Risk aversion used for the certainty equivalent.
    #[arg(long, default_value_t = 1.0)]
    ceq_gamma: f64,
    /// Disable data parallelism.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// `regime`, `gaussian:<rho>` or `clayton:<theta>`.
    #[arg(long, default_value = "regime", value_parser = parse_model)]
    model: SynthModel,
    #[arg(long, default_value_t = 463)]
    months: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output file; standard output when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Write compounded prices instead of percent returns.
    #[arg(long, value_enum, default_value = "returns")]
    format: ModeArg,
}

#[derive(Args)]
struct DescribeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "returns")]
    mode: ModeArg,
    /// Grid point for the local correlations.
    #[arg(long, default_value = "percentile:0.05", value_parser = report::parse_grid)]
    grid: GridMethod,
    #[arg(long, default_value_t = lgportf::lgc::DEFAULT_BANDWIDTH_CONSTANT)]
    bandwidth_constant: f64,
    /// Directory for the CSV tables; printed to standard output otherwise.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn parse_model(s: &str) -> Result<SynthModel, String> {
    let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
    let value = || arg.parse::<f64>().map_err(|_| format!("bad parameter {arg:?}"));
    match kind {
        "regime" => Ok(SynthModel::default()),
        "gaussian" => {
            let rho = value()?;
            if !(rho > -0.2 && rho < 1.0) {
                return Err(format!("equicorrelation {rho} is not positive definite for six assets"));
            }
            Ok(SynthModel::Gaussian { rho })
        }
        "clayton" => {
            let theta = value()?;
            if !(theta > 0.0) {
                return Err(format!("clayton theta must be positive, got {theta}"));
            }
            Ok(SynthModel::Clayton { theta })
        }
        _ => Err(format!("unknown model {s:?} (regime | gaussian:<rho> | clayton:<theta>)")),
    }
}

struct Failure {
    kind: &'static str,
    message: String,
    code: u8,
}

impl From<ReportError> for Failure {
    fn from(e: ReportError) -> Self {
        let code = if matches!(e, ReportError::Config(_)) { 2 } else { 1 };
        Failure {
            kind: e.kind(),
            message: e.to_string(),
            code,
        }
    }
}

impl From<data::DataError> for Failure {
    fn from(e: data::DataError) -> Self {
        ReportError::from(e).into()
    }
}

fn config_error(message: String) -> Failure {
    Failure {
        kind: "config",
        message,
        code: 2,
    }
}

fn io_error(path: &str, e: io::Error) -> Failure {
    Failure {
        kind: "io",
        message: format!("cannot write {path}: {e}"),
        code: 1,
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| config_error(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| config_error(format!("thread pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    log::info!("{THREADS_ENV}={n} ignored in a sequential build");
    Ok(())
}

/// Prints a line, exiting quietly when the reader has gone away.
fn emit(line: std::fmt::Arguments) {
    if let Err(e) = writeln!(io::stdout().lock(), "{line}") {
        if e.kind() == io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
    }
}

fn cmd_run(a: RunArgs) -> Result<(), Failure> {
    let strategies = match a.strategies {
        None => StrategySpec::all(),
        Some(list) => list
            .iter()
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.parse::<StrategySpec>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| config_error(e.to_string()))?,
    };
    let mut cfg = RunConfig::new(a.input, a.output);
    cfg.mode = a.mode.into();
    cfg.windows = a.windows;
    cfg.strategies = strategies;
    cfg.grid = a.grid;
    cfg.bandwidth_constant = a.bandwidth_constant;
    cfg.tcosts_bp = a.tcosts;
    cfg.seed = a.seed;
    cfg.initial_allocation = match a.initial_allocation {
        InitialArg::Free => InitialAllocation::Free,
        InitialArg::Cash => InitialAllocation::FromCash,
    };
    cfg.warm_start = !a.no_warm_start;
    cfg.metrics.gamma = a.ceq_gamma;
    if a.sequential {
        cfg.execution = Execution::Sequential;
    }
    let summary = report::run(&cfg)?;
    for f in &summary.files {
        emit(format_args!("{}", f.display()));
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<(), Failure> {
    if a.months < 3 {
        return Err(config_error("at least 3 months are required".into()));
    }
    let cfg = SynthConfig {
        model: a.model,
        months: a.months,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let panel = synth::synth_panel(&cfg);
    let sink: Box<dyn Write> = match &a.output {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| io_error(&p.display().to_string(), e))?,
        )),
        None => Box::new(io::stdout().lock()),
    };
    match a.format {
        ModeArg::Returns => data::write_returns(&panel, sink)?,
        ModeArg::Prices => data::write_prices(&panel, sink)?,
    }
    Ok(())
}

fn cmd_describe(a: DescribeArgs) -> Result<(), Failure> {
    let loaded = data::load_panel(&a.input, a.mode.into())?;
    let est = LocalCovEstimator::with_bandwidth_constant(a.bandwidth_constant);
    let rep = report::describe(&loaded.panel, &a.grid, &est)?;
    match &a.output {
        Some(dir) => {
            for f in rep.write(dir)? {
                emit(format_args!("{}", f.display()));
            }
        }
        None => {
            emit(format_args!("{}", rep.stats_csv()));
            emit(format_args!("global correlation\n{}", rep.matrix_csv(&rep.global_corr)));
            emit(format_args!("local correlation ({})\n{}", report::grid_label(&a.grid), rep.matrix_csv(&rep.local_corr)));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = configure_threads().and_then(|()| match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Describe(a) => cmd_describe(a),
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let err = json!({ "error": { "kind": f.kind, "message": f.message } });
            eprintln!("{err}");
            ExitCode::from(f.code)
        }
    }
}
