//! Orchestration of backtest runs and the delimited report files they emit.
//!
//! Every file is comma-separated with a header row. Column order is fixed
//! per [`SCHEMA_VERSION`]; numbers are printed with six decimals and
//! undefined ratios as `NA`. Per window `M` a run writes
//!
//! * `M{M}_assets.csv`: asset statistics over the out-of-sample months,
//! * `M{M}_strategies.csv`: descriptive statistics of strategy returns,
//! * `M{M}_rebalancing.csv`: weight dispersion, extreme adjustments,
//!   turnover and terminal wealth per cost level,
//! * `M{M}_performance.csv`: risk-adjusted ratios ex and incl. costs,
//! * `wealth_M{M}_{strategy}.csv`: wealth and drawdown paths,
//!
//! plus one `manifest.json` describing the inputs and per-period
//! estimation diagnostics.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::backtest::{
    self, BacktestConfig, BacktestError, BacktestResult, GridMethod, InitialAllocation,
    StrategyPath,
};
use crate::data::{self, DataError, InputMode};
use crate::local_cov::{self, CovError, LocalCovEstimator};
use crate::metrics::{self, MetricsConfig, MetricsError};
use crate::optimizer::StrategySpec;
use crate::panel::{ReturnPanel, YearMonth};
use crate::parallel::Execution;

pub const SCHEMA_VERSION: &str = "1";

pub const ASSETS_COLUMNS: [&str; 15] = [
    "asset",
    "observations",
    "mean",
    "std_dev",
    "variance",
    "skewness",
    "excess_kurtosis",
    "jarque_bera",
    "sharpe",
    "max_drawdown",
    "min",
    "q1",
    "median",
    "q3",
    "max",
];

pub const STRATEGIES_COLUMNS: [&str; 9] = [
    "strategy",
    "observations",
    "mean",
    "std_dev",
    "skewness",
    "excess_kurtosis",
    "min",
    "max",
    "max_drawdown",
];

pub const REBALANCING_COLUMNS: [&str; 7] = [
    "strategy",
    "avg_weight_sd",
    "max_pos_adjustment",
    "max_neg_adjustment",
    "avg_turnover",
    "tcost_bp",
    "terminal_wealth",
];

pub const PERFORMANCE_COLUMNS: [&str; 11] = [
    "panel",
    "tcost_bp",
    "strategy",
    "sharpe",
    "var_sharpe",
    "es_sharpe",
    "ann_sharpe",
    "ceq",
    "sortino",
    "omega",
    "max_drawdown",
];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("window {window}: {source}")]
    Backtest {
        window: usize,
        source: BacktestError,
    },
    #[error(transparent)]
    Cov(#[from] CovError),
    #[error("metrics for {series}: {source}")]
    Metrics {
        series: String,
        source: MetricsError,
    },
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl ReportError {
    /// Short machine-readable category for structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            ReportError::Config(_) => "config",
            ReportError::Data(_) => "data",
            ReportError::Backtest { .. } => "backtest",
            ReportError::Cov(_) => "estimation",
            ReportError::Metrics { .. } => "metrics",
            ReportError::Io { .. } => "io",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub input: PathBuf,
    pub mode: InputMode,
    pub windows: Vec<usize>,
    pub strategies: Vec<StrategySpec>,
    pub grid: GridMethod,
    pub bandwidth_constant: f64,
    pub tcosts_bp: Vec<f64>,
    pub output_dir: PathBuf,
    /// Echoed into the manifest; set when the input came from `synth`.
    pub seed: Option<u64>,
    pub initial_allocation: InitialAllocation,
    pub warm_start: bool,
    pub metrics: MetricsConfig,
    pub execution: Execution,
}

impl RunConfig {
    pub fn new(input: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            input: input.into(),
            mode: InputMode::PercentReturns,
            windows: vec![120, 240],
            strategies: StrategySpec::all(),
            grid: GridMethod::default(),
            bandwidth_constant: crate::lgc::DEFAULT_BANDWIDTH_CONSTANT,
            tcosts_bp: vec![0.0, 1.0],
            output_dir: output_dir.into(),
            seed: None,
            initial_allocation: InitialAllocation::default(),
            warm_start: true,
            metrics: MetricsConfig::default(),
            execution: Execution::default(),
        }
    }

    /// Checks that do not need the data.
    pub fn validate(&self) -> Result<(), ReportError> {
        if self.strategies.is_empty() {
            return Err(ReportError::Config("at least one strategy is required".into()));
        }
        if self.windows.is_empty() {
            return Err(ReportError::Config("at least one window is required".into()));
        }
        if let Some(w) = self.windows.iter().find(|&&w| w < 4) {
            return Err(ReportError::Config(format!("window {w} is too small")));
        }
        let mut sorted = self.windows.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.windows.len() {
            return Err(ReportError::Config("duplicate window sizes".into()));
        }
        if self.tcosts_bp.is_empty() || self.tcosts_bp.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
            return Err(ReportError::Config("transaction costs must be non-negative".into()));
        }
        if !(self.bandwidth_constant > 0.0 && self.bandwidth_constant.is_finite()) {
            return Err(ReportError::Config("bandwidth constant must be positive".into()));
        }
        let mut names: Vec<String> = self.strategies.iter().map(|s| s.name()).collect();
        names.sort();
        names.dedup();
        if names.len() != self.strategies.len() {
            return Err(ReportError::Config("duplicate strategies".into()));
        }
        Ok(())
    }

    fn backtest_config(&self, window: usize) -> BacktestConfig {
        let mut cfg = BacktestConfig::new(window, self.strategies.clone());
        cfg.tcost_bp = self.tcosts_bp.iter().cloned().fold(0.0, f64::max);
        cfg.grid = self.grid;
        cfg.estimator = LocalCovEstimator {
            bandwidth_constant: self.bandwidth_constant,
            execution: self.execution,
            ..LocalCovEstimator::default()
        };
        cfg.initial_allocation = self.initial_allocation;
        cfg.warm_start = self.warm_start;
        cfg
    }
}

/// Parses `moving:<k>` or `percentile:<q>`.
pub fn parse_grid(s: &str) -> Result<GridMethod, String> {
    let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
    match kind {
        "moving" => {
            let k = if arg.is_empty() { 3 } else { arg.parse().map_err(|_| format!("bad lookback {arg:?}"))? };
            Ok(GridMethod::MovingGrid { k })
        }
        "percentile" => {
            let q: f64 = arg.parse().map_err(|_| format!("bad quantile {arg:?}"))?;
            if !(q > 0.0 && q < 1.0) {
                return Err(format!("quantile {q} outside (0, 1)"));
            }
            Ok(GridMethod::Percentile { q })
        }
        _ => Err(format!("unknown grid {s:?} (moving:<k> | percentile:<q>)")),
    }
}

pub fn grid_label(g: &GridMethod) -> String {
    match g {
        GridMethod::MovingGrid { k } => format!("moving:{k}"),
        GridMethod::Percentile { q } => format!("percentile:{q}"),
    }
}

fn num(v: f64) -> String {
    format!("{v:.6}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_else(|| "NA".into())
}

fn bp_label(bp: f64) -> String {
    format!("{bp}")
}

struct CsvFile {
    path: PathBuf,
    buf: Vec<u8>,
}

impl CsvFile {
    fn new(path: PathBuf, header: &[&str]) -> Self {
        let mut f = Self { path, buf: Vec::new() };
        f.row(header.iter().map(|s| s.to_string()).collect());
        f
    }

    fn row(&mut self, cells: Vec<String>) {
        let line = cells.join(",");
        self.buf.extend_from_slice(line.as_bytes());
        self.buf.push(b'\n');
    }

    fn finish(self) -> Result<PathBuf, ReportError> {
        write_file(&self.path, &self.buf)?;
        Ok(self.path)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ReportError> {
    let io = |source| ReportError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(bytes).map_err(io)
}

fn metric_err(series: &str) -> impl Fn(MetricsError) -> ReportError + '_ {
    move |source| ReportError::Metrics {
        series: series.to_string(),
        source,
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub files: Vec<PathBuf>,
    pub results: Vec<BacktestResult>,
}

/// Loads the input and runs every window.
pub fn run(config: &RunConfig) -> Result<RunSummary, ReportError> {
    config.validate()?;
    let loaded = data::load_panel(&config.input, config.mode)?;
    let input_label = config.input.display().to_string();
    run_panel(&loaded.panel, &input_label, &loaded.gaps, config)
}

/// Runs every window on an in-memory panel and writes the reports.
pub fn run_panel(
    panel: &ReturnPanel,
    input_label: &str,
    gaps: &[data::DateGap],
    config: &RunConfig,
) -> Result<RunSummary, ReportError> {
    config.validate()?;
    for &w in &config.windows {
        if w + 1 >= panel.n_rows() {
            return Err(ReportError::Config(format!(
                "window {w} needs more than {} rows, input has {}",
                w + 1,
                panel.n_rows()
            )));
        }
    }
    fs::create_dir_all(&config.output_dir).map_err(|source| ReportError::Io {
        path: config.output_dir.display().to_string(),
        source,
    })?;

    let results: Vec<Result<BacktestResult, ReportError>> =
        config.execution.map(&config.windows, |&window| {
            backtest::run_backtest(panel, &config.backtest_config(window))
                .map_err(|source| ReportError::Backtest { window, source })
        });
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let mut files = Vec::new();
    let mut window_manifests = Vec::new();
    for result in &results {
        let written = write_window_reports(panel, result, config)?;
        window_manifests.push(window_manifest(result, &written));
        files.extend(written);
    }

    let manifest = json!({
        "schema_version": SCHEMA_VERSION,
        "generator": { "name": env!("CARGO_PKG_NAME"), "version": env!("CARGO_PKG_VERSION") },
        "input": {
            "path": input_label,
            "mode": config.mode,
            "rows": panel.n_rows(),
            "assets": panel.names(),
            "first_date": panel.dates().map(|d| d[0].to_string()),
            "last_date": panel.dates().map(|d| d[d.len() - 1].to_string()),
            "gaps": gaps,
        },
        "config": {
            "windows": config.windows,
            "strategies": config.strategies.iter().map(|s| s.name()).collect::<Vec<_>>(),
            "strategy_specs": config.strategies,
            "grid": grid_label(&config.grid),
            "bandwidth_constant": config.bandwidth_constant,
            "tcosts_bp": config.tcosts_bp,
            "initial_allocation": config.initial_allocation,
            "warm_start": config.warm_start,
            "metrics": config.metrics,
            "seed": config.seed,
            "return_units": "percent, simple",
            "optimization_units": "decimal",
        },
        "windows": window_manifests,
    });
    let manifest_path = config.output_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&manifest_path, text.as_bytes())?;
    files.push(manifest_path);
    Ok(RunSummary { files, results })
}

fn window_manifest(result: &BacktestResult, files: &[PathBuf]) -> serde_json::Value {
    let diag = &result.diagnostics;
    json!({
        "window": result.window,
        "periods": diag.len(),
        "first_period_date": result.dates.as_ref().map(|d| d[0].to_string()),
        "files": files.iter().filter_map(|p| p.file_name()).map(|f| f.to_string_lossy().into_owned()).collect::<Vec<_>>(),
        "local_pd_repairs": diag.iter().filter(|d| d.local_pd_repaired).count(),
        "global_pd_repairs": diag.iter().filter(|d| d.global_pd_repaired).count(),
        "lgc_pair_fallbacks": diag.iter().map(|d| d.lgc_fallbacks).sum::<usize>(),
        "estimation_errors": diag.iter().filter(|d| d.estimation_error.is_some()).count(),
        "strategy_fallbacks": result.strategies.iter().map(|s| json!({
            "strategy": s.name,
            "count": s.fallbacks.len(),
            "events": s.fallbacks,
        })).collect::<Vec<_>>(),
        "period_diagnostics": diag,
    })
}

fn wealth_dates(result: &BacktestResult) -> Vec<String> {
    match &result.dates {
        Some(d) => std::iter::once(d[0].pred())
            .chain(d.iter().copied())
            .map(|d| d.to_string())
            .collect(),
        None => (0..=result.diagnostics.len()).map(|i| i.to_string()).collect(),
    }
}

fn write_window_reports(
    panel: &ReturnPanel,
    result: &BacktestResult,
    config: &RunConfig,
) -> Result<Vec<PathBuf>, ReportError> {
    let m = result.window;
    let dir = &config.output_dir;
    let mut files = Vec::new();

    let mut assets = CsvFile::new(dir.join(format!("M{m}_assets.csv")), &ASSETS_COLUMNS);
    for (j, name) in panel.names().iter().enumerate() {
        let r = &panel.column(j)[m..];
        let s = metrics::descriptive_stats(r).map_err(metric_err(name))?;
        assets.row(vec![
            name.clone(),
            s.observations.to_string(),
            num(s.mean),
            num(s.std_dev),
            num(s.variance),
            num(s.skewness),
            num(s.excess_kurtosis),
            num(s.jarque_bera),
            opt(metrics::sharpe_excess(r, config.metrics.risk_free).ok()),
            num(metrics::max_drawdown(r)),
            num(s.min),
            num(s.q1),
            num(s.median),
            num(s.q3),
            num(s.max),
        ]);
    }
    files.push(assets.finish()?);

    let mut strat = CsvFile::new(dir.join(format!("M{m}_strategies.csv")), &STRATEGIES_COLUMNS);
    for p in &result.strategies {
        let s = metrics::descriptive_stats(&p.gross_returns).map_err(metric_err(&p.name))?;
        strat.row(vec![
            p.name.clone(),
            s.observations.to_string(),
            num(s.mean),
            num(s.std_dev),
            num(s.skewness),
            num(s.excess_kurtosis),
            num(s.min),
            num(s.max),
            num(metrics::max_drawdown(&p.gross_returns)),
        ]);
    }
    files.push(strat.finish()?);

    let mut rebal = CsvFile::new(dir.join(format!("M{m}_rebalancing.csv")), &REBALANCING_COLUMNS);
    for p in &result.strategies {
        let (hi, lo) = backtest::max_adjustments(&p.target_weights, &p.drifted_weights);
        for &bp in &config.tcosts_bp {
            let wealth = backtest::wealth_path(&p.net_returns_at(bp));
            rebal.row(vec![
                p.name.clone(),
                num(backtest::weight_dispersion(&p.target_weights)),
                num(hi),
                num(lo),
                num(p.average_turnover()),
                bp_label(bp),
                num(*wealth.last().expect("nonempty wealth path")),
            ]);
        }
    }
    files.push(rebal.finish()?);

    let mut perf = CsvFile::new(dir.join(format!("M{m}_performance.csv")), &PERFORMANCE_COLUMNS);
    for &bp in &config.tcosts_bp {
        let panel_label = if bp == 0.0 { "ex_costs" } else { "incl_costs" };
        for p in &result.strategies {
            let r = p.net_returns_at(bp);
            let rep = metrics::performance_report(&r, &config.metrics).map_err(metric_err(&p.name))?;
            perf.row(vec![
                panel_label.into(),
                bp_label(bp),
                p.name.clone(),
                opt(rep.sharpe),
                opt(rep.var_sharpe),
                opt(rep.es_sharpe),
                opt(rep.ann_sharpe),
                num(rep.ceq),
                opt(rep.sortino),
                opt(rep.omega),
                num(rep.max_drawdown),
            ]);
        }
    }
    files.push(perf.finish()?);

    let dates = wealth_dates(result);
    for p in &result.strategies {
        files.push(write_wealth_file(dir, m, p, &dates, &config.tcosts_bp)?);
    }
    Ok(files)
}

pub fn wealth_file_name(window: usize, strategy: &str) -> String {
    format!("wealth_M{window}_{strategy}.csv")
}

fn write_wealth_file(
    dir: &Path,
    window: usize,
    p: &StrategyPath,
    dates: &[String],
    tcosts: &[f64],
) -> Result<PathBuf, ReportError> {
    let costed: Vec<f64> = tcosts.iter().copied().filter(|&c| c > 0.0).collect();
    let mut header = vec!["date".to_string(), "wealth_gross".into(), "drawdown_gross".into()];
    for bp in &costed {
        header.push(format!("wealth_net_{}bp", bp_label(*bp)));
        header.push(format!("drawdown_net_{}bp", bp_label(*bp)));
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut f = CsvFile::new(dir.join(wealth_file_name(window, &p.name)), &header_refs);
    let mut series = vec![
        p.wealth_gross.clone(),
        metrics::drawdown_path(&p.gross_returns),
    ];
    for bp in &costed {
        let r = p.net_returns_at(*bp);
        series.push(backtest::wealth_path(&r));
        series.push(metrics::drawdown_path(&r));
    }
    for (i, d) in dates.iter().enumerate() {
        let mut row = vec![d.clone()];
        row.extend(series.iter().map(|s| num(s[i])));
        f.row(row);
    }
    f.finish()
}

/// Full-sample asset statistics with global and local correlation matrices.
#[derive(Debug, Clone)]
pub struct DescribeReport {
    pub names: Vec<String>,
    pub stats: Vec<metrics::DescriptiveStats>,
    pub sharpe: Vec<Option<f64>>,
    pub max_drawdown: Vec<f64>,
    pub global_corr: DMatrix<f64>,
    pub local_corr: DMatrix<f64>,
    pub grid: Vec<f64>,
    pub local_pd_repaired: bool,
    pub lgc_fallbacks: usize,
}

pub fn describe(
    panel: &ReturnPanel,
    grid: &GridMethod,
    estimator: &LocalCovEstimator,
) -> Result<DescribeReport, ReportError> {
    let mut stats = Vec::new();
    let mut sharpe = Vec::new();
    let mut mdd = Vec::new();
    for (j, name) in panel.names().iter().enumerate() {
        let r = panel.column(j);
        stats.push(metrics::descriptive_stats(r).map_err(metric_err(name))?);
        sharpe.push(metrics::sharpe(r).ok());
        mdd.push(metrics::max_drawdown(r));
    }
    let point = match *grid {
        GridMethod::Percentile { q } => local_cov::percentile_grid(panel, q)?,
        GridMethod::MovingGrid { k } => local_cov::moving_grid(panel, panel.n_rows(), k)?,
    };
    let global = local_cov::global_covariance(panel)?;
    let local = estimator.estimate(panel, &point, None)?;
    Ok(DescribeReport {
        names: panel.names().to_vec(),
        stats,
        sharpe,
        max_drawdown: mdd,
        global_corr: global.correlation(),
        local_corr: local.correlation(),
        grid: point.0,
        local_pd_repaired: local.pd_repaired,
        lgc_fallbacks: local.n_fallbacks(),
    })
}

impl DescribeReport {
    pub fn stats_csv(&self) -> String {
        let mut out = String::from("statistic");
        for n in &self.names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        let rows: Vec<(&str, Box<dyn Fn(usize) -> String + '_>)> = vec![
            ("observations", Box::new(|j| self.stats[j].observations.to_string())),
            ("mean", Box::new(|j| num(self.stats[j].mean))),
            ("std_dev", Box::new(|j| num(self.stats[j].std_dev))),
            ("variance", Box::new(|j| num(self.stats[j].variance))),
            ("skewness", Box::new(|j| num(self.stats[j].skewness))),
            ("excess_kurtosis", Box::new(|j| num(self.stats[j].excess_kurtosis))),
            ("jarque_bera", Box::new(|j| num(self.stats[j].jarque_bera))),
            ("sharpe", Box::new(|j| opt(self.sharpe[j]))),
            ("max_drawdown", Box::new(|j| num(self.max_drawdown[j]))),
            ("min", Box::new(|j| num(self.stats[j].min))),
            ("q1", Box::new(|j| num(self.stats[j].q1))),
            ("median", Box::new(|j| num(self.stats[j].median))),
            ("q3", Box::new(|j| num(self.stats[j].q3))),
            ("max", Box::new(|j| num(self.stats[j].max))),
            ("grid", Box::new(|j| num(self.grid[j]))),
        ];
        for (label, f) in rows {
            out.push_str(label);
            for j in 0..self.names.len() {
                out.push(',');
                out.push_str(&f(j));
            }
            out.push('\n');
        }
        out
    }

    pub fn matrix_csv(&self, m: &DMatrix<f64>) -> String {
        let mut out = String::from("asset");
        for n in &self.names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (i, n) in self.names.iter().enumerate() {
            out.push_str(n);
            for j in 0..self.names.len() {
                out.push(',');
                out.push_str(&num(m[(i, j)]));
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
        fs::create_dir_all(dir).map_err(|source| ReportError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let files = [
            ("describe_stats.csv", self.stats_csv()),
            ("describe_global_corr.csv", self.matrix_csv(&self.global_corr)),
            ("describe_local_corr.csv", self.matrix_csv(&self.local_corr)),
        ];
        let mut out = Vec::new();
        for (name, text) in files {
            let p = dir.join(name);
            write_file(&p, text.as_bytes())?;
            out.push(p);
        }
        Ok(out)
    }
}

/// Dates label used in reports for panels without dates.
pub fn first_date(panel: &ReturnPanel) -> Option<YearMonth> {
    panel.dates().map(|d| d[0])
}
