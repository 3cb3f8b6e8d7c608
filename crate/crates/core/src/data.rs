//! Delimited-text panel files.
//!
//! Format: a header row `date,<asset>,<asset>,...` followed by one row per
//! month. Dates are `yyyy-mm` (a trailing `-dd` is accepted and ignored) and
//! must be strictly increasing. Cells hold either prices or percent returns.
//! In price mode, returns are simple percent changes
//! `100 (P_t / P_{t-1} - 1)` dated at `t`, so `n + 1` prices give `n` returns.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::{PanelError, ReturnPanel, YearMonth};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },
    #[error("missing value at row {row}, column {column} ({asset})")]
    Alignment {
        row: usize,
        column: usize,
        asset: String,
    },
    #[error("dates not strictly increasing at row {row}: {prev} then {next}")]
    DateOrder {
        row: usize,
        prev: YearMonth,
        next: YearMonth,
    },
    #[error("header must start with a date column followed by at least one asset")]
    Header,
    #[error("file has {actual} data rows, need at least {required}")]
    TooShort { required: usize, actual: usize },
    #[error(transparent)]
    Panel(#[from] PanelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputMode {
    Prices,
    PercentReturns,
}

impl FromStr for InputMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "prices" => Ok(InputMode::Prices),
            "returns" | "percent_returns" => Ok(InputMode::PercentReturns),
            _ => Err(format!("unknown input mode {s:?} (prices|returns)")),
        }
    }
}

/// A gap of more than one month between consecutive rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateGap {
    pub from: YearMonth,
    pub to: YearMonth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedPanel {
    pub panel: ReturnPanel,
    pub gaps: Vec<DateGap>,
}

struct RawTable {
    names: Vec<String>,
    dates: Vec<YearMonth>,
    columns: Vec<Vec<f64>>,
}

fn read_table<R: Read>(reader: R) -> Result<RawTable, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 2 {
        return Err(DataError::Header);
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut dates = Vec::new();
    let mut columns = vec![Vec::new(); names.len()];
    for (idx, record) in rdr.records().enumerate() {
        let record = record?;
        // Row numbers are 1-based file lines; the header is line 1.
        let row = idx + 2;
        let date_cell = record.get(0).unwrap_or("");
        let date: YearMonth = date_cell.parse().map_err(|message| DataError::Parse {
            row,
            column: 1,
            message,
        })?;
        if let Some(&prev) = dates.last() {
            if date <= prev {
                return Err(DataError::DateOrder { row, prev, next: date });
            }
        }
        dates.push(date);
        for (j, name) in names.iter().enumerate() {
            let cell = record.get(j + 1).unwrap_or("");
            if cell.is_empty() || cell.eq_ignore_ascii_case("na") {
                return Err(DataError::Alignment {
                    row,
                    column: j + 2,
                    asset: name.clone(),
                });
            }
            let v: f64 = cell.parse().map_err(|_| DataError::Parse {
                row,
                column: j + 2,
                message: format!("not a number: {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(DataError::Parse {
                    row,
                    column: j + 2,
                    message: format!("non-finite value {cell:?}"),
                });
            }
            columns[j].push(v);
        }
        if record.len() > names.len() + 1 {
            return Err(DataError::Parse {
                row,
                column: names.len() + 2,
                message: "more cells than header columns".into(),
            });
        }
    }
    Ok(RawTable {
        names,
        dates,
        columns,
    })
}

fn find_gaps(dates: &[YearMonth]) -> Vec<DateGap> {
    dates
        .windows(2)
        .filter(|w| w[1].ordinal() - w[0].ordinal() > 1)
        .map(|w| DateGap { from: w[0], to: w[1] })
        .collect()
}

/// Parses a panel file from any reader.
pub fn parse_panel<R: Read>(reader: R, mode: InputMode) -> Result<LoadedPanel, DataError> {
    let raw = read_table(reader)?;
    let gaps = find_gaps(&raw.dates);
    for g in &gaps {
        warn!("gap of more than one period between {} and {}", g.from, g.to);
    }
    let panel = match mode {
        InputMode::PercentReturns => {
            if raw.dates.len() < 2 {
                return Err(DataError::TooShort {
                    required: 2,
                    actual: raw.dates.len(),
                });
            }
            ReturnPanel::with_dates(raw.names, raw.columns, raw.dates)?
        }
        InputMode::Prices => {
            if raw.dates.len() < 3 {
                return Err(DataError::TooShort {
                    required: 3,
                    actual: raw.dates.len(),
                });
            }
            let mut returns = Vec::with_capacity(raw.columns.len());
            for (j, col) in raw.columns.iter().enumerate() {
                if let Some(i) = col.iter().position(|p| !(*p > 0.0)) {
                    return Err(DataError::Parse {
                        row: i + 2,
                        column: j + 2,
                        message: format!("price must be positive, got {}", col[i]),
                    });
                }
                returns.push(prices_to_returns(col));
            }
            ReturnPanel::with_dates(raw.names, returns, raw.dates[1..].to_vec())?
        }
    };
    Ok(LoadedPanel { panel, gaps })
}

pub fn load_panel(path: &Path, mode: InputMode) -> Result<LoadedPanel, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_panel(file, mode)
}

/// Simple percent returns of a price series.
pub fn prices_to_returns(prices: &[f64]) -> Vec<f64> {
    prices
        .windows(2)
        .map(|w| 100.0 * (w[1] / w[0] - 1.0))
        .collect()
}

/// Compounded price path starting at `start`, one longer than `returns`.
pub fn returns_to_prices(returns: &[f64], start: f64) -> Vec<f64> {
    let mut p = Vec::with_capacity(returns.len() + 1);
    let mut cur = start;
    p.push(cur);
    for r in returns {
        cur *= 1.0 + r / 100.0;
        p.push(cur);
    }
    p
}

/// Dates used when a panel has none: consecutive months from 2000-01.
pub fn default_dates(n: usize) -> Vec<YearMonth> {
    let start = YearMonth::new(2000, 1).expect("valid month").ordinal();
    (0..n as i64).map(|i| YearMonth::from_ordinal(start + i)).collect()
}

fn panel_dates(panel: &ReturnPanel) -> Vec<YearMonth> {
    panel
        .dates()
        .map(<[YearMonth]>::to_vec)
        .unwrap_or_else(|| default_dates(panel.n_rows()))
}

/// Writes percent returns. Values use the shortest representation that
/// parses back to the same `f64`, so a write/load round trip is exact.
pub fn write_returns<W: Write>(panel: &ReturnPanel, writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["date".to_string()];
    header.extend(panel.names().iter().cloned());
    w.write_record(&header)?;
    for (i, d) in panel_dates(panel).iter().enumerate() {
        let mut rec = vec![d.to_string()];
        rec.extend(panel.columns().iter().map(|c| c[i].to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| DataError::Io {
        path: "<writer>".into(),
        source,
    })?;
    Ok(())
}

/// Writes the compounded price path (starting at 100 one month before the
/// first return).
pub fn write_prices<W: Write>(panel: &ReturnPanel, writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["date".to_string()];
    header.extend(panel.names().iter().cloned());
    w.write_record(&header)?;
    let dates = panel_dates(panel);
    let prices: Vec<Vec<f64>> = panel
        .columns()
        .iter()
        .map(|c| returns_to_prices(c, 100.0))
        .collect();
    let mut all_dates = vec![dates[0].pred()];
    all_dates.extend(dates);
    for (i, d) in all_dates.iter().enumerate() {
        let mut rec = vec![d.to_string()];
        rec.extend(prices.iter().map(|c| c[i].to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| DataError::Io {
        path: "<writer>".into(),
        source,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn price_returns() {
        assert!((prices_to_returns(&[100.0, 110.0])[0] - 10.0).abs() < 1e-12);
        assert_eq!(prices_to_returns(&[100.0, 100.0]), vec![0.0]);
    }

    #[test]
    fn parse_errors_carry_location() {
        let csv = "date,a,b\n2000-01,1.0,2.0\n2000-02,x,2.0\n";
        match parse_panel(csv.as_bytes(), InputMode::PercentReturns) {
            Err(DataError::Parse { row: 3, column: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let csv = "date,a,b\n2000-01,1.0,2.0\n2000-02,,2.0\n";
        assert!(matches!(
            parse_panel(csv.as_bytes(), InputMode::PercentReturns),
            Err(DataError::Alignment { row: 3, column: 2, .. })
        ));
        let csv = "date,a\n2000-02,1.0\n2000-01,2.0\n";
        assert!(matches!(
            parse_panel(csv.as_bytes(), InputMode::PercentReturns),
            Err(DataError::DateOrder { row: 3, .. })
        ));
    }

    #[test]
    fn gaps_are_reported() {
        let csv = "date,a\n2000-01,1.0\n2000-02,2.0\n2000-05,3.0\n";
        let loaded = parse_panel(csv.as_bytes(), InputMode::PercentReturns).unwrap();
        assert_eq!(loaded.gaps.len(), 1);
        assert_eq!(loaded.gaps[0].to.to_string(), "2000-05");
    }

    #[test]
    fn prices_mode_shifts_dates() {
        let csv = "date,a\n2000-01,100\n2000-02,110\n2000-03,99\n";
        let loaded = parse_panel(csv.as_bytes(), InputMode::Prices).unwrap();
        let p = loaded.panel;
        assert_eq!(p.n_rows(), 2);
        assert_eq!(p.dates().unwrap()[0].to_string(), "2000-02");
        assert!((p.column(0)[1] + 10.0).abs() < 1e-12);
    }
}
