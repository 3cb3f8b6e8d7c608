//! Aligned panel of periodic percent returns.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PanelError {
    #[error("panel needs at least {required} {what}, got {actual}")]
    TooSmall {
        what: &'static str,
        required: usize,
        actual: usize,
    },
    #[error("column {column} has {actual} rows, expected {expected}")]
    RaggedColumns {
        column: usize,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite return at row {row}, column {column}")]
    NonFinite { row: usize, column: usize },
    #[error("duplicate asset name {0:?}")]
    DuplicateName(String),
    #[error("{names} asset names for {columns} columns")]
    NameCount { names: usize, columns: usize },
    #[error("{dates} dates for {rows} rows")]
    DateCount { dates: usize, rows: usize },
    #[error("row range {start}..{end} out of bounds for {rows} rows")]
    RowRange {
        start: usize,
        end: usize,
        rows: usize,
    },
}

/// Calendar month, formatted `yyyy-mm`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct YearMonth {
    pub year: i32,
    pub month: u32,
}

impl YearMonth {
    pub fn new(year: i32, month: u32) -> Option<Self> {
        (1..=12).contains(&month).then_some(Self { year, month })
    }

    pub fn ordinal(self) -> i64 {
        self.year as i64 * 12 + (self.month as i64 - 1)
    }

    pub fn from_ordinal(ord: i64) -> Self {
        Self {
            year: ord.div_euclid(12) as i32,
            month: ord.rem_euclid(12) as u32 + 1,
        }
    }

    pub fn succ(self) -> Self {
        Self::from_ordinal(self.ordinal() + 1)
    }

    pub fn pred(self) -> Self {
        Self::from_ordinal(self.ordinal() - 1)
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for YearMonth {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        // Accept yyyy-mm and yyyy-mm-dd; the day is ignored.
        let mut parts = s.split('-');
        let (Some(y), Some(m)) = (parts.next(), parts.next()) else {
            return Err(format!("expected yyyy-mm, got {s:?}"));
        };
        if y.len() != 4 || m.len() != 2 {
            return Err(format!("expected yyyy-mm, got {s:?}"));
        }
        let year: i32 = y.parse().map_err(|_| format!("bad year in {s:?}"))?;
        let month: u32 = m.parse().map_err(|_| format!("bad month in {s:?}"))?;
        if let Some(d) = parts.next() {
            d.parse::<u32>().map_err(|_| format!("bad day in {s:?}"))?;
        }
        if parts.next().is_some() {
            return Err(format!("expected yyyy-mm, got {s:?}"));
        }
        YearMonth::new(year, month).ok_or_else(|| format!("month out of range in {s:?}"))
    }
}

/// Time-ordered percent returns, one column per asset.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnPanel {
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
    dates: Option<Vec<YearMonth>>,
}

impl ReturnPanel {
    pub fn new(names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self, PanelError> {
        Self::build(names, columns, None, 1)
    }

    pub fn with_dates(
        names: Vec<String>,
        columns: Vec<Vec<f64>>,
        dates: Vec<YearMonth>,
    ) -> Result<Self, PanelError> {
        Self::build(names, columns, Some(dates), 1)
    }

    /// Builds a panel from columns with default names `A1, A2, ...`.
    pub fn from_columns(columns: Vec<Vec<f64>>) -> Result<Self, PanelError> {
        let names = (1..=columns.len()).map(|i| format!("A{i}")).collect();
        Self::new(names, columns)
    }

    fn build(
        names: Vec<String>,
        columns: Vec<Vec<f64>>,
        dates: Option<Vec<YearMonth>>,
        min_assets: usize,
    ) -> Result<Self, PanelError> {
        if columns.len() < min_assets {
            return Err(PanelError::TooSmall {
                what: "assets",
                required: min_assets,
                actual: columns.len(),
            });
        }
        if names.len() != columns.len() {
            return Err(PanelError::NameCount {
                names: names.len(),
                columns: columns.len(),
            });
        }
        let rows = columns[0].len();
        if rows < 2 {
            return Err(PanelError::TooSmall {
                what: "rows",
                required: 2,
                actual: rows,
            });
        }
        for (j, col) in columns.iter().enumerate() {
            if col.len() != rows {
                return Err(PanelError::RaggedColumns {
                    column: j,
                    expected: rows,
                    actual: col.len(),
                });
            }
            if let Some(i) = col.iter().position(|v| !v.is_finite()) {
                return Err(PanelError::NonFinite { row: i, column: j });
            }
        }
        let mut seen = HashSet::new();
        for name in &names {
            if !seen.insert(name.as_str()) {
                return Err(PanelError::DuplicateName(name.clone()));
            }
        }
        if let Some(d) = &dates {
            if d.len() != rows {
                return Err(PanelError::DateCount {
                    dates: d.len(),
                    rows,
                });
            }
        }
        Ok(Self {
            names,
            columns,
            dates,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.columns[0].len()
    }

    pub fn n_assets(&self) -> usize {
        self.columns.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn dates(&self) -> Option<&[YearMonth]> {
        self.dates.as_deref()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[i]).collect()
    }

    /// Copy of rows `start..end`.
    pub fn rows(&self, start: usize, end: usize) -> Result<Self, PanelError> {
        if start >= end || end > self.n_rows() {
            return Err(PanelError::RowRange {
                start,
                end,
                rows: self.n_rows(),
            });
        }
        Self::build(
            self.names.clone(),
            self.columns.iter().map(|c| c[start..end].to_vec()).collect(),
            self.dates.as_ref().map(|d| d[start..end].to_vec()),
            1,
        )
    }

    /// Panel restricted to the given asset indices, in that order.
    pub fn select(&self, assets: &[usize]) -> Result<Self, PanelError> {
        Self::build(
            assets.iter().map(|&j| self.names[j].clone()).collect(),
            assets.iter().map(|&j| self.columns[j].clone()).collect(),
            self.dates.clone(),
            1,
        )
    }

    pub fn means(&self) -> Vec<f64> {
        self.columns.iter().map(|c| crate::stats::mean(c)).collect()
    }
}
