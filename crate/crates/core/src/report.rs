//! Terminal P&L statistics and plot-ready data.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::storage::EpisodeLedger;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Histogram bins used by the standard reports.
pub const DEFAULT_BINS: usize = 30;

/// Quantiles of the fill-level fan.
pub const FAN_QUANTILES: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot summarize an empty P&L vector")]
    Empty,
    #[error("report file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Mean, median and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    /// Midpoint of the two central values for even counts.
    pub median: f64,
    /// Sample standard deviation (`n - 1` denominator); 0 for a single value.
    pub std: f64,
}

pub fn summarize(pnl: &[f64]) -> Result<Summary, ReportError> {
    let n = pnl.len();
    if n == 0 {
        return Err(ReportError::Empty);
    }
    let mean = pnl.iter().sum::<f64>() / n as f64;
    let mut sorted = pnl.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let std = if n > 1 {
        (pnl.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(Summary {
        count: n,
        mean,
        median,
        std,
    })
}

/// Equal-width histogram; the last bin is closed on the right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], bins: usize) -> Self {
        let bins = bins.max(1);
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if values.is_empty() {
            return Self {
                edges: vec![0.0, 0.0],
                counts: vec![0],
            };
        }
        let (lo, hi) = if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, lo + 0.5)
        };
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let idx = (((v - lo) / width) as usize).min(bins - 1);
            counts[idx] += 1;
        }
        Self { edges, counts }
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    }
}

/// Per-day distribution of `H / c` across scenarios, days `0..=K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FillFan {
    pub quantiles: Vec<f64>,
    pub mean: Vec<f64>,
    /// `bands[q][day]`.
    pub bands: Vec<Vec<f64>>,
}

impl FillFan {
    pub fn new(level_paths: &[&[f64]], capacity: f64) -> Self {
        let days = level_paths.first().map_or(0, |p| p.len());
        let scale = if capacity > 0.0 { 1.0 / capacity } else { 0.0 };
        let mut mean = Vec::with_capacity(days);
        let mut bands = vec![Vec::with_capacity(days); FAN_QUANTILES.len()];
        let mut column = Vec::with_capacity(level_paths.len());
        for d in 0..days {
            column.clear();
            column.extend(level_paths.iter().map(|p| p[d] * scale));
            mean.push(column.iter().sum::<f64>() / column.len() as f64);
            column.sort_by(f64::total_cmp);
            for (qi, &q) in FAN_QUANTILES.iter().enumerate() {
                bands[qi].push(quantile_sorted(&column, q));
            }
        }
        Self {
            quantiles: FAN_QUANTILES.to_vec(),
            mean,
            bands,
        }
    }
}

/// Terminal P&L distribution of one strategy on one scenario set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PnLReport {
    pub label: String,
    pub pnl: Vec<f64>,
    pub summary: Summary,
    pub histogram: Histogram,
    pub fill: FillFan,
    /// Episodes that hit a constraint violation.
    pub infeasible_episodes: usize,
}

impl PnLReport {
    pub fn from_ledgers(
        label: &str,
        ledgers: &[EpisodeLedger],
        capacity: f64,
        bins: usize,
    ) -> Result<Self, ReportError> {
        let pnl: Vec<f64> = ledgers.iter().map(|l| l.wealth).collect();
        let levels: Vec<&[f64]> = ledgers.iter().map(|l| l.levels.as_slice()).collect();
        Ok(Self {
            label: label.to_string(),
            summary: summarize(&pnl)?,
            histogram: Histogram::new(&pnl, bins),
            fill: FillFan::new(&levels, capacity),
            infeasible_episodes: ledgers.iter().filter(|l| l.violation > 0.0).count(),
            pnl,
        })
    }

    /// Writes `pnl`, histogram and fill fan as CSV files `<stem>_*.csv`.
    pub fn write_csv(&self, dir: &Path, stem: &str) -> Result<(), ReportError> {
        let mut f = std::fs::File::create(dir.join(format!("{stem}_pnl.csv")))?;
        writeln!(f, "scenario,pnl")?;
        for (i, p) in self.pnl.iter().enumerate() {
            writeln!(f, "{i},{p}")?;
        }
        let mut f = std::fs::File::create(dir.join(format!("{stem}_histogram.csv")))?;
        writeln!(f, "lower,upper,count")?;
        for (i, c) in self.histogram.counts.iter().enumerate() {
            writeln!(
                f,
                "{},{},{}",
                self.histogram.edges[i],
                self.histogram.edges[i + 1],
                c
            )?;
        }
        let mut f = std::fs::File::create(dir.join(format!("{stem}_fill.csv")))?;
        write!(f, "day,mean")?;
        for q in &self.fill.quantiles {
            write!(f, ",q{}", (q * 100.0).round() as u32)?;
        }
        writeln!(f)?;
        for d in 0..self.fill.mean.len() {
            write!(f, "{d},{}", self.fill.mean[d])?;
            for band in &self.fill.bands {
                write!(f, ",{}", band[d])?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Versioned report file: one P&L report per data split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub schema_version: u32,
    pub model: String,
    pub seed: u64,
    pub splits: Vec<(String, PnLReport)>,
}

impl ReportFile {
    pub fn new(model: &str, seed: u64) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            model: model.to_string(),
            seed,
            splits: Vec::new(),
        }
    }

    pub fn split(&self, name: &str) -> Option<&PnLReport> {
        self.splits.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }

    pub fn save(&self, path: &Path) -> Result<(), ReportError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ReportError> {
        let r: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(ReportError::Format(format!(
                "unsupported schema version {}",
                r.schema_version
            )));
        }
        Ok(r)
    }
}

/// Side-by-side statistics table (CSV) for several report files.
pub fn comparison_table(reports: &[ReportFile]) -> String {
    let mut out = String::from("model,split,mean,median,std,count\n");
    for r in reports {
        for (split, rep) in &r.splits {
            let s = rep.summary;
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.model, split, s.mean, s.median, s.std, s.count
            ));
        }
    }
    out
}
