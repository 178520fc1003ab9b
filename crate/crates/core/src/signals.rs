//! Adapters for auxiliary signal files and the deterministic computations on
//! them: abstract selection, prompt rendering and moving-average slopes.
//!
//! File layouts (UTF-8, header row required, ISO-8601 dates):
//!
//! | file                   | columns                                   |
//! |------------------------|-------------------------------------------|
//! | `news.csv`             | `nct_id,headline,sentiment,confidence`    |
//! | `stock.csv`            | `ticker,date,close`                       |
//! | `trial_ticker_map.csv` | `nct_id,ticker`                           |
//! | `orangebook.csv`       | `generic_name,approval_date`              |
//! | `llm_decisions.csv`    | `nct_id,decision,rationale` (`-1`/`0`/`1`)|
//! | `abstracts.csv`        | `nct_id,pmid,category,title,text`         |
//!
//! Invalid rows are skipped and reported. A file where more than half of the
//! rows are invalid is rejected as corrupt.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use thiserror::Error;

use crate::csvutil::{cell, parse_date, Table};
use crate::trial::{TrialRecord, WeakLabel};

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: csv::Error },
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}: {invalid} of {total} rows invalid")]
    Corrupt {
        path: PathBuf,
        invalid: usize,
        total: usize,
    },
    #[error("series has {len} observations, window needs {window}")]
    InsufficientData { len: usize, window: usize },
    #[error("window must be at least 1")]
    ZeroWindow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AbstractCategory {
    Background,
    Derived,
    Result,
    SearchLinked,
}

impl AbstractCategory {
    pub fn parse(raw: &str) -> Option<AbstractCategory> {
        let key: String = raw
            .chars()
            .filter(|c| c.is_alphanumeric())
            .flat_map(char::to_lowercase)
            .collect();
        match key.as_str() {
            "background" => Some(AbstractCategory::Background),
            "derived" => Some(AbstractCategory::Derived),
            "result" | "results" => Some(AbstractCategory::Result),
            "searchlinked" | "search" => Some(AbstractCategory::SearchLinked),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbstractRecord {
    pub nct_id: String,
    pub pmid: String,
    pub category: AbstractCategory,
    pub title: String,
    pub abstract_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sentiment {
    Positive,
    Negative,
    Neutral,
}

impl Sentiment {
    pub fn parse(raw: &str) -> Option<Sentiment> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "positive" | "pos" => Some(Sentiment::Positive),
            "negative" | "neg" => Some(Sentiment::Negative),
            "neutral" | "neu" => Some(Sentiment::Neutral),
            _ => None,
        }
    }
}

/// A headline with its precomputed sentiment classification.
#[derive(Debug, Clone, PartialEq)]
pub struct NewsRecord {
    pub nct_id: String,
    pub headline: String,
    pub sentiment: Sentiment,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StockSeries {
    pub ticker: String,
    /// Strictly increasing dates, non-negative closing prices.
    pub observations: Vec<(NaiveDate, f64)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrangeBookEntry {
    pub drug_generic_name: String,
    pub approval_date: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LlmDecisionRecord {
    pub nct_id: String,
    pub decision: WeakLabel,
    pub rationale_text: Option<String>,
}

/// Result of loading one signal file.
#[derive(Debug, Clone)]
pub struct Loaded<T> {
    pub records: Vec<T>,
    pub skipped: usize,
    pub warnings: Vec<String>,
}

fn load_rows<T>(
    path: &Path,
    columns: &[&str],
    mut parse: impl FnMut(&[Option<&str>]) -> Result<T, String>,
) -> Result<Loaded<T>, SignalError> {
    let table = Table::read(path, b',').map_err(|source| SignalError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let idx = columns
        .iter()
        .map(|c| {
            table.column(c).ok_or_else(|| SignalError::MissingColumn {
                path: path.to_path_buf(),
                column: c.to_string(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = Loaded {
        records: Vec::with_capacity(table.rows.len()),
        skipped: 0,
        warnings: Vec::new(),
    };
    for (i, row) in table.rows.iter().enumerate() {
        let cells: Vec<Option<&str>> = idx.iter().map(|&c| cell(row, Some(c))).collect();
        match parse(&cells) {
            Ok(rec) => out.records.push(rec),
            Err(msg) => {
                let w = format!("{}: row {}: {msg}", path.display(), i + 2);
                log::warn!("{w}");
                out.warnings.push(w);
                out.skipped += 1;
            }
        }
    }
    let total = table.rows.len();
    if out.skipped * 2 > total {
        return Err(SignalError::Corrupt {
            path: path.to_path_buf(),
            invalid: out.skipped,
            total,
        });
    }
    Ok(out)
}

fn required<'a>(cells: &[Option<&'a str>], i: usize, name: &str) -> Result<&'a str, String> {
    cells[i].ok_or_else(|| format!("empty {name}"))
}

fn date_cell(cells: &[Option<&str>], i: usize, name: &str) -> Result<NaiveDate, String> {
    let raw = required(cells, i, name)?;
    parse_date(raw).ok_or_else(|| format!("unparseable {name} `{raw}`"))
}

pub fn load_news(path: &Path) -> Result<Loaded<NewsRecord>, SignalError> {
    load_rows(path, &["nct_id", "headline", "sentiment", "confidence"], |c| {
        let sentiment_raw = required(c, 2, "sentiment")?;
        let sentiment =
            Sentiment::parse(sentiment_raw).ok_or_else(|| format!("unknown sentiment `{sentiment_raw}`"))?;
        let conf_raw = required(c, 3, "confidence")?;
        let confidence: f64 = conf_raw
            .parse()
            .map_err(|_| format!("unparseable confidence `{conf_raw}`"))?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(format!("confidence {confidence} outside [0, 1]"));
        }
        Ok(NewsRecord {
            nct_id: required(c, 0, "nct_id")?.to_string(),
            headline: c[1].unwrap_or("").to_string(),
            sentiment,
            confidence,
        })
    })
}

/// Loads `ticker,date,close` rows and groups them into per-ticker series
/// sorted by date. Duplicate dates within a ticker are skipped.
pub fn load_stock_series(path: &Path) -> Result<Loaded<StockSeries>, SignalError> {
    let rows = load_rows(path, &["ticker", "date", "close"], |c| {
        let ticker = required(c, 0, "ticker")?.to_string();
        let date = date_cell(c, 1, "date")?;
        let raw = required(c, 2, "close")?;
        let close: f64 = raw.parse().map_err(|_| format!("unparseable close `{raw}`"))?;
        if !(close.is_finite() && close >= 0.0) {
            return Err(format!("close {close} is not a non-negative price"));
        }
        Ok((ticker, date, close))
    })?;
    let mut by_ticker: BTreeMap<String, BTreeMap<NaiveDate, f64>> = BTreeMap::new();
    let mut warnings = rows.warnings;
    let mut skipped = rows.skipped;
    for (ticker, date, close) in rows.records {
        match by_ticker.entry(ticker.clone()).or_default().entry(date) {
            std::collections::btree_map::Entry::Occupied(_) => {
                warnings.push(format!("{}: duplicate {ticker} {date} skipped", path.display()));
                skipped += 1;
            }
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(close);
            }
        }
    }
    Ok(Loaded {
        records: by_ticker
            .into_iter()
            .map(|(ticker, obs)| StockSeries {
                ticker,
                observations: obs.into_iter().collect(),
            })
            .collect(),
        skipped,
        warnings,
    })
}

/// `nct_id → tickers`. A trial resolves to a ticker only when exactly one is mapped.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TickerMap(pub BTreeMap<String, BTreeSet<String>>);

impl TickerMap {
    pub fn ticker_for(&self, nct_id: &str) -> Option<&str> {
        let tickers = self.0.get(nct_id)?;
        if tickers.len() == 1 {
            tickers.iter().next().map(String::as_str)
        } else {
            None
        }
    }
}

pub fn load_ticker_map(path: &Path) -> Result<TickerMap, SignalError> {
    let rows = load_rows(path, &["nct_id", "ticker"], |c| {
        Ok((
            required(c, 0, "nct_id")?.to_string(),
            required(c, 1, "ticker")?.to_string(),
        ))
    })?;
    let mut map = TickerMap::default();
    for (nct, ticker) in rows.records {
        map.0.entry(nct).or_default().insert(ticker);
    }
    Ok(map)
}

pub fn load_orange_book(path: &Path) -> Result<Loaded<OrangeBookEntry>, SignalError> {
    load_rows(path, &["generic_name", "approval_date"], |c| {
        Ok(OrangeBookEntry {
            drug_generic_name: required(c, 0, "generic_name")?.to_string(),
            approval_date: date_cell(c, 1, "approval_date")?,
        })
    })
}

pub fn load_llm_decisions(path: &Path) -> Result<Loaded<LlmDecisionRecord>, SignalError> {
    load_rows(path, &["nct_id", "decision", "rationale"], |c| {
        let raw = required(c, 1, "decision")?;
        let decision = raw
            .parse::<i64>()
            .ok()
            .and_then(WeakLabel::from_code)
            .ok_or_else(|| format!("decision `{raw}` not in -1/0/1"))?;
        Ok(LlmDecisionRecord {
            nct_id: required(c, 0, "nct_id")?.to_string(),
            decision,
            rationale_text: c[2].map(String::from),
        })
    })
}

pub fn load_abstract_links(path: &Path) -> Result<Loaded<AbstractRecord>, SignalError> {
    load_rows(path, &["nct_id", "pmid", "category", "title", "text"], |c| {
        let raw = required(c, 2, "category")?;
        let category = AbstractCategory::parse(raw).ok_or_else(|| format!("unknown category `{raw}`"))?;
        Ok(AbstractRecord {
            nct_id: required(c, 0, "nct_id")?.to_string(),
            pmid: required(c, 1, "pmid")?.to_string(),
            category,
            title: c[3].unwrap_or("").to_string(),
            abstract_text: c[4].unwrap_or("").to_string(),
        })
    })
}

/// Picks up to two abstracts whose titles are most similar to the trial's
/// official title. Background abstracts are never considered. Ties go to the
/// lexicographically smaller pmid.
pub fn select_top2_abstracts<'a>(
    trial: &TrialRecord,
    abstracts: &'a [AbstractRecord],
    sim: impl Fn(&str, &str) -> f64,
) -> Vec<&'a AbstractRecord> {
    let mut scored: Vec<(f64, &AbstractRecord)> = abstracts
        .iter()
        .filter(|a| a.nct_id == trial.nct_id && a.category != AbstractCategory::Background)
        .map(|a| (sim(&a.title, &trial.official_title), a))
        .collect();
    scored.sort_by(|(sa, a), (sb, b)| sb.total_cmp(sa).then_with(|| a.pmid.cmp(&b.pmid)));
    scored.into_iter().take(2).map(|(_, a)| a).collect()
}

const PROMPT_INSTRUCTIONS: &str = "\
You are assisting with the review of a completed clinical trial. Read the trial \
title and the publication abstracts below.

1. List each statistical test reported for the primary outcome(s), with the \
compared groups, the effect estimate and its p-value or confidence interval.
2. Decide whether the trial met its primary endpoint.

Reply in exactly this format:
Statistical tests: <one line per test>
Decision: <1 if the primary endpoint was met, 0 if it was not, -1 if the abstracts do not say>
";

/// Renders the offline prompt for a trial and at most two abstracts. The
/// output depends only on its inputs.
pub fn render_llm_prompt(trial: &TrialRecord, abstracts: &[&AbstractRecord]) -> String {
    let mut out = String::new();
    out.push_str(PROMPT_INSTRUCTIONS);
    out.push('\n');
    let _ = writeln!(out, "Trial: {}", trial.nct_id);
    let _ = writeln!(out, "Official title: {}", one_line(&trial.official_title));
    out.push('\n');
    if abstracts.is_empty() {
        out.push_str("Abstract 1: no abstract available\n");
    }
    for (i, a) in abstracts.iter().take(2).enumerate() {
        let _ = writeln!(out, "Abstract {} (PMID {}): {}", i + 1, a.pmid, one_line(&a.title));
        let _ = writeln!(out, "{}", a.abstract_text.trim());
        out.push('\n');
    }
    out
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Simple moving average of closing prices, dated at the last observation of
/// each window.
pub fn compute_sma(series: &StockSeries, window: usize) -> Result<Vec<(NaiveDate, f64)>, SignalError> {
    if window == 0 {
        return Err(SignalError::ZeroWindow);
    }
    let obs = &series.observations;
    if obs.len() < window {
        return Err(SignalError::InsufficientData { len: obs.len(), window });
    }
    Ok(obs
        .windows(window)
        .map(|w| {
            let sum: f64 = w.iter().map(|(_, p)| p).sum();
            (w[window - 1].0, sum / window as f64)
        })
        .collect())
}

/// Least-squares slope (price units per calendar day) of the moving average
/// over `[completion_date, completion_date + slope_window_days]`. `None` when
/// fewer than two averaged points fall in that window.
pub fn compute_sma_slope(
    series: &StockSeries,
    completion_date: NaiveDate,
    sma_window: usize,
    slope_window_days: i64,
) -> Option<f64> {
    let sma = compute_sma(series, sma_window).ok()?;
    let end = completion_date + chrono::Duration::days(slope_window_days);
    let points: Vec<(f64, f64)> = sma
        .into_iter()
        .filter(|(d, _)| *d >= completion_date && *d <= end)
        .map(|(d, v)| ((d - completion_date).num_days() as f64, v))
        .collect();
    ols_slope(&points)
}

fn ols_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(sxy / sxx)
}
