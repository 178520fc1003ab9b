//! Aggregating a [`LabelMatrix`] into one label per trial.
//!
//! Three aggregators share the [`PosteriorLabel`] output type:
//! [`predict_majority_vote`], the matrix-completion data-programming model
//! ([`fit_data_programming`] / [`predict_posterior`]) and a supervised random
//! forest ([`fit_random_forest`] / [`predict_random_forest`]). Rule-based
//! labels are layered on top with [`apply_rule_overrides`].

mod dp;
mod forest;
mod majority;
mod overrides;
pub mod synthetic;

use std::fmt::Write as _;
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::csvutil::{cell, fmt_f64, Table};
use crate::trial::{GoldLabelSet, WeakLabel};

pub use dp::{fit_data_programming, predict_posterior, DataProgrammingModel, RIDGE_EPSILON};
pub use forest::{fit_random_forest, predict_random_forest, ForestParams, RandomForestAggregator, Split, TreeNode};
pub use majority::predict_majority_vote;
pub use overrides::apply_rule_overrides;

#[derive(Debug, Error)]
pub enum LabelModelError {
    #[error("need at least 3 labeling functions with coverage, found {covered}")]
    TooFewLfs { covered: usize },
    #[error("class balance {0} is not in (0, 1)")]
    InvalidBalance(f64),
    #[error("labeling functions do not match the fitted model: {0}")]
    LfMismatch(String),
    #[error("{phase}: gold covers {rows} rows, need at least {min}")]
    InsufficientGold { phase: String, rows: usize, min: usize },
    #[error("{phase}: gold labels contain a single class")]
    SingleClass { phase: String },
    #[error("{0}")]
    InvalidParams(String),
    #[error("model file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("labels file: {0}")]
    Labels(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Rule,
    Dp,
    Mv,
    Rf,
}

impl LabelSource {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelSource::Rule => "rule",
            LabelSource::Dp => "dp",
            LabelSource::Mv => "mv",
            LabelSource::Rf => "rf",
        }
    }

    pub fn parse(raw: &str) -> Option<LabelSource> {
        [LabelSource::Rule, LabelSource::Dp, LabelSource::Mv, LabelSource::Rf]
            .into_iter()
            .find(|s| s.as_str() == raw.trim())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PosteriorLabel {
    pub nct_id: String,
    pub p_success: f64,
    /// `Success` iff `p_success >= 0.5`, except for undecided majority-vote
    /// rows which carry the configured default.
    pub hard_label: WeakLabel,
    /// Majority vote was tied or had no votes.
    pub undecided: bool,
    pub source: LabelSource,
}

impl PosteriorLabel {
    pub fn from_probability(nct_id: impl Into<String>, p_success: f64, source: LabelSource) -> PosteriorLabel {
        PosteriorLabel {
            nct_id: nct_id.into(),
            p_success,
            hard_label: WeakLabel::from_bool(p_success >= 0.5),
            undecided: false,
            source,
        }
    }
}

/// Gold labels injected into label-model fitting as extra, replicated LF columns.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub gold: GoldLabelSet,
    pub factor: usize,
}

impl AnchorSet {
    pub const DEFAULT_FACTOR: usize = 3;

    pub fn new(gold: GoldLabelSet, factor: usize) -> Result<AnchorSet, LabelModelError> {
        if factor == 0 {
            return Err(LabelModelError::InvalidParams(
                "anchor replication factor must be >= 1".into(),
            ));
        }
        Ok(AnchorSet { gold, factor })
    }
}

/// `nct_id,p_success,hard_label,source`, one row per label in input order.
pub fn labels_csv(labels: &[PosteriorLabel]) -> String {
    let mut s = String::from("nct_id,p_success,hard_label,source\n");
    for l in labels {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            l.nct_id,
            fmt_f64(l.p_success),
            l.hard_label.code(),
            l.source.as_str()
        );
    }
    s
}

/// Inverse of [`labels_csv`]. Majority-vote rows at exactly 0.5 come back
/// flagged undecided.
pub fn read_labels_csv<R: Read>(reader: R) -> Result<Vec<PosteriorLabel>, LabelModelError> {
    let bad = |m: String| LabelModelError::Labels(m);
    let table = Table::from_reader(reader, b',').map_err(|e| bad(e.to_string()))?;
    let col = |name: &str| table.column(name).ok_or_else(|| bad(format!("missing column {name}")));
    let (id, p, hard, src) = (col("nct_id")?, col("p_success")?, col("hard_label")?, col("source")?);
    table
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let line = i + 2;
            let nct_id = cell(row, Some(id)).ok_or_else(|| bad(format!("line {line}: empty nct_id")))?;
            let p_success = cell(row, Some(p))
                .and_then(|v| v.parse::<f64>().ok())
                .filter(|v| (0.0..=1.0).contains(v))
                .ok_or_else(|| bad(format!("line {line}: p_success not a probability")))?;
            let hard_label = cell(row, Some(hard))
                .and_then(|v| v.parse::<i64>().ok())
                .and_then(WeakLabel::from_code)
                .ok_or_else(|| bad(format!("line {line}: bad hard_label")))?;
            let source = cell(row, Some(src))
                .and_then(LabelSource::parse)
                .ok_or_else(|| bad(format!("line {line}: bad source")))?;
            Ok(PosteriorLabel {
                nct_id: nct_id.to_string(),
                p_success,
                hard_label,
                undecided: source == LabelSource::Mv && p_success == 0.5,
                source,
            })
        })
        .collect()
}
