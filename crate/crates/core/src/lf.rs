//! Labeling functions, phase-specific threshold tuning and label matrix
//! assembly.
//!
//! Every labeling function maps one trial to [`WeakLabel`]. None of them fail
//! on a well-formed record; missing inputs produce `Abstain`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::csvutil::{fmt_f64, Table};
use crate::eval::ConfusionMatrix;
use crate::signals::Sentiment;
use crate::trial::{GoldLabelSet, MetricField, TrialPhase, TrialRecord, TrialStatus};

pub use crate::trial::WeakLabel;

#[derive(Debug, Error)]
pub enum LfError {
    #[error("labeling function `{lf}`: no resolved threshold for {phase}")]
    UnresolvedThreshold { lf: String, phase: TrialPhase },
    #[error("labeling function `{0}`: metric specs need a metric field and direction, others must have neither")]
    InvalidSpec(String),
    #[error("label matrix: {0}")]
    Matrix(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LfKind {
    Status,
    Pvalue,
    MetricThreshold,
    News,
    Stock,
    Llm,
    Linkage,
    ResultsReported,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    BelowIsSuccess,
    AboveIsSuccess,
}

/// A quantile on the tenths grid `0.1 ..= 0.9`, stored as an integer so the
/// nearest-rank computation is exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QuantileLevel(u8);

impl QuantileLevel {
    pub const MEDIAN: QuantileLevel = QuantileLevel(5);

    pub fn from_tenths(tenths: u8) -> Option<QuantileLevel> {
        (1..=9).contains(&tenths).then_some(QuantileLevel(tenths))
    }

    pub fn grid() -> impl Iterator<Item = QuantileLevel> {
        (1..=9).map(QuantileLevel)
    }

    pub fn tenths(self) -> u8 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.0) / 10.0
    }

    /// Nearest-rank quantile of an ascending slice: the value at rank
    /// `ceil(q * n)` (1-based).
    pub fn nearest_rank(self, sorted: &[f64]) -> Option<f64> {
        if sorted.is_empty() {
            return None;
        }
        let n = sorted.len();
        let rank = (usize::from(self.0) * n).div_ceil(10).clamp(1, n);
        Some(sorted[rank - 1])
    }
}

impl Default for QuantileLevel {
    fn default() -> Self {
        QuantileLevel::MEDIAN
    }
}

impl fmt::Display for QuantileLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0.{}", self.0)
    }
}

impl Serialize for QuantileLevel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_f64())
    }
}

impl<'de> Deserialize<'de> for QuantileLevel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        let tenths = (v * 10.0).round();
        if (v * 10.0 - tenths).abs() > 1e-9 {
            return Err(serde::de::Error::custom(format!("quantile {v} is not on the 0.1 grid")));
        }
        QuantileLevel::from_tenths(tenths as u8)
            .ok_or_else(|| serde::de::Error::custom(format!("quantile {v} outside 0.1..=0.9")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelingFunctionSpec {
    pub name: String,
    pub kind: LfKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric_field: Option<MetricField>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Direction>,
    /// Quantile used when thresholds are not tuned.
    #[serde(default)]
    pub threshold_quantile: QuantileLevel,
}

impl LabelingFunctionSpec {
    pub fn simple(name: &str, kind: LfKind) -> Self {
        LabelingFunctionSpec {
            name: name.to_string(),
            kind,
            metric_field: None,
            direction: None,
            threshold_quantile: QuantileLevel::MEDIAN,
        }
    }

    pub fn metric(name: &str, field: MetricField, direction: Direction) -> Self {
        LabelingFunctionSpec {
            name: name.to_string(),
            kind: LfKind::MetricThreshold,
            metric_field: Some(field),
            direction: Some(direction),
            threshold_quantile: QuantileLevel::MEDIAN,
        }
    }

    pub fn validate(&self) -> Result<(), LfError> {
        let is_metric = self.kind == LfKind::MetricThreshold;
        let has = self.metric_field.is_some() && self.direction.is_some();
        let has_any = self.metric_field.is_some() || self.direction.is_some();
        if (is_metric && !has) || (!is_metric && has_any) {
            return Err(LfError::InvalidSpec(self.name.clone()));
        }
        Ok(())
    }

    pub fn is_tunable(&self) -> bool {
        self.kind == LfKind::MetricThreshold
    }
}

/// The full catalog, in column order.
pub fn default_catalog() -> Vec<LabelingFunctionSpec> {
    use Direction::*;
    use LfKind::*;
    use MetricField::*;
    vec![
        LabelingFunctionSpec::simple("results_reported", ResultsReported),
        LabelingFunctionSpec::metric("num_sponsors", NumSponsors, AboveIsSuccess),
        LabelingFunctionSpec::metric("num_patients", NumPatients, AboveIsSuccess),
        LabelingFunctionSpec::metric("patient_drop", PatientDrop, BelowIsSuccess),
        LabelingFunctionSpec::metric("sites", NumSites, AboveIsSuccess),
        LabelingFunctionSpec::simple("pvalues", Pvalue),
        LabelingFunctionSpec::metric("update_more_recent", UpdateLagDays, AboveIsSuccess),
        LabelingFunctionSpec::metric("death_ae", Deaths, BelowIsSuccess),
        LabelingFunctionSpec::metric("serious_ae", SeriousAdverseEvents, BelowIsSuccess),
        LabelingFunctionSpec::metric("all_ae", AllAdverseEvents, BelowIsSuccess),
        LabelingFunctionSpec::simple("status", Status),
        LabelingFunctionSpec::metric("amendments", NumAmendments, AboveIsSuccess),
        LabelingFunctionSpec::simple("stock_price", Stock),
        LabelingFunctionSpec::simple("linkage", Linkage),
        LabelingFunctionSpec::simple("news_headlines", News),
        LabelingFunctionSpec::simple("gpt", Llm),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedThreshold {
    pub quantile: QuantileLevel,
    /// `None` when the phase population had no values for the metric.
    pub resolved_cut: Option<f64>,
}

/// Per-phase, per-LF quantile choices and their absolute cut values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ThresholdConfig {
    pub phases: BTreeMap<TrialPhase, BTreeMap<String, ResolvedThreshold>>,
}

impl ThresholdConfig {
    pub fn get(&self, phase: TrialPhase, lf: &str) -> Option<&ResolvedThreshold> {
        self.phases.get(&phase)?.get(lf)
    }

    /// Resolves each tunable spec's own `threshold_quantile` over every phase
    /// present in `trials`.
    pub fn resolve_fixed(trials: &[TrialRecord], specs: &[LabelingFunctionSpec]) -> ThresholdConfig {
        let mut cfg = ThresholdConfig::default();
        for phase in phases_of(trials) {
            for spec in specs.iter().filter(|s| s.is_tunable()) {
                let values = phase_values(trials, phase, spec);
                cfg.phases.entry(phase).or_default().insert(
                    spec.name.clone(),
                    ResolvedThreshold {
                        quantile: spec.threshold_quantile,
                        resolved_cut: spec.threshold_quantile.nearest_rank(&values),
                    },
                );
            }
        }
        cfg
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("threshold config serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<ThresholdConfig, serde_json::Error> {
        serde_json::from_str(text)
    }
}

fn phases_of(trials: &[TrialRecord]) -> BTreeSet<TrialPhase> {
    trials.iter().map(|t| t.phase).collect()
}

/// Sorted non-missing metric values of the trials in `phase`.
fn phase_values(trials: &[TrialRecord], phase: TrialPhase, spec: &LabelingFunctionSpec) -> Vec<f64> {
    let Some(field) = spec.metric_field else {
        return Vec::new();
    };
    let mut v: Vec<f64> = trials
        .iter()
        .filter(|t| t.phase == phase)
        .filter_map(|t| t.metrics.numeric(field))
        .collect();
    v.sort_by(f64::total_cmp);
    v
}

pub fn lf_status(trial: &TrialRecord) -> WeakLabel {
    match trial.status {
        TrialStatus::Terminated
        | TrialStatus::Withdrawn
        | TrialStatus::Suspended
        | TrialStatus::Withheld
        | TrialStatus::NoLongerAvailable
        | TrialStatus::TemporarilyNotAvailable => WeakLabel::Failure,
        TrialStatus::ApprovedForMarketing => WeakLabel::Success,
        _ => WeakLabel::Abstain,
    }
}

pub fn lf_pvalue(trial: &TrialRecord) -> WeakLabel {
    match trial.metrics.has_significant_pvalue {
        Some(sig) => WeakLabel::from_bool(sig),
        None => WeakLabel::Abstain,
    }
}

fn compare(value: f64, cut: f64, direction: Direction) -> WeakLabel {
    // Values exactly at the cut fall on the failure side.
    let success = match direction {
        Direction::BelowIsSuccess => value < cut,
        Direction::AboveIsSuccess => value > cut,
    };
    WeakLabel::from_bool(success)
}

/// Threshold LF for numeric metrics, and the boolean `results_reported` LF.
pub fn lf_metric_threshold(
    trial: &TrialRecord,
    spec: &LabelingFunctionSpec,
    cfg: &ThresholdConfig,
) -> Result<WeakLabel, LfError> {
    if spec.kind == LfKind::ResultsReported {
        return Ok(match trial.metrics.results_reported {
            Some(r) => WeakLabel::from_bool(r),
            None => WeakLabel::Abstain,
        });
    }
    let (Some(field), Some(direction)) = (spec.metric_field, spec.direction) else {
        return Err(LfError::InvalidSpec(spec.name.clone()));
    };
    let Some(value) = trial.metrics.numeric(field) else {
        return Ok(WeakLabel::Abstain);
    };
    let cut = cfg
        .get(trial.phase, &spec.name)
        .and_then(|r| r.resolved_cut)
        .ok_or_else(|| LfError::UnresolvedThreshold {
            lf: spec.name.clone(),
            phase: trial.phase,
        })?;
    Ok(compare(value, cut, direction))
}

/// Mode of the headline sentiments. Positive and neutral count as success;
/// a tie between negative and a success class abstains.
pub fn lf_news(sentiments: &[Sentiment]) -> WeakLabel {
    let count = |s: Sentiment| sentiments.iter().filter(|&&x| x == s).count();
    let (pos, neg, neu) = (
        count(Sentiment::Positive),
        count(Sentiment::Negative),
        count(Sentiment::Neutral),
    );
    let top = pos.max(neg).max(neu);
    if top == 0 {
        return WeakLabel::Abstain;
    }
    let success_mode = pos == top || neu == top;
    let failure_mode = neg == top;
    match (success_mode, failure_mode) {
        (true, false) => WeakLabel::Success,
        (false, true) => WeakLabel::Failure,
        _ => WeakLabel::Abstain,
    }
}

pub fn lf_stock(slope: Option<f64>) -> WeakLabel {
    match slope {
        Some(s) if s > 0.0 => WeakLabel::Success,
        Some(s) if s < 0.0 => WeakLabel::Failure,
        _ => WeakLabel::Abstain,
    }
}

pub fn lf_llm(trial: &TrialRecord, decisions: &HashMap<String, WeakLabel>) -> WeakLabel {
    decisions.get(&trial.nct_id).copied().unwrap_or(WeakLabel::Abstain)
}

/// Per-trial auxiliary inputs consumed by the signal-backed LFs.
#[derive(Debug, Clone, Default)]
pub struct SignalBundle {
    pub news: HashMap<String, Vec<Sentiment>>,
    pub stock_slopes: HashMap<String, f64>,
    pub llm: HashMap<String, WeakLabel>,
    pub linkage: HashMap<String, WeakLabel>,
}

pub fn apply_lf(
    trial: &TrialRecord,
    spec: &LabelingFunctionSpec,
    cfg: &ThresholdConfig,
    signals: &SignalBundle,
) -> Result<WeakLabel, LfError> {
    Ok(match spec.kind {
        LfKind::Status => lf_status(trial),
        LfKind::Pvalue => lf_pvalue(trial),
        LfKind::MetricThreshold | LfKind::ResultsReported => lf_metric_threshold(trial, spec, cfg)?,
        LfKind::News => signals
            .news
            .get(&trial.nct_id)
            .map_or(WeakLabel::Abstain, |s| lf_news(s)),
        LfKind::Stock => lf_stock(signals.stock_slopes.get(&trial.nct_id).copied()),
        LfKind::Llm => lf_llm(trial, &signals.llm),
        LfKind::Linkage => signals
            .linkage
            .get(&trial.nct_id)
            .copied()
            .unwrap_or(WeakLabel::Abstain),
    })
}

/// One row per trial (input order), one column per spec (spec order).
pub fn apply_all(
    trials: &[TrialRecord],
    specs: &[LabelingFunctionSpec],
    cfg: &ThresholdConfig,
    signals: &SignalBundle,
) -> Result<LabelMatrix, LfError> {
    for s in specs {
        s.validate()?;
    }
    let rows: Vec<Vec<WeakLabel>> = trials
        .par_iter()
        .map(|t| {
            specs
                .iter()
                .map(|s| apply_lf(t, s, cfg, signals))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    Ok(LabelMatrix {
        trial_ids: trials.iter().map(|t| t.nct_id.clone()).collect(),
        lf_names: specs.iter().map(|s| s.name.clone()).collect(),
        values: rows.into_iter().flatten().collect(),
    })
}

#[derive(Debug, Clone, Default)]
pub struct TuneOutcome {
    pub config: ThresholdConfig,
    pub warnings: Vec<String>,
}

/// Grid search over `0.1 ..= 0.9` for each phase and tunable LF on its own,
/// maximising the F1 (success class) of that LF's non-abstaining votes
/// against the gold labels of the phase. Cuts are resolved over every trial
/// of the phase in `trials`. Ties go to the smaller quantile; phases without
/// gold fall back to the median.
pub fn tune_thresholds(trials: &[TrialRecord], specs: &[LabelingFunctionSpec], gold: &GoldLabelSet) -> TuneOutcome {
    let mut out = TuneOutcome::default();
    for phase in phases_of(trials) {
        let gold_trials: Vec<(&TrialRecord, WeakLabel)> = trials
            .iter()
            .filter(|t| t.phase == phase)
            .filter_map(|t| gold.get(&t.nct_id).map(|g| (t, g)))
            .collect();
        let entry = out.config.phases.entry(phase).or_default();
        if gold_trials.is_empty() && specs.iter().any(|s| s.is_tunable()) {
            out.warnings
                .push(format!("{phase}: no gold labels, thresholds fall back to the median"));
        }
        for spec in specs.iter().filter(|s| s.is_tunable()) {
            let values = phase_values(trials, phase, spec);
            let (Some(field), Some(direction)) = (spec.metric_field, spec.direction) else {
                continue;
            };
            let mut best = QuantileLevel::MEDIAN;
            if !gold_trials.is_empty() && !values.is_empty() {
                let mut best_f1 = f64::NEG_INFINITY;
                for q in QuantileLevel::grid() {
                    let cut = q.nearest_rank(&values).expect("non-empty");
                    let mut cm = ConfusionMatrix::default();
                    for (t, g) in &gold_trials {
                        if let Some(v) = t.metrics.numeric(field) {
                            cm.record(compare(v, cut, direction), *g);
                        }
                    }
                    let f1 = cm.f1();
                    if f1 > best_f1 {
                        best_f1 = f1;
                        best = q;
                    }
                }
            }
            entry.insert(
                spec.name.clone(),
                ResolvedThreshold {
                    quantile: best,
                    resolved_cut: best.nearest_rank(&values),
                },
            );
        }
    }
    out
}

/// `n_trials × n_lfs` votes, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    pub trial_ids: Vec<String>,
    pub lf_names: Vec<String>,
    values: Vec<WeakLabel>,
}

impl LabelMatrix {
    pub fn new(trial_ids: Vec<String>, lf_names: Vec<String>, values: Vec<WeakLabel>) -> Result<LabelMatrix, LfError> {
        if values.len() != trial_ids.len() * lf_names.len() {
            return Err(LfError::Matrix(format!(
                "{} values for {}x{} matrix",
                values.len(),
                trial_ids.len(),
                lf_names.len()
            )));
        }
        Ok(LabelMatrix {
            trial_ids,
            lf_names,
            values,
        })
    }

    /// Builds a matrix from rows of `-1/0/1` codes with generated ids/names.
    pub fn from_codes(rows: &[Vec<i8>]) -> Result<LabelMatrix, LfError> {
        let m = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * m);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != m {
                return Err(LfError::Matrix(format!(
                    "row {i} has {} columns, expected {m}",
                    r.len()
                )));
            }
            for &c in r {
                values.push(
                    WeakLabel::from_code(i64::from(c))
                        .ok_or_else(|| LfError::Matrix(format!("value {c} not in -1/0/1")))?,
                );
            }
        }
        LabelMatrix::new(
            (0..rows.len()).map(|i| format!("row{i}")).collect(),
            (0..m).map(|j| format!("lf{j}")).collect(),
            values,
        )
    }

    pub fn n_rows(&self) -> usize {
        self.trial_ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.lf_names.len()
    }

    pub fn get(&self, row: usize, col: usize) -> WeakLabel {
        self.values[row * self.n_cols() + col]
    }

    pub fn row(&self, row: usize) -> &[WeakLabel] {
        let m = self.n_cols();
        &self.values[row * m..(row + 1) * m]
    }

    pub fn column(&self, col: usize) -> Vec<WeakLabel> {
        (0..self.n_rows()).map(|i| self.get(i, col)).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.lf_names.iter().position(|n| n == name)
    }

    /// Fraction of non-abstaining votes per column (0 for an empty matrix).
    pub fn coverage(&self) -> Vec<f64> {
        let n = self.n_rows();
        (0..self.n_cols())
            .map(|j| {
                if n == 0 {
                    0.0
                } else {
                    (0..n).filter(|&i| self.get(i, j).is_vote()).count() as f64 / n as f64
                }
            })
            .collect()
    }

    pub fn push_column(&mut self, name: impl Into<String>, column: &[WeakLabel]) -> Result<(), LfError> {
        if column.len() != self.n_rows() {
            return Err(LfError::Matrix(format!(
                "column has {} entries for {} rows",
                column.len(),
                self.n_rows()
            )));
        }
        let m = self.n_cols();
        let mut values = Vec::with_capacity(self.values.len() + column.len());
        for (i, &extra) in column.iter().enumerate() {
            values.extend_from_slice(&self.values[i * m..(i + 1) * m]);
            values.push(extra);
        }
        self.values = values;
        self.lf_names.push(name.into());
        Ok(())
    }

    pub fn select_rows(&self, rows: &[usize]) -> LabelMatrix {
        LabelMatrix {
            trial_ids: rows.iter().map(|&i| self.trial_ids[i].clone()).collect(),
            lf_names: self.lf_names.clone(),
            values: rows.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
        }
    }

    pub fn select_columns(&self, cols: &[usize]) -> LabelMatrix {
        LabelMatrix {
            trial_ids: self.trial_ids.clone(),
            lf_names: cols.iter().map(|&j| self.lf_names[j].clone()).collect(),
            values: (0..self.n_rows())
                .flat_map(|i| cols.iter().map(move |&j| (i, j)))
                .map(|(i, j)| self.get(i, j))
                .collect(),
        }
    }

    /// `nct_id` column, then one `-1/0/1` column per LF.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), LfError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["nct_id".to_string()];
        header.extend(self.lf_names.iter().cloned());
        w.write_record(&header)?;
        for (i, id) in self.trial_ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend(self.row(i).iter().map(|v| v.code().to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<LabelMatrix, LfError> {
        let table = Table::from_reader(reader, b',')?;
        if table.headers.first().map(String::as_str) != Some("nct_id") {
            return Err(LfError::Matrix("first column must be nct_id".into()));
        }
        let lf_names = table.headers[1..].to_vec();
        let mut trial_ids = Vec::with_capacity(table.rows.len());
        let mut values = Vec::with_capacity(table.rows.len() * lf_names.len());
        for (i, row) in table.rows.iter().enumerate() {
            if row.len() != lf_names.len() + 1 {
                return Err(LfError::Matrix(format!("row {} has {} cells", i + 2, row.len())));
            }
            trial_ids.push(row[0].to_string());
            for cell in row.iter().skip(1) {
                let v = cell
                    .trim()
                    .parse::<i64>()
                    .ok()
                    .and_then(WeakLabel::from_code)
                    .ok_or_else(|| LfError::Matrix(format!("row {}: bad value `{cell}`", i + 2)))?;
                values.push(v);
            }
        }
        LabelMatrix::new(trial_ids, lf_names, values)
    }
}

/// Per-LF coverage lines `lf,coverage` for reports.
pub fn coverage_csv(matrix: &LabelMatrix) -> String {
    let mut s = String::from("lf,coverage\n");
    for (name, c) in matrix.lf_names.iter().zip(matrix.coverage()) {
        s.push_str(&format!("{name},{}\n", fmt_f64(c)));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trial::TrialMetrics;
    use proptest::prelude::*;

    fn trial(id: &str, phase: TrialPhase) -> TrialRecord {
        TrialRecord::new(id, phase, TrialStatus::Completed)
    }

    fn cfg_with(phase: TrialPhase, lf: &str, cut: f64) -> ThresholdConfig {
        let mut cfg = ThresholdConfig::default();
        cfg.phases.entry(phase).or_default().insert(
            lf.into(),
            ResolvedThreshold {
                quantile: QuantileLevel::MEDIAN,
                resolved_cut: Some(cut),
            },
        );
        cfg
    }

    #[test]
    fn status_rules() {
        let mut t = trial("A", TrialPhase::Phase2);
        t.status = TrialStatus::Terminated;
        assert_eq!(lf_status(&t), WeakLabel::Failure);
        t.status = TrialStatus::ApprovedForMarketing;
        assert_eq!(lf_status(&t), WeakLabel::Success);
        t.status = TrialStatus::Completed;
        assert_eq!(lf_status(&t), WeakLabel::Abstain);
        t.status = TrialStatus::Other("Unknown status".into());
        assert_eq!(lf_status(&t), WeakLabel::Abstain);
    }

    #[test]
    fn pvalue_rules() {
        let mut t = trial("A", TrialPhase::Phase2);
        assert_eq!(lf_pvalue(&t), WeakLabel::Abstain);
        t.metrics.has_significant_pvalue = Some(true);
        assert_eq!(lf_pvalue(&t), WeakLabel::Success);
        t.metrics.has_significant_pvalue = Some(false);
        assert_eq!(lf_pvalue(&t), WeakLabel::Failure);
    }

    #[test]
    fn metric_threshold_examples() {
        let spec = LabelingFunctionSpec::metric(
            "serious_ae",
            MetricField::SeriousAdverseEvents,
            Direction::BelowIsSuccess,
        );
        let cfg = cfg_with(TrialPhase::Phase3, "serious_ae", 5.0);
        let mut t = trial("A", TrialPhase::Phase3);
        t.metrics.serious_adverse_events = Some(2);
        assert_eq!(lf_metric_threshold(&t, &spec, &cfg).unwrap(), WeakLabel::Success);
        t.metrics.serious_adverse_events = Some(5);
        assert_eq!(lf_metric_threshold(&t, &spec, &cfg).unwrap(), WeakLabel::Failure);
        t.metrics.serious_adverse_events = None;
        assert_eq!(lf_metric_threshold(&t, &spec, &cfg).unwrap(), WeakLabel::Abstain);

        let above = LabelingFunctionSpec::metric("n", MetricField::NumPatients, Direction::AboveIsSuccess);
        let cfg = cfg_with(TrialPhase::Phase3, "n", 100.0);
        t.metrics.num_patients = Some(100);
        assert_eq!(lf_metric_threshold(&t, &above, &cfg).unwrap(), WeakLabel::Failure);
        t.metrics.num_patients = Some(101);
        assert_eq!(lf_metric_threshold(&t, &above, &cfg).unwrap(), WeakLabel::Success);
    }

    #[test]
    fn missing_phase_threshold_is_config_error() {
        let spec = LabelingFunctionSpec::metric("sites", MetricField::NumSites, Direction::AboveIsSuccess);
        let mut t = trial("A", TrialPhase::Phase1);
        t.metrics.num_sites = Some(3);
        let err = lf_metric_threshold(&t, &spec, &ThresholdConfig::default()).unwrap_err();
        assert!(matches!(
            err,
            LfError::UnresolvedThreshold {
                phase: TrialPhase::Phase1,
                ..
            }
        ));
    }

    #[test]
    fn results_reported_rule() {
        let spec = LabelingFunctionSpec::simple("results_reported", LfKind::ResultsReported);
        let cfg = ThresholdConfig::default();
        let mut t = trial("A", TrialPhase::Phase1);
        assert_eq!(lf_metric_threshold(&t, &spec, &cfg).unwrap(), WeakLabel::Abstain);
        t.metrics.results_reported = Some(true);
        assert_eq!(lf_metric_threshold(&t, &spec, &cfg).unwrap(), WeakLabel::Success);
        t.metrics.results_reported = Some(false);
        assert_eq!(lf_metric_threshold(&t, &spec, &cfg).unwrap(), WeakLabel::Failure);
    }

    #[test]
    fn news_mode() {
        use Sentiment::*;
        assert_eq!(lf_news(&[Positive, Positive, Negative]), WeakLabel::Success);
        assert_eq!(lf_news(&[Negative, Negative, Neutral]), WeakLabel::Failure);
        assert_eq!(lf_news(&[]), WeakLabel::Abstain);
        assert_eq!(lf_news(&[Positive, Negative]), WeakLabel::Abstain);
        assert_eq!(lf_news(&[Neutral, Negative]), WeakLabel::Abstain);
        assert_eq!(lf_news(&[Positive, Neutral]), WeakLabel::Success);
    }

    #[test]
    fn stock_and_llm() {
        assert_eq!(lf_stock(Some(0.42)), WeakLabel::Success);
        assert_eq!(lf_stock(Some(-0.1)), WeakLabel::Failure);
        assert_eq!(lf_stock(Some(0.0)), WeakLabel::Abstain);
        assert_eq!(lf_stock(None), WeakLabel::Abstain);
        let t = trial("NCT7", TrialPhase::Phase2);
        let mut d = HashMap::new();
        assert_eq!(lf_llm(&t, &d), WeakLabel::Abstain);
        d.insert("NCT7".to_string(), WeakLabel::Failure);
        assert_eq!(lf_llm(&t, &d), WeakLabel::Failure);
        d.insert("NCT7".to_string(), WeakLabel::Success);
        assert_eq!(lf_llm(&t, &d), WeakLabel::Success);
    }

    #[test]
    fn spec_validation() {
        assert!(LabelingFunctionSpec::simple("x", LfKind::MetricThreshold)
            .validate()
            .is_err());
        let mut s = LabelingFunctionSpec::simple("x", LfKind::Status);
        s.direction = Some(Direction::AboveIsSuccess);
        assert!(s.validate().is_err());
        for s in default_catalog() {
            s.validate().unwrap();
        }
        assert_eq!(default_catalog().len(), 16);
    }

    #[test]
    fn nearest_rank_quantiles() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        let q = |t| QuantileLevel::from_tenths(t).unwrap().nearest_rank(&v).unwrap();
        assert_eq!(q(1), 1.0);
        assert_eq!(q(3), 3.0);
        assert_eq!(q(5), 5.0);
        assert_eq!(q(9), 9.0);
        let three = [10.0, 20.0, 30.0];
        assert_eq!(QuantileLevel::MEDIAN.nearest_rank(&three), Some(20.0));
        assert_eq!(QuantileLevel::from_tenths(1).unwrap().nearest_rank(&three), Some(10.0));
        assert_eq!(QuantileLevel::MEDIAN.nearest_rank(&[]), None);
        assert!(QuantileLevel::from_tenths(0).is_none());
        assert!(QuantileLevel::from_tenths(10).is_none());
    }

    fn tuning_population(gold_success_below: u64) -> (Vec<TrialRecord>, GoldLabelSet) {
        let mut trials = Vec::new();
        let mut gold = GoldLabelSet::new();
        for v in 1..=10u64 {
            let mut t = trial(&format!("T{v:02}"), TrialPhase::Phase2);
            t.metrics.serious_adverse_events = Some(v);
            gold.insert(
                t.nct_id.clone(),
                WeakLabel::from_bool(v < gold_success_below),
                "TOP-train",
            );
            trials.push(t);
        }
        (trials, gold)
    }

    fn sae_spec() -> LabelingFunctionSpec {
        LabelingFunctionSpec::metric(
            "serious_ae",
            MetricField::SeriousAdverseEvents,
            Direction::BelowIsSuccess,
        )
    }

    /// Exhaustive grid evaluation written independently of `tune_thresholds`.
    fn grid_oracle(trials: &[TrialRecord], gold: &GoldLabelSet) -> u8 {
        let mut vals: Vec<f64> = trials
            .iter()
            .filter_map(|t| t.metrics.serious_adverse_events.map(|v| v as f64))
            .collect();
        vals.sort_by(f64::total_cmp);
        let mut scores = Vec::new();
        for k in 1..=9usize {
            let rank = ((k * vals.len()) as f64 / 10.0).ceil() as usize;
            let cut = vals[rank.max(1) - 1];
            let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
            for t in trials {
                let v = t.metrics.serious_adverse_events.unwrap() as f64;
                let pred = v < cut;
                let truth = gold.get(&t.nct_id) == Some(WeakLabel::Success);
                match (pred, truth) {
                    (true, true) => tp += 1.0,
                    (true, false) => fp += 1.0,
                    (false, true) => fn_ += 1.0,
                    _ => {}
                }
            }
            let f1 = if tp == 0.0 {
                0.0
            } else {
                2.0 * tp / (2.0 * tp + fp + fn_)
            };
            scores.push((k as u8, f1));
        }
        let best = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        scores.iter().find(|s| s.1 == best).unwrap().0
    }

    #[test]
    fn tuning_finds_separating_quantile() {
        // Successes are exactly the values below the 0.3 nearest-rank quantile (3).
        let (trials, gold) = tuning_population(3);
        assert_eq!(grid_oracle(&trials, &gold), 3);
        let out = tune_thresholds(&trials, &[sae_spec()], &gold);
        let r = out.config.get(TrialPhase::Phase2, "serious_ae").unwrap();
        assert_eq!(r.quantile.tenths(), 3);
        assert_eq!(r.resolved_cut, Some(3.0));
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn tuning_degenerate_gold_takes_smallest_quantile() {
        let (trials, gold) = tuning_population(0);
        let out = tune_thresholds(&trials, &[sae_spec()], &gold);
        assert_eq!(
            out.config
                .get(TrialPhase::Phase2, "serious_ae")
                .unwrap()
                .quantile
                .tenths(),
            1
        );
    }

    #[test]
    fn tuning_without_gold_falls_back_to_median() {
        let (trials, _) = tuning_population(3);
        let out = tune_thresholds(&trials, &[sae_spec()], &GoldLabelSet::new());
        let r = out.config.get(TrialPhase::Phase2, "serious_ae").unwrap();
        assert_eq!(r.quantile, QuantileLevel::MEDIAN);
        assert_eq!(r.resolved_cut, Some(5.0));
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn tuning_matches_oracle_and_is_reproducible_on_noise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let mut trials = Vec::new();
        let mut gold = GoldLabelSet::new();
        for i in 0..200 {
            let mut t = trial(&format!("N{i:03}"), TrialPhase::Phase2);
            t.metrics.serious_adverse_events = Some(rng.gen_range(0..50));
            gold.insert(t.nct_id.clone(), WeakLabel::from_bool(rng.gen_bool(0.5)), "x");
            trials.push(t);
        }
        let a = tune_thresholds(&trials, &[sae_spec()], &gold);
        let b = tune_thresholds(&trials, &[sae_spec()], &gold);
        assert_eq!(a.config, b.config);
        assert_eq!(
            a.config
                .get(TrialPhase::Phase2, "serious_ae")
                .unwrap()
                .quantile
                .tenths(),
            grid_oracle(&trials, &gold)
        );
    }

    #[test]
    fn threshold_json_roundtrip() {
        let (trials, gold) = tuning_population(3);
        let cfg = tune_thresholds(&trials, &[sae_spec()], &gold).config;
        let json = cfg.to_json();
        assert!(json.contains("\"PHASE_2\""));
        assert!(json.contains("\"quantile\": 0.3"));
        assert_eq!(ThresholdConfig::from_json(&json).unwrap(), cfg);
    }

    #[test]
    fn apply_all_shapes() {
        let specs = default_catalog();
        let empty = apply_all(&[], &specs, &ThresholdConfig::default(), &SignalBundle::default()).unwrap();
        assert_eq!((empty.n_rows(), empty.n_cols()), (0, 16));

        let mut t = trial("NCT1", TrialPhase::Phase2);
        t.status = TrialStatus::Withdrawn;
        t.metrics = TrialMetrics {
            has_significant_pvalue: Some(true),
            num_patients: Some(40),
            ..Default::default()
        };
        let trials = vec![t];
        let cfg = ThresholdConfig::resolve_fixed(&trials, &specs);
        let m = apply_all(&trials, &specs, &cfg, &SignalBundle::default()).unwrap();
        let voted: Vec<&str> = (0..m.n_cols())
            .filter(|&j| m.get(0, j).is_vote())
            .map(|j| m.lf_names[j].as_str())
            .collect();
        assert_eq!(voted, ["num_patients", "pvalues", "status"]);
        // Single-trial population: the cut equals the value, so the strict rule fails it.
        assert_eq!(m.get(0, m.column_index("num_patients").unwrap()), WeakLabel::Failure);
    }

    #[test]
    fn matrix_csv_roundtrip_and_push() {
        let mut m = LabelMatrix::from_codes(&[vec![1, 0, -1], vec![-1, -1, 1]]).unwrap();
        m.push_column("anchor", &[WeakLabel::Success, WeakLabel::Abstain])
            .unwrap();
        assert_eq!(
            m.row(0),
            &[
                WeakLabel::Success,
                WeakLabel::Failure,
                WeakLabel::Abstain,
                WeakLabel::Success
            ]
        );
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "nct_id,lf0,lf1,lf2,anchor\nrow0,1,0,-1,1\nrow1,-1,-1,1,-1\n"
        );
        assert_eq!(LabelMatrix::read_csv(buf.as_slice()).unwrap(), m);
        assert_eq!(m.coverage(), vec![0.5, 0.5, 0.5, 0.5]);
        assert!(LabelMatrix::from_codes(&[vec![2]]).is_err());
    }

    proptest! {
        #[test]
        fn below_is_success_is_monotone(v in 0u64..1000, d in 0u64..1000, cut in 0.0f64..1000.0) {
            let spec = sae_spec();
            let cfg = cfg_with(TrialPhase::Phase1, "serious_ae", cut);
            let mut t = trial("A", TrialPhase::Phase1);
            t.metrics.serious_adverse_events = Some(v + d);
            let high = lf_metric_threshold(&t, &spec, &cfg).unwrap();
            t.metrics.serious_adverse_events = Some(v);
            let low = lf_metric_threshold(&t, &spec, &cfg).unwrap();
            prop_assert!(!(high == WeakLabel::Success && low == WeakLabel::Failure));
        }

        #[test]
        fn apply_all_permutes_rows(seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let statuses = [TrialStatus::Completed, TrialStatus::Terminated, TrialStatus::ApprovedForMarketing];
            let mut trials: Vec<TrialRecord> = (0..12).map(|i| {
                let mut t = trial(&format!("P{i}"), TrialPhase::Phase2);
                t.status = statuses[i % 3].clone();
                t.metrics.num_sites = if i % 4 == 0 { None } else { Some(i as u64) };
                t.metrics.has_significant_pvalue = (i % 5 != 0).then_some(i % 2 == 0);
                t
            }).collect();
            let specs = default_catalog();
            let cfg = ThresholdConfig::resolve_fixed(&trials, &specs);
            let base = apply_all(&trials, &specs, &cfg, &SignalBundle::default()).unwrap();
            trials.shuffle(&mut rng);
            let shuffled = apply_all(&trials, &specs, &cfg, &SignalBundle::default()).unwrap();
            for (i, id) in shuffled.trial_ids.iter().enumerate() {
                let j = base.trial_ids.iter().position(|x| x == id).unwrap();
                prop_assert_eq!(shuffled.row(i), base.row(j));
            }
        }
    }
}
