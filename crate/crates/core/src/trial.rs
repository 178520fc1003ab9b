//! Trial registry records, flat-file ingestion and the selection cascade.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::csvutil::{self, cell, Table};

#[derive(Debug, Error)]
pub enum TrialError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: csv::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("missing mandatory column `{0}`")]
    MissingColumn(String),
    #[error("duplicate nct_id values: {}", .0.join(", "))]
    DuplicateIds(Vec<String>),
    #[error("row {row}: empty nct_id")]
    EmptyId { row: usize },
    #[error("row {row}: invalid gold label `{value}`")]
    InvalidGold { row: usize, value: String },
}

/// Vote emitted by a labeling function, encoded as `-1 / 0 / 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WeakLabel {
    Abstain,
    Failure,
    Success,
}

impl WeakLabel {
    pub fn code(self) -> i8 {
        match self {
            WeakLabel::Abstain => -1,
            WeakLabel::Failure => 0,
            WeakLabel::Success => 1,
        }
    }

    pub fn from_code(code: i64) -> Option<WeakLabel> {
        match code {
            -1 => Some(WeakLabel::Abstain),
            0 => Some(WeakLabel::Failure),
            1 => Some(WeakLabel::Success),
            _ => None,
        }
    }

    pub fn from_bool(success: bool) -> WeakLabel {
        if success {
            WeakLabel::Success
        } else {
            WeakLabel::Failure
        }
    }

    pub fn is_vote(self) -> bool {
        self != WeakLabel::Abstain
    }

    pub fn flipped(self) -> WeakLabel {
        match self {
            WeakLabel::Abstain => WeakLabel::Abstain,
            WeakLabel::Failure => WeakLabel::Success,
            WeakLabel::Success => WeakLabel::Failure,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrialPhase {
    #[serde(rename = "EARLY_PHASE_1")]
    EarlyPhase1,
    #[serde(rename = "PHASE_1")]
    Phase1,
    #[serde(rename = "PHASE_1_2")]
    Phase1_2,
    #[serde(rename = "PHASE_2")]
    Phase2,
    #[serde(rename = "PHASE_2_3")]
    Phase2_3,
    #[serde(rename = "PHASE_3")]
    Phase3,
    #[serde(rename = "PHASE_4")]
    Phase4,
    #[serde(rename = "NOT_APPLICABLE")]
    NotApplicable,
    #[serde(rename = "UNKNOWN")]
    Unknown,
}

impl TrialPhase {
    pub const ALL: [TrialPhase; 9] = [
        TrialPhase::EarlyPhase1,
        TrialPhase::Phase1,
        TrialPhase::Phase1_2,
        TrialPhase::Phase2,
        TrialPhase::Phase2_3,
        TrialPhase::Phase3,
        TrialPhase::Phase4,
        TrialPhase::NotApplicable,
        TrialPhase::Unknown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrialPhase::EarlyPhase1 => "EARLY_PHASE_1",
            TrialPhase::Phase1 => "PHASE_1",
            TrialPhase::Phase1_2 => "PHASE_1_2",
            TrialPhase::Phase2 => "PHASE_2",
            TrialPhase::Phase2_3 => "PHASE_2_3",
            TrialPhase::Phase3 => "PHASE_3",
            TrialPhase::Phase4 => "PHASE_4",
            TrialPhase::NotApplicable => "NOT_APPLICABLE",
            TrialPhase::Unknown => "UNKNOWN",
        }
    }

    /// Lenient registry parsing: `Phase 3`, `PHASE3`, `Phase 1/Phase 2`,
    /// `Phase 2/3`, `Early Phase 1`, `N/A`. Anything unrecognised is `Unknown`.
    pub fn parse(raw: &str) -> TrialPhase {
        let key: String = raw
            .chars()
            .filter(|c| c.is_alphanumeric())
            .flat_map(char::to_lowercase)
            .collect();
        match key.as_str() {
            "earlyphase1" | "phase0" => TrialPhase::EarlyPhase1,
            "phase1" => TrialPhase::Phase1,
            "phase1phase2" | "phase12" => TrialPhase::Phase1_2,
            "phase2" => TrialPhase::Phase2,
            "phase2phase3" | "phase23" => TrialPhase::Phase2_3,
            "phase3" => TrialPhase::Phase3,
            "phase4" => TrialPhase::Phase4,
            "na" | "notapplicable" => TrialPhase::NotApplicable,
            _ => TrialPhase::Unknown,
        }
    }

    pub fn is_known(self) -> bool {
        !matches!(self, TrialPhase::NotApplicable | TrialPhase::Unknown)
    }
}

impl fmt::Display for TrialPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrialPhase {
    type Err = std::convert::Infallible;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(TrialPhase::parse(s))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TrialStatus {
    Completed,
    Terminated,
    Withdrawn,
    Suspended,
    Withheld,
    NoLongerAvailable,
    TemporarilyNotAvailable,
    ApprovedForMarketing,
    Recruiting,
    Active,
    Other(String),
}

impl TrialStatus {
    /// Case-insensitive, whitespace and punctuation tolerant. Unrecognised
    /// strings map to `Other`.
    pub fn parse(raw: &str) -> TrialStatus {
        let key = raw
            .to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .collect::<Vec<_>>()
            .join(" ");
        match key.as_str() {
            "completed" => TrialStatus::Completed,
            "terminated" => TrialStatus::Terminated,
            "withdrawn" => TrialStatus::Withdrawn,
            "suspended" => TrialStatus::Suspended,
            "withheld" => TrialStatus::Withheld,
            "no longer available" => TrialStatus::NoLongerAvailable,
            "temporarily not available" => TrialStatus::TemporarilyNotAvailable,
            "approved for marketing" => TrialStatus::ApprovedForMarketing,
            "recruiting" | "not yet recruiting" => TrialStatus::Recruiting,
            "active" | "active not recruiting" | "enrolling by invitation" => TrialStatus::Active,
            _ => TrialStatus::Other(raw.trim().to_string()),
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            TrialStatus::Completed => "COMPLETED",
            TrialStatus::Terminated => "TERMINATED",
            TrialStatus::Withdrawn => "WITHDRAWN",
            TrialStatus::Suspended => "SUSPENDED",
            TrialStatus::Withheld => "WITHHELD",
            TrialStatus::NoLongerAvailable => "NO_LONGER_AVAILABLE",
            TrialStatus::TemporarilyNotAvailable => "TEMPORARILY_NOT_AVAILABLE",
            TrialStatus::ApprovedForMarketing => "APPROVED_FOR_MARKETING",
            TrialStatus::Recruiting => "RECRUITING",
            TrialStatus::Active => "ACTIVE",
            TrialStatus::Other(s) => s,
        }
    }

    pub fn is_ongoing(&self) -> bool {
        matches!(self, TrialStatus::Recruiting | TrialStatus::Active)
    }
}

impl fmt::Display for TrialStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Numeric trial metrics that threshold labeling functions can read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricField {
    NumSponsors,
    NumPatients,
    PatientDrop,
    NumSites,
    UpdateLagDays,
    Deaths,
    SeriousAdverseEvents,
    AllAdverseEvents,
    NumAmendments,
}

impl MetricField {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricField::NumSponsors => "num_sponsors",
            MetricField::NumPatients => "num_patients",
            MetricField::PatientDrop => "patient_drop",
            MetricField::NumSites => "num_sites",
            MetricField::UpdateLagDays => "update_lag_days",
            MetricField::Deaths => "deaths",
            MetricField::SeriousAdverseEvents => "serious_adverse_events",
            MetricField::AllAdverseEvents => "all_adverse_events",
            MetricField::NumAmendments => "num_amendments",
        }
    }
}

/// Registry-derived metrics. `None` always means "not reported", never zero.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrialMetrics {
    pub results_reported: Option<bool>,
    pub num_sponsors: Option<u64>,
    pub num_patients: Option<u64>,
    pub patient_drop: Option<u64>,
    pub num_sites: Option<u64>,
    /// True iff any primary-outcome p-value is below 0.05.
    pub has_significant_pvalue: Option<bool>,
    /// Days between completion and the last registry update.
    pub update_lag_days: Option<i64>,
    pub deaths: Option<u64>,
    pub serious_adverse_events: Option<u64>,
    pub all_adverse_events: Option<u64>,
    pub num_amendments: Option<u64>,
}

impl TrialMetrics {
    pub fn numeric(&self, field: MetricField) -> Option<f64> {
        match field {
            MetricField::NumSponsors => self.num_sponsors.map(|v| v as f64),
            MetricField::NumPatients => self.num_patients.map(|v| v as f64),
            MetricField::PatientDrop => self.patient_drop.map(|v| v as f64),
            MetricField::NumSites => self.num_sites.map(|v| v as f64),
            MetricField::UpdateLagDays => self.update_lag_days.map(|v| v as f64),
            MetricField::Deaths => self.deaths.map(|v| v as f64),
            MetricField::SeriousAdverseEvents => self.serious_adverse_events.map(|v| v as f64),
            MetricField::AllAdverseEvents => self.all_adverse_events.map(|v| v as f64),
            MetricField::NumAmendments => self.num_amendments.map(|v| v as f64),
        }
    }
}

/// Text fields used for trial linkage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialField {
    Intervention,
    Condition,
    Title,
    Summary,
    Eligibility,
}

impl TrialField {
    pub const ALL: [TrialField; 5] = [
        TrialField::Intervention,
        TrialField::Condition,
        TrialField::Title,
        TrialField::Summary,
        TrialField::Eligibility,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrialField::Intervention => "intervention",
            TrialField::Condition => "condition",
            TrialField::Title => "title",
            TrialField::Summary => "summary",
            TrialField::Eligibility => "eligibility",
        }
    }

    pub fn parse(raw: &str) -> Option<TrialField> {
        TrialField::ALL
            .into_iter()
            .find(|f| f.as_str().eq_ignore_ascii_case(raw.trim()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialRecord {
    pub nct_id: String,
    pub phase: TrialPhase,
    pub status: TrialStatus,
    pub start_date: Option<NaiveDate>,
    pub completion_date: Option<NaiveDate>,
    pub last_update_date: Option<NaiveDate>,
    pub intervention_types: BTreeSet<String>,
    pub intervention_names: Vec<String>,
    pub conditions: Vec<String>,
    pub official_title: String,
    pub brief_summary: String,
    pub eligibility_criteria: String,
    pub lead_sponsor: String,
    pub metrics: TrialMetrics,
}

impl TrialRecord {
    /// Minimal record; everything optional is absent.
    pub fn new(nct_id: impl Into<String>, phase: TrialPhase, status: TrialStatus) -> Self {
        TrialRecord {
            nct_id: nct_id.into(),
            phase,
            status,
            start_date: None,
            completion_date: None,
            last_update_date: None,
            intervention_types: BTreeSet::new(),
            intervention_names: Vec::new(),
            conditions: Vec::new(),
            official_title: String::new(),
            brief_summary: String::new(),
            eligibility_criteria: String::new(),
            lead_sponsor: String::new(),
            metrics: TrialMetrics::default(),
        }
    }

    pub fn has_intervention_type(&self, kind: &str) -> bool {
        self.intervention_types.iter().any(|t| t.eq_ignore_ascii_case(kind))
    }

    pub fn shares_intervention_type(&self, other: &TrialRecord) -> bool {
        self.intervention_types.iter().any(|t| other.has_intervention_type(t))
    }

    pub fn field_text(&self, field: TrialField) -> String {
        match field {
            TrialField::Intervention => self.intervention_names.join("; "),
            TrialField::Condition => self.conditions.join("; "),
            TrialField::Title => self.official_title.clone(),
            TrialField::Summary => self.brief_summary.clone(),
            TrialField::Eligibility => self.eligibility_criteria.clone(),
        }
    }
}

/// Separator for list-valued cells.
pub const LIST_SEPARATOR: char = '|';

const MANDATORY: [&str; 3] = ["nct_id", "phase", "status"];

const COLUMNS: [&str; 24] = [
    "nct_id",
    "phase",
    "status",
    "start_date",
    "completion_date",
    "last_update_date",
    "intervention_types",
    "intervention_names",
    "conditions",
    "official_title",
    "brief_summary",
    "eligibility_criteria",
    "lead_sponsor",
    "results_reported",
    "num_sponsors",
    "num_patients",
    "patient_drop",
    "num_sites",
    "has_significant_pvalue",
    "update_lag_days",
    "deaths",
    "serious_adverse_events",
    "all_adverse_events",
    "num_amendments",
];

/// Maps canonical column names to the headers used in a particular export.
/// Columns without an entry are looked up under their canonical name.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrialSchema {
    pub rename: BTreeMap<String, String>,
}

impl TrialSchema {
    pub fn header_for<'a>(&'a self, canonical: &'a str) -> &'a str {
        self.rename.get(canonical).map(String::as_str).unwrap_or(canonical)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParsedTrials {
    pub records: Vec<TrialRecord>,
    pub warnings: Vec<String>,
}

pub fn parse_trials(path: &Path, schema: &TrialSchema, delimiter: u8) -> Result<ParsedTrials, TrialError> {
    let table = Table::read(path, delimiter).map_err(|source| TrialError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    trials_from_table(&table, schema)
}

pub fn parse_trials_from_reader<R: Read>(
    reader: R,
    schema: &TrialSchema,
    delimiter: u8,
) -> Result<ParsedTrials, TrialError> {
    let table = Table::from_reader(reader, delimiter)?;
    trials_from_table(&table, schema)
}

fn trials_from_table(table: &Table, schema: &TrialSchema) -> Result<ParsedTrials, TrialError> {
    for col in MANDATORY {
        if table.column(schema.header_for(col)).is_none() {
            return Err(TrialError::MissingColumn(schema.header_for(col).to_string()));
        }
    }
    let idx: BTreeMap<&str, Option<usize>> = COLUMNS
        .iter()
        .map(|c| (*c, table.column(schema.header_for(c))))
        .collect();

    let mut out = ParsedTrials::default();
    for (i, row) in table.rows.iter().enumerate() {
        let row_no = i + 2;
        let get = |name: &str| cell(row, idx[name]);
        let warnings = &mut out.warnings;
        let nct_id = get("nct_id").ok_or(TrialError::EmptyId { row: row_no })?;
        let mut warn = |field: &str, value: &str| {
            warnings.push(format!("row {row_no} ({nct_id}): unparseable {field} `{value}`"));
        };

        let mut date = |name: &str| {
            let raw = get(name)?;
            let parsed = csvutil::parse_date(raw);
            if parsed.is_none() {
                warn(name, raw);
            }
            parsed
        };
        let start_date = date("start_date");
        let mut completion_date = date("completion_date");
        let last_update_date = date("last_update_date");
        if let (Some(s), Some(c)) = (start_date, completion_date) {
            if s > c {
                out.warnings.push(format!(
                    "row {row_no} ({nct_id}): completion_date {c} precedes start_date {s}; dropped"
                ));
                completion_date = None;
            }
        }

        let mut warnings = Vec::new();
        let mut count = |name: &str| -> Option<u64> {
            let raw = get(name)?;
            match raw.parse::<u64>() {
                Ok(v) => Some(v),
                Err(_) => match raw.parse::<f64>() {
                    Ok(v) if v >= 0.0 && v.fract() == 0.0 && v.is_finite() => Some(v as u64),
                    _ => {
                        warnings.push(format!("row {row_no} ({nct_id}): unparseable {name} `{raw}`"));
                        None
                    }
                },
            }
        };
        let num_sponsors = count("num_sponsors");
        let num_patients = count("num_patients");
        let patient_drop = count("patient_drop");
        let num_sites = count("num_sites");
        let deaths = count("deaths");
        let serious_adverse_events = count("serious_adverse_events");
        let all_adverse_events = count("all_adverse_events");
        let num_amendments = count("num_amendments");
        let mut flag = |name: &str| -> Option<bool> {
            let raw = get(name)?;
            let v = csvutil::parse_bool(raw);
            if v.is_none() {
                warnings.push(format!("row {row_no} ({nct_id}): unparseable {name} `{raw}`"));
            }
            v
        };
        let results_reported = flag("results_reported");
        let has_significant_pvalue = flag("has_significant_pvalue");
        let update_lag_days = get("update_lag_days").and_then(|raw| match raw.parse::<i64>() {
            Ok(v) => Some(v),
            Err(_) => {
                warnings.push(format!("row {row_no} ({nct_id}): unparseable update_lag_days `{raw}`"));
                None
            }
        });
        out.warnings.extend(warnings);

        let list = |name: &str| -> Vec<String> {
            get(name)
                .map(|raw| {
                    raw.split(LIST_SEPARATOR)
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(String::from)
                        .collect()
                })
                .unwrap_or_default()
        };
        let text = |name: &str| get(name).unwrap_or("").to_string();

        out.records.push(TrialRecord {
            nct_id: nct_id.to_string(),
            phase: TrialPhase::parse(get("phase").unwrap_or("")),
            status: TrialStatus::parse(get("status").unwrap_or("")),
            start_date,
            completion_date,
            last_update_date,
            intervention_types: list("intervention_types").into_iter().collect(),
            intervention_names: list("intervention_names"),
            conditions: list("conditions"),
            official_title: text("official_title"),
            brief_summary: text("brief_summary"),
            eligibility_criteria: text("eligibility_criteria"),
            lead_sponsor: text("lead_sponsor"),
            metrics: TrialMetrics {
                results_reported,
                num_sponsors,
                num_patients,
                patient_drop,
                num_sites,
                has_significant_pvalue,
                update_lag_days,
                deaths,
                serious_adverse_events,
                all_adverse_events,
                num_amendments,
            },
        });
    }

    let mut seen = HashSet::new();
    let mut dups = BTreeSet::new();
    for r in &out.records {
        if !seen.insert(r.nct_id.as_str()) {
            dups.insert(r.nct_id.clone());
        }
    }
    if !dups.is_empty() {
        return Err(TrialError::DuplicateIds(dups.into_iter().collect()));
    }
    for w in &out.warnings {
        log::warn!("{w}");
    }
    Ok(out)
}

/// Writes records in the canonical column layout accepted by [`parse_trials`].
pub fn write_trials<W: Write>(records: &[TrialRecord], writer: W) -> Result<(), TrialError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(COLUMNS)?;
    fn opt<T: ToString>(v: &Option<T>) -> String {
        v.as_ref().map(ToString::to_string).unwrap_or_default()
    }
    let join = |items: &mut dyn Iterator<Item = &String>| {
        items
            .map(String::as_str)
            .collect::<Vec<_>>()
            .join(&LIST_SEPARATOR.to_string())
    };
    for r in records {
        let m = &r.metrics;
        w.write_record([
            r.nct_id.clone(),
            r.phase.as_str().to_string(),
            r.status.as_str().to_string(),
            opt(&r.start_date),
            opt(&r.completion_date),
            opt(&r.last_update_date),
            join(&mut r.intervention_types.iter()),
            join(&mut r.intervention_names.iter()),
            join(&mut r.conditions.iter()),
            r.official_title.clone(),
            r.brief_summary.clone(),
            r.eligibility_criteria.clone(),
            r.lead_sponsor.clone(),
            opt(&m.results_reported),
            opt(&m.num_sponsors),
            opt(&m.num_patients),
            opt(&m.patient_drop),
            opt(&m.num_sites),
            opt(&m.has_significant_pvalue),
            opt(&m.update_lag_days),
            opt(&m.deaths),
            opt(&m.serious_adverse_events),
            opt(&m.all_adverse_events),
            opt(&m.num_amendments),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Stages of the selection cascade. Each one can be switched off; the
/// completion cutoff is only applied when a date is given.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionCriteria {
    pub require_intervention_type: bool,
    pub intervention_types: Vec<String>,
    pub exclude_ongoing: bool,
    pub require_known_phase: bool,
    pub completion_cutoff: Option<NaiveDate>,
}

impl Default for SelectionCriteria {
    fn default() -> Self {
        SelectionCriteria {
            require_intervention_type: true,
            intervention_types: vec!["Drug".into(), "Biological".into()],
            exclude_ongoing: true,
            require_known_phase: true,
            completion_cutoff: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionReport {
    /// `(stage_name, surviving_count)`, starting with the `input` count.
    pub stages: Vec<(String, usize)>,
}

impl SelectionReport {
    /// One `stage_name,count` line per stage.
    pub fn to_csv_lines(&self) -> String {
        self.stages.iter().map(|(name, n)| format!("{name},{n}\n")).collect()
    }
}

pub fn select_trials(trials: &[TrialRecord], criteria: &SelectionCriteria) -> (Vec<TrialRecord>, SelectionReport) {
    let mut current: Vec<&TrialRecord> = trials.iter().collect();
    let mut stages = vec![("input".to_string(), current.len())];

    let mut stage = |name: &str, keep: &dyn Fn(&TrialRecord) -> bool| {
        current.retain(|t| keep(t));
        stages.push((name.to_string(), current.len()));
    };
    if criteria.require_intervention_type {
        stage("intervention_type", &|t| {
            criteria.intervention_types.iter().any(|k| t.has_intervention_type(k))
        });
    }
    if criteria.exclude_ongoing {
        stage("completed_or_stopped", &|t| !t.status.is_ongoing());
    }
    if criteria.require_known_phase {
        stage("known_phase", &|t| t.phase.is_known());
    }
    if let Some(cutoff) = criteria.completion_cutoff {
        stage("completion_cutoff", &|t| t.completion_date.is_some_and(|d| d >= cutoff));
    }
    let selected = current.into_iter().cloned().collect();
    (selected, SelectionReport { stages })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldEntry {
    pub label: WeakLabel,
    pub provenance: String,
}

/// Human-verified binary outcomes keyed by trial id. Never holds `Abstain`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GoldLabelSet {
    entries: BTreeMap<String, GoldEntry>,
}

impl GoldLabelSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics if `label` is `Abstain`.
    pub fn insert(&mut self, nct_id: impl Into<String>, label: WeakLabel, provenance: impl Into<String>) {
        assert!(label.is_vote(), "gold labels never abstain");
        self.entries.insert(
            nct_id.into(),
            GoldEntry {
                label,
                provenance: provenance.into(),
            },
        );
    }

    pub fn get(&self, nct_id: &str) -> Option<WeakLabel> {
        self.entries.get(nct_id).map(|e| e.label)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &GoldEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Subset with a given provenance tag; `None` keeps everything.
    pub fn with_provenance(&self, tag: Option<&str>) -> GoldLabelSet {
        GoldLabelSet {
            entries: self
                .entries
                .iter()
                .filter(|(_, e)| tag.is_none_or(|t| e.provenance == t))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Ids that do not occur in `trials`.
    pub fn unknown_ids(&self, trials: &[TrialRecord]) -> Vec<String> {
        let ids: HashSet<&str> = trials.iter().map(|t| t.nct_id.as_str()).collect();
        self.entries
            .keys()
            .filter(|k| !ids.contains(k.as_str()))
            .cloned()
            .collect()
    }

    /// `nct_id,label,provenance` where label is `1`/`0` or `success`/`failure`.
    /// The provenance column is optional and defaults to `gold`.
    pub fn load(path: &Path) -> Result<GoldLabelSet, TrialError> {
        let table = Table::read(path, b',').map_err(|source| TrialError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let id = table
            .column("nct_id")
            .ok_or_else(|| TrialError::MissingColumn("nct_id".into()))?;
        let lab = table
            .column("label")
            .ok_or_else(|| TrialError::MissingColumn("label".into()))?;
        let prov = table.column("provenance");
        let mut gold = GoldLabelSet::new();
        for (i, row) in table.rows.iter().enumerate() {
            let nct = cell(row, Some(id)).ok_or(TrialError::EmptyId { row: i + 2 })?;
            let raw = cell(row, Some(lab)).unwrap_or("");
            let label = match raw.to_ascii_lowercase().as_str() {
                "1" | "success" => WeakLabel::Success,
                "0" | "failure" => WeakLabel::Failure,
                _ => {
                    return Err(TrialError::InvalidGold {
                        row: i + 2,
                        value: raw.to_string(),
                    })
                }
            };
            gold.insert(nct, label, cell(row, prov).unwrap_or("gold"));
        }
        Ok(gold)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ParsedTrials, TrialError> {
        parse_trials_from_reader(text.as_bytes(), &TrialSchema::default(), b',')
    }

    #[test]
    fn status_and_phase_map_directly() {
        let p = parse("nct_id,phase,status\nNCT1,Phase 3,Terminated\n").unwrap();
        assert_eq!(p.records[0].status, TrialStatus::Terminated);
        assert_eq!(p.records[0].phase, TrialPhase::Phase3);
    }

    #[test]
    fn empty_completion_date_is_absent() {
        let p = parse("nct_id,phase,status,completion_date\nNCT1,Phase 2,Completed,\n").unwrap();
        assert_eq!(p.records.len(), 1);
        assert_eq!(p.records[0].completion_date, None);
        assert!(p.warnings.is_empty());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err =
            parse("nct_id,phase,status\nNCT00000001,Phase 1,Completed\nNCT00000001,Phase 2,Completed\n").unwrap_err();
        match err {
            TrialError::DuplicateIds(ids) => assert_eq!(ids, vec!["NCT00000001".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_mandatory_column_is_named() {
        let err = parse("nct_id,phase\nNCT1,Phase 1\n").unwrap_err();
        assert!(matches!(err, TrialError::MissingColumn(c) if c == "status"));
    }

    #[test]
    fn schema_remaps_headers() {
        let mut schema = TrialSchema::default();
        schema.rename.insert("nct_id".into(), "NCT Number".into());
        schema.rename.insert("status".into(), "overall_status".into());
        let p = parse_trials_from_reader(
            "NCT Number;phase;overall_status\nNCT9;PHASE2;COMPLETED\n".as_bytes(),
            &schema,
            b';',
        )
        .unwrap();
        assert_eq!(p.records[0].nct_id, "NCT9");
        assert_eq!(p.records[0].status, TrialStatus::Completed);
    }

    #[test]
    fn bad_date_warns_and_is_absent() {
        let p = parse("nct_id,phase,status,start_date\nNCT1,Phase 1,Completed,someday\n").unwrap();
        assert_eq!(p.records[0].start_date, None);
        assert_eq!(p.warnings.len(), 1);
        assert!(p.warnings[0].contains("start_date"));
    }

    #[test]
    fn registry_month_year_resolves_to_first() {
        let p = parse("nct_id,phase,status,start_date\nNCT1,Phase 1,Completed,March 2011\n").unwrap();
        assert_eq!(p.records[0].start_date, NaiveDate::from_ymd_opt(2011, 3, 1));
    }

    #[test]
    fn malformed_counts_are_absent_not_zero() {
        let p = parse("nct_id,phase,status,deaths,num_patients\nNCT1,Phase 1,Completed,-3,\n").unwrap();
        assert_eq!(p.records[0].metrics.deaths, None);
        assert_eq!(p.records[0].metrics.num_patients, None);
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn phase_strings() {
        assert_eq!(TrialPhase::parse("Phase 1/Phase 2"), TrialPhase::Phase1_2);
        assert_eq!(TrialPhase::parse("PHASE2/PHASE3"), TrialPhase::Phase2_3);
        assert_eq!(TrialPhase::parse("Early Phase 1"), TrialPhase::EarlyPhase1);
        assert_eq!(TrialPhase::parse("N/A"), TrialPhase::NotApplicable);
        assert_eq!(TrialPhase::parse("Phase 5"), TrialPhase::Unknown);
        for p in TrialPhase::ALL {
            assert_eq!(TrialPhase::parse(p.as_str()), p);
        }
    }

    #[test]
    fn status_strings() {
        assert_eq!(TrialStatus::parse("  TERMINATED "), TrialStatus::Terminated);
        assert_eq!(
            TrialStatus::parse("No longer available"),
            TrialStatus::NoLongerAvailable
        );
        assert_eq!(TrialStatus::parse("Active, not recruiting"), TrialStatus::Active);
        assert_eq!(
            TrialStatus::parse("Unknown status"),
            TrialStatus::Other("Unknown status".into())
        );
        assert_eq!(
            TrialStatus::parse("approved_for_marketing"),
            TrialStatus::ApprovedForMarketing
        );
    }

    fn trial(id: &str, phase: TrialPhase, status: TrialStatus, kinds: &[&str]) -> TrialRecord {
        let mut t = TrialRecord::new(id, phase, status);
        t.intervention_types = kinds.iter().map(|s| s.to_string()).collect();
        t
    }

    #[test]
    fn selection_cascade() {
        let trials = vec![
            trial("A", TrialPhase::Phase2, TrialStatus::Completed, &["Drug"]),
            trial("B", TrialPhase::Phase2, TrialStatus::Completed, &["Device"]),
            trial("C", TrialPhase::NotApplicable, TrialStatus::Completed, &["drug"]),
            trial("D", TrialPhase::Phase3, TrialStatus::Recruiting, &["Biological"]),
            trial(
                "E",
                TrialPhase::Phase1,
                TrialStatus::Terminated,
                &["Biological", "Device"],
            ),
        ];
        let (kept, report) = select_trials(&trials, &SelectionCriteria::default());
        let ids: Vec<_> = kept.iter().map(|t| t.nct_id.as_str()).collect();
        assert_eq!(ids, ["A", "E"]);
        assert_eq!(
            report.to_csv_lines(),
            "input,5\nintervention_type,4\ncompleted_or_stopped,3\nknown_phase,2\n"
        );
    }

    #[test]
    fn completion_cutoff_stage() {
        let mut a = trial("A", TrialPhase::Phase2, TrialStatus::Completed, &["Drug"]);
        a.completion_date = NaiveDate::from_ymd_opt(2021, 5, 1);
        let b = trial("B", TrialPhase::Phase2, TrialStatus::Completed, &["Drug"]);
        let criteria = SelectionCriteria {
            completion_cutoff: NaiveDate::from_ymd_opt(2020, 1, 1),
            ..Default::default()
        };
        let (kept, report) = select_trials(&[a, b], &criteria);
        assert_eq!(kept.len(), 1);
        assert_eq!(report.stages.last().unwrap(), &("completion_cutoff".to_string(), 1));
    }
}
