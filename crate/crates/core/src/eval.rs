//! Agreement metrics against gold labels, LF agreement matrices and report
//! emission.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::csvutil::fmt_f64;
use crate::label_model::PosteriorLabel;
use crate::lf::LabelMatrix;
use crate::trial::{GoldLabelSet, TrialPhase, WeakLabel};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no overlap between predictions and gold labels")]
    NoOverlap,
    #[error("{path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
}

/// Success is the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    /// Counts one (prediction, gold) pair. Abstaining predictions and gold are
    /// ignored.
    pub fn record(&mut self, pred: WeakLabel, gold: WeakLabel) {
        match (pred, gold) {
            (WeakLabel::Success, WeakLabel::Success) => self.tp += 1,
            (WeakLabel::Success, WeakLabel::Failure) => self.fp += 1,
            (WeakLabel::Failure, WeakLabel::Success) => self.fn_ += 1,
            (WeakLabel::Failure, WeakLabel::Failure) => self.tn += 1,
            _ => {}
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// F1 of the success class; 0 when there are no true positives.
    pub fn f1(&self) -> f64 {
        f1_from(self.tp, self.fp, self.fn_)
    }

    /// F1 of the failure class.
    pub fn f1_failure(&self) -> f64 {
        f1_from(self.tn, self.fn_, self.fp)
    }

    /// Per-class F1 averaged with weights equal to gold class support.
    pub fn weighted_f1(&self) -> f64 {
        let pos = (self.tp + self.fn_) as f64;
        let neg = (self.tn + self.fp) as f64;
        if pos + neg == 0.0 {
            return 0.0;
        }
        (pos * self.f1() + neg * self.f1_failure()) / (pos + neg)
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    /// Cohen's kappa with marginal-product chance agreement. When chance
    /// agreement is 1 the result is 1 for perfect agreement and 0 otherwise.
    pub fn kappa(&self) -> f64 {
        let n = self.total() as f64;
        if n == 0.0 {
            return 0.0;
        }
        let p_o = (self.tp + self.tn) as f64 / n;
        let pred_pos = (self.tp + self.fp) as f64;
        let gold_pos = (self.tp + self.fn_) as f64;
        let pred_neg = (self.fn_ + self.tn) as f64;
        let gold_neg = (self.fp + self.tn) as f64;
        let p_e = (pred_pos * gold_pos + pred_neg * gold_neg) / (n * n);
        if p_e >= 1.0 {
            return if p_o == 1.0 { 1.0 } else { 0.0 };
        }
        (p_o - p_e) / (1.0 - p_e)
    }
}

fn f1_from(tp: u64, fp: u64, fn_: u64) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let tp = tp as f64;
    2.0 * tp / (2.0 * tp + fp as f64 + fn_ as f64)
}

pub fn confusion(pred: &BTreeMap<String, WeakLabel>, gold: &GoldLabelSet) -> Result<ConfusionMatrix, EvalError> {
    let mut cm = ConfusionMatrix::default();
    for (id, entry) in gold.iter() {
        if let Some(&p) = pred.get(id) {
            cm.record(p, entry.label);
        }
    }
    if cm.total() == 0 {
        return Err(EvalError::NoOverlap);
    }
    Ok(cm)
}

pub fn f1_score(pred: &BTreeMap<String, WeakLabel>, gold: &GoldLabelSet, weighted: bool) -> Result<f64, EvalError> {
    let cm = confusion(pred, gold)?;
    Ok(if weighted { cm.weighted_f1() } else { cm.f1() })
}

pub fn cohens_kappa(pred: &BTreeMap<String, WeakLabel>, gold: &GoldLabelSet) -> Result<f64, EvalError> {
    Ok(confusion(pred, gold)?.kappa())
}

/// Ranking metrics; `None` where the gold labels make a metric undefined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankMetrics {
    pub pr_auc: Option<f64>,
    pub roc_auc: Option<f64>,
}

/// ROC-AUC by the Mann–Whitney statistic with midranks for ties; PR-AUC as
/// step-wise average precision over distinct score thresholds.
pub fn rank_auc(scores: &BTreeMap<String, f64>, gold: &GoldLabelSet) -> Result<RankMetrics, EvalError> {
    let pairs: Vec<(f64, bool)> = gold
        .iter()
        .filter_map(|(id, e)| scores.get(id).map(|&s| (s, e.label == WeakLabel::Success)))
        .collect();
    if pairs.is_empty() {
        return Err(EvalError::NoOverlap);
    }
    Ok(rank_metrics(&pairs))
}

pub fn rank_metrics(pairs: &[(f64, bool)]) -> RankMetrics {
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n_pos = sorted.iter().filter(|p| p.1).count();
    let n_neg = sorted.len() - n_pos;

    let roc_auc = (n_pos > 0 && n_neg > 0).then(|| {
        // Sum of midranks (1-based) of the positives.
        let mut rank_sum = 0.0;
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i;
            while j + 1 < sorted.len() && sorted[j + 1].0 == sorted[i].0 {
                j += 1;
            }
            let midrank = (i + j + 2) as f64 / 2.0;
            let pos_in_block = sorted[i..=j].iter().filter(|p| p.1).count();
            rank_sum += midrank * pos_in_block as f64;
            i = j + 1;
        }
        let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
        u / (n_pos as f64 * n_neg as f64)
    });

    let pr_auc = (n_pos > 0).then(|| {
        let mut ap = 0.0;
        let (mut tp, mut fp, mut prev_tp) = (0u64, 0u64, 0u64);
        let mut k = sorted.len();
        while k > 0 {
            let t = sorted[k - 1].0;
            while k > 0 && sorted[k - 1].0 == t {
                if sorted[k - 1].1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
                k -= 1;
            }
            ap += ap_term(tp, fp, prev_tp, n_pos as u64);
            prev_tp = tp;
        }
        ap
    });

    RankMetrics { pr_auc, roc_auc }
}

/// `(R_k - R_{k-1}) * P_k` for one threshold of the precision/recall sweep.
pub fn ap_term(tp: u64, fp: u64, prev_tp: u64, n_pos: u64) -> f64 {
    let delta_recall = (tp - prev_tp) as f64 / n_pos as f64;
    let precision = tp as f64 / (tp + fp) as f64;
    delta_recall * precision
}

/// Pairwise LF agreement over the intersection of their coverage.
#[derive(Debug, Clone, PartialEq)]
pub struct AgreementMatrix {
    pub lf_names: Vec<String>,
    /// `None` when the two LFs never vote on the same trial.
    pub agreement: Vec<Vec<Option<f64>>>,
    pub common_counts: Vec<Vec<u64>>,
}

impl AgreementMatrix {
    /// `lf_i,lf_j,agreement,common_count`; absent agreement is `NA`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lf_i,lf_j,agreement,common_count\n");
        for (i, a) in self.lf_names.iter().enumerate() {
            for (j, b) in self.lf_names.iter().enumerate() {
                let v = self.agreement[i][j].map_or_else(|| "NA".to_string(), fmt_f64);
                let _ = writeln!(s, "{a},{b},{v},{}", self.common_counts[i][j]);
            }
        }
        s
    }
}

pub fn lf_agreement_matrix(matrix: &LabelMatrix) -> AgreementMatrix {
    let m = matrix.n_cols();
    let mut agree = vec![vec![0u64; m]; m];
    let mut common = vec![vec![0u64; m]; m];
    for r in 0..matrix.n_rows() {
        let row = matrix.row(r);
        for i in 0..m {
            if !row[i].is_vote() {
                continue;
            }
            for j in i..m {
                if row[j].is_vote() {
                    common[i][j] += 1;
                    if row[i] == row[j] {
                        agree[i][j] += 1;
                    }
                }
            }
        }
    }
    let mut agreement = vec![vec![None; m]; m];
    for i in 0..m {
        for j in i..m {
            common[j][i] = common[i][j];
            let v = (common[i][j] > 0).then(|| agree[i][j] as f64 / common[i][j] as f64);
            agreement[i][j] = v;
            agreement[j][i] = v;
        }
    }
    AgreementMatrix {
        lf_names: matrix.lf_names.clone(),
        agreement,
        common_counts: common,
    }
}

/// Phase rows of the evaluation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PhaseGroup {
    I,
    II,
    III,
    IV,
    All,
}

impl PhaseGroup {
    /// Combined phases are grouped with the later of their two phases; early
    /// phase 1 counts as phase I.
    pub fn of(phase: TrialPhase) -> Option<PhaseGroup> {
        match phase {
            TrialPhase::EarlyPhase1 | TrialPhase::Phase1 => Some(PhaseGroup::I),
            TrialPhase::Phase1_2 | TrialPhase::Phase2 => Some(PhaseGroup::II),
            TrialPhase::Phase2_3 | TrialPhase::Phase3 => Some(PhaseGroup::III),
            TrialPhase::Phase4 => Some(PhaseGroup::IV),
            TrialPhase::NotApplicable | TrialPhase::Unknown => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PhaseGroup::I => "I",
            PhaseGroup::II => "II",
            PhaseGroup::III => "III",
            PhaseGroup::IV => "IV",
            PhaseGroup::All => "All",
        }
    }

    /// Accepts `1`, `2`, `3`, `4`, `I`..`IV` and `all`.
    pub fn parse(raw: &str) -> Option<PhaseGroup> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "1" | "i" => Some(PhaseGroup::I),
            "2" | "ii" => Some(PhaseGroup::II),
            "3" | "iii" => Some(PhaseGroup::III),
            "4" | "iv" => Some(PhaseGroup::IV),
            "all" => Some(PhaseGroup::All),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllAggregation {
    /// Pool all trials into one confusion matrix.
    #[default]
    Pooled,
    /// Unweighted mean of the per-phase metrics.
    Averaged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupMetrics {
    pub group: PhaseGroup,
    pub n: u64,
    pub f1: f64,
    pub weighted_f1: f64,
    pub kappa: f64,
    pub accuracy: f64,
    pub pr_auc: Option<f64>,
    pub roc_auc: Option<f64>,
    /// Fraction of this group's gold trials that received a prediction.
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub groups: Vec<GroupMetrics>,
    pub lf_coverage: Vec<(String, f64)>,
    pub undecided_resolved: usize,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default)]
pub struct ReportOptions {
    pub aggregation: AllAggregation,
    /// Restrict to one group; `None` or `Some(All)` evaluates everything.
    pub phase_filter: Option<PhaseGroup>,
}

fn group_metrics(group: PhaseGroup, pairs: &[(&PosteriorLabel, WeakLabel)], gold_total: usize) -> GroupMetrics {
    let mut cm = ConfusionMatrix::default();
    for (p, g) in pairs {
        cm.record(p.hard_label, *g);
    }
    let scored: Vec<(f64, bool)> = pairs
        .iter()
        .map(|(p, g)| (p.p_success, *g == WeakLabel::Success))
        .collect();
    let rank = rank_metrics(&scored);
    GroupMetrics {
        group,
        n: cm.total(),
        f1: cm.f1(),
        weighted_f1: cm.weighted_f1(),
        kappa: cm.kappa(),
        accuracy: cm.accuracy(),
        pr_auc: rank.pr_auc,
        roc_auc: rank.roc_auc,
        coverage: if gold_total == 0 {
            0.0
        } else {
            pairs.len() as f64 / gold_total as f64
        },
    }
}

/// Scores predictions against gold per phase group and for all phases.
pub fn build_report(
    predictions: &[PosteriorLabel],
    phases: &HashMap<String, TrialPhase>,
    gold: &GoldLabelSet,
    matrix: Option<&LabelMatrix>,
    options: &ReportOptions,
) -> Result<MetricsReport, EvalError> {
    let by_id: HashMap<&str, &PosteriorLabel> = predictions.iter().map(|p| (p.nct_id.as_str(), p)).collect();
    let wanted = |g: Option<PhaseGroup>| match options.phase_filter {
        None | Some(PhaseGroup::All) => true,
        Some(f) => g == Some(f),
    };

    let mut per_group: BTreeMap<PhaseGroup, Vec<(&PosteriorLabel, WeakLabel)>> = BTreeMap::new();
    let mut gold_per_group: BTreeMap<PhaseGroup, usize> = BTreeMap::new();
    let mut pooled = Vec::new();
    let mut pooled_gold = 0usize;
    let mut undecided = 0usize;
    for (id, entry) in gold.iter() {
        let group = phases.get(id).and_then(|p| PhaseGroup::of(*p));
        if !wanted(group) {
            continue;
        }
        pooled_gold += 1;
        if let Some(g) = group {
            *gold_per_group.entry(g).or_default() += 1;
        }
        let Some(p) = by_id.get(id) else { continue };
        if !p.hard_label.is_vote() {
            continue;
        }
        if p.undecided {
            undecided += 1;
        }
        pooled.push((*p, entry.label));
        if let Some(g) = group {
            per_group.entry(g).or_default().push((*p, entry.label));
        }
    }
    if pooled.is_empty() {
        return Err(EvalError::NoOverlap);
    }

    let mut groups: Vec<GroupMetrics> = per_group
        .iter()
        .map(|(g, pairs)| group_metrics(*g, pairs, gold_per_group[g]))
        .collect();
    let all = match options.aggregation {
        AllAggregation::Pooled => group_metrics(PhaseGroup::All, &pooled, pooled_gold),
        AllAggregation::Averaged if !groups.is_empty() => {
            let k = groups.len() as f64;
            let mean = |f: &dyn Fn(&GroupMetrics) -> f64| groups.iter().map(f).sum::<f64>() / k;
            let mean_opt = |f: &dyn Fn(&GroupMetrics) -> Option<f64>| {
                let vals: Vec<f64> = groups.iter().filter_map(f).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            };
            GroupMetrics {
                group: PhaseGroup::All,
                n: groups.iter().map(|g| g.n).sum(),
                f1: mean(&|g| g.f1),
                weighted_f1: mean(&|g| g.weighted_f1),
                kappa: mean(&|g| g.kappa),
                accuracy: mean(&|g| g.accuracy),
                pr_auc: mean_opt(&|g| g.pr_auc),
                roc_auc: mean_opt(&|g| g.roc_auc),
                coverage: mean(&|g| g.coverage),
            }
        }
        AllAggregation::Averaged => group_metrics(PhaseGroup::All, &pooled, pooled_gold),
    };
    groups.push(all);

    let lf_coverage = matrix
        .map(|m| m.lf_names.iter().cloned().zip(m.coverage()).collect())
        .unwrap_or_default();
    Ok(MetricsReport {
        groups,
        lf_coverage,
        undecided_resolved: undecided,
        metadata: BTreeMap::new(),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), fmt_f64)
}

impl MetricsReport {
    /// `phase,metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("phase,metric,value\n");
        for g in &self.groups {
            let p = g.group.as_str();
            let _ = writeln!(s, "{p},n,{}", g.n);
            let _ = writeln!(s, "{p},f1,{}", fmt_f64(g.f1));
            let _ = writeln!(s, "{p},weighted_f1,{}", fmt_f64(g.weighted_f1));
            let _ = writeln!(s, "{p},kappa,{}", fmt_f64(g.kappa));
            let _ = writeln!(s, "{p},accuracy,{}", fmt_f64(g.accuracy));
            let _ = writeln!(s, "{p},pr_auc,{}", opt(g.pr_auc));
            let _ = writeln!(s, "{p},roc_auc,{}", opt(g.roc_auc));
            let _ = writeln!(s, "{p},coverage,{}", fmt_f64(g.coverage));
        }
        let _ = writeln!(s, "All,undecided_resolved,{}", self.undecided_resolved);
        for (lf, c) in &self.lf_coverage {
            let _ = writeln!(s, "All,coverage.{lf},{}", fmt_f64(*c));
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Agreement with gold labels");
        for (k, v) in &self.metadata {
            let _ = writeln!(s, "  {k}: {v}");
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<6}{:>7}{:>8}{:>8}{:>8}{:>8}{:>8}",
            "phase", "n", "F1", "wF1", "kappa", "PR-AUC", "ROC-AUC"
        );
        let cell = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.3}"));
        for g in &self.groups {
            let _ = writeln!(
                s,
                "{:<6}{:>7}{:>8.3}{:>8.3}{:>8.3}{:>8}{:>8}",
                g.group.as_str(),
                g.n,
                g.f1,
                g.weighted_f1,
                g.kappa,
                cell(g.pr_auc),
                cell(g.roc_auc)
            );
        }
        let _ = writeln!(
            s,
            "\nundecided majority-vote rows resolved to default: {}",
            self.undecided_resolved
        );
        if !self.lf_coverage.is_empty() {
            let _ = writeln!(s, "\nLF coverage:");
            for (lf, c) in &self.lf_coverage {
                let _ = writeln!(s, "  {lf:<22}{c:.3}");
            }
        }
        s
    }
}

/// Writes `report.csv`, `summary.txt` and, when given, `agreement.csv` into `dir`.
pub fn emit_report(
    report: &MetricsReport,
    agreement: Option<&AgreementMatrix>,
    dir: &Path,
) -> Result<Vec<PathBuf>, EvalError> {
    let write = |name: &str, contents: String| -> Result<PathBuf, EvalError> {
        let path = dir.join(name);
        fs::write(&path, contents).map_err(|source| EvalError::Write {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    };
    let mut written = vec![
        write("report.csv", report.to_csv())?,
        write("summary.txt", report.summary())?,
    ];
    if let Some(a) = agreement {
        written.push(write("agreement.csv", a.to_csv())?);
    }
    Ok(written)
}
