//! Cross-phase trial linkage and FDA approval matching.
//!
//! For every trial in a phase that has predecessors in the
//! [`PhaseConnectionMap`], candidates are restricted to directly linked
//! earlier phases that finished before the trial started and share an
//! intervention type. The top-K candidates by summed per-field cosine
//! similarity are re-ranked with a pairwise scorer, and the best positive
//! candidate per earlier phase becomes a link. Phase 3 trials can also be
//! matched to drug approvals. Links and approvals are then turned into weak
//! labels.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::{Months, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::csvutil::{cell, fmt_f64, Table};
use crate::signals::OrangeBookEntry;
use crate::text::{dice, fnv1a, tokens};
use crate::trial::{TrialField, TrialPhase, TrialRecord, WeakLabel};

#[derive(Debug, Error)]
pub enum LinkageError {
    #[error("phase map edge {from} -> {to} does not point to an earlier phase")]
    BadEdge { from: TrialPhase, to: TrialPhase },
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: csv::Error },
    #[error("{path}: {msg}")]
    Vectors { path: PathBuf, msg: String },
}

/// Ordering used to check that edges point backwards.
fn phase_rank(p: TrialPhase) -> Option<u8> {
    match p {
        TrialPhase::EarlyPhase1 => Some(0),
        TrialPhase::Phase1 => Some(1),
        TrialPhase::Phase1_2 => Some(2),
        TrialPhase::Phase2 => Some(3),
        TrialPhase::Phase2_3 => Some(4),
        TrialPhase::Phase3 => Some(5),
        TrialPhase::Phase4 => Some(6),
        TrialPhase::NotApplicable | TrialPhase::Unknown => None,
    }
}

/// Later phase → directly linked earlier phases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhaseConnectionMap {
    pub edges: BTreeMap<TrialPhase, Vec<TrialPhase>>,
}

impl Default for PhaseConnectionMap {
    fn default() -> Self {
        use TrialPhase::*;
        let edges = BTreeMap::from([
            (Phase4, vec![Phase3, Phase2_3]),
            (Phase3, vec![Phase2, Phase1_2]),
            (Phase2_3, vec![Phase2, Phase1_2]),
            (Phase2, vec![Phase1, Phase1_2, EarlyPhase1]),
        ]);
        PhaseConnectionMap { edges }
    }
}

impl PhaseConnectionMap {
    /// Every edge must go from a later to a strictly earlier known phase,
    /// which also rules out cycles.
    pub fn validate(&self) -> Result<(), LinkageError> {
        for (&from, tos) in &self.edges {
            for &to in tos {
                match (phase_rank(from), phase_rank(to)) {
                    (Some(a), Some(b)) if b < a => {}
                    _ => return Err(LinkageError::BadEdge { from, to }),
                }
            }
        }
        Ok(())
    }

    pub fn predecessors(&self, phase: TrialPhase) -> &[TrialPhase] {
        self.edges.get(&phase).map_or(&[], Vec::as_slice)
    }

    /// Phases that some later phase links back to.
    pub fn linkable_targets(&self) -> BTreeSet<TrialPhase> {
        self.edges.values().flatten().copied().collect()
    }
}

/// Maps text to a fixed-dimension vector. Implementations must be
/// deterministic.
pub trait EmbeddingProvider: Sync {
    fn dimension(&self) -> usize;

    fn embed(&self, text: &str) -> Vec<f64>;

    fn embed_field(&self, trial: &TrialRecord, field: TrialField) -> Vec<f64> {
        self.embed(&trial.field_text(field))
    }
}

/// Signed feature hashing of token counts, L2-normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedBagEmbedder {
    pub dimension: usize,
}

impl Default for HashedBagEmbedder {
    fn default() -> Self {
        HashedBagEmbedder { dimension: 256 }
    }
}

impl EmbeddingProvider for HashedBagEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension];
        for tok in tokens(text) {
            let h = fnv1a(tok.as_bytes());
            let idx = (h % self.dimension as u64) as usize;
            v[idx] += if h >> 63 == 1 { -1.0 } else { 1.0 };
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

/// Per-trial field vectors computed elsewhere.
///
/// File layout: `nct_id,field,v0,v1,...,v{d-1}` with `field` one of
/// `intervention`, `condition`, `title`, `summary`, `eligibility`. Missing
/// (trial, field) pairs embed to the zero vector; free text cannot be
/// embedded and also yields zeros.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrecomputedEmbeddings {
    pub dimension: usize,
    pub vectors: HashMap<(String, TrialField), Vec<f64>>,
}

impl PrecomputedEmbeddings {
    pub fn load(path: &Path) -> Result<PrecomputedEmbeddings, LinkageError> {
        let bad = |msg: String| LinkageError::Vectors {
            path: path.to_path_buf(),
            msg,
        };
        let table = Table::read(path, b',').map_err(|source| LinkageError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        if table.headers.len() < 3 || table.headers[0] != "nct_id" || table.headers[1] != "field" {
            return Err(bad("header must be nct_id,field,v0,...".into()));
        }
        let dimension = table.headers.len() - 2;
        let mut vectors = HashMap::new();
        for (i, row) in table.rows.iter().enumerate() {
            let id = cell(row, Some(0)).ok_or_else(|| bad(format!("row {}: empty nct_id", i + 2)))?;
            let field = cell(row, Some(1))
                .and_then(TrialField::parse)
                .ok_or_else(|| bad(format!("row {}: unknown field", i + 2)))?;
            if row.len() != dimension + 2 {
                return Err(bad(format!("row {}: expected {dimension} components", i + 2)));
            }
            let v = row
                .iter()
                .skip(2)
                .map(|c| c.trim().parse::<f64>().ok().filter(|x| x.is_finite()))
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| bad(format!("row {}: non-numeric component", i + 2)))?;
            vectors.insert((id.to_string(), field), v);
        }
        Ok(PrecomputedEmbeddings { dimension, vectors })
    }
}

impl EmbeddingProvider for PrecomputedEmbeddings {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, _text: &str) -> Vec<f64> {
        vec![0.0; self.dimension]
    }

    fn embed_field(&self, trial: &TrialRecord, field: TrialField) -> Vec<f64> {
        self.vectors
            .get(&(trial.nct_id.clone(), field))
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.dimension])
    }
}

/// Pairwise relatedness score; higher is more related and the sign matters.
pub trait CrossEncoderScorer: Sync {
    fn score(&self, query: &str, candidate: &str) -> f64;
}

/// `dice(tokens(a), tokens(b)) - tau`: unrelated texts score negative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenOverlapScorer {
    pub tau: f64,
}

impl Default for TokenOverlapScorer {
    fn default() -> Self {
        TokenOverlapScorer { tau: 0.1 }
    }
}

impl CrossEncoderScorer for TokenOverlapScorer {
    fn score(&self, query: &str, candidate: &str) -> f64 {
        dice(query, candidate) - self.tau
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkageCandidate {
    pub query_id: String,
    pub candidate_id: String,
    pub candidate_phase: TrialPhase,
    /// Sum of per-field cosine similarities.
    pub similarity: f64,
    /// Sum of per-field scorer outputs; zero until re-ranked.
    pub cross_score: f64,
    /// 1-based position in the current ordering.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkageEdge {
    pub later: String,
    pub earlier: String,
    pub cross_score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FdaMatch {
    pub nct_id: String,
    pub generic_name: String,
    pub approval_date: NaiveDate,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinkageGraph {
    pub edges: Vec<LinkageEdge>,
    pub fda_matches: Vec<FdaMatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkageConfig {
    /// Shortlist size for re-ranking.
    pub top_k: usize,
    /// Links kept per query and earlier phase.
    pub links_per_phase: usize,
    /// Shortlist size for approval matching.
    pub fda_top_n: usize,
    /// Intervention type a trial needs to be matched against approvals.
    pub fda_intervention_type: String,
}

impl Default for LinkageConfig {
    fn default() -> Self {
        LinkageConfig {
            top_k: 32,
            links_per_phase: 1,
            fda_top_n: 5,
            fda_intervention_type: "Drug".into(),
        }
    }
}

/// Candidates in a directly linked earlier phase that completed strictly
/// before the query started and share an intervention type with it. A query
/// without a start date gets no candidates.
pub fn filter_search_space<'a>(
    query: &TrialRecord,
    pool: &'a [TrialRecord],
    map: &PhaseConnectionMap,
) -> Vec<&'a TrialRecord> {
    let Some(start) = query.start_date else {
        log::warn!("{}: no start date, linkage skipped", query.nct_id);
        return Vec::new();
    };
    let allowed = map.predecessors(query.phase);
    pool.iter()
        .filter(|c| allowed.contains(&c.phase))
        .filter(|c| c.completion_date.is_some_and(|d| d < start))
        .filter(|c| c.shares_intervention_type(query))
        .collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Embeddings of the five linkage fields of one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldVectors(pub [Vec<f64>; 5]);

impl FieldVectors {
    pub fn of(trial: &TrialRecord, provider: &dyn EmbeddingProvider) -> FieldVectors {
        FieldVectors(TrialField::ALL.map(|f| provider.embed_field(trial, f)))
    }

    pub fn similarity(&self, other: &FieldVectors) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| cosine(a, b)).sum()
    }
}

/// Sum over the five fields of the cosine similarity of their embeddings.
pub fn field_similarity(query: &TrialRecord, candidate: &TrialRecord, provider: &dyn EmbeddingProvider) -> f64 {
    FieldVectors::of(query, provider).similarity(&FieldVectors::of(candidate, provider))
}

fn by_similarity(a: &LinkageCandidate, b: &LinkageCandidate) -> std::cmp::Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then_with(|| a.candidate_id.cmp(&b.candidate_id))
}

/// The `k` most similar candidates, descending, ties by candidate id.
pub fn retrieve_topk(
    query: &TrialRecord,
    candidates: &[&TrialRecord],
    provider: &dyn EmbeddingProvider,
    k: usize,
) -> Vec<LinkageCandidate> {
    let qv = FieldVectors::of(query, provider);
    let vectors: Vec<FieldVectors> = candidates.iter().map(|c| FieldVectors::of(c, provider)).collect();
    topk_with_vectors(query, &qv, candidates, &vectors.iter().collect::<Vec<_>>(), k)
}

fn topk_with_vectors(
    query: &TrialRecord,
    qv: &FieldVectors,
    candidates: &[&TrialRecord],
    vectors: &[&FieldVectors],
    k: usize,
) -> Vec<LinkageCandidate> {
    let mut scored: Vec<LinkageCandidate> = candidates
        .iter()
        .zip(vectors)
        .map(|(c, v)| LinkageCandidate {
            query_id: query.nct_id.clone(),
            candidate_id: c.nct_id.clone(),
            candidate_phase: c.phase,
            similarity: qv.similarity(v),
            cross_score: 0.0,
            rank: 0,
        })
        .collect();
    scored.sort_by(by_similarity);
    scored.truncate(k.max(1));
    for (i, c) in scored.iter_mut().enumerate() {
        c.rank = i + 1;
    }
    scored
}

/// Scores each shortlisted candidate field-by-field with `scorer` and
/// re-sorts by the summed score (descending; ties by similarity, then id).
/// `records` must contain every shortlisted candidate.
pub fn rerank(
    query: &TrialRecord,
    shortlist: &[LinkageCandidate],
    records: &HashMap<&str, &TrialRecord>,
    scorer: &dyn CrossEncoderScorer,
) -> Vec<LinkageCandidate> {
    let query_fields = TrialField::ALL.map(|f| query.field_text(f));
    let mut out: Vec<LinkageCandidate> = shortlist
        .iter()
        .filter_map(|c| {
            let rec = records.get(c.candidate_id.as_str())?;
            let cross_score = TrialField::ALL
                .iter()
                .zip(&query_fields)
                .map(|(f, q)| scorer.score(q, &rec.field_text(*f)))
                .sum();
            Some(LinkageCandidate {
                cross_score,
                ..c.clone()
            })
        })
        .collect();
    out.sort_by(|a, b| {
        b.cross_score
            .total_cmp(&a.cross_score)
            .then_with(|| by_similarity(a, b))
    });
    for (i, c) in out.iter_mut().enumerate() {
        c.rank = i + 1;
    }
    out
}

/// Best positive re-ranked candidates, at most `per_phase` for each earlier phase.
pub fn predicted_links(reranked: &[LinkageCandidate], per_phase: usize) -> Vec<&LinkageCandidate> {
    let mut taken: HashMap<TrialPhase, usize> = HashMap::new();
    reranked
        .iter()
        .filter(|c| c.cross_score > 0.0)
        .filter(|c| {
            let n = taken.entry(c.candidate_phase).or_default();
            *n += 1;
            *n <= per_phase
        })
        .collect()
}

/// Links every trial whose phase has predecessors in `map`. Queries run in
/// parallel; edges are ordered by query id, then by rank.
pub fn link_trials(
    trials: &[TrialRecord],
    map: &PhaseConnectionMap,
    provider: &dyn EmbeddingProvider,
    scorer: &dyn CrossEncoderScorer,
    config: &LinkageConfig,
) -> Vec<LinkageEdge> {
    let vectors: Vec<FieldVectors> = trials.par_iter().map(|t| FieldVectors::of(t, provider)).collect();
    let index: HashMap<&str, usize> = trials.iter().enumerate().map(|(i, t)| (t.nct_id.as_str(), i)).collect();
    let records: HashMap<&str, &TrialRecord> = trials.iter().map(|t| (t.nct_id.as_str(), t)).collect();

    let mut queries: Vec<usize> = (0..trials.len())
        .filter(|&i| !map.predecessors(trials[i].phase).is_empty())
        .collect();
    queries.sort_by(|&a, &b| trials[a].nct_id.cmp(&trials[b].nct_id));

    let per_query: Vec<Vec<LinkageEdge>> = queries
        .par_iter()
        .map(|&qi| {
            let query = &trials[qi];
            let candidates = filter_search_space(query, trials, map);
            if candidates.is_empty() {
                return Vec::new();
            }
            let cand_vectors: Vec<&FieldVectors> =
                candidates.iter().map(|c| &vectors[index[c.nct_id.as_str()]]).collect();
            let shortlist = topk_with_vectors(query, &vectors[qi], &candidates, &cand_vectors, config.top_k);
            let reranked = rerank(query, &shortlist, &records, scorer);
            predicted_links(&reranked, config.links_per_phase)
                .into_iter()
                .map(|c| LinkageEdge {
                    later: query.nct_id.clone(),
                    earlier: c.candidate_id.clone(),
                    cross_score: c.cross_score,
                })
                .collect()
        })
        .collect();
    per_query.into_iter().flatten().collect()
}

/// `[approval - 2 years, approval - 2 months]` with end-of-month clamping.
pub fn approval_window(approval: NaiveDate) -> (NaiveDate, NaiveDate) {
    let lo = approval.checked_sub_months(Months::new(24)).expect("date in range");
    let hi = approval.checked_sub_months(Months::new(2)).expect("date in range");
    (lo, hi)
}

/// Matches each approval to at most one phase 3 or phase 2/3 trial of the
/// configured intervention type. Trials completed inside the approval window
/// whose best intervention-name score is positive are shortlisted by score,
/// and the one completed closest to the approval wins.
pub fn match_fda_approvals(
    trials: &[TrialRecord],
    book: &[OrangeBookEntry],
    scorer: &dyn CrossEncoderScorer,
    config: &LinkageConfig,
) -> Vec<FdaMatch> {
    let eligible: Vec<&TrialRecord> = trials
        .iter()
        .filter(|t| matches!(t.phase, TrialPhase::Phase3 | TrialPhase::Phase2_3))
        .filter(|t| t.has_intervention_type(&config.fda_intervention_type))
        .collect();
    let mut out = Vec::new();
    for entry in book {
        let (lo, hi) = approval_window(entry.approval_date);
        let mut scored: Vec<(f64, NaiveDate, &TrialRecord)> = eligible
            .iter()
            .filter_map(|t| {
                let done = t.completion_date.filter(|d| *d >= lo && *d <= hi)?;
                let best = t
                    .intervention_names
                    .iter()
                    .map(|n| scorer.score(&entry.drug_generic_name, n))
                    .fold(f64::NEG_INFINITY, f64::max);
                (best > 0.0).then_some((best, done, *t))
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.2.nct_id.cmp(&b.2.nct_id)));
        scored.truncate(config.fda_top_n);
        let closest = scored.iter().min_by(|a, b| {
            b.1.cmp(&a.1)
                .then_with(|| b.0.total_cmp(&a.0))
                .then_with(|| a.2.nct_id.cmp(&b.2.nct_id))
        });
        if let Some((_, _, t)) = closest {
            out.push(FdaMatch {
                nct_id: t.nct_id.clone(),
                generic_name: entry.drug_generic_name.clone(),
                approval_date: entry.approval_date,
            });
        }
    }
    out
}

/// Full linkage: cross-phase edges plus approval matches.
pub fn build_graph(
    trials: &[TrialRecord],
    book: &[OrangeBookEntry],
    map: &PhaseConnectionMap,
    provider: &dyn EmbeddingProvider,
    scorer: &dyn CrossEncoderScorer,
    config: &LinkageConfig,
) -> LinkageGraph {
    LinkageGraph {
        edges: link_trials(trials, map, provider, scorer, config),
        fda_matches: match_fda_approvals(trials, book, scorer, config),
    }
}

/// Edges that break the phase map or the date rule. Empty for graphs built
/// by [`link_trials`].
pub fn graph_violations(graph: &LinkageGraph, trials: &[TrialRecord], map: &PhaseConnectionMap) -> Vec<String> {
    let by_id: HashMap<&str, &TrialRecord> = trials.iter().map(|t| (t.nct_id.as_str(), t)).collect();
    let mut bad = Vec::new();
    for e in &graph.edges {
        let (Some(later), Some(earlier)) = (by_id.get(e.later.as_str()), by_id.get(e.earlier.as_str())) else {
            bad.push(format!("{} -> {}: unknown trial", e.later, e.earlier));
            continue;
        };
        if !map.predecessors(later.phase).contains(&earlier.phase) {
            bad.push(format!("{} -> {}: phases not linked", e.later, e.earlier));
        }
        match (earlier.completion_date, later.start_date) {
            (Some(c), Some(s)) if c < s => {}
            _ => bad.push(format!("{} -> {}: date order", e.later, e.earlier)),
        }
    }
    bad
}

/// Weak labels from the graph. Trials in a phase that later phases link to
/// are successes iff something links to them; phase 3 and 2/3 trials also
/// succeed on an approval match. Phase 4 and any phase nothing links to
/// abstain.
pub fn derive_linkage_labels(
    graph: &LinkageGraph,
    trials: &[TrialRecord],
    map: &PhaseConnectionMap,
) -> BTreeMap<String, WeakLabel> {
    let linked: HashSet<&str> = graph.edges.iter().map(|e| e.earlier.as_str()).collect();
    let approved: HashSet<&str> = graph.fda_matches.iter().map(|m| m.nct_id.as_str()).collect();
    let targets = map.linkable_targets();
    trials
        .iter()
        .map(|t| {
            let id = t.nct_id.as_str();
            let label = match t.phase {
                TrialPhase::Phase4 => WeakLabel::Abstain,
                TrialPhase::Phase3 | TrialPhase::Phase2_3 => {
                    WeakLabel::from_bool(linked.contains(id) || approved.contains(id))
                }
                p if targets.contains(&p) => WeakLabel::from_bool(linked.contains(id)),
                _ => WeakLabel::Abstain,
            };
            (t.nct_id.clone(), label)
        })
        .collect()
}

pub fn edges_csv(edges: &[LinkageEdge]) -> String {
    let mut s = String::from("later_nct_id,earlier_nct_id,cross_score\n");
    for e in edges {
        let _ = writeln!(s, "{},{},{}", e.later, e.earlier, fmt_f64(e.cross_score));
    }
    s
}

pub fn fda_csv(matches: &[FdaMatch]) -> String {
    let mut s = String::from("nct_id,generic_name,approval_date\n");
    for m in matches {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record([m.nct_id.as_str(), &m.generic_name, &m.approval_date.to_string()])
            .expect("in-memory write");
        s.push_str(&String::from_utf8(w.into_inner().expect("flush")).expect("utf8"));
    }
    s
}

pub fn labels_csv(labels: &BTreeMap<String, WeakLabel>) -> String {
    let mut s = String::from("nct_id,label\n");
    for (id, l) in labels {
        let _ = writeln!(s, "{id},{}", l.code());
    }
    s
}

pub fn read_labels_csv(path: &Path) -> Result<HashMap<String, WeakLabel>, LinkageError> {
    let table = Table::read(path, b',').map_err(|source| LinkageError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |msg: String| LinkageError::Vectors {
        path: path.to_path_buf(),
        msg,
    };
    let (Some(id), Some(lab)) = (table.column("nct_id"), table.column("label")) else {
        return Err(bad("header must contain nct_id,label".into()));
    };
    table
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let nct = cell(row, Some(id)).ok_or_else(|| bad(format!("row {}: empty nct_id", i + 2)))?;
            let label = cell(row, Some(lab))
                .and_then(|v| v.parse::<i64>().ok())
                .and_then(WeakLabel::from_code)
                .ok_or_else(|| bad(format!("row {}: label not in -1/0/1", i + 2)))?;
            Ok((nct.to_string(), label))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trial::TrialStatus;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    fn trial(id: &str, phase: TrialPhase, kinds: &[&str]) -> TrialRecord {
        let mut t = TrialRecord::new(id, phase, TrialStatus::Completed);
        t.intervention_types = kinds.iter().map(|s| s.to_string()).collect();
        t
    }

    fn filled(id: &str, phase: TrialPhase, text: &str) -> TrialRecord {
        let mut t = trial(id, phase, &["Drug"]);
        t.intervention_names = vec![format!("{text} drug")];
        t.conditions = vec![format!("{text} condition")];
        t.official_title = format!("{text} title words");
        t.brief_summary = format!("{text} summary words");
        t.eligibility_criteria = format!("{text} eligibility words");
        t
    }

    #[test]
    fn default_map_is_valid() {
        PhaseConnectionMap::default().validate().unwrap();
        let mut bad = PhaseConnectionMap::default();
        bad.edges.insert(TrialPhase::Phase1, vec![TrialPhase::Phase2]);
        assert!(matches!(bad.validate(), Err(LinkageError::BadEdge { .. })));
    }

    #[test]
    fn search_space_rules() {
        let mut q = trial("Q", TrialPhase::Phase4, &["Drug"]);
        q.start_date = Some(d(2015, 6, 1));
        let mut day_after = trial("A", TrialPhase::Phase3, &["Drug"]);
        day_after.completion_date = Some(d(2015, 6, 2));
        let mut same_day = trial("S", TrialPhase::Phase3, &["Drug"]);
        same_day.completion_date = Some(d(2015, 6, 1));
        let mut p1 = trial("P1", TrialPhase::Phase1, &["Drug"]);
        p1.completion_date = Some(d(2010, 1, 1));
        let mut device = trial("DEV", TrialPhase::Phase3, &["Device"]);
        device.completion_date = Some(d(2010, 1, 1));
        let mut ok = trial("OK", TrialPhase::Phase2_3, &["drug", "Device"]);
        ok.completion_date = Some(d(2015, 5, 31));
        let pool = vec![day_after, same_day, p1, device, ok];
        let ids: Vec<_> = filter_search_space(&q, &pool, &PhaseConnectionMap::default())
            .iter()
            .map(|t| t.nct_id.as_str())
            .collect();
        assert_eq!(ids, ["OK"]);

        q.start_date = None;
        assert!(filter_search_space(&q, &pool, &PhaseConnectionMap::default()).is_empty());
    }

    #[test]
    fn identical_trial_scores_five() {
        let a = filled("A", TrialPhase::Phase3, "alpha");
        let b = filled("B", TrialPhase::Phase2, "alpha");
        let s = field_similarity(&a, &b, &HashedBagEmbedder::default());
        assert!((s - 5.0).abs() < 1e-12);
    }

    struct Orthogonal;
    impl EmbeddingProvider for Orthogonal {
        fn dimension(&self) -> usize {
            2
        }
        fn embed(&self, text: &str) -> Vec<f64> {
            if text.starts_with('x') {
                vec![1.0, 0.0]
            } else {
                vec![0.0, 1.0]
            }
        }
    }

    #[test]
    fn orthogonal_fields_score_zero() {
        let a = filled("A", TrialPhase::Phase3, "x");
        let b = filled("B", TrialPhase::Phase2, "y");
        assert_eq!(field_similarity(&a, &b, &Orthogonal), 0.0);
    }

    #[test]
    fn empty_field_contributes_zero() {
        let a = filled("A", TrialPhase::Phase3, "alpha");
        let mut b = a.clone();
        b.eligibility_criteria.clear();
        let s = field_similarity(&a, &b, &HashedBagEmbedder::default());
        assert!((s - 4.0).abs() < 1e-12);
    }

    #[test]
    fn topk_small_pool_and_duplicate_first() {
        let q = filled("Q", TrialPhase::Phase3, "alpha beta");
        let a = filled("A", TrialPhase::Phase2, "gamma");
        let dup = filled("DUP", TrialPhase::Phase2, "alpha beta");
        let c = filled("C", TrialPhase::Phase2, "alpha");
        let pool = [&a, &dup, &c];
        let top = retrieve_topk(&q, &pool, &HashedBagEmbedder::default(), 32);
        assert_eq!(top.len(), 3);
        assert_eq!(top[0].candidate_id, "DUP");
        assert_eq!(top[0].rank, 1);
        assert!(top.windows(2).all(|w| w[0].similarity >= w[1].similarity));
    }

    #[test]
    fn scorer_identity_property() {
        let s = TokenOverlapScorer::default();
        assert!((s.score("imatinib mesylate", "imatinib mesylate") - 0.9).abs() < 1e-15);
        assert!((s.score("imatinib", "placebo") + 0.1).abs() < 1e-15);
    }

    #[test]
    fn rerank_and_positive_rule() {
        let q = filled("Q", TrialPhase::Phase3, "alpha");
        let same = filled("SAME", TrialPhase::Phase2, "alpha");
        let mut other = trial("OTHER", TrialPhase::Phase2, &["Drug"]);
        other.official_title = "completely unrelated".into();
        let records: HashMap<&str, &TrialRecord> = [("SAME", &same), ("OTHER", &other)].into_iter().collect();
        let shortlist = retrieve_topk(&q, &[&other, &same], &HashedBagEmbedder::default(), 32);
        let rr = rerank(&q, &shortlist, &records, &TokenOverlapScorer::default());
        assert_eq!(rr[0].candidate_id, "SAME");
        assert!(rr[0].cross_score > 0.0);
        assert!(rr[1].cross_score < 0.0);
        let links = predicted_links(&rr, 1);
        assert_eq!(links.len(), 1);

        let only_other = rerank(&q, &shortlist[1..], &records, &TokenOverlapScorer::default());
        let only_other: Vec<_> = only_other.into_iter().filter(|c| c.candidate_id == "OTHER").collect();
        assert!(predicted_links(&only_other, 1).is_empty());
    }

    fn phase3(id: &str, done: NaiveDate, drug: &str) -> TrialRecord {
        let mut t = trial(id, TrialPhase::Phase3, &["Drug"]);
        t.completion_date = Some(done);
        t.intervention_names = vec![drug.into()];
        t
    }

    fn approval(name: &str, date: NaiveDate) -> OrangeBookEntry {
        OrangeBookEntry {
            drug_generic_name: name.into(),
            approval_date: date,
        }
    }

    #[test]
    fn fda_window_boundaries() {
        let appr = d(2020, 6, 15);
        let (lo, hi) = approval_window(appr);
        assert_eq!((lo, hi), (d(2018, 6, 15), d(2020, 4, 15)));
        let cfg = LinkageConfig::default();
        let s = TokenOverlapScorer::default();
        let book = [approval("rivoxaban", appr)];
        let one_month = phase3("M1", d(2020, 5, 15), "rivoxaban");
        assert!(match_fda_approvals(&[one_month], &book, &s, &cfg).is_empty());
        let old = phase3("M25", d(2018, 5, 15), "rivoxaban");
        assert!(match_fda_approvals(&[old], &book, &s, &cfg).is_empty());
        let ok = phase3("OK", d(2019, 1, 1), "Rivoxaban");
        let m = match_fda_approvals(&[ok], &book, &s, &cfg);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].nct_id, "OK");
    }

    #[test]
    fn fda_picks_closest_of_top_scores() {
        let appr = d(2020, 6, 30);
        let cfg = LinkageConfig::default();
        let s = TokenOverlapScorer::default();
        let trials = vec![
            phase3("EARLY", d(2018, 9, 1), "drugx"),
            phase3("LATE", d(2020, 3, 1), "drugx tablets"),
            phase3("OTHER", d(2020, 4, 1), "placebo"),
        ];
        let m = match_fda_approvals(&trials, &[approval("drugx", appr)], &s, &cfg);
        assert_eq!(m[0].nct_id, "LATE");

        // Month-end clamping: Apr 30 is two months before Jun 30; Dec 31 - 2 months = Oct 31.
        assert_eq!(approval_window(d(2021, 12, 31)).1, d(2021, 10, 31));
        assert_eq!(approval_window(d(2021, 4, 30)).1, d(2021, 2, 28));
    }

    #[test]
    fn device_only_phase3_is_not_matched() {
        let mut t = phase3("D", d(2019, 1, 1), "drugx");
        t.intervention_types = ["Device".to_string()].into_iter().collect();
        let m = match_fda_approvals(
            &[t],
            &[approval("drugx", d(2020, 1, 1))],
            &TokenOverlapScorer::default(),
            &LinkageConfig::default(),
        );
        assert!(m.is_empty());
    }

    #[test]
    fn linkage_label_rules() {
        let trials = vec![
            trial("P2", TrialPhase::Phase2, &["Drug"]),
            trial("P2B", TrialPhase::Phase2, &["Drug"]),
            trial("P3FDA", TrialPhase::Phase3, &["Drug"]),
            trial("P3", TrialPhase::Phase3, &["Drug"]),
            trial("P4", TrialPhase::Phase4, &["Drug"]),
            trial("P1", TrialPhase::Phase1, &["Drug"]),
        ];
        let graph = LinkageGraph {
            edges: vec![LinkageEdge {
                later: "P3".into(),
                earlier: "P2".into(),
                cross_score: 1.0,
            }],
            fda_matches: vec![FdaMatch {
                nct_id: "P3FDA".into(),
                generic_name: "x".into(),
                approval_date: d(2020, 1, 1),
            }],
        };
        let l = derive_linkage_labels(&graph, &trials, &PhaseConnectionMap::default());
        assert_eq!(l["P2"], WeakLabel::Success);
        assert_eq!(l["P2B"], WeakLabel::Failure);
        assert_eq!(l["P3FDA"], WeakLabel::Success);
        assert_eq!(l["P3"], WeakLabel::Failure);
        assert_eq!(l["P4"], WeakLabel::Abstain);
        assert_eq!(l["P1"], WeakLabel::Failure);
    }

    #[test]
    fn end_to_end_link_is_deterministic_and_valid() {
        let mut p2 = filled("NCT2", TrialPhase::Phase2, "alpha");
        p2.completion_date = Some(d(2012, 1, 1));
        let mut p2b = filled("NCT2B", TrialPhase::Phase2, "omega");
        p2b.completion_date = Some(d(2012, 1, 1));
        let mut p3 = filled("NCT3", TrialPhase::Phase3, "alpha");
        p3.start_date = Some(d(2013, 1, 1));
        let trials = vec![p3, p2, p2b];
        let map = PhaseConnectionMap::default();
        let p = HashedBagEmbedder::default();
        let s = TokenOverlapScorer::default();
        let g1 = build_graph(&trials, &[], &map, &p, &s, &LinkageConfig::default());
        let g2 = build_graph(&trials, &[], &map, &p, &s, &LinkageConfig::default());
        assert_eq!(g1, g2);
        assert_eq!(g1.edges.len(), 1);
        assert_eq!(
            (g1.edges[0].later.as_str(), g1.edges[0].earlier.as_str()),
            ("NCT3", "NCT2")
        );
        assert!(graph_violations(&g1, &trials, &map).is_empty());
    }

    #[test]
    fn precomputed_vectors_file() {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "nct_id,field,v0,v1\nA,title,1,0\nB,title,1,1").unwrap();
        let p = PrecomputedEmbeddings::load(f.path()).unwrap();
        assert_eq!(p.dimension(), 2);
        let a = trial("A", TrialPhase::Phase2, &[]);
        let b = trial("B", TrialPhase::Phase2, &[]);
        let s = field_similarity(&a, &b, &p);
        assert!((s - 1.0 / 2f64.sqrt()).abs() < 1e-15);
    }
}
