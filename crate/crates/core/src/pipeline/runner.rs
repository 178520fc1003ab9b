use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use serde_json::json;

use super::config::{EmbeddingChoice, ModelChoice, RunConfig};
use super::manifest::{file_sha256, sha256_hex, RunManifest};
use super::{Command, PipelineError};
use crate::eval::{build_report, emit_report, lf_agreement_matrix, PhaseGroup, ReportOptions};
use crate::label_model::{
    apply_rule_overrides, fit_data_programming, fit_random_forest, labels_csv, predict_majority_vote,
    predict_posterior, predict_random_forest, read_labels_csv, AnchorSet, DataProgrammingModel, LabelSource,
    PosteriorLabel,
};
use crate::lf::{apply_all, coverage_csv, tune_thresholds, LabelMatrix, LfKind, SignalBundle, ThresholdConfig};
use crate::linkage::{
    build_graph, derive_linkage_labels, edges_csv, fda_csv, graph_violations, labels_csv as linkage_labels_csv,
    read_labels_csv as read_linkage_labels, EmbeddingProvider, HashedBagEmbedder, PrecomputedEmbeddings,
    TokenOverlapScorer,
};
use crate::signals::{
    compute_sma_slope, load_abstract_links, load_llm_decisions, load_news, load_orange_book, load_stock_series,
    load_ticker_map, render_llm_prompt, select_top2_abstracts, Loaded,
};
use crate::text::jaccard;
use crate::trial::{parse_trials, select_trials, write_trials, GoldLabelSet, TrialPhase, TrialRecord, WeakLabel};

pub const SELECTED: &str = "selected_trials.csv";
pub const SELECTION_REPORT: &str = "selection_report.csv";
pub const PROMPTS: &str = "llm_prompts.jsonl";
pub const EDGES: &str = "linkage_edges.csv";
pub const FDA: &str = "fda_matches.csv";
pub const LINKAGE_LABELS: &str = "linkage_labels.csv";
pub const THRESHOLDS: &str = "thresholds.json";
pub const MATRIX: &str = "label_matrix.csv";
pub const COVERAGE: &str = "lf_coverage.csv";
pub const LABELS: &str = "labels.csv";
pub const MODEL: &str = "model.json";

/// State of one command invocation. Artifacts are computed at most once.
pub struct Pipeline {
    cfg: RunConfig,
    out: PathBuf,
    manifest: RunManifest,
    selected: Option<Vec<TrialRecord>>,
    gold: Option<Option<GoldLabelSet>>,
    thresholds: Option<ThresholdConfig>,
    linkage: Option<HashMap<String, WeakLabel>>,
    matrix: Option<LabelMatrix>,
    labels: Option<Vec<PosteriorLabel>>,
}

fn mkdir(dir: &std::path::Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|e| PipelineError::Validation(format!("output_dir {}: {e}", dir.display())))
}

impl Pipeline {
    pub fn new(cfg: RunConfig, config_sha256: String, command: Command) -> Result<Pipeline, PipelineError> {
        mkdir(&cfg.output_dir)?;
        let mut manifest = RunManifest::new(
            command.as_str(),
            config_sha256,
            cfg.seed,
            cfg.label_model.model.as_str(),
        );
        for (key, path) in cfg.input_files() {
            let d = file_sha256(path).map_err(|e| PipelineError::Validation(format!("{key}: {e}")))?;
            manifest.inputs.insert(key.to_string(), d);
        }
        Ok(Pipeline {
            out: cfg.output_dir.clone(),
            cfg,
            manifest,
            selected: None,
            gold: None,
            thresholds: None,
            linkage: None,
            matrix: None,
            labels: None,
        })
    }

    pub fn execute(&mut self, command: Command) -> Result<(), PipelineError> {
        match command {
            Command::Ingest => self.ingest(),
            Command::Link => self.link(),
            Command::Tune => self.tune(),
            Command::Label => self.label(),
            Command::Evaluate => self.evaluate(),
            Command::Report => {
                self.ingest()?;
                self.link()?;
                self.tune()?;
                self.label()?;
                self.evaluate()
            }
        }
    }

    pub fn finish(self) -> Result<RunManifest, PipelineError> {
        let path = self.out.join(format!("manifest_{}.json", self.manifest.command));
        fs::write(&path, self.manifest.to_json()).map_err(|e| PipelineError::stage("manifest", e))?;
        Ok(self.manifest)
    }

    fn write(&mut self, stage: &'static str, name: &str, contents: &[u8]) -> Result<(), PipelineError> {
        let path = self.out.join(name);
        fs::write(&path, contents).map_err(|e| PipelineError::stage(stage, format!("{}: {e}", path.display())))?;
        self.manifest.outputs.insert(name.to_string(), sha256_hex(contents));
        Ok(())
    }

    /// An earlier stage's output file, recorded as an input when used.
    fn reusable(&mut self, name: &str) -> Option<PathBuf> {
        let path = self.out.join(name);
        let digest = file_sha256(&path).ok()?;
        self.manifest.inputs.insert(format!("reused:{name}"), digest);
        Some(path)
    }

    fn loaded<T>(&mut self, what: &str, l: Loaded<T>) -> Vec<T> {
        if l.skipped > 0 {
            self.manifest
                .warn(format!("{what}: skipped {} invalid rows", l.skipped));
        }
        for w in l.warnings {
            log::debug!("{what}: {w}");
        }
        l.records
    }

    // ---- ingest ----

    fn ingest(&mut self) -> Result<(), PipelineError> {
        const STAGE: &str = "ingest";
        let t0 = Instant::now();
        let inputs = &self.cfg.inputs;
        let parsed = parse_trials(&inputs.trials, &inputs.trial_schema, inputs.delimiter as u8)
            .map_err(|e| PipelineError::stage(STAGE, e))?;
        let n_parsed = parsed.records.len();
        for w in parsed.warnings {
            self.manifest.warn(w);
        }
        let (selected, report) = select_trials(&parsed.records, &self.cfg.selection);

        let mut buf = Vec::new();
        write_trials(&selected, &mut buf).map_err(|e| PipelineError::stage(STAGE, e))?;
        self.write(STAGE, SELECTED, &buf)?;
        self.write(
            STAGE,
            SELECTION_REPORT,
            format!("stage,count\n{}", report.to_csv_lines()).as_bytes(),
        )?;

        let mut prompts = 0;
        if let Some(path) = self.cfg.inputs.abstracts.clone() {
            let abstracts = load_abstract_links(&path).map_err(|e| PipelineError::stage(STAGE, e))?;
            let abstracts = self.loaded("abstracts", abstracts);
            let mut lines = String::new();
            for t in &selected {
                let top = select_top2_abstracts(t, &abstracts, jaccard);
                if top.is_empty() {
                    continue;
                }
                let line = json!({"nct_id": t.nct_id, "prompt": render_llm_prompt(t, &top)});
                lines.push_str(&line.to_string());
                lines.push('\n');
                prompts += 1;
            }
            self.write(STAGE, PROMPTS, lines.as_bytes())?;
        }

        if let Some(gold) = self.gold()? {
            let unknown = gold.unknown_ids(&parsed.records);
            if !unknown.is_empty() {
                self.manifest
                    .warn(format!("{} gold ids are not in the trial file", unknown.len()));
            }
        }
        self.manifest.stage(
            STAGE,
            t0,
            &[("parsed", n_parsed), ("selected", selected.len()), ("prompts", prompts)],
        );
        self.selected = Some(selected);
        Ok(())
    }

    fn trials(&mut self) -> Result<Vec<TrialRecord>, PipelineError> {
        if self.selected.is_none() {
            match self.reusable(SELECTED) {
                Some(path) => {
                    let parsed = parse_trials(&path, &Default::default(), b',')
                        .map_err(|e| PipelineError::stage("ingest", e))?;
                    self.selected = Some(parsed.records);
                }
                None => self.ingest()?,
            }
        }
        Ok(self.selected.clone().expect("selected trials"))
    }

    fn gold(&mut self) -> Result<Option<GoldLabelSet>, PipelineError> {
        if self.gold.is_none() {
            let g = match &self.cfg.inputs.gold {
                Some(p) => Some(GoldLabelSet::load(p).map_err(|e| PipelineError::stage("gold", e))?),
                None => None,
            };
            self.gold = Some(g);
        }
        Ok(self.gold.clone().flatten())
    }

    fn gold_split(&mut self, tag: Option<String>) -> Result<Option<GoldLabelSet>, PipelineError> {
        Ok(self.gold()?.map(|g| g.with_provenance(tag.as_deref())))
    }

    // ---- link ----

    fn link(&mut self) -> Result<(), PipelineError> {
        const STAGE: &str = "link";
        let t0 = Instant::now();
        let trials = self.trials()?;
        let book = match self.cfg.inputs.orange_book.clone() {
            Some(p) => {
                let l = load_orange_book(&p).map_err(|e| PipelineError::stage(STAGE, e))?;
                self.loaded("orange_book", l)
            }
            None => Vec::new(),
        };
        let section = &self.cfg.linkage;
        let provider: Box<dyn EmbeddingProvider> = match section.embedding {
            EmbeddingChoice::HashedBag => Box::new(HashedBagEmbedder {
                dimension: section.embedding_dimension,
            }),
            EmbeddingChoice::External => {
                let path = self.cfg.inputs.embeddings.as_ref().expect("validated");
                Box::new(PrecomputedEmbeddings::load(path).map_err(|e| PipelineError::stage(STAGE, e))?)
            }
        };
        let scorer = TokenOverlapScorer {
            tau: section.scorer_tau,
        };
        let graph = build_graph(
            &trials,
            &book,
            &section.phase_map,
            provider.as_ref(),
            &scorer,
            &section.params(),
        );
        let violations = graph_violations(&graph, &trials, &section.phase_map);
        if let Some(v) = violations.first() {
            return Err(PipelineError::stage(STAGE, format!("inconsistent edge {v}")));
        }
        let labels = derive_linkage_labels(&graph, &trials, &section.phase_map);
        self.write(STAGE, EDGES, edges_csv(&graph.edges).as_bytes())?;
        self.write(STAGE, FDA, fda_csv(&graph.fda_matches).as_bytes())?;
        self.write(STAGE, LINKAGE_LABELS, linkage_labels_csv(&labels).as_bytes())?;
        let successes = labels.values().filter(|l| **l == WeakLabel::Success).count();
        self.manifest.stage(
            STAGE,
            t0,
            &[
                ("edges", graph.edges.len()),
                ("fda_matches", graph.fda_matches.len()),
                ("linkage_successes", successes),
            ],
        );
        self.linkage = Some(labels.into_iter().collect());
        Ok(())
    }

    fn linkage_labels(&mut self) -> Result<HashMap<String, WeakLabel>, PipelineError> {
        if self.linkage.is_none() {
            match self.reusable(LINKAGE_LABELS) {
                Some(path) => {
                    self.linkage = Some(read_linkage_labels(&path).map_err(|e| PipelineError::stage("link", e))?)
                }
                None => self.link()?,
            }
        }
        Ok(self.linkage.clone().expect("linkage labels"))
    }

    // ---- tune ----

    fn tune(&mut self) -> Result<(), PipelineError> {
        const STAGE: &str = "tune";
        let t0 = Instant::now();
        let trials = self.trials()?;
        let gold = self.gold_split(self.cfg.gold_splits.tune.clone())?;
        let specs = self.cfg.labeling_functions.clone();
        let cfg = match gold {
            Some(gold) if self.cfg.tune_thresholds => {
                let outcome = tune_thresholds(&trials, &specs, &gold);
                for w in outcome.warnings {
                    self.manifest.warn(w);
                }
                outcome.config
            }
            _ => {
                if self.cfg.tune_thresholds {
                    self.manifest
                        .warn("no gold labels; thresholds use each LF's configured quantile");
                }
                ThresholdConfig::resolve_fixed(&trials, &specs)
            }
        };
        let mut text = cfg.to_json();
        text.push('\n');
        self.write(STAGE, THRESHOLDS, text.as_bytes())?;
        let resolved = cfg.phases.values().map(BTreeMap::len).sum();
        self.manifest
            .stage(STAGE, t0, &[("phases", cfg.phases.len()), ("thresholds", resolved)]);
        self.thresholds = Some(cfg);
        Ok(())
    }

    fn thresholds(&mut self) -> Result<ThresholdConfig, PipelineError> {
        if self.thresholds.is_none() {
            match self.reusable(THRESHOLDS) {
                Some(path) => {
                    let text = fs::read_to_string(&path).map_err(|e| PipelineError::stage("tune", e))?;
                    self.thresholds =
                        Some(ThresholdConfig::from_json(&text).map_err(|e| PipelineError::stage("tune", e))?);
                }
                None => self.tune()?,
            }
        }
        Ok(self.thresholds.clone().expect("thresholds"))
    }

    // ---- label ----

    fn signals(&mut self, trials: &[TrialRecord]) -> Result<SignalBundle, PipelineError> {
        const STAGE: &str = "label";
        let mut bundle = SignalBundle::default();
        let uses = |k: LfKind| self.cfg.labeling_functions.iter().any(|s| s.kind == k);
        let (news, stock, llm, link) = (
            uses(LfKind::News),
            uses(LfKind::Stock),
            uses(LfKind::Llm),
            uses(LfKind::Linkage),
        );
        let inputs = self.cfg.inputs.clone();
        if let (true, Some(p)) = (news, &inputs.news) {
            let l = load_news(p).map_err(|e| PipelineError::stage(STAGE, e))?;
            for r in self.loaded("news", l) {
                bundle.news.entry(r.nct_id).or_default().push(r.sentiment);
            }
        }
        if let (true, Some(sp), Some(mp)) = (stock, &inputs.stock, &inputs.ticker_map) {
            let l = load_stock_series(sp).map_err(|e| PipelineError::stage(STAGE, e))?;
            let series: HashMap<String, _> = self
                .loaded("stock", l)
                .into_iter()
                .map(|s| (s.ticker.clone(), s))
                .collect();
            let map = load_ticker_map(mp).map_err(|e| PipelineError::stage(STAGE, e))?;
            let s = &self.cfg.signals;
            for t in trials {
                let slope = map
                    .ticker_for(&t.nct_id)
                    .and_then(|tk| series.get(tk))
                    .zip(t.completion_date)
                    .and_then(|(ser, done)| compute_sma_slope(ser, done, s.sma_window, s.slope_window_days));
                if let Some(v) = slope {
                    bundle.stock_slopes.insert(t.nct_id.clone(), v);
                }
            }
        }
        if let (true, Some(p)) = (llm, &inputs.llm_decisions) {
            let l = load_llm_decisions(p).map_err(|e| PipelineError::stage(STAGE, e))?;
            bundle.llm = self
                .loaded("llm_decisions", l)
                .into_iter()
                .map(|r| (r.nct_id, r.decision))
                .collect();
        }
        if link {
            bundle.linkage = self.linkage_labels()?;
        }
        Ok(bundle)
    }

    fn label(&mut self) -> Result<(), PipelineError> {
        const STAGE: &str = "label";
        let trials = self.trials()?;
        // Resolve inline stages in pipeline order: link before tune.
        if self.cfg.labeling_functions.iter().any(|s| s.kind == LfKind::Linkage) {
            self.linkage_labels()?;
        }
        let thresholds = self.thresholds()?;
        let signals = self.signals(&trials)?;
        let t0 = Instant::now();
        let matrix = apply_all(&trials, &self.cfg.labeling_functions, &thresholds, &signals)
            .map_err(|e| PipelineError::stage(STAGE, e))?;
        let phases: Vec<TrialPhase> = trials.iter().map(|t| t.phase).collect();
        let (mut labels, model) = self.aggregate(&matrix, &phases)?;
        if self.cfg.label_model.rule_overrides {
            labels = apply_rule_overrides(labels, &trials);
        }

        let mut buf = Vec::new();
        matrix.write_csv(&mut buf).map_err(|e| PipelineError::stage(STAGE, e))?;
        self.write(STAGE, MATRIX, &buf)?;
        self.write(STAGE, COVERAGE, coverage_csv(&matrix).as_bytes())?;
        self.write(STAGE, LABELS, labels_csv(&labels).as_bytes())?;
        let mut model = serde_json::to_string_pretty(&model).expect("model serializes");
        model.push('\n');
        self.write(STAGE, MODEL, model.as_bytes())?;

        let count = |s: LabelSource| labels.iter().filter(|l| l.source == s).count();
        let success = labels.iter().filter(|l| l.hard_label == WeakLabel::Success).count();
        self.manifest.stage(
            STAGE,
            t0,
            &[
                ("rows", matrix.n_rows()),
                ("lfs", matrix.n_cols()),
                ("rule", count(LabelSource::Rule)),
                ("model", labels.len() - count(LabelSource::Rule)),
                ("undecided", labels.iter().filter(|l| l.undecided).count()),
                ("success", success),
            ],
        );
        self.matrix = Some(matrix);
        self.labels = Some(labels);
        Ok(())
    }

    fn aggregate(
        &mut self,
        matrix: &LabelMatrix,
        phases: &[TrialPhase],
    ) -> Result<(Vec<PosteriorLabel>, serde_json::Value), PipelineError> {
        const STAGE: &str = "label";
        let lm = self.cfg.label_model.clone();
        match lm.model {
            ModelChoice::Mv => Ok((
                predict_majority_vote(matrix, lm.undecided_default),
                json!({"kind": "mv", "undecided_default": lm.undecided_default}),
            )),
            ModelChoice::Rf => {
                let gold = self.gold_split(self.cfg.gold_splits.train.clone())?.ok_or_else(|| {
                    PipelineError::Validation("label: the rf model needs gold labels (inputs.gold)".into())
                })?;
                let forest =
                    fit_random_forest(matrix, phases, &gold, &lm.forest).map_err(|e| PipelineError::stage(STAGE, e))?;
                let labels =
                    predict_random_forest(&forest, matrix, phases).map_err(|e| PipelineError::stage(STAGE, e))?;
                Ok((labels, json!({"kind": "rf", "forest": forest})))
            }
            ModelChoice::Dp => self.aggregate_dp(matrix, phases),
        }
    }

    /// Data programming, per phase group when enabled. Groups that are too
    /// small or fail to fit use the model fitted on all rows; rows left
    /// without any model fall back to majority vote.
    fn aggregate_dp(
        &mut self,
        matrix: &LabelMatrix,
        phases: &[TrialPhase],
    ) -> Result<(Vec<PosteriorLabel>, serde_json::Value), PipelineError> {
        const STAGE: &str = "label";
        let lm = self.cfg.label_model.clone();
        let anchors = match (lm.anchors, self.gold_split(self.cfg.gold_splits.train.clone())?) {
            (true, Some(g)) => Some(AnchorSet::new(g, lm.anchor_factor).map_err(|e| PipelineError::stage(STAGE, e))?),
            (true, None) => {
                self.manifest
                    .warn("anchors requested but no gold labels are configured");
                None
            }
            _ => None,
        };
        let pooled = match fit_data_programming(matrix, lm.class_balance, anchors.as_ref()) {
            Ok(m) => Some(m),
            Err(e) => {
                self.manifest.warn(format!("data programming on all rows failed: {e}"));
                None
            }
        };

        let group_key = |p: TrialPhase| PhaseGroup::of(p).map_or("other", PhaseGroup::as_str);
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, p) in phases.iter().enumerate() {
            groups.entry(group_key(*p)).or_default().push(i);
        }
        let mut fitted: BTreeMap<String, DataProgrammingModel> = BTreeMap::new();
        if lm.phase_wise {
            for (g, rows) in &groups {
                if rows.len() < lm.min_rows_per_phase {
                    continue;
                }
                match fit_data_programming(&matrix.select_rows(rows), lm.class_balance, anchors.as_ref()) {
                    Ok(m) => {
                        fitted.insert(g.to_string(), m);
                    }
                    Err(e) => self
                        .manifest
                        .warn(format!("phase group {g}: {e}; using the pooled model")),
                }
            }
        }

        let mut out: Vec<Option<PosteriorLabel>> = vec![None; matrix.n_rows()];
        let mut fallback = Vec::new();
        for (g, rows) in &groups {
            let sub = matrix.select_rows(rows);
            let model = fitted.get(*g).or(pooled.as_ref());
            let labels = match model {
                Some(m) => predict_posterior(m, &sub).map_err(|e| PipelineError::stage(STAGE, e))?,
                None => {
                    fallback.push(*g);
                    predict_majority_vote(&sub, lm.undecided_default)
                }
            };
            for (r, l) in rows.iter().zip(labels) {
                out[*r] = Some(l);
            }
        }
        if !fallback.is_empty() {
            self.manifest.warn(format!(
                "no data-programming model for groups {fallback:?}; used majority vote"
            ));
        }
        let artifact = json!({
            "kind": "dp",
            "class_balance": lm.class_balance,
            "pooled": pooled,
            "phase_groups": fitted,
        });
        Ok((
            out.into_iter().map(|l| l.expect("every row labeled")).collect(),
            artifact,
        ))
    }

    fn labels(&mut self) -> Result<(Vec<PosteriorLabel>, Option<LabelMatrix>), PipelineError> {
        if self.labels.is_none() {
            match self.reusable(LABELS) {
                Some(path) => {
                    let f = fs::File::open(&path).map_err(|e| PipelineError::stage("label", e))?;
                    self.labels = Some(read_labels_csv(f).map_err(|e| PipelineError::stage("label", e))?);
                    if let Some(mp) = self.reusable(MATRIX) {
                        let f = fs::File::open(&mp).map_err(|e| PipelineError::stage("label", e))?;
                        self.matrix = Some(LabelMatrix::read_csv(f).map_err(|e| PipelineError::stage("label", e))?);
                    }
                }
                None => self.label()?,
            }
        }
        Ok((self.labels.clone().expect("labels"), self.matrix.clone()))
    }

    // ---- evaluate ----

    fn evaluate(&mut self) -> Result<(), PipelineError> {
        const STAGE: &str = "evaluate";
        let gold = self
            .gold_split(self.cfg.gold_splits.eval.clone())?
            .ok_or_else(|| PipelineError::Validation("evaluate: gold labels are required (inputs.gold)".into()))?;
        let trials = self.trials()?;
        let (labels, matrix) = self.labels()?;
        let t0 = Instant::now();
        let phases: HashMap<String, TrialPhase> = trials.iter().map(|t| (t.nct_id.clone(), t.phase)).collect();
        let options = ReportOptions {
            aggregation: self.cfg.evaluation.all_aggregation,
            phase_filter: self.cfg.phase_filter(),
        };
        let mut report = build_report(&labels, &phases, &gold, matrix.as_ref(), &options)
            .map_err(|e| PipelineError::stage(STAGE, e))?;
        report
            .metadata
            .insert("model".into(), self.cfg.label_model.model.as_str().into());
        report
            .metadata
            .insert("phase".into(), self.cfg.evaluation.phase.clone());
        report.metadata.insert(
            "gold_split".into(),
            self.cfg.gold_splits.eval.clone().unwrap_or_else(|| "all".into()),
        );
        report.metadata.insert("seed".into(), self.cfg.seed.to_string());
        let agreement = matrix.as_ref().map(lf_agreement_matrix);
        let written =
            emit_report(&report, agreement.as_ref(), &self.out).map_err(|e| PipelineError::stage(STAGE, e))?;
        for path in written {
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let digest = file_sha256(&path).map_err(|e| PipelineError::stage(STAGE, e))?;
            self.manifest.outputs.insert(name, digest);
        }
        let evaluated = report.groups.last().map_or(0, |g| g.n as usize);
        self.manifest.stage(
            STAGE,
            t0,
            &[
                ("gold", gold.len()),
                ("evaluated", evaluated),
                ("undecided_resolved", report.undecided_resolved),
            ],
        );
        Ok(())
    }
}
