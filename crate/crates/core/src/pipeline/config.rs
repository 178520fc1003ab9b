use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::eval::{AllAggregation, PhaseGroup};
use crate::label_model::{AnchorSet, ForestParams};
use crate::lf::{default_catalog, LabelingFunctionSpec};
use crate::linkage::{LinkageConfig, PhaseConnectionMap};
use crate::trial::{SelectionCriteria, TrialSchema, WeakLabel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputPaths {
    pub trials: PathBuf,
    #[serde(default)]
    pub trial_schema: TrialSchema,
    #[serde(default = "comma")]
    pub delimiter: char,
    #[serde(default)]
    pub gold: Option<PathBuf>,
    #[serde(default)]
    pub news: Option<PathBuf>,
    #[serde(default)]
    pub stock: Option<PathBuf>,
    #[serde(default)]
    pub ticker_map: Option<PathBuf>,
    #[serde(default)]
    pub orange_book: Option<PathBuf>,
    #[serde(default)]
    pub llm_decisions: Option<PathBuf>,
    #[serde(default)]
    pub abstracts: Option<PathBuf>,
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
}

fn comma() -> char {
    ','
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingChoice {
    /// Built-in signed feature hashing.
    #[default]
    HashedBag,
    /// Vectors from `inputs.embeddings`.
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkageSection {
    pub phase_map: PhaseConnectionMap,
    pub embedding: EmbeddingChoice,
    pub embedding_dimension: usize,
    pub scorer_tau: f64,
    pub top_k: usize,
    pub links_per_phase: usize,
    pub fda_top_n: usize,
    pub fda_intervention_type: String,
}

impl LinkageSection {
    pub fn params(&self) -> LinkageConfig {
        LinkageConfig {
            top_k: self.top_k,
            links_per_phase: self.links_per_phase,
            fda_top_n: self.fda_top_n,
            fda_intervention_type: self.fda_intervention_type.clone(),
        }
    }
}

impl Default for LinkageSection {
    fn default() -> Self {
        let d = LinkageConfig::default();
        LinkageSection {
            phase_map: PhaseConnectionMap::default(),
            embedding: EmbeddingChoice::HashedBag,
            embedding_dimension: 256,
            scorer_tau: 0.1,
            top_k: d.top_k,
            links_per_phase: d.links_per_phase,
            fda_top_n: d.fda_top_n,
            fda_intervention_type: d.fda_intervention_type,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalSection {
    pub sma_window: usize,
    pub slope_window_days: i64,
}

impl Default for SignalSection {
    fn default() -> Self {
        SignalSection {
            sma_window: 5,
            slope_window_days: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    Mv,
    #[default]
    Dp,
    Rf,
}

impl ModelChoice {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelChoice::Mv => "mv",
            ModelChoice::Dp => "dp",
            ModelChoice::Rf => "rf",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelModelSection {
    pub model: ModelChoice,
    pub class_balance: f64,
    /// Fit one data-programming model per phase group.
    pub phase_wise: bool,
    /// Groups with fewer rows use the model fitted on all rows.
    pub min_rows_per_phase: usize,
    pub undecided_default: WeakLabel,
    pub anchors: bool,
    pub anchor_factor: usize,
    pub rule_overrides: bool,
    pub forest: ForestParams,
}

impl Default for LabelModelSection {
    fn default() -> Self {
        LabelModelSection {
            model: ModelChoice::Dp,
            class_balance: 0.5,
            phase_wise: true,
            min_rows_per_phase: 50,
            undecided_default: WeakLabel::Failure,
            anchors: false,
            anchor_factor: AnchorSet::DEFAULT_FACTOR,
            rule_overrides: true,
            forest: ForestParams::default(),
        }
    }
}

/// Which gold rows each stage may use, by provenance tag. `None` uses all.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GoldSplits {
    pub tune: Option<String>,
    pub train: Option<String>,
    pub eval: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub all_aggregation: AllAggregation,
    /// `1`, `2`, `3`, `4` or `all`.
    pub phase: String,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            all_aggregation: AllAggregation::Pooled,
            phase: "all".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub inputs: InputPaths,
    #[serde(default)]
    pub selection: SelectionCriteria,
    #[serde(default = "default_catalog")]
    pub labeling_functions: Vec<LabelingFunctionSpec>,
    /// Tune metric thresholds against gold; otherwise each spec's own quantile.
    #[serde(default = "yes")]
    pub tune_thresholds: bool,
    #[serde(default)]
    pub linkage: LinkageSection,
    #[serde(default)]
    pub signals: SignalSection,
    #[serde(default)]
    pub label_model: LabelModelSection,
    #[serde(default)]
    pub gold_splits: GoldSplits,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub seed: u64,
    /// 0 lets the thread pool decide.
    #[serde(default)]
    pub workers: usize,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
}

fn yes() -> bool {
    true
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// Values given on the command line or through the environment; they win
/// over the file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub phase: Option<String>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::Validation(format!("config: {e}")))
    }

    /// Reads the file, makes relative paths relative to its directory,
    /// applies overrides and validates.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<RunConfig, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Validation(format!("config {}: {e}", path.display())))?;
        let mut cfg = RunConfig::from_json(&text)?;
        // The forest is seeded from the run seed; a separate value would be ambiguous.
        let fs = cfg.label_model.forest.seed;
        if fs != 0 && fs != cfg.seed {
            return Err(PipelineError::Validation(
                "label_model.forest.seed: set the top-level `seed` instead".into(),
            ));
        }
        cfg.label_model.forest.seed = cfg.seed;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let i = &mut self.inputs;
        fix(&mut i.trials);
        for p in [
            &mut i.gold,
            &mut i.news,
            &mut i.stock,
            &mut i.ticker_map,
            &mut i.orange_book,
            &mut i.llm_decisions,
            &mut i.abstracts,
            &mut i.embeddings,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.output_dir);
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
        if let Some(seed) = o.seed {
            self.seed = seed;
            self.label_model.forest.seed = seed;
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        if let Some(p) = &o.phase {
            self.evaluation.phase = p.clone();
        }
    }

    /// Named input files, for existence checks and the manifest.
    pub fn input_files(&self) -> Vec<(&'static str, &Path)> {
        let i = &self.inputs;
        let mut v = vec![("inputs.trials", i.trials.as_path())];
        let opt = [
            ("inputs.gold", &i.gold),
            ("inputs.news", &i.news),
            ("inputs.stock", &i.stock),
            ("inputs.ticker_map", &i.ticker_map),
            ("inputs.orange_book", &i.orange_book),
            ("inputs.llm_decisions", &i.llm_decisions),
            ("inputs.abstracts", &i.abstracts),
            ("inputs.embeddings", &i.embeddings),
        ];
        for (k, p) in opt {
            if let Some(p) = p {
                v.push((k, p.as_path()));
            }
        }
        v
    }

    pub fn phase_filter(&self) -> Option<PhaseGroup> {
        PhaseGroup::parse(&self.evaluation.phase).filter(|g| *g != PhaseGroup::All)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Validation(m));
        for (key, path) in self.input_files() {
            if !path.is_file() {
                return bad(format!("{key}: file not found: {}", path.display()));
            }
        }
        if !self.inputs.delimiter.is_ascii() {
            return bad("inputs.delimiter: must be a single ASCII character".into());
        }
        if self.labeling_functions.is_empty() {
            return bad("labeling_functions: at least one labeling function is required".into());
        }
        let mut names = std::collections::BTreeSet::new();
        for spec in &self.labeling_functions {
            spec.validate()
                .map_err(|e| PipelineError::Validation(format!("labeling_functions: {e}")))?;
            if !names.insert(spec.name.as_str()) {
                return bad(format!("labeling_functions: duplicate name `{}`", spec.name));
            }
        }
        self.linkage
            .phase_map
            .validate()
            .map_err(|e| PipelineError::Validation(format!("linkage.phase_map: {e}")))?;
        if self.linkage.embedding == EmbeddingChoice::External && self.inputs.embeddings.is_none() {
            return bad("linkage.embedding: `external` needs inputs.embeddings".into());
        }
        if self.linkage.embedding_dimension == 0 {
            return bad("linkage.embedding_dimension: must be positive".into());
        }
        if self.linkage.top_k == 0 || self.linkage.links_per_phase == 0 || self.linkage.fda_top_n == 0 {
            return bad("linkage: top_k and links_per_phase must be positive".into());
        }
        if self.signals.sma_window == 0 || self.signals.slope_window_days < 1 {
            return bad("signals: sma_window and slope_window_days must be positive".into());
        }
        let lm = &self.label_model;
        if !(lm.class_balance > 0.0 && lm.class_balance < 1.0) {
            return bad(format!(
                "label_model.class_balance: {} is not in (0, 1)",
                lm.class_balance
            ));
        }
        if !lm.undecided_default.is_vote() {
            return bad("label_model.undecided_default: must be SUCCESS or FAILURE".into());
        }
        if lm.anchor_factor == 0 {
            return bad("label_model.anchor_factor: must be >= 1".into());
        }
        if lm.forest.n_trees == 0 {
            return bad("label_model.forest.n_trees: must be positive".into());
        }
        if PhaseGroup::parse(&self.evaluation.phase).is_none() {
            return bad(format!(
                "evaluation.phase: `{}` is not one of 1, 2, 3, 4, all",
                self.evaluation.phase
            ));
        }
        Ok(())
    }

    /// Canonical JSON of the effective configuration.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_trials_names_the_key() {
        let err = RunConfig::from_json(r#"{"inputs": {}}"#).unwrap_err();
        assert!(err.to_string().contains("trials"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"inputs": {"trials": "t.csv"}, "colour": 1}"#).unwrap_err();
        assert!(err.to_string().contains("colour"));
        let err =
            RunConfig::from_json(r#"{"inputs": {"trials": "t.csv"}, "label_model": {"modle": "dp"}}"#).unwrap_err();
        assert!(err.to_string().contains("modle"));
    }

    #[test]
    fn defaults_and_overrides() {
        let mut cfg = RunConfig::from_json(r#"{"inputs": {"trials": "t.csv"}, "seed": 4}"#).unwrap();
        assert_eq!(cfg.label_model.model, ModelChoice::Dp);
        assert_eq!(cfg.labeling_functions.len(), 16);
        assert_eq!(cfg.linkage.top_k, 32);
        cfg.rebase(Path::new("/data"));
        assert_eq!(cfg.inputs.trials, PathBuf::from("/data/t.csv"));
        cfg.apply(&Overrides {
            seed: Some(9),
            phase: Some("3".into()),
            ..Default::default()
        });
        assert_eq!((cfg.seed, cfg.label_model.forest.seed), (9, 9));
        assert_eq!(cfg.phase_filter(), Some(PhaseGroup::III));
    }

    #[test]
    fn validation_checks_files() {
        let cfg = RunConfig::from_json(r#"{"inputs": {"trials": "/nonexistent/t.csv"}}"#).unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("inputs.trials"));
    }

    #[test]
    fn forest_follows_the_run_seed() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("t.csv"), "").unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"inputs": {"trials": "t.csv"}, "seed": 4}"#).unwrap();
        let cfg = RunConfig::load(&path, &Overrides::default()).unwrap();
        assert_eq!(cfg.label_model.forest.seed, 4);
        let o = Overrides {
            seed: Some(9),
            ..Overrides::default()
        };
        assert_eq!(RunConfig::load(&path, &o).unwrap().label_model.forest.seed, 9);

        let conflicting = r#"{"inputs": {"trials": "t.csv"}, "seed": 4, "label_model": {"forest": {"seed": 5}}}"#;
        std::fs::write(&path, conflicting).unwrap();
        let err = RunConfig::load(&path, &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("forest.seed"), "{err}");
    }
}
