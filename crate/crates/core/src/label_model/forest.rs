//! Bagged Gini decision trees over LF outputs.
//!
//! Each LF column is an ordinal feature over `-1 < 0 < 1` (abstain,
//! failure, success) split by `value <= t`; the phase is a categorical
//! feature split by equality. Trees are grown to purity (or `max_depth`) on
//! bootstrap samples of the gold rows, drawing `⌊√features⌋` candidate
//! features per split.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LabelModelError, LabelSource, PosteriorLabel};
use crate::lf::LabelMatrix;
use crate::trial::{GoldLabelSet, TrialPhase, WeakLabel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    pub seed: u64,
    /// One forest per phase, with a pooled forest for phases that lack
    /// enough gold rows.
    pub phase_wise: bool,
    pub min_gold: usize,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            max_depth: None,
            seed: 0,
            phase_wise: false,
            min_gold: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Split {
    /// Left iff the LF code is `<= at_most`.
    Ordinal { feature: usize, at_most: i8 },
    /// Left iff the trial is in `phase`.
    Phase { phase: TrialPhase },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum TreeNode {
    Leaf {
        success: bool,
    },
    Branch {
        split: Split,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    pub fn predict(&self, row: &[WeakLabel], phase: TrialPhase) -> bool {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { success } => return *success,
                TreeNode::Branch { split, left, right } => {
                    let go_left = match split {
                        Split::Ordinal { feature, at_most } => row[*feature].code() <= *at_most,
                        Split::Phase { phase: p } => *p == phase,
                    };
                    node = if go_left { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Branch { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForestAggregator {
    pub lf_names: Vec<String>,
    pub params: ForestParams,
    /// Trained on all gold rows, with phase as a feature.
    pub pooled: Vec<TreeNode>,
    pub per_phase: BTreeMap<TrialPhase, Vec<TreeNode>>,
}

impl RandomForestAggregator {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("forest serializes")
    }

    pub fn from_json(text: &str) -> Result<RandomForestAggregator, LabelModelError> {
        Ok(serde_json::from_str(text)?)
    }
}

struct Data<'a> {
    rows: Vec<&'a [WeakLabel]>,
    phases: Vec<TrialPhase>,
    y: Vec<bool>,
}

fn gini(s: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = s as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

struct Grower<'a> {
    data: &'a Data<'a>,
    n_lf: usize,
    use_phase: bool,
    max_depth: Option<usize>,
}

impl Grower<'_> {
    fn n_features(&self) -> usize {
        self.n_lf + usize::from(self.use_phase)
    }

    fn goes_left(&self, split: &Split, i: usize) -> bool {
        match split {
            Split::Ordinal { feature, at_most } => self.data.rows[i][*feature].code() <= *at_most,
            Split::Phase { phase } => self.data.phases[i] == *phase,
        }
    }

    fn candidates(&self, feature: usize, idx: &[usize]) -> Vec<Split> {
        if feature < self.n_lf {
            vec![
                Split::Ordinal { feature, at_most: -1 },
                Split::Ordinal { feature, at_most: 0 },
            ]
        } else {
            let mut phases: Vec<TrialPhase> = idx.iter().map(|&i| self.data.phases[i]).collect();
            phases.sort();
            phases.dedup();
            phases.into_iter().map(|phase| Split::Phase { phase }).collect()
        }
    }

    /// Best split of one feature as (weighted child impurity, split).
    fn best_for(&self, feature: usize, idx: &[usize]) -> Option<(f64, Split)> {
        let mut best: Option<(f64, Split)> = None;
        for split in self.candidates(feature, idx) {
            let (mut nl, mut sl, mut nr, mut sr) = (0, 0, 0, 0);
            for &i in idx {
                let y = usize::from(self.data.y[i]);
                if self.goes_left(&split, i) {
                    nl += 1;
                    sl += y;
                } else {
                    nr += 1;
                    sr += y;
                }
            }
            if nl == 0 || nr == 0 {
                continue;
            }
            let imp = (nl as f64 * gini(sl, nl) + nr as f64 * gini(sr, nr)) / idx.len() as f64;
            if best.as_ref().is_none_or(|(b, _)| imp < *b) {
                best = Some((imp, split));
            }
        }
        best
    }

    fn grow(&self, idx: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> TreeNode {
        let s = idx.iter().filter(|&&i| self.data.y[i]).count();
        let leaf = TreeNode::Leaf {
            success: 2 * s > idx.len(),
        };
        if s == 0 || s == idx.len() || self.max_depth.is_some_and(|d| depth >= d) {
            return leaf;
        }
        let nf = self.n_features();
        let k = ((nf as f64).sqrt().floor() as usize).max(1);
        let mut best: Option<(f64, Split)> = None;
        let mut visited = 0;
        // Keep drawing past the first k features only while none of them
        // admits a split.
        for f in sample(rng, nf, nf) {
            if visited >= k && best.is_some() {
                break;
            }
            if let Some((imp, split)) = self.best_for(f, &idx) {
                visited += 1;
                if best.as_ref().is_none_or(|(b, _)| imp < *b) {
                    best = Some((imp, split));
                }
            }
        }
        let Some((_, split)) = best else {
            return leaf;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.goes_left(&split, i));
        TreeNode::Branch {
            left: Box::new(self.grow(l, depth + 1, rng)),
            right: Box::new(self.grow(r, depth + 1, rng)),
            split,
        }
    }

    fn forest(&self, rows: &[usize], params: &ForestParams, salt: u64) -> Vec<TreeNode> {
        let mut master = ChaCha8Rng::seed_from_u64(params.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        (0..params.n_trees)
            .map(|_| {
                let mut rng = ChaCha8Rng::seed_from_u64(master.gen());
                let boot: Vec<usize> = (0..rows.len()).map(|_| rows[rng.gen_range(0..rows.len())]).collect();
                self.grow(boot, 0, &mut rng)
            })
            .collect()
    }
}

fn check_gold(data: &Data, rows: &[usize], phase: &str, min: usize) -> Result<(), LabelModelError> {
    if rows.len() < min {
        return Err(LabelModelError::InsufficientGold {
            phase: phase.into(),
            rows: rows.len(),
            min,
        });
    }
    let s = rows.iter().filter(|&&i| data.y[i]).count();
    if s == 0 || s == rows.len() {
        return Err(LabelModelError::SingleClass { phase: phase.into() });
    }
    Ok(())
}

/// Fits on the rows of `matrix` that have a gold label. `phases` is aligned
/// with the matrix rows.
pub fn fit_random_forest(
    matrix: &LabelMatrix,
    phases: &[TrialPhase],
    gold: &GoldLabelSet,
    params: &ForestParams,
) -> Result<RandomForestAggregator, LabelModelError> {
    if phases.len() != matrix.n_rows() {
        return Err(LabelModelError::InvalidParams(format!(
            "{} phases for {} rows",
            phases.len(),
            matrix.n_rows()
        )));
    }
    if params.n_trees == 0 {
        return Err(LabelModelError::InvalidParams("n_trees must be positive".into()));
    }
    let mut data = Data {
        rows: Vec::new(),
        phases: Vec::new(),
        y: Vec::new(),
    };
    for (i, (id, phase)) in matrix.trial_ids.iter().zip(phases).enumerate() {
        if let Some(label) = gold.get(id) {
            data.rows.push(matrix.row(i));
            data.phases.push(*phase);
            data.y.push(label == WeakLabel::Success);
        }
    }
    let all: Vec<usize> = (0..data.y.len()).collect();
    check_gold(&data, &all, "all", params.min_gold)?;

    let n_lf = matrix.n_cols();
    let pooled = Grower {
        data: &data,
        n_lf,
        use_phase: true,
        max_depth: params.max_depth,
    }
    .forest(&all, params, 0);

    let mut per_phase = BTreeMap::new();
    if params.phase_wise {
        let mut by_phase: BTreeMap<TrialPhase, Vec<usize>> = BTreeMap::new();
        for (i, p) in data.phases.iter().enumerate() {
            by_phase.entry(*p).or_default().push(i);
        }
        let grower = Grower {
            data: &data,
            n_lf,
            use_phase: false,
            max_depth: params.max_depth,
        };
        for (phase, rows) in by_phase {
            if rows.len() < params.min_gold {
                log::warn!("{}: {} gold rows, using the pooled forest", phase.as_str(), rows.len());
                continue;
            }
            check_gold(&data, &rows, phase.as_str(), params.min_gold)?;
            let salt = phase as u64 + 1;
            per_phase.insert(phase, grower.forest(&rows, params, salt));
        }
    }
    Ok(RandomForestAggregator {
        lf_names: matrix.lf_names.clone(),
        params: params.clone(),
        pooled,
        per_phase,
    })
}

/// `p_success` is the share of trees voting SUCCESS.
pub fn predict_random_forest(
    model: &RandomForestAggregator,
    matrix: &LabelMatrix,
    phases: &[TrialPhase],
) -> Result<Vec<PosteriorLabel>, LabelModelError> {
    if model.pooled.is_empty() {
        return Err(LabelModelError::InvalidParams("random forest is not fitted".into()));
    }
    if model.lf_names != matrix.lf_names {
        return Err(LabelModelError::LfMismatch(
            "forest features differ from matrix columns".into(),
        ));
    }
    if phases.len() != matrix.n_rows() {
        return Err(LabelModelError::InvalidParams("phases not aligned with rows".into()));
    }
    let forests: HashMap<TrialPhase, &Vec<TreeNode>> = model.per_phase.iter().map(|(p, f)| (*p, f)).collect();
    Ok((0..matrix.n_rows())
        .into_par_iter()
        .map(|i| {
            let trees = forests.get(&phases[i]).copied().unwrap_or(&model.pooled);
            let yes = trees.iter().filter(|t| t.predict(matrix.row(i), phases[i])).count();
            PosteriorLabel::from_probability(
                matrix.trial_ids[i].clone(),
                yes as f64 / trees.len() as f64,
                LabelSource::Rf,
            )
        })
        .collect())
}
