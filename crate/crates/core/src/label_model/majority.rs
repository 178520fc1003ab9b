use crate::lf::LabelMatrix;
use crate::trial::WeakLabel;

use super::{LabelSource, PosteriorLabel};

/// Share of SUCCESS among non-abstaining votes. Ties and rows without any
/// vote get `p = 0.5`, are flagged undecided and take `undecided_default`.
pub fn predict_majority_vote(matrix: &LabelMatrix, undecided_default: WeakLabel) -> Vec<PosteriorLabel> {
    (0..matrix.n_rows())
        .map(|i| {
            let (mut s, mut f) = (0usize, 0usize);
            for v in matrix.row(i) {
                match v {
                    WeakLabel::Success => s += 1,
                    WeakLabel::Failure => f += 1,
                    WeakLabel::Abstain => {}
                }
            }
            let id = matrix.trial_ids[i].clone();
            if s == f {
                PosteriorLabel {
                    nct_id: id,
                    p_success: 0.5,
                    hard_label: undecided_default,
                    undecided: true,
                    source: LabelSource::Mv,
                }
            } else {
                PosteriorLabel::from_probability(id, s as f64 / (s + f) as f64, LabelSource::Mv)
            }
        })
        .collect()
}
