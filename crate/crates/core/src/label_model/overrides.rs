use std::collections::HashMap;

use super::{LabelSource, PosteriorLabel};
use crate::lf::{lf_pvalue, lf_status};
use crate::trial::{TrialRecord, WeakLabel};

/// Rule labels win over model output: a decisive status first, then a
/// significant p-value. Everything else passes through unchanged, as do
/// labels for trials not in `trials`.
pub fn apply_rule_overrides(posteriors: Vec<PosteriorLabel>, trials: &[TrialRecord]) -> Vec<PosteriorLabel> {
    let by_id: HashMap<&str, &TrialRecord> = trials.iter().map(|t| (t.nct_id.as_str(), t)).collect();
    posteriors
        .into_iter()
        .map(|p| {
            let Some(trial) = by_id.get(p.nct_id.as_str()) else {
                return p;
            };
            let rule = match lf_status(trial) {
                WeakLabel::Abstain if lf_pvalue(trial) == WeakLabel::Success => WeakLabel::Success,
                WeakLabel::Abstain => return p,
                decisive => decisive,
            };
            let prob = if rule == WeakLabel::Success { 1.0 } else { 0.0 };
            PosteriorLabel::from_probability(p.nct_id, prob, LabelSource::Rule)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trial::{TrialPhase, TrialStatus};

    fn run(status: TrialStatus, sig: Option<bool>, p: f64) -> PosteriorLabel {
        let mut t = TrialRecord::new("T", TrialPhase::Phase3, status);
        t.metrics.has_significant_pvalue = sig;
        let post = PosteriorLabel::from_probability("T", p, LabelSource::Dp);
        apply_rule_overrides(vec![post], &[t]).remove(0)
    }

    #[test]
    fn terminated_beats_model() {
        let out = run(TrialStatus::Terminated, Some(true), 0.9);
        assert_eq!(
            (out.p_success, out.hard_label, out.source),
            (0.0, WeakLabel::Failure, LabelSource::Rule)
        );
    }

    #[test]
    fn significant_pvalue_wins_for_completed() {
        let out = run(TrialStatus::Completed, Some(true), 0.2);
        assert_eq!(
            (out.p_success, out.hard_label, out.source),
            (1.0, WeakLabel::Success, LabelSource::Rule)
        );
    }

    #[test]
    fn pass_through() {
        let out = run(TrialStatus::Completed, None, 0.2);
        assert_eq!((out.p_success, out.source), (0.2, LabelSource::Dp));
        let out = run(TrialStatus::Completed, Some(false), 0.7);
        assert_eq!((out.p_success, out.source), (0.7, LabelSource::Dp));
    }
}
