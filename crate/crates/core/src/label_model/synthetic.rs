//! Label matrices drawn from a known conditionally independent model, for
//! benchmarking aggregators against ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::lf::LabelMatrix;
use crate::trial::WeakLabel;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    /// P(vote = Y | vote) per LF.
    pub accuracies: Vec<f64>,
    /// P(vote) per LF.
    pub coverages: Vec<f64>,
    pub balance: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(n: usize, accuracies: Vec<f64>, coverages: Vec<f64>, balance: f64, seed: u64) -> Self {
        assert_eq!(accuracies.len(), coverages.len());
        SyntheticSpec {
            n,
            accuracies,
            coverages,
            balance,
            seed,
        }
    }
}

/// Returns the matrix (rows `syn0..`, columns `lf0..`) and the true labels.
pub fn generate(spec: &SyntheticSpec) -> (LabelMatrix, Vec<WeakLabel>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let m = spec.accuracies.len();
    let mut truth = Vec::with_capacity(spec.n);
    let mut values = Vec::with_capacity(spec.n * m);
    for _ in 0..spec.n {
        let y = WeakLabel::from_bool(rng.gen::<f64>() < spec.balance);
        truth.push(y);
        for j in 0..m {
            let covered = rng.gen::<f64>() < spec.coverages[j];
            let correct = rng.gen::<f64>() < spec.accuracies[j];
            values.push(match (covered, correct) {
                (false, _) => WeakLabel::Abstain,
                (true, true) => y,
                (true, false) => y.flipped(),
            });
        }
    }
    let matrix = LabelMatrix::new(
        (0..spec.n).map(|i| format!("syn{i}")).collect(),
        (0..m).map(|j| format!("lf{j}")).collect(),
        values,
    )
    .expect("shape matches");
    (matrix, truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empirical_rates_match_spec() {
        let (m, truth) = generate(&SyntheticSpec::new(20_000, vec![0.8, 0.6], vec![0.5, 1.0], 0.3, 1));
        let pos = truth.iter().filter(|y| **y == WeakLabel::Success).count() as f64 / 20_000.0;
        assert!((pos - 0.3).abs() < 0.02);
        let cov = m.coverage();
        assert!((cov[0] - 0.5).abs() < 0.02 && cov[1] == 1.0);
        let col = m.column(0);
        let (hit, seen) = col
            .iter()
            .zip(&truth)
            .filter(|(v, _)| v.is_vote())
            .fold((0, 0), |(h, s), (v, y)| (h + usize::from(v == y), s + 1));
        assert!((hit as f64 / seen as f64 - 0.8).abs() < 0.02);
    }

    #[test]
    fn seeded() {
        let s = SyntheticSpec::new(50, vec![0.7; 3], vec![0.5; 3], 0.5, 42);
        assert_eq!(generate(&s), generate(&s));
    }
}
