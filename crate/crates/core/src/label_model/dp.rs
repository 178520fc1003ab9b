//! Matrix-completion data programming for conditionally independent LFs.
//!
//! Each LF contributes up to two indicator columns to ψ (votes SUCCESS,
//! votes FAILURE; abstain is all zero). With a single latent Y the inverse
//! covariance of ψ satisfies `Σ_O⁻¹ + z zᵀ = K_O`, and under conditional
//! independence `K_O` vanishes on every pair of columns belonging to
//! different LFs. `z` is therefore the rank-one factor of `−Σ_O⁻¹`
//! restricted to those off-block entries, from which `Cov(ψ, Y)` and then
//! per-LF accuracies follow.
//!
//! Columns that are constant, or that are the exact complement of the
//! SUCCESS column (an LF that never abstains), are left out of ψ so the
//! representation stays minimal; their covariance with Y is implied.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AnchorSet, LabelModelError, LabelSource, PosteriorLabel};
use crate::lf::LabelMatrix;
use crate::trial::WeakLabel;

/// Ridge added to Σ_O when it is not numerically positive definite.
pub const RIDGE_EPSILON: f64 = 1e-6;
const MU_FLOOR: f64 = 1e-4;
const HARD_IMPUTE_ITERS: usize = 100;
const ALS_SWEEPS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataProgrammingModel {
    pub lf_names: Vec<String>,
    /// P(λ_i = Y | λ_i votes); 0.5 for LFs that never voted during fitting.
    pub mu: Vec<f64>,
    pub class_balance: f64,
    /// Always true: LF dependencies are not modeled.
    pub conditional_independence: bool,
    /// Replication factor of the anchor columns, when anchors were used.
    pub anchor_factor: Option<usize>,
    pub anchor_mu: Option<f64>,
    /// Σ_O was regularized before inversion.
    pub ridge: bool,
}

impl DataProgrammingModel {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<DataProgrammingModel, LabelModelError> {
        let m: DataProgrammingModel = serde_json::from_str(text)?;
        if m.mu.len() != m.lf_names.len() {
            return Err(LabelModelError::LfMismatch(format!(
                "{} accuracies for {} LFs",
                m.mu.len(),
                m.lf_names.len()
            )));
        }
        if !(m.class_balance > 0.0 && m.class_balance < 1.0) {
            return Err(LabelModelError::InvalidBalance(m.class_balance));
        }
        if let Some(bad) = m.mu.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(LabelModelError::InvalidParams(format!("accuracy {bad} not in (0, 1)")));
        }
        Ok(m)
    }
}

/// One LF-like column entering the fit.
struct Source {
    group: usize,
    votes: Vec<WeakLabel>,
}

/// Per-source bookkeeping after building ψ.
struct SourceCols {
    e_s: f64,
    e_f: f64,
    full: bool,
    s_col: Option<usize>,
    f_col: Option<usize>,
}

struct Psi {
    n: usize,
    groups: Vec<usize>,
    means: Vec<f64>,
    /// Active ψ indices per row.
    active: Vec<Vec<usize>>,
    sources: Vec<SourceCols>,
}

fn build_psi(sources: &[Source], n: usize) -> Psi {
    let mut groups = Vec::new();
    let mut means = Vec::new();
    let mut active = vec![Vec::new(); n];
    let mut cols = Vec::with_capacity(sources.len());
    let nf = n as f64;
    for src in sources {
        let n_s = src.votes.iter().filter(|v| **v == WeakLabel::Success).count();
        let n_f = src.votes.iter().filter(|v| **v == WeakLabel::Failure).count();
        let full = n_s + n_f == n;
        let mut add = |label: WeakLabel, count: usize| {
            let idx = groups.len();
            groups.push(src.group);
            means.push(count as f64 / nf);
            for (row, v) in src.votes.iter().enumerate() {
                if *v == label {
                    active[row].push(idx);
                }
            }
            idx
        };
        let s_col = (n_s > 0 && n_s < n).then(|| add(WeakLabel::Success, n_s));
        let f_col = (n_f > 0 && n_f < n && !full).then(|| add(WeakLabel::Failure, n_f));
        cols.push(SourceCols {
            e_s: n_s as f64 / nf,
            e_f: n_f as f64 / nf,
            full,
            s_col,
            f_col,
        });
    }
    Psi {
        n,
        groups,
        means,
        active,
        sources: cols,
    }
}

fn covariance(psi: &Psi) -> DMatrix<f64> {
    let d = psi.means.len();
    let mut co = DMatrix::<f64>::zeros(d, d);
    for row in &psi.active {
        for &a in row {
            for &b in row {
                co[(a, b)] += 1.0;
            }
        }
    }
    let nf = psi.n as f64;
    DMatrix::from_fn(d, d, |a, b| co[(a, b)] / nf - psi.means[a] * psi.means[b])
}

/// Cholesky with a relative pivot check.
fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    let scale = m.diagonal().max();
    if scale <= 0.0 {
        return false;
    }
    match m.clone().cholesky() {
        Some(ch) => ch.l().diagonal().iter().all(|l| l * l > 1e-10 * scale),
        None => false,
    }
}

/// Least-squares rank-one fit `z zᵀ ≈ M` on entries with differing groups:
/// hard-impute on the leading eigenpair for a start, then exact
/// coordinate-wise minimization.
fn rank_one_offblock(m: &DMatrix<f64>, groups: &[usize]) -> DVector<f64> {
    let d = m.nrows();
    let off = |a: usize, b: usize| groups[a] != groups[b];
    let mut filled = DMatrix::from_fn(d, d, |a, b| if off(a, b) { m[(a, b)] } else { 0.0 });
    let mut z = DVector::<f64>::zeros(d);
    for _ in 0..HARD_IMPUTE_ITERS {
        let eig = SymmetricEigen::new(filled.clone());
        let (k, lambda) =
            eig.eigenvalues.iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |best, (i, &v)| if v > best.1 { (i, v) } else { best },
            );
        let next = eig.eigenvectors.column(k) * lambda.max(0.0).sqrt();
        let moved = (&next - &z).amax().min((&next + &z).amax());
        z = next;
        for a in 0..d {
            for b in 0..d {
                if !off(a, b) {
                    filled[(a, b)] = z[a] * z[b];
                }
            }
        }
        if moved < 1e-12 {
            break;
        }
    }
    for _ in 0..ALS_SWEEPS {
        let mut delta: f64 = 0.0;
        for a in 0..d {
            let (mut num, mut den) = (0.0, RIDGE_EPSILON);
            for b in 0..d {
                if off(a, b) {
                    num += m[(a, b)] * z[b];
                    den += z[b] * z[b];
                }
            }
            let next = num / den;
            delta = delta.max((next - z[a]).abs());
            z[a] = next;
        }
        if delta < 1e-13 * (1.0 + z.amax()) {
            break;
        }
    }
    z
}

/// Accuracies implied by `z`, one per source.
fn accuracies(psi: &Psi, sigma: &DMatrix<f64>, z: &DVector<f64>, balance: f64) -> Vec<f64> {
    let sigma_s = balance * (1.0 - balance);
    let c = (1.0 + z.dot(&(sigma * z))) / sigma_s;
    let cov_y = sigma * z / c.sqrt();
    psi.sources
        .iter()
        .map(|s| {
            let cov_s = s.s_col.map_or(0.0, |i| cov_y[i]);
            let cov_f = match s.f_col {
                Some(i) => cov_y[i],
                None if s.full => -cov_s,
                None => 0.0,
            };
            let agree = cov_s + s.e_s * balance + s.e_f * (1.0 - balance) - cov_f;
            agree / (s.e_s + s.e_f)
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Fits per-LF accuracies. LFs that never vote are excluded from the fit
/// and get μ = 0.5. Anchor labels, if given, enter as `factor` identical
/// extra columns that are treated as a single source.
pub fn fit_data_programming(
    matrix: &LabelMatrix,
    class_balance: f64,
    anchors: Option<&AnchorSet>,
) -> Result<DataProgrammingModel, LabelModelError> {
    if !(class_balance > 0.0 && class_balance < 1.0) {
        return Err(LabelModelError::InvalidBalance(class_balance));
    }
    let n = matrix.n_rows();
    let m = matrix.n_cols();
    let coverage = matrix.coverage();
    let covered: Vec<usize> = (0..m).filter(|&j| coverage[j] > 0.0).collect();
    if covered.len() < 3 {
        return Err(LabelModelError::TooFewLfs { covered: covered.len() });
    }

    let mut sources: Vec<Source> = covered
        .iter()
        .map(|&j| Source {
            group: j,
            votes: matrix.column(j),
        })
        .collect();
    let anchor_votes: Option<(Vec<WeakLabel>, usize)> = anchors.and_then(|a| {
        let votes: Vec<WeakLabel> = matrix
            .trial_ids
            .iter()
            .map(|id| a.gold.get(id).unwrap_or(WeakLabel::Abstain))
            .collect();
        if votes.iter().any(|v| v.is_vote()) {
            Some((votes, a.factor))
        } else {
            log::warn!("no anchor label matches a matrix row; fitting without anchors");
            None
        }
    });
    if let Some((votes, factor)) = &anchor_votes {
        for _ in 0..*factor {
            sources.push(Source {
                group: m,
                votes: votes.clone(),
            });
        }
    }

    let psi = build_psi(&sources, n);
    let informative: std::collections::BTreeSet<usize> = psi.groups.iter().copied().collect();
    let lf_groups = informative.iter().filter(|g| **g < m).count();
    if informative.len() < 3 {
        return Err(LabelModelError::TooFewLfs { covered: lf_groups });
    }

    let sigma = covariance(&psi);
    // Replicated anchor columns are singular by construction; judge the
    // data itself on the matrix without the copies.
    let first_copy_end = psi.sources[..covered.len() + usize::from(anchor_votes.is_some())]
        .iter()
        .flat_map(|s| s.s_col.into_iter().chain(s.f_col))
        .max()
        .map_or(0, |i| i + 1);
    let base = sigma.view((0, 0), (first_copy_end, first_copy_end)).into_owned();
    let singular = !is_positive_definite(&base);
    let replicated = anchor_votes.as_ref().is_some_and(|(_, f)| *f > 1);
    let ridge = singular || replicated;
    if singular {
        log::warn!("LF covariance is singular; using ridge-regularized inverse (eps = {RIDGE_EPSILON})");
    }
    let sigma_used = if ridge {
        &sigma + DMatrix::<f64>::identity(sigma.nrows(), sigma.ncols()) * RIDGE_EPSILON
    } else {
        sigma.clone()
    };
    let inv = match sigma_used.clone().cholesky() {
        Some(ch) if !ridge => ch.inverse(),
        _ => sigma_used
            .clone()
            .try_inverse()
            .ok_or_else(|| LabelModelError::InvalidParams("covariance could not be inverted".into()))?,
    };
    let target = -inv;
    let z = rank_one_offblock(&target, &psi.groups);

    let n_lf = covered.len();
    let plus = accuracies(&psi, &sigma_used, &z, class_balance);
    let minus = accuracies(&psi, &sigma_used, &(-&z), class_balance);
    let mut mu_src = if mean(&plus[..n_lf]) >= mean(&minus[..n_lf]) {
        plus
    } else {
        minus
    };
    for v in mu_src.iter_mut() {
        *v = if v.is_finite() {
            v.clamp(MU_FLOOR, 1.0 - MU_FLOOR)
        } else {
            0.5
        };
    }

    let mut mu = vec![0.5; m];
    for (k, &j) in covered.iter().enumerate() {
        mu[j] = mu_src[k];
    }
    let anchor_mu = anchor_votes.as_ref().map(|_| mean(&mu_src[n_lf..]));
    Ok(DataProgrammingModel {
        lf_names: matrix.lf_names.clone(),
        mu,
        class_balance,
        conditional_independence: true,
        anchor_factor: anchor_votes.map(|(_, f)| f),
        anchor_mu,
        ridge,
    })
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Naive-Bayes posterior `P(Y = SUCCESS | λ)` per row, in log-odds space.
/// Matrix columns are matched to the model by LF name.
pub fn predict_posterior(
    model: &DataProgrammingModel,
    matrix: &LabelMatrix,
) -> Result<Vec<PosteriorLabel>, LabelModelError> {
    if matrix.n_cols() != model.lf_names.len() {
        return Err(LabelModelError::LfMismatch(format!(
            "matrix has {} LFs, model {}",
            matrix.n_cols(),
            model.lf_names.len()
        )));
    }
    let weights: Vec<f64> = matrix
        .lf_names
        .iter()
        .map(|name| {
            model
                .lf_names
                .iter()
                .position(|n| n == name)
                .map(|k| logit(model.mu[k]))
                .ok_or_else(|| LabelModelError::LfMismatch(format!("{name} not in model")))
        })
        .collect::<Result<_, _>>()?;
    let prior = logit(model.class_balance);
    Ok((0..matrix.n_rows())
        .into_par_iter()
        .map(|i| {
            let x = matrix.row(i).iter().zip(&weights).fold(prior, |acc, (v, w)| match v {
                WeakLabel::Success => acc + w,
                WeakLabel::Failure => acc - w,
                WeakLabel::Abstain => acc,
            });
            PosteriorLabel::from_probability(matrix.trial_ids[i].clone(), logistic(x), LabelSource::Dp)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label_model::synthetic::{generate, SyntheticSpec};
    use crate::trial::GoldLabelSet;
    use proptest::prelude::*;

    fn model(mu: Vec<f64>, balance: f64) -> DataProgrammingModel {
        DataProgrammingModel {
            lf_names: (0..mu.len()).map(|j| format!("lf{j}")).collect(),
            mu,
            class_balance: balance,
            conditional_independence: true,
            anchor_factor: None,
            anchor_mu: None,
            ridge: false,
        }
    }

    /// Exhaustive grid maximum likelihood for three fully covering LFs.
    fn mle_grid(matrix: &LabelMatrix) -> [f64; 3] {
        let mut counts = [0usize; 8];
        for i in 0..matrix.n_rows() {
            let r = matrix.row(i);
            let k = (0..3)
                .map(|j| usize::from(r[j] == WeakLabel::Success) << j)
                .sum::<usize>();
            counts[k] += 1;
        }
        let grid: Vec<f64> = (50..100).map(|v| f64::from(v) / 100.0).collect();
        let mut best = (f64::NEG_INFINITY, [0.0; 3]);
        for &a in &grid {
            for &b in &grid {
                for &c in &grid {
                    let acc = [a, b, c];
                    let ll: f64 = (0..8)
                        .map(|k| {
                            let (mut p1, mut p0) = (0.5, 0.5);
                            for (j, &aj) in acc.iter().enumerate() {
                                let s = (k >> j) & 1 == 1;
                                p1 *= if s { aj } else { 1.0 - aj };
                                p0 *= if s { 1.0 - aj } else { aj };
                            }
                            counts[k] as f64 * (p1 + p0).ln()
                        })
                        .sum();
                    if ll > best.0 {
                        best = (ll, acc);
                    }
                }
            }
        }
        best.1
    }

    #[test]
    fn recovers_three_full_coverage_lfs() {
        let truth = [0.9, 0.7, 0.6];
        let (m, _) = generate(&SyntheticSpec::new(10_000, truth.to_vec(), vec![1.0; 3], 0.5, 7));
        let fit = fit_data_programming(&m, 0.5, None).unwrap();
        assert!(!fit.ridge);
        let mle = mle_grid(&m);
        for j in 0..3 {
            assert!(
                (fit.mu[j] - truth[j]).abs() < 0.05,
                "lf{j}: {} vs {}",
                fit.mu[j],
                truth[j]
            );
            assert!(
                (fit.mu[j] - mle[j]).abs() < 0.02,
                "lf{j}: {} vs mle {}",
                fit.mu[j],
                mle[j]
            );
        }
    }

    #[test]
    fn recovers_partial_coverage() {
        let truth = vec![0.85, 0.65, 0.75, 0.9, 0.6];
        let (m, _) = generate(&SyntheticSpec::new(
            20_000,
            truth.clone(),
            vec![0.5, 0.8, 0.4, 0.6, 0.9],
            0.5,
            3,
        ));
        let fit = fit_data_programming(&m, 0.5, None).unwrap();
        for (a, b) in fit.mu.iter().zip(&truth) {
            assert!((a - b).abs() < 0.05, "{a} vs {b}");
        }
    }

    #[test]
    fn two_lfs_is_an_error() {
        let (m, _) = generate(&SyntheticSpec::new(500, vec![0.8, 0.7], vec![1.0; 2], 0.5, 1));
        assert!(matches!(
            fit_data_programming(&m, 0.5, None),
            Err(LabelModelError::TooFewLfs { covered: 2 })
        ));
        let (mut m, _) = generate(&SyntheticSpec::new(500, vec![0.8, 0.7], vec![1.0; 2], 0.5, 1));
        m.push_column("silent", &vec![WeakLabel::Abstain; 500]).unwrap();
        assert!(fit_data_programming(&m, 0.5, None).is_err());
    }

    #[test]
    fn bad_balance_is_an_error() {
        let (m, _) = generate(&SyntheticSpec::new(100, vec![0.8; 3], vec![1.0; 3], 0.5, 1));
        assert!(fit_data_programming(&m, 0.0, None).is_err());
        assert!(fit_data_programming(&m, 1.0, None).is_err());
    }

    #[test]
    fn identical_columns_take_ridge_path() {
        let (base, _) = generate(&SyntheticSpec::new(2_000, vec![0.8], vec![0.7], 0.5, 5));
        let col = base.column(0);
        let mut m = base.clone();
        m.push_column("copy1", &col).unwrap();
        m.push_column("copy2", &col).unwrap();
        let fit = fit_data_programming(&m, 0.5, None).unwrap();
        assert!(fit.ridge);
        assert!(fit.mu.iter().all(|v| *v > 0.0 && *v < 1.0));
        for p in predict_posterior(&fit, &m).unwrap() {
            assert!(p.p_success.is_finite() && (0.0..=1.0).contains(&p.p_success));
        }
    }

    #[test]
    fn closed_form_cases() {
        let m = LabelMatrix::from_codes(&[vec![1], vec![-1], vec![0]]).unwrap();
        let out = predict_posterior(&model(vec![0.9], 0.5), &m).unwrap();
        assert!((out[0].p_success - 0.9).abs() < 1e-15);
        assert_eq!(out[1].p_success, 0.5);
        assert!((out[2].p_success - 0.1).abs() < 1e-15);
        let out = predict_posterior(&model(vec![0.9], 0.3), &m).unwrap();
        assert!((out[1].p_success - 0.3).abs() < 1e-15);
    }

    #[test]
    fn mismatched_lfs_rejected() {
        let m = LabelMatrix::from_codes(&[vec![1, 0]]).unwrap();
        assert!(predict_posterior(&model(vec![0.9], 0.5), &m).is_err());
    }

    #[test]
    fn anchors_enter_as_one_source() {
        let (m, truth) = generate(&SyntheticSpec::new(
            5_000,
            vec![0.8, 0.7, 0.65],
            vec![0.9, 0.9, 0.9],
            0.5,
            11,
        ));
        let mut gold = GoldLabelSet::new();
        for i in (0..m.n_rows()).step_by(10) {
            gold.insert(m.trial_ids[i].clone(), truth[i], "top");
        }
        let anchors = AnchorSet::new(gold, 3).unwrap();
        let fit = fit_data_programming(&m, 0.5, Some(&anchors)).unwrap();
        assert_eq!(fit.anchor_factor, Some(3));
        assert!(fit.anchor_mu.unwrap() > 0.95);
        assert_eq!(fit.mu.len(), 3);
        for (a, b) in fit.mu.iter().zip([0.8, 0.7, 0.65]) {
            assert!((a - b).abs() < 0.05, "{a} vs {b}");
        }
    }

    #[test]
    fn json_roundtrip() {
        let (m, _) = generate(&SyntheticSpec::new(1_000, vec![0.8, 0.7, 0.9], vec![0.6; 3], 0.5, 2));
        let fit = fit_data_programming(&m, 0.5, None).unwrap();
        assert_eq!(DataProgrammingModel::from_json(&fit.to_json()).unwrap(), fit);
        assert!(DataProgrammingModel::from_json(r#"{"lf_names":["a"],"mu":[1.5],"class_balance":0.5,"conditional_independence":true,"anchor_factor":null,"anchor_mu":null,"ridge":false}"#).is_err());
    }

    #[test]
    fn silent_column_changes_nothing() {
        let (m, _) = generate(&SyntheticSpec::new(
            3_000,
            vec![0.8, 0.7, 0.9, 0.6],
            vec![0.6; 4],
            0.5,
            9,
        ));
        let fit = fit_data_programming(&m, 0.5, None).unwrap();
        let before = predict_posterior(&fit, &m).unwrap();
        let mut wide = m.clone();
        wide.push_column("silent", &vec![WeakLabel::Abstain; m.n_rows()])
            .unwrap();
        let fit2 = fit_data_programming(&wide, 0.5, None).unwrap();
        assert_eq!(&fit2.mu[..4], &fit.mu[..]);
        assert_eq!(predict_posterior(&fit2, &wide).unwrap(), before);
    }

    #[test]
    fn flipping_all_columns_flips_labels() {
        let (m, _) = generate(&SyntheticSpec::new(
            4_000,
            vec![0.85, 0.7, 0.75, 0.65],
            vec![0.7; 4],
            0.5,
            4,
        ));
        let flipped_vals: Vec<WeakLabel> = (0..m.n_rows())
            .flat_map(|i| m.row(i).iter().map(|v| v.flipped()))
            .collect();
        let flipped = LabelMatrix::new(m.trial_ids.clone(), m.lf_names.clone(), flipped_vals).unwrap();
        let a = fit_data_programming(&m, 0.5, None).unwrap();
        let b = fit_data_programming(&flipped, 0.5, None).unwrap();
        assert!(a.mu.iter().sum::<f64>() / 4.0 >= 0.5);
        assert!(b.mu.iter().sum::<f64>() / 4.0 >= 0.5);
        let pa = predict_posterior(&a, &m).unwrap();
        let pb = predict_posterior(&b, &flipped).unwrap();
        for (x, y) in pa.iter().zip(&pb) {
            if (x.p_success - 0.5).abs() > 1e-9 {
                assert_eq!(x.hard_label, y.hard_label.flipped());
            }
        }
    }

    proptest! {
        #[test]
        fn posterior_bounded_and_permutation_invariant(
            mu in prop::collection::vec(0.01f64..0.99, 1..6),
            balance in 0.05f64..0.95,
            rows in prop::collection::vec(prop::collection::vec(-1i8..=1, 6), 1..20),
            rot in 0usize..6,
        ) {
            let k = mu.len();
            let rows: Vec<Vec<i8>> = rows.into_iter().map(|r| r[..k].to_vec()).collect();
            let mat = LabelMatrix::from_codes(&rows).unwrap();
            let md = model(mu.clone(), balance);
            let out = predict_posterior(&md, &mat).unwrap();
            for p in &out {
                prop_assert!((0.0..=1.0).contains(&p.p_success));
                prop_assert_eq!(p.hard_label == WeakLabel::Success, p.p_success >= 0.5);
            }
            let perm: Vec<usize> = (0..k).map(|j| (j + rot) % k).collect();
            let permuted = mat.select_columns(&perm);
            let out2 = predict_posterior(&md, &permuted).unwrap();
            for (a, b) in out.iter().zip(&out2) {
                prop_assert!((a.p_success - b.p_success).abs() <= 1e-12);
            }
        }
    }
}
