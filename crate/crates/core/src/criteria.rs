//! Extended BIC, the size-based model prior, and the cross-validation and
//! stability-selection baselines.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::family::{Dataset, Design, SupportSet};
use crate::fit::{fit_mle, FitOptions, FittedModel};
use crate::path::{lasso_path, PathOptions};
use crate::seed::{rng, task_rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub support: SupportSet,
    /// `−2·log_lik + penalty_n + penalty_p`.
    pub ebic: f64,
    pub log_lik: f64,
    /// `|J|·ln n`
    pub penalty_n: f64,
    /// `2γ|J|·ln p`
    pub penalty_p: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub gamma: f64,
    /// Largest model size with positive prior mass.
    pub q_cap: usize,
}

/// Scores a converged fit. The intercept is never counted in `|J|`.
pub fn ebic_score(fit: &FittedModel, n: usize, p: usize, gamma: f64) -> Result<ModelScore> {
    if !fit.converged {
        return Err(Error::UnconvergedFit);
    }
    if n == 0 || p == 0 || !(gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "ebic needs n, p >= 1 and gamma >= 0 (n={n}, p={p}, gamma={gamma})"
        )));
    }
    let k = fit.support.len() as f64;
    let penalty_n = k * (n as f64).ln();
    let penalty_p = 2.0 * gamma * k * (p as f64).ln();
    Ok(ModelScore {
        support: fit.support.clone(),
        ebic: -2.0 * fit.log_lik + penalty_n + penalty_p,
        log_lik: fit.log_lik,
        penalty_n,
        penalty_p,
        gamma,
    })
}

/// `ln C(p, k)` through the log-gamma function.
pub fn ln_binomial(p: usize, k: usize) -> f64 {
    if k == 0 || k == p {
        return 0.0;
    }
    let (p, k) = (p as f64, k as f64);
    ln_gamma(p + 1.0) - ln_gamma(k + 1.0) - ln_gamma(p - k + 1.0)
}

/// Unnormalized `ln P(J) = −γ ln C(p, |J|)`, or `−∞` beyond the size cap.
pub fn log_model_prior(p: usize, j_size: usize, spec: &PriorSpec) -> f64 {
    if j_size > spec.q_cap || j_size > p {
        return f64::NEG_INFINITY;
    }
    if spec.gamma == 0.0 {
        return 0.0;
    }
    -spec.gamma * ln_binomial(p, j_size)
}

/// NaN sorts as +∞ so it can never win.
fn cmp_loss(a: f64, b: f64) -> Ordering {
    let a = if a.is_nan() { f64::INFINITY } else { a };
    let b = if b.is_nan() { f64::INFINITY } else { b };
    a.partial_cmp(&b).unwrap_or(Ordering::Equal)
}

/// Index of the smallest loss; ties go to the smaller, then lexicographically
/// smaller, support.
pub(crate) fn argmin_index<'a, I>(items: I) -> Option<usize>
where
    I: IntoIterator<Item = (f64, &'a SupportSet)>,
{
    items
        .into_iter()
        .enumerate()
        .min_by(|(_, (la, sa)), (_, (lb, sb))| cmp_loss(*la, *lb).then_with(|| sa.canonical_cmp(sb)))
        .map(|(i, _)| i)
}

pub fn select_best(scores: &[ModelScore]) -> Result<SupportSet> {
    argmin_index(scores.iter().map(|s| (s.ebic, &s.support)))
        .map(|i| scores[i].support.clone())
        .ok_or(Error::EmptyCandidates)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub support: SupportSet,
    /// Average held-out deviance per candidate, `+∞` where a fold failed.
    pub mean_loss: Vec<f64>,
}

/// Row indices for each of `k` folds from a seeded shuffle; sizes differ by at most one.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng(seed));
    let mut folds = vec![Vec::new(); k];
    for (pos, i) in order.into_iter().enumerate() {
        folds[pos % k].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    folds
}

/// Mean negative log-likelihood of `fit` on `data`.
pub fn predictive_deviance(data: &Dataset, fit: &FittedModel) -> f64 {
    let design = Design::new(data, &fit.support, fit.intercept.is_some());
    -design.log_likelihood(&fit.params()) / data.n() as f64
}

/// k-fold cross-validation over a fixed candidate list, scored by held-out
/// deviance.
pub fn cross_validate(
    data: &Dataset,
    candidates: &[SupportSet],
    k: usize,
    seed: u64,
    opts: &FitOptions,
) -> Result<CrossValidation> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if k < 2 || data.n() < k {
        return Err(Error::InvalidArgument(format!(
            "cross-validation needs 2 <= k <= n (k={k}, n={})",
            data.n()
        )));
    }
    let folds = fold_assignment(data.n(), k, seed);
    let per_fold: Vec<Vec<f64>> = folds
        .par_iter()
        .map(|test_rows| {
            let mut in_test = vec![false; data.n()];
            test_rows.iter().for_each(|&i| in_test[i] = true);
            let train_rows: Vec<usize> = (0..data.n()).filter(|&i| !in_test[i]).collect();
            let train = data.subset_rows(&train_rows);
            let test = data.subset_rows(test_rows);
            candidates
                .iter()
                .map(|s| match fit_mle(&train, s, opts) {
                    Ok(fit) => predictive_deviance(&test, &fit),
                    Err(_) => f64::INFINITY,
                })
                .collect()
        })
        .collect();
    let mean_loss: Vec<f64> = (0..candidates.len())
        .map(|c| per_fold.iter().map(|f| f[c]).sum::<f64>() / k as f64)
        .collect();
    let best = argmin_index(mean_loss.iter().copied().zip(candidates)).expect("nonempty");
    Ok(CrossValidation {
        support: candidates[best].clone(),
        mean_loss,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StabilityOptions {
    pub n_subsamples: usize,
    pub subsample_frac: f64,
    /// Target support size `q` on each subsample path.
    pub expected_q: usize,
    pub threshold: f64,
}

impl Default for StabilityOptions {
    fn default() -> Self {
        StabilityOptions {
            n_subsamples: 100,
            subsample_frac: 0.5,
            expected_q: 10,
            threshold: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilitySelection {
    pub support: SupportSet,
    /// Selection frequency of each covariate over the successful subsamples.
    pub frequencies: Vec<f64>,
    pub failed_subsamples: usize,
}

/// Subsample, run the lasso path, and keep the support at the first penalty
/// where it reaches `expected_q` covariates (or the largest one on the path).
/// Covariates selected in at least `threshold` of the subsamples are returned.
pub fn stability_selection(
    data: &Dataset,
    opts: &StabilityOptions,
    path_opts: &PathOptions,
    seed: u64,
) -> Result<StabilitySelection> {
    if opts.n_subsamples < 2 || !(opts.subsample_frac > 0.0 && opts.subsample_frac <= 1.0) {
        return Err(Error::InvalidArgument(format!("invalid stability options: {opts:?}")));
    }
    let n = data.n();
    let m = ((opts.subsample_frac * n as f64).floor() as usize).clamp(2.min(n), n);
    let picks: Vec<Option<SupportSet>> = (0..opts.n_subsamples)
        .into_par_iter()
        .map(|b| {
            let mut r = task_rng(seed, b as u64);
            let mut rows = rand::seq::index::sample(&mut r, n, m).into_vec();
            rows.sort_unstable();
            let sub = data.subset_rows(&rows);
            let path = lasso_path(&sub, path_opts).ok()?;
            let pick = path
                .points
                .iter()
                .find(|pt| pt.support.len() >= opts.expected_q)
                .or_else(|| path.points.iter().max_by_key(|pt| pt.support.len()))?;
            Some(pick.support.clone())
        })
        .collect();
    let failed = picks.iter().filter(|p| p.is_none()).count();
    let ok = picks.len() - failed;
    let mut counts = vec![0usize; data.p()];
    for s in picks.iter().flatten() {
        for j in s.iter() {
            counts[j] += 1;
        }
    }
    let frequencies: Vec<f64> = counts
        .iter()
        .map(|&c| if ok == 0 { 0.0 } else { c as f64 / ok as f64 })
        .collect();
    let support = SupportSet::from_indices(
        frequencies
            .iter()
            .enumerate()
            .filter(|(_, f)| **f >= opts.threshold)
            .map(|(j, _)| j),
    );
    Ok(StabilitySelection {
        support,
        frequencies,
        failed_subsamples: failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::ExponentialFamily;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn fake_fit(log_lik: f64, support: &[usize]) -> FittedModel {
        FittedModel {
            support: SupportSet::from_indices(support.iter().copied()),
            coeffs: DVector::zeros(support.len()),
            intercept: None,
            log_lik,
            hessian_at_mle: DMatrix::identity(support.len(), support.len()),
            converged: true,
            iterations: 1,
            score_norm: 0.0,
        }
    }

    #[test]
    fn ebic_worked_example() {
        let fit = fake_fit(-100.0, &[0, 1]);
        let s = ebic_score(&fit, 100, 1000, 1.0).unwrap();
        assert_relative_eq!(s.ebic, 236.8414, epsilon = 1e-4);
        let bic = ebic_score(&fit, 100, 1000, 0.0).unwrap();
        assert_relative_eq!(bic.ebic, 209.2103, epsilon = 1e-4);
        assert_eq!(bic.ebic, 200.0 + 2.0 * 100f64.ln());
        assert_eq!(s.ebic, -2.0 * s.log_lik + s.penalty_n + s.penalty_p);
        let empty = ebic_score(&fake_fit(-37.5, &[]), 100, 1000, 1.0).unwrap();
        assert_eq!(empty.ebic, 75.0);
    }

    #[test]
    fn ebic_rejects_unconverged() {
        let mut fit = fake_fit(-1.0, &[0]);
        fit.converged = false;
        assert!(matches!(ebic_score(&fit, 10, 10, 1.0), Err(Error::UnconvergedFit)));
    }

    #[test]
    fn prior_values() {
        let spec = PriorSpec { gamma: 1.0, q_cap: 3 };
        assert_relative_eq!(log_model_prior(5, 2, &spec), -(10f64.ln()), epsilon = 1e-12);
        assert_eq!(log_model_prior(5, 4, &spec), f64::NEG_INFINITY);
        let flat = PriorSpec { gamma: 0.0, q_cap: 3 };
        assert_eq!(log_model_prior(5, 3, &flat), 0.0);
        // large p stays finite and accurate
        let v = ln_binomial(1_000_000, 3);
        let direct = (1e6f64 * 999_999.0 * 999_998.0 / 6.0).ln();
        assert_relative_eq!(v, direct, max_relative = 1e-10);
    }

    #[test]
    fn tie_break_prefers_smaller_then_lexicographic() {
        let a = ebic_score(&fake_fit(-10.0, &[3]), 50, 10, 0.0).unwrap();
        let mut b = ebic_score(&fake_fit(-10.0, &[1, 2]), 50, 10, 0.0).unwrap();
        b.ebic = a.ebic;
        assert_eq!(select_best(&[b.clone(), a.clone()]).unwrap(), a.support);
        let mut c = a.clone();
        c.support = SupportSet::from_indices([1]);
        assert_eq!(select_best(&[a, c.clone()]).unwrap(), c.support);
        assert!(matches!(select_best(&[]), Err(Error::EmptyCandidates)));
    }

    #[test]
    fn folds_are_balanced_and_cover_rows() {
        let f = fold_assignment(23, 5, 9);
        let sizes: Vec<usize> = f.iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut all: Vec<usize> = f.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
    }

    fn gaussian_data(n: usize, p: usize, seed: u64) -> Dataset {
        let mut r = rng(seed);
        let x = DMatrix::from_fn(n, p, |_, _| r.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |i, _| 1.5 * x[(i, 0)] + r.sample::<f64, _>(StandardNormal));
        Dataset::new(x, y, ExponentialFamily::Gaussian).unwrap()
    }

    #[test]
    fn cv_single_candidate_and_errors() {
        let data = gaussian_data(20, 3, 1);
        let only = vec![SupportSet::from_indices([0])];
        let cv = cross_validate(&data, &only, 5, 1, &FitOptions::default()).unwrap();
        assert_eq!(cv.support, only[0]);
        assert!(cross_validate(&data, &only, 1, 1, &FitOptions::default()).is_err());
        assert!(cross_validate(&data, &[], 5, 1, &FitOptions::default()).is_err());
    }

    #[test]
    fn leave_one_out_matches_direct_computation() {
        let n = 9;
        let data = gaussian_data(n, 2, 2);
        let cands = vec![
            SupportSet::empty(),
            SupportSet::from_indices([0]),
            SupportSet::from_indices([1]),
            SupportSet::from_indices([0, 1]),
        ];
        let cv = cross_validate(&data, &cands, n, 3, &FitOptions::default()).unwrap();
        // direct: closed-form OLS with row i held out
        for (c, s) in cands.iter().enumerate() {
            let mut total = 0.0;
            for i in 0..n {
                let rows: Vec<usize> = (0..n).filter(|&r| r != i).collect();
                let theta = if s.is_empty() {
                    0.0
                } else {
                    let xs = DMatrix::from_fn(n - 1, s.len(), |a, b| data.x()[(rows[a], s.indices()[b])]);
                    let ys = DVector::from_fn(n - 1, |a, _| data.y()[rows[a]]);
                    let beta = (xs.transpose() * &xs).try_inverse().unwrap() * xs.transpose() * ys;
                    s.iter().zip(beta.iter()).map(|(j, b)| data.x()[(i, j)] * b).sum()
                };
                let y = data.y()[i];
                total += -(y * theta - 0.5 * theta * theta);
            }
            assert_relative_eq!(cv.mean_loss[c], total / n as f64, epsilon = 1e-10);
        }
        let best = cv
            .mean_loss
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(cv.support, cands[best]);
    }

    #[test]
    fn stability_threshold_above_one_selects_nothing() {
        let data = gaussian_data(60, 5, 4);
        let opts = StabilityOptions {
            n_subsamples: 10,
            expected_q: 2,
            threshold: 1.0 + 1e-9,
            ..Default::default()
        };
        let s = stability_selection(&data, &opts, &PathOptions::default(), 1).unwrap();
        assert!(s.support.is_empty());
        assert_eq!(s.failed_subsamples, 0);
        assert!(s.frequencies.iter().all(|f| (0.0..=1.0).contains(f)));
    }

    proptest! {
        #[test]
        fn select_best_is_permutation_invariant_and_shift_invariant(
            lls in proptest::collection::vec(-50.0f64..-1.0, 1..8),
            shift in -100.0f64..100.0,
            rot in 0usize..8,
        ) {
            let fits: Vec<FittedModel> = lls
                .iter()
                .enumerate()
                .map(|(i, &l)| fake_fit(l.round(), &(0..i % 4).map(|k| k + i).collect::<Vec<_>>()))
                .collect();
            let scores: Vec<ModelScore> =
                fits.iter().map(|f| ebic_score(f, 100, 20, 0.5).unwrap()).collect();
            let best = select_best(&scores).unwrap();
            let mut rotated = scores.clone();
            let r = rot % rotated.len();
            rotated.rotate_left(r);
            rotated.reverse();
            prop_assert_eq!(select_best(&rotated).unwrap(), best.clone());
            let shifted: Vec<ModelScore> = fits
                .iter()
                .map(|f| {
                    let mut g = f.clone();
                    g.log_lik += shift.round();
                    ebic_score(&g, 100, 20, 0.5).unwrap()
                })
                .collect();
            prop_assert_eq!(select_best(&shifted).unwrap(), best);
        }

        #[test]
        fn ebic_increases_with_gamma(g in 0.0f64..3.0, dg in 1e-3f64..1.0, k in 1usize..5, p in 2usize..1000) {
            let fit = fake_fit(-20.0, &(0..k).collect::<Vec<_>>());
            let a = ebic_score(&fit, 50, p.max(k), g).unwrap();
            let b = ebic_score(&fit, 50, p.max(k), g + dg).unwrap();
            prop_assert!(b.ebic > a.ebic);
        }

        #[test]
        fn prior_decreases_up_to_half_p(p in 2usize..400, a in 0usize..200, b in 0usize..200, g in 0.01f64..2.0) {
            let (k1, k2) = (a.min(b), a.max(b));
            prop_assume!(k1 < k2 && 2 * k2 <= p);
            let spec = PriorSpec { gamma: g, q_cap: p };
            prop_assert!(log_model_prior(p, k1, &spec) >= log_model_prior(p, k2, &spec));
        }
    }
}
