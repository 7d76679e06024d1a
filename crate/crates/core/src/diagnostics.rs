//! Empirical checks of the high-probability likelihood bounds that the
//! consistency results rest on, plus kernel-smoothed selection curves.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::family::{Dataset, Design, SupportSet};
use crate::fit::{refit_candidates, FitOptions};
use crate::seed::task_rng;

/// The data-generating sparse parameter `φ*`, with `coeffs` aligned to `support`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueModel {
    pub support: SupportSet,
    pub coeffs: Vec<f64>,
}

impl TrueModel {
    pub fn new(support: SupportSet, coeffs: Vec<f64>) -> Result<Self> {
        if support.len() != coeffs.len() {
            return Err(Error::LengthMismatch {
                left: support.len(),
                right: coeffs.len(),
            });
        }
        Ok(TrueModel { support, coeffs })
    }

    /// `φ*` restricted to `support`, zero where `φ*` has no entry.
    pub fn coeffs_on(&self, support: &SupportSet) -> Vec<f64> {
        support
            .iter()
            .map(|j| match self.support.indices().binary_search(&j) {
                Ok(pos) => self.coeffs[pos],
                Err(_) => 0.0,
            })
            .collect()
    }
}

/// `log(n^α p^{1+β})`.
pub fn log_np_term(n: usize, p: usize, alpha: f64, beta: f64) -> f64 {
    alpha * (n as f64).ln() + (1.0 + beta) * (p as f64).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBound {
    pub support: SupportSet,
    /// `‖H_J(φ*)^{-1/2} s_J(φ*)‖₂`.
    pub lhs: f64,
    pub rhs: f64,
}

impl ScoreBound {
    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs
    }
}

/// Standardized score at the truth for each strict superset of the true
/// support, against `√(2|J∖J*| log(n^α p^{1+β}))`.
pub fn score_bound_check(
    data: &Dataset,
    truth: &TrueModel,
    supersets: &[SupportSet],
    alpha: f64,
    beta: f64,
) -> Result<Vec<ScoreBound>> {
    truth.support.check_bounds(data.p())?;
    let log_term = log_np_term(data.n(), data.p(), alpha, beta);
    supersets
        .par_iter()
        .map(|sup| {
            sup.check_bounds(data.p())?;
            if !truth.support.is_subset_of(sup) || sup.len() == truth.support.len() {
                return Err(Error::InvalidArgument(format!(
                    "{sup} is not a strict superset of {}",
                    truth.support
                )));
            }
            let design = Design::new(data, sup, false);
            let phi = truth.coeffs_on(sup);
            let eta = design.linear_predictor(&phi);
            let s = design.score_at(&eta);
            let h = design.hessian_at(&eta);
            let chol = h.cholesky().ok_or(Error::SingularHessian)?;
            let z = chol.l().solve_lower_triangular(&s).ok_or(Error::SingularHessian)?;
            let extra = (sup.len() - truth.support.len()) as f64;
            Ok(ScoreBound {
                support: sup.clone(),
                lhs: z.norm(),
                rhs: (2.0 * extra * log_term).sqrt(),
            })
        })
        .collect()
}

fn primes(count: usize) -> Vec<u64> {
    let mut out: Vec<u64> = Vec::with_capacity(count);
    let mut c = 2u64;
    while out.len() < count {
        if out.iter().take_while(|&&q| q * q <= c).all(|&q| c % q != 0) {
            out.push(c);
        }
        c += 1;
    }
    out
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

/// `count` deterministic points in the centred ball of radius `radius` in
/// `R^dim`, from a Halton sequence mapped through Gaussian quantiles (direction)
/// and `u^{1/dim}` (radius). The origin is always the first point.
pub fn ball_grid(dim: usize, radius: f64, count: usize) -> Vec<DVector<f64>> {
    let mut pts = vec![DVector::zeros(dim)];
    if dim == 0 {
        return pts;
    }
    let bases = primes(dim + 1);
    let normal = Normal::standard();
    let mut i = 1u64;
    while pts.len() < count.max(1) {
        let g = DVector::from_fn(dim, |k, _| normal.inverse_cdf(radical_inverse(i, bases[k])));
        let u = radical_inverse(i, bases[dim]);
        i += 1;
        let norm = g.norm();
        if norm == 0.0 || !norm.is_finite() {
            continue;
        }
        pts.push(g * (radius * u.powf(1.0 / dim as f64) / norm));
    }
    pts
}

/// Largest singular value of a symmetric matrix, by power iteration on its square.
pub(crate) fn symmetric_spectral_norm(d: &DMatrix<f64>) -> f64 {
    let m = d.nrows();
    if m == 0 {
        return 0.0;
    }
    let mut v = DVector::from_fn(m, |i, _| 1.0 + i as f64 / m as f64);
    v.normalize_mut();
    let mut est = 0.0;
    for _ in 0..10_000 {
        let w = d * (d * &v);
        let next = v.dot(&w);
        let wn = w.norm();
        if wn == 0.0 {
            return 0.0;
        }
        v = w / wn;
        if (next - est).abs() <= 1e-8 * next.abs() {
            est = next;
            break;
        }
        est = next;
    }
    est.max(0.0).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumScan {
    pub lambda1_hat: f64,
    pub lambda2_hat: f64,
    pub lambda3_hat: f64,
    pub points: usize,
}

/// Extreme eigenvalues of `H_J(φ)/n` and the largest Hessian Lipschitz ratio
/// over a ball grid for each support. Empty supports are skipped; with no
/// non-empty support all three values are 0.
pub fn hessian_spectrum_scan(
    data: &Dataset,
    supports: &[SupportSet],
    radius: f64,
    grid_size: usize,
) -> Result<SpectrumScan> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("radius must be positive, got {radius}")));
    }
    let n = data.n() as f64;
    let per: Vec<Result<(f64, f64, f64, usize)>> = supports
        .par_iter()
        .filter(|s| !s.is_empty())
        .map(|sup| {
            sup.check_bounds(data.p())?;
            let design = Design::new(data, sup, false);
            let grid = ball_grid(sup.len(), radius, grid_size);
            let hs: Vec<DMatrix<f64>> = grid.iter().map(|phi| design.hessian(phi.as_slice()) / n).collect();
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for h in &hs {
                let ev = SymmetricEigen::new(h.clone()).eigenvalues;
                lo = lo.min(ev.min());
                hi = hi.max(ev.max());
            }
            let mut lip: f64 = 0.0;
            for k in 1..hs.len() {
                let dist = (&grid[k] - &grid[k - 1]).norm();
                if dist > 0.0 {
                    lip = lip.max(symmetric_spectral_norm(&(&hs[k] - &hs[k - 1])) / dist);
                }
            }
            Ok((lo, hi, lip, grid.len()))
        })
        .collect();
    let mut out = SpectrumScan {
        lambda1_hat: f64::INFINITY,
        lambda2_hat: f64::NEG_INFINITY,
        lambda3_hat: 0.0,
        points: 0,
    };
    for r in per {
        let (lo, hi, lip, pts) = r?;
        out.lambda1_hat = out.lambda1_hat.min(lo);
        out.lambda2_hat = out.lambda2_hat.max(hi);
        out.lambda3_hat = out.lambda3_hat.max(lip);
        out.points += pts;
    }
    if out.points == 0 {
        out.lambda1_hat = 0.0;
        out.lambda2_hat = 0.0;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticBoundOptions {
    pub directions_per_support: usize,
    pub tau_hat: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda1_hat: f64,
    pub seed: u64,
}

/// Log-likelihood ratio `ℓ(φ* + ψ_J) − ℓ(φ*)` and its quadratic upper bound
/// `−(λ₁n/2)‖ψ‖(min{1,‖ψ‖} − τ√(log(n^α p^{1+β})/n))`.
pub fn quadratic_bound_sides(
    data: &Dataset,
    truth: &TrueModel,
    support: &SupportSet,
    psi: &[f64],
    opts: &QuadraticBoundOptions,
) -> Result<(f64, f64)> {
    if psi.len() != support.len() {
        return Err(Error::LengthMismatch {
            left: support.len(),
            right: psi.len(),
        });
    }
    let union = SupportSet::from_indices(truth.support.iter().chain(support.iter()));
    union.check_bounds(data.p())?;
    let base = truth.coeffs_on(&union);
    let mut moved = base.clone();
    for (j, &v) in support.iter().zip(psi) {
        let pos = union.indices().binary_search(&j).expect("support within union");
        moved[pos] += v;
    }
    let design = Design::new(data, &union, false);
    let lhs = design.log_likelihood(&moved) - design.log_likelihood(&base);
    let n = data.n() as f64;
    let norm = psi.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tau_term = opts.tau_hat * (log_np_term(data.n(), data.p(), opts.alpha, opts.beta) / n).sqrt();
    let rhs = -(opts.lambda1_hat * n / 2.0) * norm * (norm.min(1.0) - tau_term);
    Ok((lhs, rhs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadraticBoundResult {
    pub evaluations: usize,
    pub violations: usize,
}

/// Counts random perturbations (uniform direction, magnitude in (0, 2]) where
/// the log-likelihood ratio exceeds the quadratic bound.
pub fn quadratic_bound_check(
    data: &Dataset,
    truth: &TrueModel,
    supports: &[SupportSet],
    opts: &QuadraticBoundOptions,
) -> Result<QuadraticBoundResult> {
    let per: Vec<Result<(usize, usize)>> = supports
        .par_iter()
        .enumerate()
        .filter(|(_, s)| !s.is_empty())
        .map(|(idx, sup)| {
            let mut r = task_rng(opts.seed, idx as u64);
            let mut bad = 0;
            for _ in 0..opts.directions_per_support {
                let mut dir: Vec<f64> = (0..sup.len()).map(|_| r.sample(StandardNormal)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                let mag = 2.0 * (1.0 - r.random::<f64>());
                dir.iter_mut().for_each(|v| *v *= mag / norm);
                let (lhs, rhs) = quadratic_bound_sides(data, truth, sup, &dir, opts)?;
                if lhs > rhs + 1e-9 * (1.0 + rhs.abs()) {
                    bad += 1;
                }
            }
            Ok((opts.directions_per_support, bad))
        })
        .collect();
    let mut out = QuadraticBoundResult {
        evaluations: 0,
        violations: 0,
    };
    for r in per {
        let (e, v) = r?;
        out.evaluations += e;
        out.violations += v;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MleRadius {
    pub radius: f64,
    pub failed: usize,
}

/// Largest `‖φ̂_J‖₂` over the converged fits; failed fits are counted and skipped.
pub fn mle_radius_check(data: &Dataset, supports: &[SupportSet], opts: &FitOptions) -> MleRadius {
    let fits = refit_candidates(data, supports, opts);
    let mut out = MleRadius {
        radius: 0.0,
        failed: 0,
    };
    for f in fits {
        match f {
            Ok(f) if f.converged => out.radius = out.radius.max(f.coeffs.norm()),
            _ => out.failed += 1,
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothedCurve {
    pub values: Vec<f64>,
    /// True where every kernel weight underflowed and the value was set to 0.
    pub empty: Vec<bool>,
}

/// Nadaraya–Watson regression of the selection indicator on `values` with a
/// Gaussian kernel of standard deviation `bandwidth`.
pub fn smoothed_selection_curve(
    values: &[f64],
    selected: &[bool],
    bandwidth: f64,
    query_points: &[f64],
) -> Result<SmoothedCurve> {
    if values.len() != selected.len() {
        return Err(Error::LengthMismatch {
            left: values.len(),
            right: selected.len(),
        });
    }
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let mut out = SmoothedCurve {
        values: Vec::with_capacity(query_points.len()),
        empty: Vec::with_capacity(query_points.len()),
    };
    for &t in query_points {
        let (mut num, mut den) = (0.0, 0.0);
        let mut any = false;
        for (&v, &s) in values.iter().zip(selected) {
            let z = (t - v) / bandwidth;
            let w = (-0.5 * z * z).exp();
            any |= w >= 1e-300;
            den += w;
            if s {
                num += w;
            }
        }
        if any && den > 0.0 {
            out.values.push((num / den).clamp(0.0, 1.0));
            out.empty.push(false);
        } else {
            out.values.push(0.0);
            out.empty.push(true);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WhpOptions {
    pub alpha: f64,
    pub beta: f64,
    pub radius: f64,
    pub grid_size: usize,
    pub directions_per_support: usize,
    pub seed: u64,
    pub fit: FitOptions,
}

impl Default for WhpOptions {
    fn default() -> Self {
        WhpOptions {
            alpha: 1.0,
            beta: 1.0,
            radius: 1.0,
            grid_size: 32,
            directions_per_support: 20,
            seed: 0,
            fit: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhpReport {
    /// Largest standardized score over the strict supersets of the truth.
    pub score_norm_max: f64,
    /// Smallest bound over the same supersets.
    pub score_bound: f64,
    pub score_bound_violations: usize,
    pub mle_radius_max: f64,
    pub lambda1_hat: f64,
    pub lambda2_hat: f64,
    pub lambda3_hat: f64,
    pub tau_hat: f64,
    pub quad_bound_violations: usize,
    pub quad_bound_evaluations: usize,
}

/// All empirical bound checks over `supports`. The supersets used for the
/// score check are the members of `supports` strictly containing the truth,
/// and `τ̂ = 2√(32q λ̂₂/λ̂₁²)` with `q` the largest support size.
pub fn whp_report(
    data: &Dataset,
    truth: &TrueModel,
    supports: &[SupportSet],
    opts: &WhpOptions,
) -> Result<WhpReport> {
    let supersets: Vec<SupportSet> = supports
        .iter()
        .filter(|s| truth.support.is_subset_of(s) && s.len() > truth.support.len())
        .cloned()
        .collect();
    let bounds = score_bound_check(data, truth, &supersets, opts.alpha, opts.beta)?;
    let spectrum = hessian_spectrum_scan(data, supports, opts.radius, opts.grid_size)?;
    let q = supports.iter().map(SupportSet::len).max().unwrap_or(0) as f64;
    let tau_hat = if spectrum.lambda1_hat > 0.0 {
        2.0 * (32.0 * q * spectrum.lambda2_hat / spectrum.lambda1_hat.powi(2)).sqrt()
    } else {
        f64::INFINITY
    };
    let quad = quadratic_bound_check(
        data,
        truth,
        supports,
        &QuadraticBoundOptions {
            directions_per_support: opts.directions_per_support,
            tau_hat,
            alpha: opts.alpha,
            beta: opts.beta,
            lambda1_hat: spectrum.lambda1_hat,
            seed: opts.seed,
        },
    )?;
    let radius = mle_radius_check(data, supports, &opts.fit);
    Ok(WhpReport {
        score_norm_max: bounds.iter().map(|b| b.lhs).fold(0.0, f64::max),
        score_bound: bounds.iter().map(|b| b.rhs).fold(f64::INFINITY, f64::min),
        score_bound_violations: bounds.iter().filter(|b| !b.holds()).count(),
        mle_radius_max: radius.radius,
        lambda1_hat: spectrum.lambda1_hat,
        lambda2_hat: spectrum.lambda2_hat,
        lambda3_hat: spectrum.lambda3_hat,
        tau_hat,
        quad_bound_violations: quad.violations,
        quad_bound_evaluations: quad.evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::ExponentialFamily;
    use crate::seed::rng;
    use approx::assert_relative_eq;

    fn gaussian_design(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut r = rng(seed);
        DMatrix::from_fn(n, p, |_, _| r.sample(StandardNormal))
    }

    fn noiseless_gaussian(n: usize, p: usize, seed: u64) -> (Dataset, TrueModel) {
        let x = gaussian_design(n, p, seed);
        let truth = TrueModel::new(SupportSet::from_indices([0, 2]), vec![1.5, -0.7]).unwrap();
        let y = x.column(0) * 1.5 - x.column(2) * 0.7;
        (Dataset::new(x, y, ExponentialFamily::Gaussian).unwrap(), truth)
    }

    #[test]
    fn zero_noise_score_vanishes() {
        let (data, truth) = noiseless_gaussian(60, 5, 1);
        let sups = vec![SupportSet::from_indices([0, 1, 2]), SupportSet::from_indices([0, 2, 3, 4])];
        for b in score_bound_check(&data, &truth, &sups, 1.0, 1.0).unwrap() {
            assert!(b.lhs < 1e-10);
            assert!(b.holds());
        }
        let not_super = vec![SupportSet::from_indices([0, 1])];
        assert!(score_bound_check(&data, &truth, &not_super, 1.0, 1.0).is_err());
        assert!(score_bound_check(&data, &truth, &[truth.support.clone()], 1.0, 1.0).is_err());
    }

    #[test]
    fn score_statistic_is_scale_invariant_and_classical() {
        let n = 80;
        let x = gaussian_design(n, 4, 2);
        let mut r = rng(3);
        let y = DVector::from_fn(n, |i, _| x[(i, 1)] * 0.8 + r.sample::<f64, _>(StandardNormal));
        let data = Dataset::new(x.clone(), y.clone(), ExponentialFamily::Gaussian).unwrap();
        let truth = TrueModel::new(SupportSet::from_indices([1]), vec![0.8]).unwrap();
        let sup = SupportSet::from_indices([1, 3]);
        let a = score_bound_check(&data, &truth, &[sup.clone()], 1.0, 1.0).unwrap()[0].lhs;

        // sᵀH⁻¹s directly
        let xs = DMatrix::from_fn(n, 2, |i, k| x[(i, [1, 3][k])]);
        let resid = &y - x.column(1) * 0.8;
        let s = xs.transpose() * resid;
        let h = xs.transpose() * &xs;
        let direct = s.dot(&(h.try_inverse().unwrap() * &s));
        assert!((a * a - direct).abs() <= 1e-8 * direct.max(1.0));

        let c = 3.7;
        let mut xc = x.clone();
        for k in [1, 3] {
            xc.column_mut(k).scale_mut(c);
        }
        let scaled = Dataset::new(xc, y, ExponentialFamily::Gaussian).unwrap();
        let truth_c = TrueModel::new(SupportSet::from_indices([1]), vec![0.8 / c]).unwrap();
        let b = score_bound_check(&scaled, &truth_c, &[sup], 1.0, 1.0).unwrap()[0].lhs;
        assert_relative_eq!(a, b, max_relative = 1e-10);
    }

    #[test]
    fn ball_grid_stays_inside() {
        for dim in 1..5 {
            let g = ball_grid(dim, 2.0, 50);
            assert_eq!(g.len(), 50);
            assert_eq!(g[0].norm(), 0.0);
            assert!(g.iter().all(|v| v.norm() <= 2.0 + 1e-12));
            assert_eq!(g, ball_grid(dim, 2.0, 50));
        }
    }

    #[test]
    fn power_iteration_matches_eigen() {
        let a = gaussian_design(6, 6, 4);
        let s = &a + a.transpose();
        let exact = SymmetricEigen::new(s.clone()).eigenvalues.abs().max();
        assert_relative_eq!(symmetric_spectral_norm(&s), exact, max_relative = 1e-6);
        assert_eq!(symmetric_spectral_norm(&DMatrix::zeros(3, 3)), 0.0);
    }

    #[test]
    fn gaussian_spectrum_is_constant() {
        let (data, _) = noiseless_gaussian(50, 4, 5);
        let sups = vec![SupportSet::from_indices([0, 1]), SupportSet::from_indices([2, 3])];
        let scan = hessian_spectrum_scan(&data, &sups, 1.0, 10).unwrap();
        let n = data.n() as f64;
        let mut expect = f64::INFINITY;
        for s in &sups {
            let xs = DMatrix::from_fn(50, 2, |i, k| data.x()[(i, s.indices()[k])]);
            let g = xs.transpose() * xs / n;
            expect = expect.min(SymmetricEigen::new(g).eigenvalues.min());
        }
        assert_relative_eq!(scan.lambda1_hat, expect, max_relative = 1e-10);
        assert_eq!(scan.lambda3_hat, 0.0);
        assert!(scan.lambda1_hat <= scan.lambda2_hat);
        assert!(hessian_spectrum_scan(&data, &sups, 0.0, 10).is_err());
    }

    #[test]
    fn logistic_hessian_at_origin() {
        let x = gaussian_design(40, 3, 6);
        let y = DVector::from_fn(40, |i, _| f64::from(i % 2 == 0));
        let data = Dataset::new(x.clone(), y, ExponentialFamily::Logistic).unwrap();
        let sup = SupportSet::from_indices([1]);
        let h = Design::new(&data, &sup, false).hessian(&[0.0]);
        let expect = 0.25 * x.column(1).map(|v| v * v).mean();
        assert_relative_eq!(h[(0, 0)] / 40.0, expect, max_relative = 1e-14);
    }

    #[test]
    fn spectrum_lower_bound_against_bisection() {
        let n = 120;
        let x = gaussian_design(n, 5, 7);
        let mut r = rng(8);
        let y = DVector::from_fn(n, |_, _| f64::from(r.random_bool(0.4)));
        let data = Dataset::new(x, y, ExponentialFamily::Logistic).unwrap();
        let sups = vec![SupportSet::from_indices([0, 3]), SupportSet::from_indices([1, 2, 4])];
        let scan = hessian_spectrum_scan(&data, &sups, 1.5, 25).unwrap();
        assert!(scan.lambda1_hat <= scan.lambda2_hat);

        // smallest eigenvalue by bisection on positive-definiteness of H/n − tI
        let mut oracle = f64::INFINITY;
        for s in &sups {
            let d = Design::new(&data, s, false);
            for phi in ball_grid(s.len(), 1.5, 25) {
                let h = d.hessian(phi.as_slice()) / n as f64;
                let (mut lo, mut hi) = (0.0, h.trace());
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    let shifted = &h - DMatrix::identity(s.len(), s.len()) * mid;
                    if shifted.cholesky().is_some() {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                oracle = oracle.min(hi);
            }
        }
        assert!(scan.lambda1_hat <= oracle + 1e-12);
        assert!((scan.lambda1_hat - oracle).abs() <= 1e-9);
    }

    #[test]
    fn quadratic_bound_exact_for_gaussian() {
        let (data, truth) = noiseless_gaussian(70, 6, 9);
        let sups: Vec<SupportSet> = vec![
            SupportSet::from_indices([0]),
            SupportSet::from_indices([1, 4]),
            SupportSet::from_indices([0, 2, 5]),
        ];
        let scan = hessian_spectrum_scan(&data, &sups, 1.0, 4).unwrap();
        let opts = QuadraticBoundOptions {
            directions_per_support: 200,
            tau_hat: 0.0,
            alpha: 1.0,
            beta: 1.0,
            lambda1_hat: scan.lambda1_hat,
            seed: 10,
        };
        let res = quadratic_bound_check(&data, &truth, &sups, &opts).unwrap();
        assert_eq!(res.evaluations, 600);
        assert_eq!(res.violations, 0);
        let (lhs, rhs) = quadratic_bound_sides(&data, &truth, &sups[1], &[0.0, 0.0], &opts).unwrap();
        assert_eq!((lhs, rhs), (0.0, 0.0));
        let psi = [0.3, -0.4];
        let (lhs, _) = quadratic_bound_sides(&data, &truth, &sups[1], &psi, &opts).unwrap();
        let h = Design::new(&data, &sups[1], false).hessian(&psi);
        let quad = -0.5 * DVector::from_row_slice(&psi).dot(&(h * DVector::from_row_slice(&psi)));
        assert_relative_eq!(lhs, quad, max_relative = 1e-9);
    }

    #[test]
    fn mle_radius_behaviour() {
        let (data, _) = noiseless_gaussian(50, 4, 11);
        let opts = FitOptions::default();
        assert_eq!(mle_radius_check(&data, &[SupportSet::empty()], &opts).radius, 0.0);
        let mut list = vec![SupportSet::empty()];
        let mut last = 0.0;
        for s in [[0usize].as_slice(), &[0, 2], &[1, 3], &[0, 1, 2]] {
            list.push(SupportSet::from_indices(s.iter().copied()));
            let r = mle_radius_check(&data, &list, &opts).radius;
            assert!(r >= last);
            last = r;
        }
    }

    #[test]
    fn smoothing_examples() {
        let all = smoothed_selection_curve(&[0.1, 0.5, 0.9], &[true; 3], 0.1, &[0.0, 0.3, 1.0]).unwrap();
        assert!(all.values.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let one = smoothed_selection_curve(&[0.0], &[true], 0.1, &[0.0]).unwrap();
        assert_eq!(one.values, vec![1.0]);

        let v = [0.0, 0.2, 0.5];
        let sel = [true, false, true];
        let h = 0.25;
        let t = 0.1;
        let k = |x: f64| f64::exp(-0.5 * ((t - x) / h).powi(2));
        let manual = (k(0.0) + k(0.5)) / (k(0.0) + k(0.2) + k(0.5));
        let got = smoothed_selection_curve(&v, &sel, h, &[t]).unwrap().values[0];
        assert!((got - manual).abs() <= 1e-12);

        let far = smoothed_selection_curve(&[0.0], &[true], 0.01, &[100.0]).unwrap();
        assert_eq!((far.values[0], far.empty[0]), (0.0, true));
        assert!(smoothed_selection_curve(&[0.0], &[], 0.1, &[0.0]).is_err());
        assert!(smoothed_selection_curve(&[0.0], &[true], 0.0, &[0.0]).is_err());
    }

    #[test]
    fn report_is_finite_and_ordered() {
        let n = 200;
        let x = gaussian_design(n, 6, 12);
        let truth = TrueModel::new(SupportSet::from_indices([0, 1]), vec![1.0, -1.0]).unwrap();
        let mut r = rng(13);
        let y = DVector::from_fn(n, |i, _| {
            let eta = x[(i, 0)] - x[(i, 1)];
            f64::from(r.random::<f64>() < crate::family::sigmoid(eta))
        });
        let data = Dataset::new(x, y, ExponentialFamily::Logistic).unwrap();
        let sups = vec![
            SupportSet::from_indices([0]),
            SupportSet::from_indices([0, 1]),
            SupportSet::from_indices([0, 1, 3]),
            SupportSet::from_indices([0, 1, 2, 5]),
        ];
        let rep = whp_report(&data, &truth, &sups, &WhpOptions::default()).unwrap();
        assert!(rep.lambda1_hat <= rep.lambda2_hat);
        assert!(rep.score_norm_max.is_finite() && rep.score_bound.is_finite());
        assert_eq!(rep.quad_bound_evaluations, 80);
        let json = serde_json::to_string(&rep).unwrap();
        let back: WhpReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rep);
    }
}
