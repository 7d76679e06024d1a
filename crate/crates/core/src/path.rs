//! L1-penalized GLM regularization paths by coordinate descent.
//!
//! The objective at penalty `ρ` is `−(1/n)·ℓ(β₀, β) + ρ‖β‖₁`; the intercept
//! `β₀`, when present, is not penalized. Each outer iteration forms the
//! quadratic (IRLS) model of `−ℓ/n` at the current point, minimizes the
//! penalized quadratic by cyclic coordinate descent, and backtracks on the
//! true objective. Outer iterations stop once the KKT conditions hold to
//! `kkt_tol`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::{Dataset, SupportSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathOptions {
    pub n_rho: usize,
    pub rho_min_ratio: f64,
    /// Defaults to `min(n, p)` when unset.
    pub max_support: Option<usize>,
    pub kkt_tol: f64,
    pub with_intercept: bool,
    /// Rescale covariates to unit root-mean-square before solving. Off by default.
    pub standardize: bool,
    pub max_outer: usize,
}

impl Default for PathOptions {
    fn default() -> Self {
        PathOptions {
            n_rho: 100,
            rho_min_ratio: 1e-3,
            max_support: None,
            kkt_tol: 1e-6,
            with_intercept: false,
            standardize: false,
            max_outer: 200,
        }
    }
}

impl PathOptions {
    pub fn validate(&self) -> Result<()> {
        if self.n_rho < 2
            || !(self.rho_min_ratio > 0.0 && self.rho_min_ratio < 1.0)
            || !(self.kkt_tol > 0.0)
            || self.max_outer == 0
        {
            return Err(Error::InvalidArgument(format!("invalid path options: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathPoint {
    pub rho: f64,
    /// Length `p`, zero outside `support`.
    pub coeffs: DVector<f64>,
    pub support: SupportSet,
    pub intercept: Option<f64>,
    /// Largest KKT violation at the returned point, on the scale the problem
    /// was solved (standardized covariates when that option is on).
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoPath {
    pub points: Vec<PathPoint>,
    /// Penalties at which the solver failed; those points were dropped.
    pub dropped: Vec<f64>,
}

const INNER_TOL: f64 = 1e-9;
const WEIGHT_FLOOR: f64 = 1e-6;
const MAX_INNER_CYCLES: usize = 100_000;
const FULL_CYCLE_EVERY: usize = 10;
const INTERCEPT_CLAMP: f64 = 30.0;

/// Mean of the null model: the sample mean with an intercept, `b′(0)` without.
fn null_mean(data: &Dataset, with_intercept: bool) -> f64 {
    if with_intercept {
        data.y().mean()
    } else {
        data.family().mean(0.0)
    }
}

/// Smallest penalty at which the empty model solves the problem:
/// `max_j |Σ_i x_ij (y_i − μ̄)| / n`.
pub fn rho_max(data: &Dataset, with_intercept: bool) -> f64 {
    let mu = null_mean(data, with_intercept);
    let n = data.n() as f64;
    data.x()
        .column_iter()
        .map(|col| {
            col.iter()
                .zip(data.y().iter())
                .map(|(x, y)| x * (y - mu))
                .sum::<f64>()
                .abs()
                / n
        })
        .fold(0.0, f64::max)
}

/// Penalized objective `−ℓ/n + ρ‖β‖₁`.
pub fn penalized_objective(
    data: &Dataset,
    coeffs: &DVector<f64>,
    intercept: Option<f64>,
    rho: f64,
) -> f64 {
    let eta = linear_predictor(data.x(), coeffs, intercept.unwrap_or(0.0));
    objective_at(data.x(), data, &eta, coeffs, rho)
}

fn objective_at(
    _x: &DMatrix<f64>,
    data: &Dataset,
    eta: &[f64],
    coeffs: &DVector<f64>,
    rho: f64,
) -> f64 {
    let fam = data.family();
    let ll: f64 = eta
        .iter()
        .zip(data.y().iter())
        .map(|(&t, &y)| y * t - fam.cumulant(t))
        .sum();
    -ll / data.n() as f64 + rho * coeffs.iter().map(|c| c.abs()).sum::<f64>()
}

fn linear_predictor(x: &DMatrix<f64>, coeffs: &DVector<f64>, b0: f64) -> Vec<f64> {
    let mut eta = vec![b0; x.nrows()];
    for (j, &c) in coeffs.iter().enumerate() {
        if c != 0.0 {
            for (e, &v) in eta.iter_mut().zip(x.column(j).iter()) {
                *e += c * v;
            }
        }
    }
    eta
}

/// Largest KKT violation of the penalized problem at `(coeffs, intercept)`.
pub fn kkt_residual(
    data: &Dataset,
    coeffs: &DVector<f64>,
    intercept: Option<f64>,
    rho: f64,
) -> f64 {
    let eta = linear_predictor(data.x(), coeffs, intercept.unwrap_or(0.0));
    kkt_at(data.x(), data, &eta, coeffs, intercept.is_some(), rho)
}

fn kkt_at(
    x: &DMatrix<f64>,
    data: &Dataset,
    eta: &[f64],
    coeffs: &DVector<f64>,
    with_intercept: bool,
    rho: f64,
) -> f64 {
    let fam = data.family();
    let n = data.n() as f64;
    let resid: Vec<f64> = eta
        .iter()
        .zip(data.y().iter())
        .map(|(&t, &y)| y - fam.mean(t))
        .collect();
    let mut worst: f64 = 0.0;
    if with_intercept {
        worst = (resid.iter().sum::<f64>() / n).abs();
    }
    for (j, &c) in coeffs.iter().enumerate() {
        let g: f64 = x.column(j).iter().zip(&resid).map(|(a, r)| a * r).sum::<f64>() / n;
        let v = if c != 0.0 {
            (g - rho * c.signum()).abs()
        } else {
            (g.abs() - rho).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

fn soft_threshold(u: f64, t: f64) -> f64 {
    if u > t {
        u - t
    } else if u < -t {
        u + t
    } else {
        0.0
    }
}

struct Solver<'a> {
    data: &'a Dataset,
    x: &'a DMatrix<f64>,
    opts: &'a PathOptions,
}

impl Solver<'_> {
    /// Solves at `rho` from the given start; returns `(beta, b0, kkt)`.
    fn solve(&self, rho: f64, mut beta: DVector<f64>, mut b0: f64) -> Result<(DVector<f64>, f64, f64)> {
        let data = self.data;
        let x = self.x;
        let fam = data.family();
        let (n, p) = x.shape();
        let nf = n as f64;
        let with_b0 = self.opts.with_intercept;

        let mut eta = linear_predictor(x, &beta, b0);
        let mut obj = objective_at(x, data, &eta, &beta, rho);
        let mut kkt = kkt_at(x, data, &eta, &beta, with_b0, rho);

        for _ in 0..self.opts.max_outer {
            if kkt <= self.opts.kkt_tol {
                return Ok((beta, b0, kkt));
            }
            let w: Vec<f64> = eta.iter().map(|&t| fam.variance(t).max(WEIGHT_FLOOR)).collect();
            let w_sum: f64 = w.iter().sum();
            // working residual z − η for the quadratic model
            let mut r: Vec<f64> = eta
                .iter()
                .zip(data.y().iter())
                .zip(&w)
                .map(|((&t, &y), &wi)| (y - fam.mean(t)) / wi)
                .collect();
            let mut curv = vec![f64::NAN; p];
            let mut new_beta = beta.clone();
            let mut new_b0 = b0;

            let mut update = |j: usize, new_beta: &mut DVector<f64>, r: &mut [f64]| -> f64 {
                let col = x.column(j);
                if curv[j].is_nan() {
                    curv[j] = col.iter().zip(&w).map(|(v, wi)| wi * v * v).sum::<f64>() / nf;
                }
                let a = curv[j];
                let old = new_beta[j];
                let new = if a > 0.0 {
                    let g: f64 =
                        col.iter().zip(&w).zip(r.iter()).map(|((v, wi), ri)| wi * v * ri).sum::<f64>() / nf;
                    soft_threshold(g + a * old, rho) / a
                } else {
                    0.0
                };
                let delta = new - old;
                if delta != 0.0 {
                    for (ri, &v) in r.iter_mut().zip(col.iter()) {
                        *ri -= delta * v;
                    }
                    new_beta[j] = new;
                }
                delta.abs()
            };

            let mut cycle = 0;
            let mut force_full = true;
            loop {
                if cycle >= MAX_INNER_CYCLES {
                    break;
                }
                let full = force_full || cycle % FULL_CYCLE_EVERY == 0;
                let mut max_change: f64 = 0.0;
                if with_b0 && w_sum > 0.0 {
                    let d0 = r.iter().zip(&w).map(|(ri, wi)| ri * wi).sum::<f64>() / w_sum;
                    if d0 != 0.0 {
                        r.iter_mut().for_each(|ri| *ri -= d0);
                        new_b0 += d0;
                        max_change = max_change.max(d0.abs());
                    }
                }
                for j in 0..p {
                    if full || new_beta[j] != 0.0 {
                        max_change = max_change.max(update(j, &mut new_beta, &mut r));
                    }
                }
                cycle += 1;
                if max_change <= INNER_TOL {
                    if full {
                        break;
                    }
                    force_full = true;
                } else {
                    force_full = false;
                }
            }

            // backtrack on the true objective
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..50 {
                let cand_beta = if t == 1.0 {
                    new_beta.clone()
                } else {
                    &beta + (&new_beta - &beta) * t
                };
                let cand_b0 = b0 + t * (new_b0 - b0);
                let cand_eta = linear_predictor(x, &cand_beta, cand_b0);
                let cand_obj = objective_at(x, data, &cand_eta, &cand_beta, rho);
                if cand_obj <= obj + 1e-15 * obj.abs().max(1.0) {
                    beta = cand_beta;
                    b0 = cand_b0;
                    eta = cand_eta;
                    obj = cand_obj;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            kkt = kkt_at(x, data, &eta, &beta, with_b0, rho);
            if !accepted {
                break;
            }
        }
        if kkt <= self.opts.kkt_tol {
            Ok((beta, b0, kkt))
        } else {
            Err(Error::NotConverged {
                iterations: self.opts.max_outer,
                residual: kkt,
            })
        }
    }
}

/// Column scales used when standardizing; `1` for all-zero columns.
fn column_scales(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows() as f64;
    x.column_iter()
        .map(|c| {
            let s = (c.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect()
}

struct Prepared {
    data: Dataset,
    scales: Option<Vec<f64>>,
}

fn prepare(data: &Dataset, opts: &PathOptions) -> Prepared {
    if !opts.standardize {
        return Prepared {
            data: data.clone(),
            scales: None,
        };
    }
    let scales = column_scales(data.x());
    let mut x = data.x().clone();
    for (j, mut col) in x.column_iter_mut().enumerate() {
        col /= scales[j];
    }
    Prepared {
        data: Dataset::from_parts_unchecked(x, data.y().clone(), data.family()),
        scales: Some(scales),
    }
}

fn make_point(rho: f64, beta: &DVector<f64>, b0: f64, kkt: f64, scales: Option<&[f64]>, with_b0: bool) -> PathPoint {
    let coeffs = match scales {
        Some(s) => DVector::from_fn(beta.len(), |j, _| beta[j] / s[j]),
        None => beta.clone(),
    };
    let support = SupportSet::from_indices(beta.iter().enumerate().filter(|(_, c)| **c != 0.0).map(|(j, _)| j));
    PathPoint {
        rho,
        coeffs,
        support,
        intercept: with_b0.then_some(b0),
        kkt_residual: kkt,
    }
}

fn initial_intercept(data: &Dataset, with_b0: bool) -> f64 {
    if !with_b0 {
        return 0.0;
    }
    let fam = data.family();
    fam.link(data.y().mean()).clamp(-INTERCEPT_CLAMP, INTERCEPT_CLAMP)
}

/// Solves the penalized problem at a single `rho`, optionally warm-started.
pub fn lasso_solve(
    data: &Dataset,
    rho: f64,
    opts: &PathOptions,
    warm: Option<&PathPoint>,
) -> Result<PathPoint> {
    opts.validate()?;
    if !(rho >= 0.0) {
        return Err(Error::InvalidArgument(format!("penalty must be non-negative, got {rho}")));
    }
    let prep = prepare(data, opts);
    let solver = Solver {
        data: &prep.data,
        x: prep.data.x(),
        opts,
    };
    let (beta0, b00) = match warm {
        Some(pt) => {
            let b = match &prep.scales {
                Some(s) => DVector::from_fn(pt.coeffs.len(), |j, _| pt.coeffs[j] * s[j]),
                None => pt.coeffs.clone(),
            };
            (b, pt.intercept.unwrap_or_else(|| initial_intercept(data, opts.with_intercept)))
        }
        None => (DVector::zeros(data.p()), initial_intercept(data, opts.with_intercept)),
    };
    let (beta, b0, kkt) = solver.solve(rho, beta0, b00)?;
    Ok(make_point(rho, &beta, b0, kkt, prep.scales.as_deref(), opts.with_intercept))
}

/// Log-spaced grid from `rho_max` down to `rho_min_ratio · rho_max`.
pub fn rho_grid(rho_max: f64, opts: &PathOptions) -> Vec<f64> {
    let k = opts.n_rho;
    (0..k)
        .map(|i| rho_max * opts.rho_min_ratio.powf(i as f64 / (k - 1) as f64))
        .collect()
}

pub fn lasso_path(data: &Dataset, opts: &PathOptions) -> Result<LassoPath> {
    opts.validate()?;
    let prep = prepare(data, opts);
    let with_b0 = opts.with_intercept;
    let max_support = opts.max_support.unwrap_or(data.n().min(data.p()));
    let top = rho_max(&prep.data, with_b0);
    let solver = Solver {
        data: &prep.data,
        x: prep.data.x(),
        opts,
    };

    let mut beta = DVector::zeros(data.p());
    let mut b0 = initial_intercept(data, with_b0);
    let mut points = Vec::new();
    let mut dropped = Vec::new();

    let grid = if top > 0.0 { rho_grid(top, opts) } else { vec![0.0] };
    for rho in grid {
        match solver.solve(rho, beta.clone(), b0) {
            Ok((b, c, kkt)) => {
                let nnz = b.iter().filter(|v| **v != 0.0).count();
                if nnz > max_support {
                    break;
                }
                points.push(make_point(rho, &b, c, kkt, prep.scales.as_deref(), with_b0));
                beta = b;
                b0 = c;
            }
            Err(Error::NotConverged { .. }) => dropped.push(rho),
            Err(e) => return Err(e),
        }
    }
    Ok(LassoPath { points, dropped })
}

/// Distinct supports in order of first appearance with `|J| ≤ q_max`.
pub fn candidate_supports(path: &[PathPoint], q_max: usize) -> Vec<SupportSet> {
    let mut seen = std::collections::HashSet::new();
    path.iter()
        .map(|pt| &pt.support)
        .filter(|s| s.len() <= q_max)
        .filter(|s| seen.insert((*s).clone()))
        .cloned()
        .collect()
}
