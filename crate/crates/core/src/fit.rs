//! Restricted maximum likelihood by damped Newton iteration.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::{Dataset, Design, ExponentialFamily, SupportSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Convergence threshold on `‖score‖∞`.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Coefficient norm beyond which a logistic or Poisson fit is declared separated.
    pub max_coeff_norm: f64,
    pub with_intercept: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            grad_tol: 1e-8,
            max_iter: 100,
            max_coeff_norm: 30.0,
            with_intercept: false,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.grad_tol > 0.0) || self.max_iter == 0 || !(self.max_coeff_norm > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "invalid fit options: {self:?}"
            )));
        }
        Ok(())
    }
}

/// The MLE `φ̂_J` of a restricted model and the quantities evaluated there.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub support: SupportSet,
    /// Coefficients aligned with `support`; the intercept is stored separately.
    pub coeffs: DVector<f64>,
    pub intercept: Option<f64>,
    pub log_lik: f64,
    /// Negated Hessian of the log-likelihood at the MLE. When an intercept is
    /// fitted it occupies row/column 0.
    pub hessian_at_mle: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// `‖score‖∞` at the returned point.
    pub score_norm: f64,
}

impl FittedModel {
    /// Parameter vector in the layout of `hessian_at_mle`.
    pub fn params(&self) -> Vec<f64> {
        self.intercept
            .into_iter()
            .chain(self.coeffs.iter().copied())
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.hessian_at_mle.nrows()
    }
}

const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

/// Cholesky with a `1e-10 · trace` ridge fallback.
pub(crate) fn robust_cholesky(h: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(h.clone()) {
        return Ok(c);
    }
    let ridge = 1e-10 * h.trace().abs().max(f64::MIN_POSITIVE);
    let mut reg = h.clone();
    for i in 0..reg.nrows() {
        reg[(i, i)] += ridge;
    }
    Cholesky::new(reg).ok_or(Error::SingularHessian)
}

pub fn fit_mle(data: &Dataset, support: &SupportSet, opts: &FitOptions) -> Result<FittedModel> {
    opts.validate()?;
    support.check_bounds(data.p())?;
    let design = Design::new(data, support, opts.with_intercept);
    let dim = design.dim();
    let guard_separation = data.family() != ExponentialFamily::Gaussian;

    let mut params = vec![0.0; dim];
    let mut eta = design.linear_predictor(&params);
    let mut ll = log_lik_at(data, &eta);
    let mut iterations = 0;

    loop {
        let s = design.score_at(&eta);
        let s_norm = inf_norm(&s);
        let h = design.hessian_at(&eta);
        if s_norm <= opts.grad_tol {
            return Ok(finish(design, params, ll, h, true, iterations, s_norm));
        }
        if iterations >= opts.max_iter {
            return Err(Error::NotConverged {
                iterations,
                residual: s_norm,
            });
        }
        iterations += 1;

        let chol = robust_cholesky(&h)?;
        let dir = chol.solve(&s);
        let slope = s.dot(&dir);

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let trial: Vec<f64> = params
                .iter()
                .zip(dir.iter())
                .map(|(p, d)| p + step * d)
                .collect();
            let trial_eta = design.linear_predictor(&trial);
            let trial_ll = log_lik_at(data, &trial_eta);
            // Once the predicted gain is below the rounding noise of ℓ, the
            // Armijo test is meaningless; take the full step if it reduces the
            // gradient instead.
            let tiny_gain = slope <= 1e-10 * (1.0 + ll.abs());
            let ok = if tiny_gain && step == 1.0 {
                inf_norm(&design.score_at(&trial_eta)) < s_norm
            } else {
                trial_ll >= ll + ARMIJO * step * slope
            };
            if ok {
                // an ascent step that leaves the compact set: the likelihood
                // keeps increasing along a diverging ray
                let norm = coeff_norm(&trial, opts.with_intercept);
                if guard_separation && norm > opts.max_coeff_norm {
                    return Err(Error::SeparationDetected {
                        norm,
                        limit: opts.max_coeff_norm,
                    });
                }
                accepted = Some((trial, trial_eta, trial_ll));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((p, e, l)) => {
                params = p;
                eta = e;
                ll = l;
            }
            None => {
                // No ascent possible at machine precision; accept the point if
                // the gradient is already at rounding level.
                let scale = data.n() as f64 * f64::EPSILON * 1e3;
                if s_norm <= opts.grad_tol.max(scale) {
                    return Ok(finish(design, params, ll, h, true, iterations, s_norm));
                }
                return Err(Error::NotConverged {
                    iterations,
                    residual: s_norm,
                });
            }
        }
    }
}

pub(crate) fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn coeff_norm(params: &[f64], intercept: bool) -> f64 {
    let skip = usize::from(intercept);
    params[skip..].iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn log_lik_at(data: &Dataset, eta: &[f64]) -> f64 {
    let fam = data.family();
    eta.iter()
        .zip(data.y().iter())
        .map(|(&t, &y)| y * t - fam.cumulant(t))
        .sum()
}

fn finish(
    design: Design<'_>,
    params: Vec<f64>,
    log_lik: f64,
    hessian_at_mle: DMatrix<f64>,
    converged: bool,
    iterations: usize,
    score_norm: f64,
) -> FittedModel {
    let (intercept, coeffs) = if design.intercept {
        (Some(params[0]), DVector::from_column_slice(&params[1..]))
    } else {
        (None, DVector::from_vec(params))
    };
    FittedModel {
        support: design.support.clone(),
        coeffs,
        intercept,
        log_lik,
        hessian_at_mle,
        converged,
        iterations,
        score_norm,
    }
}

/// Fits every candidate independently. Output order matches input order and
/// failures are returned in place rather than aborting the batch.
pub fn refit_candidates(
    data: &Dataset,
    candidates: &[SupportSet],
    opts: &FitOptions,
) -> Vec<Result<FittedModel>> {
    candidates
        .par_iter()
        .map(|s| fit_mle(data, s, opts))
        .collect()
}
