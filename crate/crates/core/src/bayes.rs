//! Laplace approximation of the marginal likelihood, a quadrature oracle for
//! small models, the three-region split of the evidence integral, and the
//! EBIC/Bayes equivalence report.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::criteria::{argmin_index, ebic_score, log_model_prior, PriorSpec};
use crate::error::{Error, Result};
use crate::family::{Dataset, Design, SupportSet};
use crate::fit::{inf_norm, robust_cholesky, FitOptions, FittedModel};

/// Coefficient prior `f_J` shared by every model, in any dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoefficientPrior {
    IsotropicGaussian { sigma: f64 },
    UniformBall { radius: f64 },
}

/// Constants `F₁` (sup of the density), `F₂` (inf over the ball of radius
/// `set_radius`), and `F₃` (sup of the gradient norm on that ball).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorBounds {
    pub f1: f64,
    pub f2: f64,
    pub f3: f64,
}

fn ln_unit_ball_volume(dim: usize) -> f64 {
    let k = dim as f64;
    0.5 * k * PI.ln() - statrs::function::gamma::ln_gamma(0.5 * k + 1.0)
}

impl CoefficientPrior {
    pub fn isotropic_gaussian(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("prior sigma must be positive, got {sigma}")));
        }
        Ok(CoefficientPrior::IsotropicGaussian { sigma })
    }

    /// A flat prior on a ball. The ball must contain the compact set of
    /// radius `mle_radius + 1` that holds every MLE.
    pub fn uniform_ball(radius: f64, mle_radius: f64) -> Result<Self> {
        if !(radius > mle_radius + 1.0) || !radius.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "ball radius {radius} must exceed MLE radius + 1 = {}",
                mle_radius + 1.0
            )));
        }
        Ok(CoefficientPrior::UniformBall { radius })
    }

    pub fn log_density(&self, phi: &[f64]) -> f64 {
        let k = phi.len() as f64;
        let sq: f64 = phi.iter().map(|v| v * v).sum();
        match *self {
            CoefficientPrior::IsotropicGaussian { sigma } => {
                -0.5 * k * (2.0 * PI * sigma * sigma).ln() - sq / (2.0 * sigma * sigma)
            }
            CoefficientPrior::UniformBall { radius } => {
                if sq.sqrt() <= radius {
                    -(ln_unit_ball_volume(phi.len()) + k * radius.ln())
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    pub fn bounds(&self, dim: usize, set_radius: f64) -> PriorBounds {
        let k = dim as f64;
        match *self {
            CoefficientPrior::IsotropicGaussian { sigma } => {
                let s2 = sigma * sigma;
                let f1 = (2.0 * PI * s2).powf(-0.5 * k);
                let f2 = f1 * (-set_radius * set_radius / (2.0 * s2)).exp();
                // ‖∇f‖ = f1·(r/σ²)·exp(−r²/2σ²), maximized at r = σ
                let r = set_radius.min(sigma);
                let f3 = f1 * (r / s2) * (-r * r / (2.0 * s2)).exp();
                PriorBounds { f1, f2, f3 }
            }
            CoefficientPrior::UniformBall { radius } => {
                let f = (-(ln_unit_ball_volume(dim) + k * radius.ln())).exp();
                PriorBounds { f1: f, f2: f, f3: 0.0 }
            }
        }
    }
}

impl Default for CoefficientPrior {
    fn default() -> Self {
        CoefficientPrior::IsotropicGaussian { sigma: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaplaceComponents {
    pub log_lik: f64,
    pub log_f_at_mle: f64,
    pub neg_half_logdet_h: f64,
    pub half_dim_log_2pi: f64,
}

impl LaplaceComponents {
    pub fn sum(&self) -> f64 {
        self.log_lik + self.log_f_at_mle + self.neg_half_logdet_h + self.half_dim_log_2pi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesScore {
    pub support: SupportSet,
    /// `components.sum() + log_prior_model`.
    pub log_marginal_laplace: f64,
    pub log_prior_model: f64,
    pub components: LaplaceComponents,
}

fn log_det_from_cholesky(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// `log P(J) + ℓ(φ̂) + log f(φ̂) − ½ log|H(φ̂)| + (|J|/2) log 2π`.
///
/// Integration runs over every fitted parameter, including the intercept
/// when one was fitted.
pub fn laplace_log_marginal(
    fit: &FittedModel,
    prior: &CoefficientPrior,
    model_log_prior: f64,
) -> Result<BayesScore> {
    if !fit.converged {
        return Err(Error::UnconvergedFit);
    }
    let dim = fit.dim();
    let params = fit.params();
    let neg_half_logdet_h = if dim == 0 {
        0.0
    } else {
        let chol = nalgebra::Cholesky::new(fit.hessian_at_mle.clone()).ok_or(Error::SingularHessian)?;
        -0.5 * log_det_from_cholesky(&chol.l())
    };
    let components = LaplaceComponents {
        log_lik: fit.log_lik,
        log_f_at_mle: prior.log_density(&params),
        neg_half_logdet_h,
        half_dim_log_2pi: 0.5 * dim as f64 * (2.0 * PI).ln(),
    };
    Ok(BayesScore {
        support: fit.support.clone(),
        log_marginal_laplace: components.sum() + model_log_prior,
        log_prior_model: model_log_prior,
        components,
    })
}

/// Laplace approximation centred at the posterior mode, with the Hessian of
/// the log posterior. Exact when both likelihood and prior are Gaussian.
pub fn posterior_mode_laplace(
    data: &Dataset,
    support: &SupportSet,
    prior: &CoefficientPrior,
    model_log_prior: f64,
    opts: &FitOptions,
) -> Result<f64> {
    let CoefficientPrior::IsotropicGaussian { sigma } = *prior else {
        return Err(Error::InvalidArgument(
            "posterior-mode Laplace needs a Gaussian prior".into(),
        ));
    };
    let design = Design::new(data, support, opts.with_intercept);
    let dim = design.dim();
    let prec = 1.0 / (sigma * sigma);
    let log_post = |p: &[f64]| design.log_likelihood(p) + prior.log_density(p);
    let mut params = vec![0.0; dim];
    let mut current = log_post(&params);
    for _ in 0..opts.max_iter {
        let eta = design.linear_predictor(&params);
        let mut g = design.score_at(&eta);
        let mut h = design.hessian_at(&eta);
        for i in 0..dim {
            g[i] -= prec * params[i];
            h[(i, i)] += prec;
        }
        if inf_norm(&g) <= opts.grad_tol {
            let chol = robust_cholesky(&h)?;
            return Ok(current - 0.5 * log_det_from_cholesky(&chol.l())
                + 0.5 * dim as f64 * (2.0 * PI).ln()
                + model_log_prior);
        }
        let dir = robust_cholesky(&h)?.solve(&g);
        let mut step = 1.0;
        loop {
            let trial: Vec<f64> = params.iter().zip(dir.iter()).map(|(a, d)| a + step * d).collect();
            let v = log_post(&trial);
            if v >= current || step < 1e-12 {
                params = trial;
                current = v;
                break;
            }
            step *= 0.5;
        }
    }
    Err(Error::NotConverged {
        iterations: opts.max_iter,
        residual: f64::NAN,
    })
}

/// Gauss–Hermite rule for weight `e^{−x²}`: nodes and log-weights.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    const PIM4: f64 = 0.751_125_544_464_942_5; // π^{-1/4}
    let mut x = vec![0.0; n];
    let mut logw = vec![0.0; n];
    let nf = n as f64;
    let m = n.div_ceil(2);
    let mut z = 0.0;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 3e-14 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        let lw = std::f64::consts::LN_2 - 2.0 * pp.abs().ln();
        logw[i] = lw;
        logw[n - 1 - i] = lw;
    }
    // ascending order
    x.reverse();
    logw.reverse();
    (x, logw)
}

/// Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = 1.0;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = ((2.0 * jf - 1.0) * z * p2 - (jf - 1.0) * p3) / jf;
            }
            pp = nf * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

pub(crate) fn log_sum_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m.is_nan() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log integrand `ℓ(φ) + log f(φ)` in whitened coordinates
/// `φ = φ̂ + L^{-T}u`, where `H(φ̂) = LLᵀ`.
struct WhitenedIntegrand<'a> {
    data: &'a Dataset,
    prior: CoefficientPrior,
    mle: Vec<f64>,
    eta_hat: Vec<f64>,
    /// `n × k`, `X L^{-T}`
    dirs: DMatrix<f64>,
    /// `L^{-T}`
    back: DMatrix<f64>,
    log_det_h: f64,
}

impl<'a> WhitenedIntegrand<'a> {
    fn new(data: &'a Dataset, fit: &FittedModel, prior: &CoefficientPrior) -> Result<Self> {
        let design = Design::new(data, &fit.support, fit.intercept.is_some());
        let mle = fit.params();
        let k = mle.len();
        let chol = nalgebra::Cholesky::new(fit.hessian_at_mle.clone()).ok_or(Error::SingularHessian)?;
        let l = chol.l();
        let l_inv = l
            .solve_lower_triangular(&DMatrix::identity(k, k))
            .ok_or(Error::SingularHessian)?;
        let back = l_inv.transpose();
        // columns of the restricted design times L^{-T}
        let mut dirs = DMatrix::zeros(data.n(), k);
        for c in 0..k {
            let mut e = vec![0.0; k];
            for (r, v) in e.iter_mut().enumerate() {
                *v = back[(r, c)];
            }
            let col = design.linear_predictor(&e);
            dirs.set_column(c, &DVector::from_vec(col));
        }
        Ok(WhitenedIntegrand {
            data,
            prior: *prior,
            eta_hat: design.linear_predictor(&mle),
            mle,
            dirs,
            back,
            log_det_h: log_det_from_cholesky(&l),
        })
    }

    fn dim(&self) -> usize {
        self.mle.len()
    }

    fn eval(&self, u: &[f64]) -> f64 {
        let fam = self.data.family();
        let mut ll = 0.0;
        for (i, (&e0, &y)) in self.eta_hat.iter().zip(self.data.y().iter()).enumerate() {
            let mut t = e0;
            for (c, &uc) in u.iter().enumerate() {
                t += self.dirs[(i, c)] * uc;
            }
            ll += y * t - fam.cumulant(t);
        }
        let phi: Vec<f64> = (0..self.dim())
            .map(|r| self.mle[r] + (0..self.dim()).map(|c| self.back[(r, c)] * u[c]).sum::<f64>())
            .collect();
        ll + self.prior.log_density(&phi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadratureOptions {
    pub initial_nodes: usize,
    pub max_nodes: usize,
    /// Convergence threshold on the change of the log integral between
    /// successive node doublings.
    pub tol: f64,
}

impl Default for QuadratureOptions {
    fn default() -> Self {
        QuadratureOptions {
            initial_nodes: 40,
            max_nodes: 160,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureResult {
    /// `log ∫ L f dφ + log P(J)`.
    pub log_marginal: f64,
    /// Nodes per axis at convergence.
    pub nodes: usize,
    /// Change from the previous node count.
    pub change: f64,
}

pub const MAX_QUADRATURE_DIM: usize = 3;

fn gh_log_integral(f: &WhitenedIntegrand<'_>, nodes: usize) -> f64 {
    let k = f.dim();
    let (x, logw) = gauss_hermite(nodes);
    let sqrt2 = std::f64::consts::SQRT_2;
    let total = nodes.pow(k as u32);
    let mut terms = Vec::with_capacity(total);
    let mut idx = vec![0usize; k];
    let mut u = vec![0.0; k];
    for _ in 0..total {
        let mut lw = 0.0;
        for d in 0..k {
            let xi = x[idx[d]];
            u[d] = sqrt2 * xi;
            lw += logw[idx[d]] + xi * xi;
        }
        terms.push(lw + f.eval(&u));
        for d in 0..k {
            idx[d] += 1;
            if idx[d] < nodes {
                break;
            }
            idx[d] = 0;
        }
    }
    0.5 * k as f64 * std::f64::consts::LN_2 - 0.5 * f.log_det_h + log_sum_exp(terms)
}

/// `log ∫ L(φ)f(φ)dφ + log P(J)` by adaptive Gauss–Hermite quadrature centred
/// at the MLE and scaled by `H(φ̂)^{-1/2}`, doubling nodes until the log
/// integral moves by less than `opts.tol`.
pub fn quadrature_log_marginal(
    data: &Dataset,
    fit: &FittedModel,
    prior: &CoefficientPrior,
    model_log_prior: f64,
    opts: &QuadratureOptions,
) -> Result<QuadratureResult> {
    let k = fit.dim();
    if k > MAX_QUADRATURE_DIM {
        return Err(Error::DimensionTooLarge {
            dim: k,
            max: MAX_QUADRATURE_DIM,
        });
    }
    if !fit.converged {
        return Err(Error::UnconvergedFit);
    }
    if k == 0 {
        return Ok(QuadratureResult {
            log_marginal: fit.log_lik + prior.log_density(&[]) + model_log_prior,
            nodes: 0,
            change: 0.0,
        });
    }
    let f = WhitenedIntegrand::new(data, fit, prior)?;
    let mut nodes = opts.initial_nodes.max(2);
    let mut prev = gh_log_integral(&f, nodes);
    let mut change = f64::INFINITY;
    while nodes * 2 <= opts.max_nodes.max(nodes) {
        nodes *= 2;
        let next = gh_log_integral(&f, nodes);
        change = (next - prev).abs();
        prev = next;
        if change <= opts.tol {
            return Ok(QuadratureResult {
                log_marginal: next + model_log_prior,
                nodes,
                change,
            });
        }
    }
    Err(Error::QuadratureNotConverged { nodes, change })
}

/// Log-masses of the evidence integral over `𝒩₁ = {‖H^{1/2}(φ−φ̂)‖ ≤ √(4 log np)}`,
/// `𝒩₂∖𝒩₁` with `𝒩₂ = {‖H^{1/2}(φ−φ̂)‖ ≤ √(λ₁n)}`, and the complement of `𝒩₂`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMasses {
    pub log_int1: f64,
    pub log_int2: f64,
    pub log_int3: f64,
    /// Log-sum-exp of the three regions.
    pub log_total: f64,
    pub radius1: f64,
    /// Never below `radius1`; the middle shell is empty when `λ₁n ≤ 4 log np`.
    pub radius2: f64,
}

struct Directions {
    dirs: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

/// Quadrature over the unit sphere in dimension 1, 2, or 3.
fn sphere_rule(k: usize, level: usize) -> Directions {
    match k {
        1 => Directions {
            dirs: vec![vec![1.0], vec![-1.0]],
            weights: vec![1.0, 1.0],
        },
        2 => {
            let m = 32 << level;
            let dirs = (0..m)
                .map(|i| {
                    let a = 2.0 * PI * i as f64 / m as f64;
                    vec![a.cos(), a.sin()]
                })
                .collect();
            Directions {
                dirs,
                weights: vec![2.0 * PI / m as f64; m],
            }
        }
        _ => {
            let m = 32 << level;
            let (zs, wz) = gauss_legendre(16 << level);
            let mut dirs = Vec::new();
            let mut weights = Vec::new();
            for (z, w) in zs.iter().zip(&wz) {
                let s = (1.0 - z * z).sqrt();
                for i in 0..m {
                    let a = 2.0 * PI * i as f64 / m as f64;
                    dirs.push(vec![s * a.cos(), s * a.sin(), *z]);
                    weights.push(w * 2.0 * PI / m as f64);
                }
            }
            Directions { dirs, weights }
        }
    }
}

/// Log of `Σ_dirs w_d ∫_{lo}^{hi} g(r·d) r^{k−1} dr` with composite
/// Gauss–Legendre panels; `hi = ∞` is handled by `r = lo + t/(1−t)`.
fn radial_log_integral(
    f: &WhitenedIntegrand<'_>,
    sphere: &Directions,
    lo: f64,
    hi: f64,
    panels: usize,
    rule: &(Vec<f64>, Vec<f64>),
) -> f64 {
    if hi <= lo {
        return f64::NEG_INFINITY;
    }
    let k = f.dim();
    let infinite = hi.is_infinite();
    let mut terms = Vec::new();
    let mut u = vec![0.0; k];
    for p in 0..panels {
        let a = p as f64 / panels as f64;
        let b = (p + 1) as f64 / panels as f64;
        for (x, w) in rule.0.iter().zip(&rule.1) {
            let t = 0.5 * (a + b) + 0.5 * (b - a) * x;
            let wt = 0.5 * (b - a) * w;
            let (r, jac) = if infinite {
                (lo + t / (1.0 - t), 1.0 / ((1.0 - t) * (1.0 - t)))
            } else {
                (lo + (hi - lo) * t, hi - lo)
            };
            let base = (wt * jac).ln() + (k as f64 - 1.0) * r.ln();
            for (d, wd) in sphere.dirs.iter().zip(&sphere.weights) {
                for c in 0..k {
                    u[c] = r * d[c];
                }
                terms.push(base + wd.ln() + f.eval(&u));
            }
        }
    }
    log_sum_exp(terms)
}

/// Splits the evidence integral into the three neighbourhood regions and
/// integrates each in whitened polar coordinates.
pub fn region_decomposition(
    data: &Dataset,
    fit: &FittedModel,
    prior: &CoefficientPrior,
    log_np: f64,
    lambda1_hat: f64,
) -> Result<RegionMasses> {
    let k = fit.dim();
    if k > MAX_QUADRATURE_DIM {
        return Err(Error::DimensionTooLarge {
            dim: k,
            max: MAX_QUADRATURE_DIM,
        });
    }
    if k == 0 {
        return Err(Error::InvalidArgument("region decomposition needs |J| >= 1".into()));
    }
    if !fit.converged {
        return Err(Error::UnconvergedFit);
    }
    let f = WhitenedIntegrand::new(data, fit, prior)?;
    let radius1 = (4.0 * log_np).sqrt();
    let radius2 = (lambda1_hat * data.n() as f64).sqrt().max(radius1);
    let offset = -0.5 * f.log_det_h;
    let rule = gauss_legendre(20);

    let compute = |level: usize| {
        let sphere = sphere_rule(k, level);
        let panels = 8 << level;
        [
            radial_log_integral(&f, &sphere, 0.0, radius1, panels, &rule) + offset,
            radial_log_integral(&f, &sphere, radius1, radius2, panels, &rule) + offset,
            radial_log_integral(&f, &sphere, radius2, f64::INFINITY, panels, &rule) + offset,
        ]
    };
    let mut prev = compute(0);
    let mut change = f64::INFINITY;
    for level in 1..=3 {
        let next = compute(level);
        change = (log_sum_exp(next) - log_sum_exp(prev)).abs();
        prev = next;
        if change <= 1e-9 {
            break;
        }
    }
    if !(change <= 1e-7) {
        return Err(Error::QuadratureNotConverged { nodes: 0, change });
    }
    Ok(RegionMasses {
        log_int1: prev[0],
        log_int2: prev[1],
        log_int3: prev[2],
        log_total: log_sum_exp(prev),
        radius1,
        radius2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapEntry {
    pub support: SupportSet,
    pub ebic: f64,
    pub log_bayes: f64,
    /// `log Bayes_γ(J) + ½ BIC_γ(J)`.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub entries: Vec<GapEntry>,
    pub ebic_choice: SupportSet,
    pub bayes_choice: SupportSet,
    pub agree: bool,
    pub max_abs_gap: f64,
    pub gap_spread: f64,
}

/// Compares the EBIC minimizer with the Laplace-Bayes maximizer over the
/// candidates with `|J| ≤ q_cap`.
pub fn equivalence_report(
    fits: &[FittedModel],
    prior: &CoefficientPrior,
    gamma: f64,
    q_cap: usize,
    n: usize,
    p: usize,
) -> Result<EquivalenceReport> {
    let spec = PriorSpec { gamma, q_cap };
    let entries = fits
        .iter()
        .filter(|f| f.support.len() <= q_cap)
        .map(|f| {
            let s = ebic_score(f, n, p, gamma)?;
            let b = laplace_log_marginal(f, prior, log_model_prior(p, f.support.len(), &spec))?;
            Ok(GapEntry {
                support: f.support.clone(),
                ebic: s.ebic,
                log_bayes: b.log_marginal_laplace,
                gap: b.log_marginal_laplace + 0.5 * s.ebic,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let e = argmin_index(entries.iter().map(|e| (e.ebic, &e.support))).ok_or(Error::EmptyCandidates)?;
    let b = argmin_index(entries.iter().map(|e| (-e.log_bayes, &e.support))).ok_or(Error::EmptyCandidates)?;
    let gaps = entries.iter().map(|e| e.gap);
    let max_gap = gaps.clone().fold(f64::NEG_INFINITY, f64::max);
    let min_gap = gaps.clone().fold(f64::INFINITY, f64::min);
    Ok(EquivalenceReport {
        ebic_choice: entries[e].support.clone(),
        bayes_choice: entries[b].support.clone(),
        agree: entries[e].support == entries[b].support,
        max_abs_gap: gaps.map(f64::abs).fold(0.0, f64::max),
        gap_spread: max_gap - min_gap,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::ExponentialFamily;
    use crate::fit::fit_mle;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn hermite_rule_moments() {
        for n in [40, 80, 160] {
            let (x, lw) = gauss_hermite(n);
            let w: Vec<f64> = lw.iter().map(|v| v.exp()).collect();
            let m0: f64 = w.iter().sum();
            let m2: f64 = w.iter().zip(&x).map(|(w, x)| w * x * x).sum();
            let m4: f64 = w.iter().zip(&x).map(|(w, x)| w * x.powi(4)).sum();
            let sp = PI.sqrt();
            assert_relative_eq!(m0, sp, max_relative = 1e-12);
            assert_relative_eq!(m2, sp / 2.0, max_relative = 1e-12);
            assert_relative_eq!(m4, 0.75 * sp, max_relative = 1e-12);
            assert!(x.windows(2).all(|p| p[0] < p[1]));
        }
    }

    #[test]
    fn legendre_rule_moments() {
        let (x, w) = gauss_legendre(20);
        assert_relative_eq!(w.iter().sum::<f64>(), 2.0, epsilon = 1e-13);
        let m6: f64 = w.iter().zip(&x).map(|(w, x)| w * x.powi(6)).sum();
        assert_relative_eq!(m6, 2.0 / 7.0, epsilon = 1e-13);
    }

    #[test]
    fn sphere_rules_measure_surface_area() {
        assert_relative_eq!(sphere_rule(2, 0).weights.iter().sum::<f64>(), 2.0 * PI, epsilon = 1e-12);
        assert_relative_eq!(sphere_rule(3, 0).weights.iter().sum::<f64>(), 4.0 * PI, epsilon = 1e-12);
    }

    #[test]
    fn prior_bounds_and_validation() {
        assert!(CoefficientPrior::isotropic_gaussian(0.0).is_err());
        assert!(CoefficientPrior::uniform_ball(3.0, 2.5).is_err());
        let ball = CoefficientPrior::uniform_ball(5.0, 2.0).unwrap();
        // density integrates to one: vol(B_2(5)) = 25π
        assert_relative_eq!(ball.log_density(&[0.1, 0.2]), -(25.0 * PI).ln(), epsilon = 1e-12);
        assert_eq!(ball.log_density(&[5.0, 0.1]), f64::NEG_INFINITY);
        let g = CoefficientPrior::isotropic_gaussian(2.0).unwrap();
        let b = g.bounds(1, 1.0);
        assert_relative_eq!(b.f1, 1.0 / (8.0 * PI).sqrt(), epsilon = 1e-15);
        assert!(b.f2 < b.f1 && b.f3 > 0.0);
        // gradient bound by brute force over the interval
        let f1 = b.f1;
        let brute = (0..=1000)
            .map(|i| {
                let r = i as f64 / 1000.0;
                f1 * r / 4.0 * (-r * r / 8.0).exp()
            })
            .fold(0.0, f64::max);
        assert_relative_eq!(b.f3, brute, max_relative = 1e-9);
    }

    fn logistic(n: usize, coefs: &[f64], seed: u64) -> Dataset {
        let mut r = crate::seed::rng(seed);
        let p = coefs.len();
        let x = DMatrix::from_fn(n, p, |_, _| r.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |i, _| {
            let t: f64 = (0..p).map(|j| coefs[j] * x[(i, j)]).sum();
            f64::from(r.random_bool(crate::family::sigmoid(t)))
        });
        Dataset::new(x, y, ExponentialFamily::Logistic).unwrap()
    }

    #[test]
    fn components_sum_exactly() {
        let data = logistic(200, &[1.0, -0.5], 3);
        let fit = fit_mle(&data, &SupportSet::from_indices([0, 1]), &FitOptions::default()).unwrap();
        let s = laplace_log_marginal(&fit, &CoefficientPrior::default(), -1.25).unwrap();
        assert_eq!(s.log_marginal_laplace, s.components.sum() + s.log_prior_model);
    }

    #[test]
    fn empty_model_quadrature_equals_laplace() {
        let data = logistic(50, &[1.0], 4);
        let fit = fit_mle(&data, &SupportSet::empty(), &FitOptions::default()).unwrap();
        let prior = CoefficientPrior::default();
        let l = laplace_log_marginal(&fit, &prior, -0.5).unwrap();
        let q = quadrature_log_marginal(&data, &fit, &prior, -0.5, &QuadratureOptions::default()).unwrap();
        assert_eq!(l.log_marginal_laplace, q.log_marginal);
        assert_eq!(l.log_marginal_laplace, fit.log_lik - 0.5);
    }

    #[test]
    fn prior_scaling_shifts_log_marginal() {
        // a wider ball rescales the flat density by a constant
        let data = logistic(150, &[0.8], 5);
        let fit = fit_mle(&data, &SupportSet::from_indices([0]), &FitOptions::default()).unwrap();
        let a = CoefficientPrior::uniform_ball(4.0, 1.0).unwrap();
        let b = CoefficientPrior::uniform_ball(8.0, 1.0).unwrap();
        let la = laplace_log_marginal(&fit, &a, 0.0).unwrap().log_marginal_laplace;
        let lb = laplace_log_marginal(&fit, &b, 0.0).unwrap().log_marginal_laplace;
        assert_relative_eq!(la - lb, 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn quadrature_dimension_limit() {
        let data = logistic(100, &[0.5, 0.5, 0.5, 0.5], 6);
        let fit = fit_mle(&data, &SupportSet::from_indices([0, 1, 2, 3]), &FitOptions::default()).unwrap();
        let r = quadrature_log_marginal(&data, &fit, &CoefficientPrior::default(), 0.0, &QuadratureOptions::default());
        assert!(matches!(r, Err(Error::DimensionTooLarge { dim: 4, max: 3 })));
    }

    #[test]
    fn single_model_equivalence_agrees() {
        let data = logistic(100, &[1.0], 7);
        let fit = fit_mle(&data, &SupportSet::from_indices([0]), &FitOptions::default()).unwrap();
        let r = equivalence_report(&[fit], &CoefficientPrior::default(), 1.0, 5, 100, 1).unwrap();
        assert!(r.agree);
        assert_eq!(r.gap_spread, 0.0);
    }
}
