//! Univariate natural exponential families, datasets, supports, and the
//! log-likelihood with its first two derivatives.
//!
//! Every family has density proportional to `exp{y·θ − b(θ)}` with the
//! canonical link, so `θ_i = x_iᵀφ`. The base-measure term is dropped from
//! the log-likelihood: it is identical across models and cancels in every
//! comparison this crate makes. The Gaussian family has unit variance.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExponentialFamily {
    Logistic,
    Poisson,
    /// Normal with known unit variance.
    Gaussian,
}

/// `(b′(θ), b″(θ), b‴(θ))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CumulantDerivs {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
}

const LOGISTIC_BRANCH: f64 = 35.0;

impl ExponentialFamily {
    /// The cumulant function `b(θ)`.
    #[inline]
    pub fn cumulant(self, theta: f64) -> f64 {
        match self {
            ExponentialFamily::Logistic => {
                if theta > LOGISTIC_BRANCH {
                    theta
                } else if theta < -LOGISTIC_BRANCH {
                    theta.exp()
                } else {
                    theta.exp().ln_1p()
                }
            }
            ExponentialFamily::Poisson => theta.exp(),
            ExponentialFamily::Gaussian => 0.5 * theta * theta,
        }
    }

    /// Mean function `b′(θ)`.
    #[inline]
    pub fn mean(self, theta: f64) -> f64 {
        match self {
            ExponentialFamily::Logistic => sigmoid(theta),
            ExponentialFamily::Poisson => theta.exp(),
            ExponentialFamily::Gaussian => theta,
        }
    }

    /// Variance function `b″(θ)`.
    #[inline]
    pub fn variance(self, theta: f64) -> f64 {
        match self {
            ExponentialFamily::Logistic => {
                let m = sigmoid(theta);
                m * (1.0 - m)
            }
            ExponentialFamily::Poisson => theta.exp(),
            ExponentialFamily::Gaussian => 1.0,
        }
    }

    pub fn derivs(self, theta: f64) -> CumulantDerivs {
        match self {
            ExponentialFamily::Logistic => {
                let m = sigmoid(theta);
                let v = m * (1.0 - m);
                CumulantDerivs {
                    b1: m,
                    b2: v,
                    b3: v * (1.0 - 2.0 * m),
                }
            }
            ExponentialFamily::Poisson => {
                let e = theta.exp();
                CumulantDerivs {
                    b1: e,
                    b2: e,
                    b3: e,
                }
            }
            ExponentialFamily::Gaussian => CumulantDerivs {
                b1: theta,
                b2: 1.0,
                b3: 0.0,
            },
        }
    }

    /// Canonical parameter whose mean is `mu` (the link function).
    pub fn link(self, mu: f64) -> f64 {
        match self {
            ExponentialFamily::Logistic => (mu / (1.0 - mu)).ln(),
            ExponentialFamily::Poisson => mu.ln(),
            ExponentialFamily::Gaussian => mu,
        }
    }

    fn check_response(self, y: f64) -> bool {
        if !y.is_finite() {
            return false;
        }
        match self {
            ExponentialFamily::Logistic => y == 0.0 || y == 1.0,
            ExponentialFamily::Poisson => y >= 0.0 && y.fract() == 0.0,
            ExponentialFamily::Gaussian => true,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ExponentialFamily::Logistic => "logistic",
            ExponentialFamily::Poisson => "poisson",
            ExponentialFamily::Gaussian => "gaussian",
        }
    }
}

impl fmt::Display for ExponentialFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExponentialFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "logistic" | "binomial" => Ok(ExponentialFamily::Logistic),
            "poisson" => Ok(ExponentialFamily::Poisson),
            "gaussian" | "normal" => Ok(ExponentialFamily::Gaussian),
            other => Err(Error::InvalidArgument(format!("unknown family `{other}`"))),
        }
    }
}

#[inline]
pub fn sigmoid(theta: f64) -> f64 {
    if theta >= 0.0 {
        1.0 / (1.0 + (-theta).exp())
    } else {
        let e = theta.exp();
        e / (1.0 + e)
    }
}

/// An `n × p` design with its response. Validated once at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
    family: ExponentialFamily,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, family: ExponentialFamily) -> Result<Self> {
        let (n, p) = x.shape();
        if n == 0 || p == 0 {
            return Err(Error::InvalidData(format!(
                "design must be non-empty, got {n}x{p}"
            )));
        }
        if y.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: y.len(),
            });
        }
        if let Some(idx) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!(
                "non-finite covariate at row {}, column {}",
                idx % n,
                idx / n
            )));
        }
        if let Some(i) = y.iter().position(|&v| !family.check_response(v)) {
            return Err(Error::InvalidData(format!(
                "response {} at row {i} is not valid for the {family} family",
                y[i]
            )));
        }
        Ok(Dataset { x, y, family })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn family(&self) -> ExponentialFamily {
        self.family
    }

    /// New dataset made of the given rows, in the given order.
    pub fn subset_rows(&self, rows: &[usize]) -> Dataset {
        let x = DMatrix::from_fn(rows.len(), self.p(), |i, j| self.x[(rows[i], j)]);
        let y = DVector::from_fn(rows.len(), |i, _| self.y[rows[i]]);
        Dataset {
            x,
            y,
            family: self.family,
        }
    }

    pub(crate) fn from_parts_unchecked(
        x: DMatrix<f64>,
        y: DVector<f64>,
        family: ExponentialFamily,
    ) -> Self {
        Dataset { x, y, family }
    }
}

/// A model: strictly increasing column indices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct SupportSet(Vec<usize>);

impl SupportSet {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "support indices must be strictly increasing: {indices:?}"
            )));
        }
        Ok(SupportSet(indices))
    }

    /// Sorts and deduplicates.
    pub fn from_indices<I: IntoIterator<Item = usize>>(indices: I) -> Self {
        let mut v: Vec<usize> = indices.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        SupportSet(v)
    }

    pub fn empty() -> Self {
        SupportSet(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.0.binary_search(&j).is_ok()
    }

    pub fn is_subset_of(&self, other: &SupportSet) -> bool {
        self.iter().all(|j| other.contains(j))
    }

    pub fn check_bounds(&self, p: usize) -> Result<()> {
        match self.0.last() {
            Some(&last) if last >= p => Err(Error::InvalidArgument(format!(
                "support index {last} out of range for p = {p}"
            ))),
            _ => Ok(()),
        }
    }

    /// Smaller size first, then lexicographic.
    pub fn canonical_cmp(&self, other: &SupportSet) -> std::cmp::Ordering {
        self.len()
            .cmp(&other.len())
            .then_with(|| self.0.cmp(&other.0))
    }
}

impl TryFrom<Vec<usize>> for SupportSet {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        SupportSet::new(v)
    }
}

impl From<SupportSet> for Vec<usize> {
    fn from(s: SupportSet) -> Self {
        s.0
    }
}

impl fmt::Display for SupportSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (k, j) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{j}")?;
        }
        write!(f, "}}")
    }
}

/// A restricted model view: the columns in `support`, plus an optional
/// leading intercept parameter.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Design<'a> {
    pub data: &'a Dataset,
    pub support: &'a SupportSet,
    pub intercept: bool,
}

impl<'a> Design<'a> {
    pub fn new(data: &'a Dataset, support: &'a SupportSet, intercept: bool) -> Self {
        Design {
            data,
            support,
            intercept,
        }
    }

    pub fn dim(&self) -> usize {
        self.support.len() + usize::from(self.intercept)
    }

    pub fn check(&self, params: &[f64]) -> Result<()> {
        self.support.check_bounds(self.data.p())?;
        if params.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: params.len(),
            });
        }
        Ok(())
    }

    fn split<'p>(&self, params: &'p [f64]) -> (f64, &'p [f64]) {
        if self.intercept {
            (params[0], &params[1..])
        } else {
            (0.0, params)
        }
    }

    pub fn linear_predictor(&self, params: &[f64]) -> Vec<f64> {
        let (b0, coeffs) = self.split(params);
        let mut eta = vec![b0; self.data.n()];
        for (&j, &c) in self.support.indices().iter().zip(coeffs) {
            if c == 0.0 {
                continue;
            }
            for (e, &xij) in eta.iter_mut().zip(self.data.x.column(j).iter()) {
                *e += c * xij;
            }
        }
        eta
    }

    pub fn log_likelihood(&self, params: &[f64]) -> f64 {
        let fam = self.data.family;
        self.linear_predictor(params)
            .iter()
            .zip(self.data.y.iter())
            .map(|(&t, &y)| y * t - fam.cumulant(t))
            .sum()
    }

    /// Column `k` of the restricted design (`k = 0` is the intercept when present).
    fn column(&self, k: usize) -> Option<nalgebra::DVectorView<'a, f64>> {
        let k = if self.intercept {
            if k == 0 {
                return None;
            }
            k - 1
        } else {
            k
        };
        Some(self.data.x.column(self.support.indices()[k]))
    }

    pub fn score_at(&self, eta: &[f64]) -> DVector<f64> {
        let fam = self.data.family;
        let resid: Vec<f64> = eta
            .iter()
            .zip(self.data.y.iter())
            .map(|(&t, &y)| y - fam.mean(t))
            .collect();
        DVector::from_fn(self.dim(), |k, _| match self.column(k) {
            None => resid.iter().sum(),
            Some(col) => col.iter().zip(&resid).map(|(x, r)| x * r).sum(),
        })
    }

    pub fn hessian_at(&self, eta: &[f64]) -> DMatrix<f64> {
        let fam = self.data.family;
        let w: Vec<f64> = eta.iter().map(|&t| fam.variance(t)).collect();
        self.weighted_gram(&w)
    }

    pub fn weighted_gram(&self, w: &[f64]) -> DMatrix<f64> {
        let d = self.dim();
        let mut h = DMatrix::zeros(d, d);
        for a in 0..d {
            let ca = self.column(a);
            for b in 0..=a {
                let cb = self.column(b);
                let v: f64 = match (&ca, &cb) {
                    (None, None) => w.iter().sum(),
                    (Some(c), None) | (None, Some(c)) => {
                        c.iter().zip(w).map(|(x, wi)| x * wi).sum()
                    }
                    (Some(c1), Some(c2)) => c1
                        .iter()
                        .zip(c2.iter())
                        .zip(w)
                        .map(|((x1, x2), wi)| x1 * x2 * wi)
                        .sum(),
                };
                h[(a, b)] = v;
                h[(b, a)] = v;
            }
        }
        h
    }

    pub fn score(&self, params: &[f64]) -> DVector<f64> {
        self.score_at(&self.linear_predictor(params))
    }

    pub fn hessian(&self, params: &[f64]) -> DMatrix<f64> {
        self.hessian_at(&self.linear_predictor(params))
    }
}

/// `Σ_i [y_i θ_i − b(θ_i)]` with `θ_i = x_{iJ}ᵀφ_J`.
pub fn log_likelihood(data: &Dataset, support: &SupportSet, coeffs: &[f64]) -> Result<f64> {
    let d = Design::new(data, support, false);
    d.check(coeffs)?;
    Ok(d.log_likelihood(coeffs))
}

/// Gradient of [`log_likelihood`]: `Σ_i x_{iJ}(y_i − b′(θ_i))`.
pub fn score(data: &Dataset, support: &SupportSet, coeffs: &[f64]) -> Result<DVector<f64>> {
    let d = Design::new(data, support, false);
    d.check(coeffs)?;
    Ok(d.score(coeffs))
}

/// Negated second derivative of [`log_likelihood`]: `Σ_i x_{iJ}x_{iJ}ᵀ b″(θ_i)`.
pub fn hessian(data: &Dataset, support: &SupportSet, coeffs: &[f64]) -> Result<DMatrix<f64>> {
    let d = Design::new(data, support, false);
    d.check(coeffs)?;
    Ok(d.hessian(coeffs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const FAMILIES: [ExponentialFamily; 3] = [
        ExponentialFamily::Logistic,
        ExponentialFamily::Poisson,
        ExponentialFamily::Gaussian,
    ];

    #[test]
    fn cumulant_values() {
        assert_relative_eq!(
            ExponentialFamily::Logistic.cumulant(0.0),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            ExponentialFamily::Poisson.cumulant(1.0),
            std::f64::consts::E,
            epsilon = 1e-15
        );
        assert_eq!(ExponentialFamily::Gaussian.cumulant(2.0), 2.0);
    }

    #[test]
    fn logistic_cumulant_is_overflow_safe() {
        let f = ExponentialFamily::Logistic;
        assert_eq!(f.cumulant(700.0), 700.0);
        assert!(f.cumulant(-700.0) > 0.0 && f.cumulant(-700.0) < 1e-300);
        // both sides of the branch agree with the direct formula
        for t in [-35.0f64, -34.9, 34.9, 35.0, 35.1] {
            let direct = t.exp().ln_1p();
            assert_relative_eq!(f.cumulant(t), direct, max_relative = 1e-14);
        }
    }

    #[test]
    fn derivative_values() {
        let d = ExponentialFamily::Logistic.derivs(0.0);
        assert_eq!((d.b1, d.b2, d.b3), (0.5, 0.25, 0.0));
        let d = ExponentialFamily::Gaussian.derivs(-3.2);
        assert_eq!((d.b1, d.b2, d.b3), (-3.2, 1.0, 0.0));
        let e = 0.3f64.exp();
        let d = ExponentialFamily::Poisson.derivs(0.3);
        assert_eq!((d.b1, d.b2, d.b3), (e, e, e));
    }

    #[test]
    fn derivatives_match_finite_differences_of_cumulant() {
        for fam in FAMILIES {
            for k in -20..=20 {
                let t = k as f64 * 0.37;
                let h = 1e-5;
                let d = fam.derivs(t);
                let fd1 = (fam.cumulant(t + h) - fam.cumulant(t - h)) / (2.0 * h);
                let fd2 = (fam.mean(t + h) - fam.mean(t - h)) / (2.0 * h);
                let fd3 = (fam.variance(t + h) - fam.variance(t - h)) / (2.0 * h);
                assert!((d.b1 - fd1).abs() <= 1e-6 * (1.0 + fd1.abs()), "{fam} b1 at {t}");
                assert!((d.b2 - fd2).abs() <= 1e-6 * (1.0 + fd2.abs()), "{fam} b2 at {t}");
                assert!((d.b3 - fd3).abs() <= 1e-6 * (1.0 + fd3.abs()), "{fam} b3 at {t}");
            }
        }
    }

    #[test]
    fn convexity_on_grid() {
        for fam in FAMILIES {
            for k in -700..=700 {
                assert!(fam.variance(k as f64) >= 0.0);
            }
        }
    }

    #[test]
    fn dataset_validation() {
        let x = DMatrix::from_element(2, 1, 1.0);
        let bad = DVector::from_vec(vec![0.0, 2.0]);
        assert!(Dataset::new(x.clone(), bad.clone(), ExponentialFamily::Logistic).is_err());
        assert!(Dataset::new(x.clone(), bad, ExponentialFamily::Poisson).is_ok());
        let frac = DVector::from_vec(vec![0.5, 1.0]);
        assert!(Dataset::new(x.clone(), frac.clone(), ExponentialFamily::Poisson).is_err());
        assert!(Dataset::new(x.clone(), frac, ExponentialFamily::Gaussian).is_ok());
        let mut xn = x.clone();
        xn[(1, 0)] = f64::NAN;
        let y = DVector::from_vec(vec![0.0, 1.0]);
        assert!(Dataset::new(xn, y.clone(), ExponentialFamily::Gaussian).is_err());
        assert!(Dataset::new(x, DVector::zeros(3), ExponentialFamily::Gaussian).is_err());
        assert!(Dataset::new(DMatrix::zeros(0, 1), DVector::zeros(0), ExponentialFamily::Gaussian).is_err());
    }

    #[test]
    fn support_set_rules() {
        assert!(SupportSet::new(vec![0, 2, 5]).is_ok());
        assert!(SupportSet::new(vec![2, 2]).is_err());
        assert!(SupportSet::new(vec![3, 1]).is_err());
        let s = SupportSet::from_indices([4, 1, 4, 0]);
        assert_eq!(s.indices(), &[0, 1, 4]);
        assert!(s.check_bounds(5).is_ok());
        assert!(s.check_bounds(4).is_err());
        assert_eq!(s.to_string(), "{0,1,4}");
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, "[0,1,4]");
        assert!(serde_json::from_str::<SupportSet>("[1,0]").is_err());
    }

    #[test]
    fn log_likelihood_trivial_cases() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 3.0, -2.0]);
        let y = DVector::from_vec(vec![1.0, 0.0, 1.0]);
        let data = Dataset::new(x, y, ExponentialFamily::Logistic).unwrap();
        let s = SupportSet::from_indices([0, 1]);
        let ll = log_likelihood(&data, &s, &[0.0, 0.0]).unwrap();
        assert_relative_eq!(ll, -3.0 * std::f64::consts::LN_2, epsilon = 1e-14);
        assert!(matches!(
            log_likelihood(&data, &s, &[0.0]),
            Err(Error::DimensionMismatch { .. })
        ));

        let x = DMatrix::from_element(2, 1, 1.0);
        let y = DVector::from_vec(vec![1.0, -1.0]);
        let data = Dataset::new(x, y, ExponentialFamily::Gaussian).unwrap();
        let ll = log_likelihood(&data, &SupportSet::from_indices([0]), &[0.0]).unwrap();
        assert_eq!(ll, 0.0);
    }

    #[test]
    fn gaussian_hessian_is_gram_matrix() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, -1.0, 0.5, 3.0, -2.0, 0.1, 0.2]);
        let y = DVector::from_vec(vec![0.3, 0.0, 1.0, -2.0]);
        let data = Dataset::new(x.clone(), y, ExponentialFamily::Gaussian).unwrap();
        let h = hessian(&data, &SupportSet::from_indices([0, 1]), &[0.7, -0.4]).unwrap();
        assert_eq!(h, x.transpose() * &x);
    }

    #[test]
    fn logistic_hessian_at_zero() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 3.0, -2.0]);
        let y = DVector::from_vec(vec![1.0, 0.0, 1.0]);
        let data = Dataset::new(x.clone(), y, ExponentialFamily::Logistic).unwrap();
        let h = hessian(&data, &SupportSet::from_indices([0, 1]), &[0.0, 0.0]).unwrap();
        let expect = (x.transpose() * &x) * 0.25;
        assert!((h - expect).amax() < 1e-14);
    }

    #[test]
    fn intercept_design_adds_ones_column() {
        let x = DMatrix::from_row_slice(3, 1, &[1.0, -1.0, 2.0]);
        let y = DVector::from_vec(vec![0.5, 0.0, 1.0]);
        let data = Dataset::new(x, y, ExponentialFamily::Gaussian).unwrap();
        let s = SupportSet::from_indices([0]);
        let d = Design::new(&data, &s, true);
        let h = d.hessian(&[0.1, 0.2]);
        assert_eq!(h, DMatrix::from_row_slice(2, 2, &[3.0, 2.0, 2.0, 6.0]));
        let eta = d.linear_predictor(&[0.1, 0.2]);
        assert_relative_eq!(eta[2], 0.5, epsilon = 1e-15);
    }

    fn random_dataset(fam: ExponentialFamily, seed: u64) -> Dataset {
        use rand::Rng;
        let mut rng = crate::seed::rng(seed);
        let (n, p) = (12, 3);
        let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(n, |_, _| match fam {
            ExponentialFamily::Logistic => f64::from(rng.random_bool(0.4)),
            ExponentialFamily::Poisson => rng.random_range(0..4) as f64,
            ExponentialFamily::Gaussian => rng.random_range(-2.0..2.0),
        });
        Dataset::new(x, y, fam).unwrap()
    }

    proptest! {
        #[test]
        fn log_likelihood_is_concave(
            fam_idx in 0usize..3,
            seed in 0u64..1000,
            a in proptest::collection::vec(-2.0f64..2.0, 3),
            b in proptest::collection::vec(-2.0f64..2.0, 3),
        ) {
            let data = random_dataset(FAMILIES[fam_idx], seed);
            let s = SupportSet::from_indices([0, 1, 2]);
            let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
            let lm = log_likelihood(&data, &s, &mid).unwrap();
            let la = log_likelihood(&data, &s, &a).unwrap();
            let lb = log_likelihood(&data, &s, &b).unwrap();
            prop_assert!(lm >= 0.5 * la + 0.5 * lb - 1e-10);
        }

        #[test]
        fn restriction_matches_zero_padding(
            fam_idx in 0usize..3,
            seed in 0u64..1000,
            c0 in -1.5f64..1.5,
            c2 in -1.5f64..1.5,
        ) {
            let data = random_dataset(FAMILIES[fam_idx], seed);
            let full = SupportSet::from_indices([0, 1, 2]);
            let sub = SupportSet::from_indices([0, 2]);
            let lf = log_likelihood(&data, &full, &[c0, 0.0, c2]).unwrap();
            let ls = log_likelihood(&data, &sub, &[c0, c2]).unwrap();
            prop_assert!((lf - ls).abs() <= 1e-12 * (1.0 + lf.abs()));
        }
    }
}
