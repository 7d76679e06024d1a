//! Seeded end-to-end experiments and their reports.
//!
//! Every replicate draws its randomness from a seed derived from
//! `(config.seed, setting, replicate)`, and all parallel work is collected in
//! input order, so a report depends only on its configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::{
    equivalence_report, laplace_log_marginal, quadrature_log_marginal, CoefficientPrior, QuadratureOptions,
};
use crate::criteria::{cross_validate, ebic_score, select_best, stability_selection, StabilityOptions};
use crate::data::{load_csv, make_permuted_design};
use crate::diagnostics::TrueModel;
use crate::error::{Error, Result};
use crate::family::{sigmoid, Dataset, ExponentialFamily, SupportSet};
use crate::fit::{refit_candidates, FitOptions, FittedModel};
use crate::ising::{
    combine_graph, gibbs_sample, graph_metrics, node_candidates, to_node_labels, BinarySamples, CombineRule,
    GraphEstimate, IsingParameters, NeighborhoodOptions,
};
use crate::path::{candidate_supports, lasso_path, PathOptions};
use crate::seed::{derive_seed, rng};

pub const REPORT_SCHEMA: &str = "ebic-report/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    RegressionPermuted,
    IsingRecovery,
    Equivalence,
    ConsistencySweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// One column per entry of `gamma_list`.
    Ebic,
    /// EBIC with `γ = 0`.
    Bic,
    Cv,
    Stability,
}

/// Experiment description, read from TOML or JSON. Missing fields take
/// their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub n: usize,
    /// Sample sizes to sweep; `[n]` when empty.
    pub n_list: Vec<usize>,
    /// Number of covariates for synthetic data, number of permuted blocks
    /// when `data` is set, grid side for Ising recovery.
    pub p_or_blocks: usize,
    /// When set, synthetic runs use `p = ⌈n^p_exponent⌉` at each `n`.
    pub p_exponent: Option<f64>,
    pub gamma_list: Vec<f64>,
    pub q_cap: usize,
    pub replicates: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub family: ExponentialFamily,
    pub true_support_size: usize,
    /// Magnitude of the true coefficients; signs alternate `+, −, +, …`.
    pub signal: f64,
    pub prior_sigma: f64,
    pub edge_strength: f64,
    pub unary: f64,
    pub burn_in: usize,
    pub thin: usize,
    pub cv_folds: usize,
    pub stability: StabilityOptions,
    pub with_intercept: bool,
    pub path: PathOptions,
    pub fit: FitOptions,
    pub data: Option<PathBuf>,
    pub response: Option<String>,
    /// Adds wall-clock timings, which makes the report non-reproducible.
    pub record_timings: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: ExperimentKind::RegressionPermuted,
            n: 400,
            n_list: Vec::new(),
            p_or_blocks: 200,
            p_exponent: None,
            gamma_list: vec![0.0, 0.5, 1.0],
            q_cap: 10,
            replicates: 10,
            seed: 0,
            methods: vec![Method::Ebic],
            family: ExponentialFamily::Logistic,
            true_support_size: 3,
            signal: 2.0,
            prior_sigma: 5.0,
            edge_strength: 0.5,
            unary: 0.0,
            burn_in: 1000,
            thin: 1,
            cv_folds: 5,
            stability: StabilityOptions::default(),
            with_intercept: false,
            path: PathOptions::default(),
            fit: FitOptions::default(),
            data: None,
            response: None,
            record_timings: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses by extension: `.toml`, otherwise JSON.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "toml") {
            Self::from_toml(&text)
        } else {
            Self::from_json(&text)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("config: {m}")));
        if self.replicates == 0 {
            return bad("replicates must be at least 1");
        }
        if self.gamma_list.is_empty() {
            return bad("gamma_list must not be empty");
        }
        if self.gamma_list.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return bad("gamma values must be finite and non-negative");
        }
        if self.methods.is_empty() {
            return bad("methods must not be empty");
        }
        if self.n == 0 || self.n_list.contains(&0) || self.q_cap == 0 {
            return bad("n, n_list entries and q_cap must be positive");
        }
        if self.p_or_blocks == 0 && !(self.data.is_some() && self.kind == ExperimentKind::RegressionPermuted) {
            return bad("p_or_blocks must be positive");
        }
        if let Some(e) = self.p_exponent {
            if !(e > 0.0 && e.is_finite()) {
                return bad("p_exponent must be positive");
            }
        }
        if self.thin == 0 {
            return bad("thin must be at least 1");
        }
        if self.methods.contains(&Method::Cv) && self.cv_folds < 2 {
            return bad("cv_folds must be at least 2");
        }
        if !(self.prior_sigma > 0.0) {
            return bad("prior_sigma must be positive");
        }
        if self.kind == ExperimentKind::IsingRecovery && self.p_or_blocks < 2 {
            return bad("ising grid side must be at least 2");
        }
        if self.data.is_some() {
            if self.kind != ExperimentKind::RegressionPermuted {
                return bad("a data file is only used by regression_permuted");
            }
            if self.response.is_none() {
                return bad("data requires response");
            }
        }
        self.path.validate()?;
        self.fit.validate()
    }

    fn sample_sizes(&self) -> Vec<usize> {
        if self.n_list.is_empty() {
            vec![self.n]
        } else {
            self.n_list.clone()
        }
    }

    fn dimension_for(&self, n: usize) -> usize {
        match self.p_exponent {
            Some(e) => (n as f64).powf(e).ceil() as usize,
            None => self.p_or_blocks,
        }
    }

    /// Method columns in report order.
    pub fn selectors(&self) -> Vec<Selector> {
        let mut out = Vec::new();
        for m in &self.methods {
            let add: Vec<Selector> = match m {
                Method::Ebic => self.gamma_list.iter().map(|&g| Selector::Ebic(g)).collect(),
                Method::Bic => vec![Selector::Bic],
                Method::Cv => vec![Selector::Cv],
                Method::Stability => vec![Selector::Stability],
            };
            for s in add {
                if !out.contains(&s) {
                    out.push(s);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selector {
    Ebic(f64),
    Bic,
    Cv,
    Stability,
}

impl Selector {
    pub fn label(&self) -> String {
        match self {
            Selector::Ebic(g) => format!("ebic(gamma={g})"),
            Selector::Bic => "bic".into(),
            Selector::Cv => "cv".into(),
            Selector::Stability => "stability".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Setting {
    pub n: usize,
    pub p: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub setting: usize,
    pub n: usize,
    pub p: usize,
    pub method: String,
    /// Means over the successful replicates; absent when there were none.
    pub psr_mean: Option<f64>,
    pub fdr_mean: Option<f64>,
    pub exact_rate: Option<f64>,
    pub replicates_ok: usize,
    pub replicates_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub setting: usize,
    pub replicate: usize,
    pub method: String,
    /// Selected covariates (regression runs).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support: Option<SupportSet>,
    /// Selected edges (Ising runs).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<[usize; 2]>>,
    pub psr: Option<f64>,
    pub fdr: Option<f64>,
    pub exact: Option<bool>,
    /// Ising nodes whose neighbourhood fell back to empty.
    #[serde(default)]
    pub flagged_nodes: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceRecord {
    pub setting: usize,
    pub replicate: usize,
    pub gamma: f64,
    pub ebic_choice: Option<SupportSet>,
    pub bayes_choice: Option<SupportSet>,
    pub agree: Option<bool>,
    pub gap_spread: Option<f64>,
    pub max_abs_gap: Option<f64>,
    pub candidates: usize,
    /// Largest `|Laplace − quadrature|` over candidates with `|J| ≤ 2`.
    pub quadrature_max_error: Option<f64>,
    pub quadrature_failures: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceRow {
    pub setting: usize,
    pub n: usize,
    pub p: usize,
    pub gamma: f64,
    pub agreement_rate: Option<f64>,
    pub median_gap_spread: Option<f64>,
    pub mean_max_abs_gap: Option<f64>,
    pub quadrature_max_error: Option<f64>,
    /// `10·√(log(np)/n)`.
    pub quadrature_tolerance: f64,
    pub replicates_ok: usize,
    pub replicates_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_seconds: f64,
    pub per_setting_seconds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema: String,
    pub kind: ExperimentKind,
    pub config: ExperimentConfig,
    pub settings: Vec<Setting>,
    pub methods: Vec<String>,
    pub rows: Vec<SummaryRow>,
    pub replicates: Vec<ReplicateRecord>,
    pub equivalence: Vec<EquivalenceRow>,
    pub equivalence_replicates: Vec<EquivalenceRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
}

impl ExperimentReport {
    pub fn empty(config: ExperimentConfig) -> Self {
        ExperimentReport {
            schema: REPORT_SCHEMA.into(),
            kind: config.kind,
            config,
            settings: Vec::new(),
            methods: Vec::new(),
            rows: Vec::new(),
            replicates: Vec::new(),
            equivalence: Vec::new(),
            equivalence_replicates: Vec::new(),
            timings: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Synthetic GLM data: i.i.d. standard normal covariates, the first `k`
/// coefficients equal to `±signal` with alternating signs, no intercept.
pub fn simulate_glm(
    n: usize,
    p: usize,
    k: usize,
    signal: f64,
    family: ExponentialFamily,
    seed: u64,
) -> Result<(Dataset, TrueModel)> {
    if k > p {
        return Err(Error::InvalidArgument(format!("true support size {k} exceeds p = {p}")));
    }
    let mut r = rng(seed);
    let x = DMatrix::from_fn(n, p, |_, _| r.sample::<f64, _>(StandardNormal));
    let coeffs: Vec<f64> = (0..k).map(|j| if j % 2 == 0 { signal } else { -signal }).collect();
    let y = DVector::from_fn(n, |i, _| {
        let eta: f64 = coeffs.iter().enumerate().map(|(j, c)| c * x[(i, j)]).sum();
        match family {
            ExponentialFamily::Logistic => f64::from(r.random::<f64>() < sigmoid(eta)),
            ExponentialFamily::Gaussian => eta + r.sample::<f64, _>(StandardNormal),
            ExponentialFamily::Poisson => {
                let mean = eta.exp().clamp(1e-12, 1e12);
                r.sample(Poisson::new(mean).expect("positive mean"))
            }
        }
    });
    let data = Dataset::new(x, y, family)?;
    Ok((data, TrueModel::new(SupportSet::from_indices(0..k), coeffs)?))
}

/// Selection rates against a truth; each is 0 when its denominator is empty.
pub fn selection_rates(selected: &SupportSet, truth: &SupportSet) -> (f64, f64) {
    let hits = selected.iter().filter(|&j| truth.contains(j)).count() as f64;
    let psr = if truth.is_empty() { 0.0 } else { hits / truth.len() as f64 };
    let fdr = if selected.is_empty() {
        0.0
    } else {
        (selected.len() as f64 - hits) / selected.len() as f64
    };
    (psr, fdr)
}

struct SelectContext<'a> {
    cfg: &'a ExperimentConfig,
    path: PathOptions,
    fit: FitOptions,
    seed: u64,
}

/// Candidate supports from the lasso path, and their refits.
fn candidates_and_fits(
    data: &Dataset,
    ctx: &SelectContext,
) -> Result<(Vec<SupportSet>, Vec<Result<FittedModel>>)> {
    let mut path_opts = ctx.path;
    let cap = path_opts.max_support.unwrap_or(ctx.cfg.q_cap).min(data.n()).min(data.p());
    path_opts.max_support = Some(cap);
    let path = lasso_path(data, &path_opts)?;
    let candidates = candidate_supports(&path.points, ctx.cfg.q_cap);
    let fits = refit_candidates(data, &candidates, &ctx.fit);
    Ok((candidates, fits))
}

fn apply_selector(
    sel: Selector,
    data: &Dataset,
    candidates: &[SupportSet],
    fits: &[Result<FittedModel>],
    ctx: &SelectContext,
) -> Result<SupportSet> {
    match sel {
        Selector::Ebic(_) | Selector::Bic => {
            let gamma = if let Selector::Ebic(g) = sel { g } else { 0.0 };
            let scores: Vec<_> = fits
                .iter()
                .filter_map(|f| f.as_ref().ok())
                .filter_map(|f| ebic_score(f, data.n(), data.p(), gamma).ok())
                .collect();
            select_best(&scores)
        }
        Selector::Cv => {
            let usable: Vec<SupportSet> = candidates
                .iter()
                .zip(fits)
                .filter(|(_, f)| f.is_ok())
                .map(|(c, _)| c.clone())
                .collect();
            Ok(cross_validate(data, &usable, ctx.cfg.cv_folds, derive_seed(ctx.seed, 1), &ctx.fit)?.support)
        }
        Selector::Stability => {
            let mut path_opts = ctx.path;
            let cap = ctx.cfg.q_cap.max(ctx.cfg.stability.expected_q).min(data.n()).min(data.p());
            path_opts.max_support = Some(path_opts.max_support.unwrap_or(cap));
            Ok(stability_selection(data, &ctx.cfg.stability, &path_opts, derive_seed(ctx.seed, 2))?.support)
        }
    }
}

fn settings_for(cfg: &ExperimentConfig, p_override: Option<usize>) -> Vec<Setting> {
    cfg.sample_sizes()
        .into_iter()
        .map(|n| Setting {
            n,
            p: p_override.unwrap_or_else(|| cfg.dimension_for(n)),
        })
        .collect()
}

fn replicate_seed(cfg: &ExperimentConfig, setting: usize, rep: usize) -> u64 {
    derive_seed(derive_seed(cfg.seed, setting as u64), rep as u64)
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Summary rows in `(setting, method)` order from per-replicate records.
pub fn summarize(settings: &[Setting], methods: &[String], records: &[ReplicateRecord]) -> Vec<SummaryRow> {
    let mut rows = Vec::with_capacity(settings.len() * methods.len());
    for (si, s) in settings.iter().enumerate() {
        for m in methods {
            let mut recs: Vec<&ReplicateRecord> =
                records.iter().filter(|r| r.setting == si && &r.method == m).collect();
            recs.sort_by_key(|r| r.replicate);
            let ok: Vec<&&ReplicateRecord> = recs.iter().filter(|r| r.error.is_none()).collect();
            let psr: Vec<f64> = ok.iter().filter_map(|r| r.psr).collect();
            let fdr: Vec<f64> = ok.iter().filter_map(|r| r.fdr).collect();
            let exact: Vec<f64> = ok.iter().filter_map(|r| r.exact).map(f64::from).collect();
            rows.push(SummaryRow {
                setting: si,
                n: s.n,
                p: s.p,
                method: m.clone(),
                psr_mean: mean(&psr),
                fdr_mean: mean(&fdr),
                exact_rate: mean(&exact),
                replicates_ok: ok.len(),
                replicates_failed: recs.len() - ok.len(),
            });
        }
    }
    rows
}

fn failed_record(setting: usize, replicate: usize, method: String, e: &Error) -> ReplicateRecord {
    ReplicateRecord {
        setting,
        replicate,
        method,
        support: None,
        edges: None,
        psr: None,
        fdr: None,
        exact: None,
        flagged_nodes: 0,
        error: Some(e.to_string()),
    }
}

fn timed<T>(record: bool, f: impl FnOnce() -> T) -> (T, f64) {
    let start = record.then(Instant::now);
    let out = f();
    (out, start.map_or(0.0, |s| s.elapsed().as_secs_f64()))
}

fn finish_timings(cfg: &ExperimentConfig, per_setting: Vec<f64>) -> Option<Timings> {
    cfg.record_timings.then(|| Timings {
        total_seconds: per_setting.iter().sum(),
        per_setting_seconds: per_setting,
    })
}

fn regression_replicate(
    cfg: &ExperimentConfig,
    setting: usize,
    s: Setting,
    base: Option<&Dataset>,
    rep: usize,
    selectors: &[Selector],
) -> Vec<ReplicateRecord> {
    let seed = replicate_seed(cfg, setting, rep);
    let run = || -> Result<(Dataset, SupportSet)> {
        match base {
            Some(base) => {
                let rows = if s.n >= base.n() {
                    (0..base.n()).collect()
                } else {
                    let mut r = rng(derive_seed(seed, 4));
                    let mut rows = rand::seq::index::sample(&mut r, base.n(), s.n).into_vec();
                    rows.sort_unstable();
                    rows
                };
                let sub = base.subset_rows(&rows);
                let data = make_permuted_design(&sub, cfg.p_or_blocks, derive_seed(seed, 3));
                Ok((data, SupportSet::from_indices(0..base.p())))
            }
            None => {
                let (data, truth) =
                    simulate_glm(s.n, s.p, cfg.true_support_size, cfg.signal, cfg.family, derive_seed(seed, 0))?;
                Ok((data, truth.support))
            }
        }
    };
    let ctx = SelectContext {
        cfg,
        path: PathOptions {
            with_intercept: cfg.with_intercept,
            ..cfg.path
        },
        fit: FitOptions {
            with_intercept: cfg.with_intercept,
            ..cfg.fit
        },
        seed,
    };
    let prepared = run().and_then(|(data, truth)| {
        let (cands, fits) = candidates_and_fits(&data, &ctx)?;
        Ok((data, truth, cands, fits))
    });
    let (data, truth, cands, fits) = match prepared {
        Ok(v) => v,
        Err(e) => {
            return selectors
                .iter()
                .map(|sel| failed_record(setting, rep, sel.label(), &e))
                .collect()
        }
    };
    selectors
        .iter()
        .map(|&sel| match apply_selector(sel, &data, &cands, &fits, &ctx) {
            Ok(chosen) => {
                let (psr, fdr) = selection_rates(&chosen, &truth);
                ReplicateRecord {
                    setting,
                    replicate: rep,
                    method: sel.label(),
                    exact: Some(chosen == truth),
                    support: Some(chosen),
                    edges: None,
                    psr: Some(psr),
                    fdr: Some(fdr),
                    flagged_nodes: 0,
                    error: None,
                }
            }
            Err(e) => failed_record(setting, rep, sel.label(), &e),
        })
        .collect()
}

/// Sparse regression recovery. With `config.data` set, each replicate
/// subsamples `n` rows, appends `p_or_blocks` row-permuted copies of the
/// covariates, and counts the original covariates as the true ones;
/// otherwise data are simulated with [`simulate_glm`].
pub fn run_regression_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let base = match &cfg.data {
        Some(path) => {
            let resp = cfg.response.as_deref().expect("validated");
            Some(load_csv(path, resp, cfg.family)?.dataset)
        }
        None => None,
    };
    let settings = match &base {
        Some(b) => settings_for(cfg, Some(b.p() * (1 + cfg.p_or_blocks)))
            .into_iter()
            .map(|s| Setting { n: s.n.min(b.n()), ..s })
            .collect(),
        None => settings_for(cfg, None),
    };
    let selectors = cfg.selectors();
    let methods: Vec<String> = selectors.iter().map(Selector::label).collect();
    let mut records = Vec::new();
    let mut times = Vec::new();
    for (si, &s) in settings.iter().enumerate() {
        let (recs, t) = timed(cfg.record_timings, || {
            (0..cfg.replicates)
                .into_par_iter()
                .map(|rep| regression_replicate(cfg, si, s, base.as_ref(), rep, &selectors))
                .collect::<Vec<_>>()
        });
        records.extend(recs.into_iter().flatten());
        times.push(t);
    }
    let mut report = ExperimentReport::empty(cfg.clone());
    report.rows = summarize(&settings, &methods, &records);
    report.settings = settings;
    report.methods = methods;
    report.replicates = records;
    report.timings = finish_timings(cfg, times);
    Ok(report)
}

fn ising_method_labels(selectors: &[Selector]) -> Vec<String> {
    selectors
        .iter()
        .flat_map(|s| [CombineRule::And, CombineRule::Or].map(|r| format!("{}/{}", s.label(), r.name())))
        .collect()
}

/// Per-node neighbourhoods for every selector: `result[selector][node]`,
/// plus the number of flagged nodes per selector.
fn ising_neighborhoods(
    samples: &BinarySamples,
    cfg: &ExperimentConfig,
    selectors: &[Selector],
    seed: u64,
) -> (Vec<Vec<SupportSet>>, Vec<usize>) {
    let nb_opts = NeighborhoodOptions {
        path: cfg.path,
        fit: cfg.fit,
    };
    let per_node: Vec<Vec<Option<SupportSet>>> = (0..samples.p())
        .into_par_iter()
        .map(|node| {
            let ctx = SelectContext {
                cfg,
                path: PathOptions {
                    with_intercept: true,
                    ..cfg.path
                },
                fit: FitOptions {
                    with_intercept: true,
                    ..cfg.fit
                },
                seed: derive_seed(seed, 100 + node as u64),
            };
            let prepared = samples.node_regression(node).and_then(|data| {
                let cands = node_candidates(&data, cfg.q_cap, &nb_opts)?;
                let fits = refit_candidates(&data, &cands, &ctx.fit);
                Ok((data, cands, fits))
            });
            match prepared {
                Ok((data, cands, fits)) => selectors
                    .iter()
                    .map(|&sel| {
                        apply_selector(sel, &data, &cands, &fits, &ctx)
                            .ok()
                            .map(|local| to_node_labels(&local, node))
                    })
                    .collect(),
                Err(_) => vec![None; selectors.len()],
            }
        })
        .collect();
    let mut out = Vec::with_capacity(selectors.len());
    let mut flagged = Vec::with_capacity(selectors.len());
    for k in 0..selectors.len() {
        let col: Vec<Option<SupportSet>> = per_node.iter().map(|v| v[k].clone()).collect();
        flagged.push(col.iter().filter(|s| s.is_none()).count());
        out.push(col.into_iter().map(Option::unwrap_or_default).collect());
    }
    (out, flagged)
}

/// Graph recovery from Gibbs samples of `params`, scored against `truth`.
pub fn run_ising_experiment(
    cfg: &ExperimentConfig,
    truth: &GraphEstimate,
    params: &IsingParameters,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    if truth.p != params.p() {
        return Err(Error::DimensionMismatch {
            expected: params.p(),
            got: truth.p,
        });
    }
    let settings = settings_for(cfg, Some(params.p()));
    let selectors = cfg.selectors();
    let methods = ising_method_labels(&selectors);
    let mut records = Vec::new();
    let mut times = Vec::new();
    for (si, &s) in settings.iter().enumerate() {
        let (recs, t) = timed(cfg.record_timings, || {
            (0..cfg.replicates)
                .into_par_iter()
                .map(|rep| {
                    let seed = replicate_seed(cfg, si, rep);
                    let samples = match gibbs_sample(params, s.n, cfg.burn_in, cfg.thin, derive_seed(seed, 0)) {
                        Ok(v) => v,
                        Err(e) => return methods.iter().map(|m| failed_record(si, rep, m.clone(), &e)).collect(),
                    };
                    let (nbs, flagged) = ising_neighborhoods(&samples, cfg, &selectors, seed);
                    let mut out = Vec::new();
                    for (k, sel) in selectors.iter().enumerate() {
                        for rule in [CombineRule::And, CombineRule::Or] {
                            let label = format!("{}/{}", sel.label(), rule.name());
                            let rec = combine_graph(&nbs[k], rule).and_then(|g| {
                                let m = graph_metrics(&g, truth)?;
                                Ok(ReplicateRecord {
                                    setting: si,
                                    replicate: rep,
                                    method: label.clone(),
                                    support: None,
                                    exact: Some(g.edges == truth.edges),
                                    edges: Some(g.edges.iter().map(|&(a, b)| [a, b]).collect()),
                                    psr: Some(m.psr),
                                    fdr: Some(m.fdr),
                                    flagged_nodes: flagged[k],
                                    error: None,
                                })
                            });
                            out.push(rec.unwrap_or_else(|e| failed_record(si, rep, label, &e)));
                        }
                    }
                    out
                })
                .collect::<Vec<Vec<_>>>()
        });
        records.extend(recs.into_iter().flatten());
        times.push(t);
    }
    let mut report = ExperimentReport::empty(cfg.clone());
    report.rows = summarize(&settings, &methods, &records);
    report.settings = settings;
    report.methods = methods;
    report.replicates = records;
    report.timings = finish_timings(cfg, times);
    Ok(report)
}

/// The configured lattice: side `p_or_blocks`, uniform edge weight
/// `edge_strength`, unary potential `unary`.
pub fn ising_truth_from_config(cfg: &ExperimentConfig) -> Result<(GraphEstimate, IsingParameters)> {
    let graph = GraphEstimate::grid(cfg.p_or_blocks);
    let params = IsingParameters::from_graph(&graph, cfg.edge_strength, cfg.unary)?;
    Ok((graph, params))
}

fn equivalence_replicate(
    cfg: &ExperimentConfig,
    setting: usize,
    s: Setting,
    rep: usize,
    prior: &CoefficientPrior,
) -> Vec<EquivalenceRecord> {
    let seed = replicate_seed(cfg, setting, rep);
    let ctx = SelectContext {
        cfg,
        path: PathOptions {
            with_intercept: cfg.with_intercept,
            ..cfg.path
        },
        fit: FitOptions {
            with_intercept: cfg.with_intercept,
            ..cfg.fit
        },
        seed,
    };
    let prepared = simulate_glm(s.n, s.p, cfg.true_support_size, cfg.signal, cfg.family, derive_seed(seed, 0))
        .and_then(|(data, _)| {
            let (_, fits) = candidates_and_fits(&data, &ctx)?;
            let ok: Vec<FittedModel> = fits.into_iter().filter_map(|f| f.ok()).filter(|f| f.converged).collect();
            Ok((data, ok))
        });
    let blank = |gamma: f64| EquivalenceRecord {
        setting,
        replicate: rep,
        gamma,
        ebic_choice: None,
        bayes_choice: None,
        agree: None,
        gap_spread: None,
        max_abs_gap: None,
        candidates: 0,
        quadrature_max_error: None,
        quadrature_failures: 0,
        error: None,
    };
    let (data, fits) = match prepared {
        Ok(v) => v,
        Err(e) => {
            return cfg
                .gamma_list
                .iter()
                .map(|&g| EquivalenceRecord {
                    error: Some(e.to_string()),
                    ..blank(g)
                })
                .collect()
        }
    };
    let mut quad_err: Option<f64> = None;
    let mut quad_fail = 0;
    for f in fits.iter().filter(|f| f.support.len() <= 2) {
        let lap = laplace_log_marginal(f, prior, 0.0);
        let quad = quadrature_log_marginal(&data, f, prior, 0.0, &QuadratureOptions::default());
        match (lap, quad) {
            (Ok(l), Ok(q)) => {
                let e = (l.log_marginal_laplace - q.log_marginal).abs();
                quad_err = Some(quad_err.map_or(e, |m: f64| m.max(e)));
            }
            _ => quad_fail += 1,
        }
    }
    cfg.gamma_list
        .iter()
        .map(|&g| match equivalence_report(&fits, prior, g, cfg.q_cap, s.n, s.p) {
            Ok(r) => EquivalenceRecord {
                ebic_choice: Some(r.ebic_choice),
                bayes_choice: Some(r.bayes_choice),
                agree: Some(r.agree),
                gap_spread: Some(r.gap_spread),
                max_abs_gap: Some(r.max_abs_gap),
                candidates: r.entries.len(),
                quadrature_max_error: quad_err,
                quadrature_failures: quad_fail,
                ..blank(g)
            },
            Err(e) => EquivalenceRecord {
                error: Some(e.to_string()),
                quadrature_max_error: quad_err,
                quadrature_failures: quad_fail,
                ..blank(g)
            },
        })
        .collect()
}

/// Agreement between the EBIC minimizer and the Laplace-Bayes maximizer on
/// simulated data, with a Gaussian coefficient prior of scale `prior_sigma`.
pub fn run_equivalence_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let prior = CoefficientPrior::isotropic_gaussian(cfg.prior_sigma)?;
    let settings = settings_for(cfg, None);
    let mut records = Vec::new();
    let mut times = Vec::new();
    for (si, &s) in settings.iter().enumerate() {
        let (recs, t) = timed(cfg.record_timings, || {
            (0..cfg.replicates)
                .into_par_iter()
                .map(|rep| equivalence_replicate(cfg, si, s, rep, &prior))
                .collect::<Vec<_>>()
        });
        records.extend(recs.into_iter().flatten());
        times.push(t);
    }
    let mut rows = Vec::new();
    for (si, s) in settings.iter().enumerate() {
        for &g in &cfg.gamma_list {
            let recs: Vec<&EquivalenceRecord> =
                records.iter().filter(|r| r.setting == si && r.gamma == g).collect();
            let ok: Vec<&&EquivalenceRecord> = recs.iter().filter(|r| r.error.is_none()).collect();
            let agree: Vec<f64> = ok.iter().filter_map(|r| r.agree).map(f64::from).collect();
            let spread: Vec<f64> = ok.iter().filter_map(|r| r.gap_spread).collect();
            let gap: Vec<f64> = ok.iter().filter_map(|r| r.max_abs_gap).collect();
            let quad = recs
                .iter()
                .filter_map(|r| r.quadrature_max_error)
                .fold(None, |m: Option<f64>, e| Some(m.map_or(e, |m| m.max(e))));
            rows.push(EquivalenceRow {
                setting: si,
                n: s.n,
                p: s.p,
                gamma: g,
                agreement_rate: mean(&agree),
                median_gap_spread: median(&spread),
                mean_max_abs_gap: mean(&gap),
                quadrature_max_error: quad,
                quadrature_tolerance: 10.0 * ((s.n as f64 * s.p as f64).ln() / s.n as f64).sqrt(),
                replicates_ok: ok.len(),
                replicates_failed: recs.len() - ok.len(),
            });
        }
    }
    let mut report = ExperimentReport::empty(cfg.clone());
    report.settings = settings;
    report.methods = cfg.gamma_list.iter().map(|&g| Selector::Ebic(g).label()).collect();
    report.equivalence = rows;
    report.equivalence_replicates = records;
    report.timings = finish_timings(cfg, times);
    Ok(report)
}

/// Dispatches on `config.kind`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    match cfg.kind {
        ExperimentKind::RegressionPermuted | ExperimentKind::ConsistencySweep => run_regression_experiment(cfg),
        ExperimentKind::IsingRecovery => {
            cfg.validate()?;
            let (truth, params) = ising_truth_from_config(cfg)?;
            run_ising_experiment(cfg, &truth, &params)
        }
        ExperimentKind::Equivalence => run_equivalence_experiment(cfg),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    CsvTables,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| Error::InvalidData(e.to_string()))
}

/// One line per `(setting, method)`.
pub fn summary_csv(report: &ExperimentReport) -> Result<String> {
    let bytes = csv_bytes(
        &["setting", "n", "p", "method", "psr", "fdr", "exact_rate", "replicates_ok", "replicates_failed"],
        report.rows.iter().map(|r| {
            vec![
                r.setting.to_string(),
                r.n.to_string(),
                r.p.to_string(),
                r.method.clone(),
                opt(r.psr_mean),
                opt(r.fdr_mean),
                opt(r.exact_rate),
                r.replicates_ok.to_string(),
                r.replicates_failed.to_string(),
            ]
        }),
    )?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn replicates_csv(report: &ExperimentReport) -> Result<Vec<u8>> {
    csv_bytes(
        &["setting", "replicate", "method", "selected", "psr", "fdr", "exact", "flagged_nodes", "error"],
        report.replicates.iter().map(|r| {
            let selected = match (&r.support, &r.edges) {
                (Some(s), _) => s.to_string(),
                (None, Some(e)) => e.iter().map(|[a, b]| format!("{a}-{b}")).collect::<Vec<_>>().join(" "),
                _ => String::new(),
            };
            vec![
                r.setting.to_string(),
                r.replicate.to_string(),
                r.method.clone(),
                selected,
                opt(r.psr),
                opt(r.fdr),
                r.exact.map(|b| b.to_string()).unwrap_or_default(),
                r.flagged_nodes.to_string(),
                r.error.clone().unwrap_or_default(),
            ]
        }),
    )
}

fn equivalence_csv(report: &ExperimentReport) -> Result<Vec<u8>> {
    csv_bytes(
        &[
            "setting",
            "n",
            "p",
            "gamma",
            "agreement_rate",
            "median_gap_spread",
            "mean_max_abs_gap",
            "quadrature_max_error",
            "quadrature_tolerance",
            "replicates_ok",
            "replicates_failed",
        ],
        report.equivalence.iter().map(|r| {
            vec![
                r.setting.to_string(),
                r.n.to_string(),
                r.p.to_string(),
                r.gamma.to_string(),
                opt(r.agreement_rate),
                opt(r.median_gap_spread),
                opt(r.mean_max_abs_gap),
                opt(r.quadrature_max_error),
                r.quadrature_tolerance.to_string(),
                r.replicates_ok.to_string(),
                r.replicates_failed.to_string(),
            ]
        }),
    )
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the report. JSON goes to `out`; CSV tables go into the directory
/// `out` as `summary.csv`, `replicates.csv` and, when present,
/// `equivalence.csv`. Returns the files written.
pub fn emit_report(report: &ExperimentReport, format: ReportFormat, out: &Path) -> Result<Vec<PathBuf>> {
    match format {
        ReportFormat::Json => {
            write_file(out, report.to_json()?.as_bytes())?;
            Ok(vec![out.to_path_buf()])
        }
        ReportFormat::CsvTables => {
            let mut files = vec![
                (out.join("summary.csv"), summary_csv(report)?.into_bytes()),
                (out.join("replicates.csv"), replicates_csv(report)?),
            ];
            if !report.equivalence.is_empty() {
                files.push((out.join("equivalence.csv"), equivalence_csv(report)?));
            }
            for (path, bytes) in &files {
                write_file(path, bytes)?;
            }
            Ok(files.into_iter().map(|(p, _)| p).collect())
        }
    }
}
