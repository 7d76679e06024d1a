//! Extended-BIC model selection for sparse generalized linear models,
//! Laplace-approximated Bayesian model evidence, and EBIC-tuned neighborhood
//! selection for Ising graphs.

pub mod bayes;
pub mod criteria;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod family;
pub mod fit;
pub mod ising;
pub mod path;
pub mod seed;

pub use error::{Error, Result};
pub use family::{Dataset, ExponentialFamily, SupportSet};
pub use fit::{fit_mle, refit_candidates, FitOptions, FittedModel};
pub use path::{candidate_supports, lasso_path, LassoPath, PathOptions, PathPoint};
pub use criteria::{ebic_score, log_model_prior, select_best, ModelScore, PriorSpec};
pub use bayes::{laplace_log_marginal, quadrature_log_marginal, BayesScore, CoefficientPrior};
pub use ising::{BinarySamples, CombineRule, GraphEstimate, GraphMetrics, IsingParameters};
pub use diagnostics::{TrueModel, WhpReport};
pub use data::{load_csv, load_samples_csv, make_permuted_design};
pub use experiment::{emit_report, run_experiment, ExperimentConfig, ExperimentKind, ExperimentReport, ReportFormat};
