use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use ebic::bayes::{equivalence_report, laplace_log_marginal, quadrature_log_marginal, QuadratureOptions};
use ebic::criteria::ebic_score;
use ebic::data::{load_samples_csv, write_samples_csv};
use ebic::experiment::{emit_report, run_experiment, summary_csv, ExperimentConfig, ReportFormat};
use ebic::ising::{combine_graph, gibbs_sample, neighborhood_select, GraphEstimate, IsingParameters, NeighborhoodOptions};
use ebic::path::{candidate_supports, lasso_path, PathOptions};
use ebic::{
    fit_mle, load_csv, refit_candidates, select_best, CoefficientPrior, CombineRule, Dataset, Error,
    ExponentialFamily, FitOptions, FittedModel, SupportSet,
};

#[derive(Parser)]
#[command(name = "ebic", version, about = "Extended-BIC model selection for sparse GLMs and Ising graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Name of the response column.
    #[arg(long, default_value = "y")]
    response: String,
    /// logistic, poisson or gaussian.
    #[arg(long, default_value = "logistic")]
    family: ExponentialFamily,
    /// Fit an unpenalized intercept.
    #[arg(long)]
    intercept: bool,
}

#[derive(Args)]
struct OutArgs {
    /// Output file (or directory for `experiment --format csv`); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Rule {
    And,
    Or,
}

#[derive(Subcommand)]
enum Command {
    /// Maximum-likelihood fit on one support.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated column indices; every covariate when omitted.
        #[arg(long)]
        support: Option<String>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Lasso regularization path.
    Path {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 100)]
        n_rho: usize,
        /// Stop the path once the support exceeds this size.
        #[arg(long)]
        q_cap: Option<usize>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// EBIC selection over the lasso-path candidates.
    Select {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long = "gamma", default_values_t = [0.5])]
        gamma: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        q_cap: usize,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Laplace-Bayes evidence of the candidates next to their EBIC.
    Bayes {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long = "gamma", default_values_t = [0.5])]
        gamma: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        q_cap: usize,
        #[arg(long, default_value_t = 5.0)]
        prior_sigma: f64,
        /// Also integrate candidates with at most three parameters by quadrature.
        #[arg(long)]
        quadrature: bool,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Gibbs samples from a lattice Ising model, written as CSV.
    IsingSample {
        /// Experiment config supplying n, p_or_blocks (grid side), edge_strength,
        /// unary, burn_in, thin and seed.
        #[arg(long)]
        config: Option<PathBuf>,
        /// JSON file with `zeta` and `theta`; replaces the lattice.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        grid_side: Option<usize>,
        #[arg(long)]
        edge_strength: Option<f64>,
        #[arg(long)]
        unary: Option<f64>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        burn_in: Option<usize>,
        #[arg(long)]
        thin: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Graph estimate from 0/1 samples by neighbourhood selection.
    IsingSelect {
        /// CSV of 0/1 observations, one column per node.
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "gamma", default_values_t = [0.5])]
        gamma: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        q_cap: usize,
        #[arg(long, value_enum, default_value_t = Rule::And)]
        rule: Rule,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a configured experiment and write its report.
    Experiment {
        /// TOML or JSON experiment configuration.
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: OutArgs,
    },
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

fn write_text(out: Option<&Path>, text: &str) -> CliResult {
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
            }
            fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })?;
        }
        None => to_stdout(&format!("{text}\n"))?,
    }
    Ok(())
}

/// A closed pipe (`ebic ... | head`) is not an error.
fn to_stdout(text: &str) -> CliResult {
    match io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => {
            Err(Error::Io { path: "<stdout>".into(), source: e }.into())
        }
        _ => Ok(()),
    }
}

fn emit_json(out: Option<&Path>, v: &Value) -> CliResult {
    write_text(out, &serde_json::to_string_pretty(v).map_err(Error::from)?)
}

fn load(args: &DataArgs) -> CliResult<(Dataset, Vec<String>, usize)> {
    let d = load_csv(&args.data, &args.response, args.family)?;
    if d.dropped > 0 {
        eprintln!("dropped {} incomplete rows", d.dropped);
    }
    Ok((d.dataset, d.columns, d.dropped))
}

fn fit_opts(args: &DataArgs) -> FitOptions {
    FitOptions {
        with_intercept: args.intercept,
        ..FitOptions::default()
    }
}

fn parse_support(s: &str, p: usize) -> CliResult<SupportSet> {
    let mut idx = Vec::new();
    for part in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        match part.parse::<usize>() {
            Ok(j) if j < p => idx.push(j),
            _ => return usage(format!("bad support index `{part}` (p = {p})")),
        }
    }
    Ok(SupportSet::from_indices(idx))
}

fn fit_json(fit: &FittedModel, columns: &[String]) -> Value {
    json!({
        "support": fit.support.indices(),
        "names": fit.support.iter().map(|j| columns[j].clone()).collect::<Vec<_>>(),
        "coefficients": fit.coeffs.iter().collect::<Vec<_>>(),
        "intercept": fit.intercept,
        "log_likelihood": fit.log_lik,
        "converged": fit.converged,
        "iterations": fit.iterations,
    })
}

fn check_gammas(g: &[f64]) -> CliResult {
    if g.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return usage("gamma values must be finite and non-negative");
    }
    Ok(())
}

/// Candidate supports from the lasso path and their refits.
fn candidate_fits(data: &Dataset, args: &DataArgs, q_cap: usize) -> CliResult<Vec<FittedModel>> {
    let popts = PathOptions {
        with_intercept: args.intercept,
        max_support: Some(q_cap.min(data.n()).min(data.p())),
        ..PathOptions::default()
    };
    let path = lasso_path(data, &popts)?;
    let cands = candidate_supports(&path.points, q_cap);
    let fits: Vec<FittedModel> = refit_candidates(data, &cands, &fit_opts(args))
        .into_iter()
        .filter_map(|f| f.ok())
        .filter(|f| f.converged)
        .collect();
    if fits.is_empty() {
        return Err(Error::EmptyCandidates.into());
    }
    Ok(fits)
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Fit { data, support, out } => {
            let (ds, cols, _) = load(&data)?;
            let sup = match support {
                Some(s) => parse_support(&s, ds.p())?,
                None => SupportSet::from_indices(0..ds.p()),
            };
            let fit = fit_mle(&ds, &sup, &fit_opts(&data))?;
            emit_json(out.out.as_deref(), &fit_json(&fit, &cols))
        }
        Command::Path { data, n_rho, q_cap, out } => {
            let (ds, _, _) = load(&data)?;
            let popts = PathOptions {
                n_rho,
                with_intercept: data.intercept,
                max_support: q_cap,
                ..PathOptions::default()
            };
            let path = lasso_path(&ds, &popts)?;
            if out.format == Format::Csv {
                let mut text = String::from("rho,support,intercept,kkt_residual\n");
                for pt in &path.points {
                    text.push_str(&format!(
                        "{},\"{}\",{},{}\n",
                        pt.rho,
                        pt.support,
                        pt.intercept.map(|v| v.to_string()).unwrap_or_default(),
                        pt.kkt_residual
                    ));
                }
                return write_text(out.out.as_deref(), text.trim_end());
            }
            let points: Vec<Value> = path
                .points
                .iter()
                .map(|pt| {
                    json!({
                        "rho": pt.rho,
                        "support": pt.support.indices(),
                        "coefficients": pt.support.iter().map(|j| pt.coeffs[j]).collect::<Vec<_>>(),
                        "intercept": pt.intercept,
                        "kkt_residual": pt.kkt_residual,
                    })
                })
                .collect();
            emit_json(out.out.as_deref(), &json!({ "points": points, "dropped_rho": path.dropped }))
        }
        Command::Select { data, gamma, q_cap, out } => {
            check_gammas(&gamma)?;
            let (ds, cols, _) = load(&data)?;
            let fits = candidate_fits(&ds, &data, q_cap)?;
            let mut results = Vec::new();
            for &g in &gamma {
                let scores = fits
                    .iter()
                    .map(|f| ebic_score(f, ds.n(), ds.p(), g))
                    .collect::<Result<Vec<_>, _>>()?;
                let best = select_best(&scores)?;
                let chosen = fits.iter().find(|f| f.support == best).expect("selected from fits");
                results.push((g, best, scores, chosen));
            }
            if out.format == Format::Csv {
                let mut text = String::from("gamma,support,ebic,log_likelihood\n");
                for (g, best, scores, _) in &results {
                    let s = scores.iter().find(|s| &s.support == best).expect("scored");
                    text.push_str(&format!("{g},\"{best}\",{},{}\n", s.ebic, s.log_lik));
                }
                return write_text(out.out.as_deref(), text.trim_end());
            }
            let body: Vec<Value> = results
                .iter()
                .map(|(g, _, scores, chosen)| {
                    json!({
                        "gamma": g,
                        "selected": fit_json(chosen, &cols),
                        "candidates": scores.iter().map(|s| json!({
                            "support": s.support.indices(),
                            "ebic": s.ebic,
                            "log_likelihood": s.log_lik,
                        })).collect::<Vec<_>>(),
                    })
                })
                .collect();
            emit_json(out.out.as_deref(), &json!({ "n": ds.n(), "p": ds.p(), "results": body }))
        }
        Command::Bayes { data, gamma, q_cap, prior_sigma, quadrature, out } => {
            check_gammas(&gamma)?;
            let (ds, _, _) = load(&data)?;
            let prior = CoefficientPrior::isotropic_gaussian(prior_sigma)?;
            let fits = candidate_fits(&ds, &data, q_cap)?;
            let mut quad = Vec::new();
            if quadrature {
                for f in fits.iter().filter(|f| f.dim() <= ebic::bayes::MAX_QUADRATURE_DIM) {
                    let lap = laplace_log_marginal(f, &prior, 0.0)?;
                    let q = quadrature_log_marginal(&ds, f, &prior, 0.0, &QuadratureOptions::default())?;
                    quad.push(json!({
                        "support": f.support.indices(),
                        "laplace": lap.log_marginal_laplace,
                        "quadrature": q.log_marginal,
                        "nodes": q.nodes,
                    }));
                }
            }
            let mut body = Vec::new();
            for &g in &gamma {
                let r = equivalence_report(&fits, &prior, g, q_cap, ds.n(), ds.p())?;
                body.push(json!({
                    "gamma": g,
                    "ebic_choice": r.ebic_choice.indices(),
                    "bayes_choice": r.bayes_choice.indices(),
                    "agree": r.agree,
                    "gap_spread": r.gap_spread,
                    "candidates": r.entries.iter().map(|e| json!({
                        "support": e.support.indices(),
                        "ebic": e.ebic,
                        "log_bayes": e.log_bayes,
                        "gap": e.gap,
                    })).collect::<Vec<_>>(),
                }));
            }
            emit_json(out.out.as_deref(), &json!({ "results": body, "quadrature": quad }))
        }
        Command::IsingSample { config, params, grid_side, edge_strength, unary, n, burn_in, thin, seed, out } => {
            let cfg = match config {
                Some(path) => ExperimentConfig::from_file(&path)?,
                None => ExperimentConfig {
                    n: 1000,
                    p_or_blocks: 4,
                    ..ExperimentConfig::default()
                },
            };
            let model = match params {
                Some(path) => {
                    let text = fs::read_to_string(&path).map_err(|e| Error::Io { path, source: e })?;
                    serde_json::from_str::<IsingParameters>(&text).map_err(Error::from)?
                }
                None => {
                    let side = grid_side.unwrap_or(cfg.p_or_blocks);
                    if side < 1 {
                        return usage("grid side must be positive");
                    }
                    let g = GraphEstimate::grid(side);
                    IsingParameters::from_graph(&g, edge_strength.unwrap_or(cfg.edge_strength), unary.unwrap_or(cfg.unary))?
                }
            };
            let samples = gibbs_sample(
                &model,
                n.unwrap_or(cfg.n),
                burn_in.unwrap_or(cfg.burn_in),
                thin.unwrap_or(cfg.thin),
                seed.unwrap_or(cfg.seed),
            )?;
            let mut buf = Vec::new();
            write_samples_csv(&samples, &mut buf)?;
            write_text(out.as_deref(), String::from_utf8_lossy(&buf).trim_end())
        }
        Command::IsingSelect { data, gamma, q_cap, rule, out } => {
            check_gammas(&gamma)?;
            let loaded = load_samples_csv(&data)?;
            let rule = match rule {
                Rule::And => CombineRule::And,
                Rule::Or => CombineRule::Or,
            };
            let opts = NeighborhoodOptions::default();
            let mut body = Vec::new();
            for &g in &gamma {
                let sel = (0..loaded.samples.p())
                    .map(|j| neighborhood_select(&loaded.samples, j, g, q_cap, &opts))
                    .collect::<Result<Vec<_>, _>>()?;
                let nbs: Vec<SupportSet> = sel.iter().map(|s| s.neighbors.clone()).collect();
                let graph = combine_graph(&nbs, rule)?;
                body.push(json!({
                    "gamma": g,
                    "rule": rule.name(),
                    "p": graph.p,
                    "edges": graph.edges.iter().map(|&(a, b)| [a, b]).collect::<Vec<_>>(),
                    "flagged_nodes": sel.iter().filter(|s| s.flagged).map(|s| s.node).collect::<Vec<_>>(),
                }));
            }
            let v = if body.len() == 1 { body.pop().expect("one entry") } else { Value::Array(body) };
            emit_json(out.as_deref(), &v)
        }
        Command::Experiment { config, seed, out } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let report = run_experiment(&cfg)?;
            match (out.format, out.out) {
                (Format::Json, Some(path)) => {
                    emit_report(&report, ReportFormat::Json, &path)?;
                }
                (Format::Csv, Some(dir)) => {
                    emit_report(&report, ReportFormat::CsvTables, &dir)?;
                }
                (Format::Json, None) => to_stdout(&format!("{}\n", report.to_json()?))?,
                (Format::Csv, None) => to_stdout(&summary_csv(&report)?)?,
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
